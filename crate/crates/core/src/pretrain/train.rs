use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use triad_tensor::{Real, Tape, Tensor, Var};

use super::checkpoint::{check_compatible, model_hash, save_checkpoint, Checkpoint, RngState};
use super::loss::{l1_loss, total_loss};
use super::optim::Optimizer;
use super::{PretrainConfig, PretrainData, PretrainError, Result};
use crate::model::{build_encoder, build_recon_decoder, encoder_forward, recon_decoder_forward, Bound, ParamSet};

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l1: f64,
    pub log_ratio: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

/// Everything a resumed run needs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamSet,
    pub optimizer: Optimizer,
    /// Completed steps.
    pub step: u64,
    /// Crop-offset stream.
    pub rng: ChaCha8Rng,
    pub config_hash: String,
}

fn crop_stream(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x6372_6f70_7374_7265);
    r.set_stream(1);
    r
}

impl TrainState {
    pub fn new(cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = build_encoder(&cfg.model, cfg.seed)?;
        params.extend(build_recon_decoder(&cfg.model, cfg.seed)?);
        Ok(TrainState {
            params,
            optimizer: Optimizer::new(cfg.optimizer),
            step: 0,
            rng: crop_stream(cfg.seed),
            config_hash: model_hash(&cfg.model),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            config_hash: self.config_hash.clone(),
            rng: RngState { seed: self.rng.get_seed(), stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() },
        }
    }

    /// Restores a checkpoint written for the same model, checking every tensor shape.
    pub fn from_checkpoint(cfg: &PretrainConfig, c: Checkpoint) -> Result<Self> {
        let fresh = TrainState::new(cfg)?;
        check_compatible(&c, &fresh.config_hash)?;
        let names = |p: &ParamSet| p.iter().map(|(n, t)| (n.to_owned(), t.shape().to_vec())).collect::<Vec<_>>();
        if names(&fresh.params) != names(&c.params) {
            return Err(PretrainError::Compatibility("parameter names or shapes differ from the model".into()));
        }
        if c.optimizer.kind != cfg.optimizer {
            return Err(PretrainError::Compatibility("optimizer settings differ from the config".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(c.rng.seed);
        rng.set_stream(c.rng.stream);
        rng.set_word_pos(c.rng.word_pos);
        Ok(TrainState { params: c.params, optimizer: c.optimizer, step: c.step, rng, config_hash: c.config_hash })
    }
}

/// Global average pool of a `[B, C, d, h, w]` map to `[B, C]`.
pub fn pooled_embedding<'t, T: Real>(x: &Var<'t, T>) -> Var<'t, T> {
    let s = x.shape().to_vec();
    x.reshape(&[s[0], s[1], s[2..].iter().product()]).mean_last()
}

/// Sample indices for one step: position `step * batch + slot` of an endless stream of
/// per-epoch shuffles, so the order depends on `(seed, step)` only.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut cache: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|slot| {
            let k = step * batch as u64 + slot;
            let epoch = k / n as u64;
            if cache.as_ref().is_none_or(|c| c.0 != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(epoch.wrapping_add(2));
                perm.shuffle(&mut rng);
                cache = Some((epoch, perm));
            }
            cache.as_ref().unwrap().1[(k % n as u64) as usize]
        })
        .collect()
}

/// Cubic crop of side `roi` at `offset`, zero-padded where the volume is smaller.
pub fn crop_array(img: &Array3<f32>, offset: [usize; 3], roi: usize) -> Array3<f32> {
    let sh = img.shape();
    let mut out = Array3::zeros([roi; 3]);
    let ext: [usize; 3] = std::array::from_fn(|k| roi.min(sh[k].saturating_sub(offset[k])));
    out.slice_mut(s![..ext[0], ..ext[1], ..ext[2]]).assign(&img.slice(s![
        offset[0]..offset[0] + ext[0],
        offset[1]..offset[1] + ext[1],
        offset[2]..offset[2] + ext[2]
    ]));
    out
}

fn sample_crop(img: &Array3<f32>, roi: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let sh = img.shape();
    let offset: [usize; 3] = std::array::from_fn(|k| if sh[k] > roi { rng.random_range(0..=sh[k] - roi) } else { 0 });
    crop_array(img, offset, roi)
}

fn stack(crops: &[Array3<f32>]) -> Tensor<f32> {
    let r = crops[0].shape().to_vec();
    let mut data = Vec::with_capacity(crops.len() * crops[0].len());
    for c in crops {
        data.extend(c.iter().copied());
    }
    Tensor::from_vec(&[crops.len(), 1, r[0], r[1], r[2]], data)
}

/// One optimizer update on a batch of crops and their text embeddings.
pub fn train_step(state: &mut TrainState, cfg: &PretrainConfig, crops: &[Array3<f32>], texts: &[Vec<f64>]) -> Result<StepMetrics> {
    if crops.is_empty() || crops.len() != texts.len() {
        return Err(PretrainError::Shape(format!("{} crops vs {} text embeddings", crops.len(), texts.len())));
    }
    if crops.iter().any(|c| c.shape() != [cfg.roi; 3]) {
        return Err(PretrainError::Shape(format!("every crop must be {}^3", cfg.roi)));
    }
    if texts.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PretrainError::NonFinite("text embeddings".into()));
    }
    let lr = cfg.lr_at(state.step)?;
    let next = state.step + 1;

    let tape = Tape::<f32>::new();
    let p: Bound<'_, f32> = state.params.bind(&tape, |_| true);
    let x = tape.constant(stack(crops));
    let pyr = encoder_forward(&cfg.model, &p, &x)?;
    let f = pooled_embedding(pyr.bottleneck());
    let recon = recon_decoder_forward(&p, pyr.bottleneck())?;
    if !f.value().all_finite() || !recon.value().all_finite() {
        let l1 = l1_loss(&recon, &x)?.value().item();
        return Err(PretrainError::Divergence {
            step: next,
            diagnostics: serde_json::json!({
                "what": "non-finite forward pass",
                "lr": lr,
                "l1": l1,
                "embedding_finite": f.value().all_finite(),
                "params_finite": state.params.all_finite(),
            })
            .to_string(),
        });
    }
    let (total, parts) = total_loss(&recon, &x, &f, texts, cfg.lambda)?;

    let diverged = |what: String| PretrainError::Divergence {
        step: next,
        diagnostics: serde_json::json!({
            "what": what,
            "lr": lr,
            "l1": parts.l1,
            "log_ratio": parts.log_ratio,
            "total": parts.total,
            "params_finite": state.params.all_finite(),
        })
        .to_string(),
    };
    if !parts.total.is_finite() {
        return Err(diverged("non-finite loss".into()));
    }
    let mut grads = tape.backward(&total);
    let mut by_name = BTreeMap::new();
    let mut bad = Vec::new();
    for (name, v) in p.iter() {
        if let Some(g) = grads.take(v) {
            if !g.all_finite() {
                bad.push(name.to_owned());
            }
            by_name.insert(name.to_owned(), g);
        }
    }
    if !bad.is_empty() {
        bad.truncate(8);
        return Err(diverged(format!("non-finite gradients in {bad:?}")));
    }
    drop(p);
    state.optimizer.step(&mut state.params, &by_name, lr);
    state.step = next;
    Ok(StepMetrics { step: next, l1: parts.l1, log_ratio: parts.log_ratio, total: parts.total, lr })
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("step_{step:08}.ckpt"))
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub checkpoints: Vec<PathBuf>,
    /// Metrics of the steps this call ran.
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: PathBuf,
}

/// Metrics lines up to and including `step`, so a resumed run never duplicates records.
fn kept_metrics(path: &Path, step: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut keep = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        let m: StepMetrics =
            serde_json::from_str(&line).map_err(|e| PretrainError::Data(format!("bad metrics line: {e}")))?;
        if m.step <= step {
            keep.push(line);
        }
    }
    Ok(keep)
}

/// Runs pre-training to `cfg.steps`, from scratch or from `resume`.
///
/// Checkpoints land every `checkpoint_every` steps and at the last step. On divergence the
/// loop stops, writes `diverged.json` and leaves earlier checkpoints in place.
pub fn pretrain_loop(cfg: &PretrainConfig, data: &PretrainData, out_dir: &Path, resume: Option<&Path>) -> Result<PretrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(PretrainError::Data("no pre-training samples".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut state = match resume {
        Some(path) => TrainState::from_checkpoint(cfg, super::load_checkpoint(path)?)?,
        None => TrainState::new(cfg)?,
    };
    if state.step > cfg.steps {
        return Err(PretrainError::Config(format!("checkpoint step {} is past steps {}", state.step, cfg.steps)));
    }

    let metrics_path = out_dir.join(METRICS_FILE);
    let kept = if resume.is_some() { kept_metrics(&metrics_path, state.step)? } else { Vec::new() };
    let mut log = fs::File::create(&metrics_path)?;
    for line in kept {
        writeln!(log, "{line}")?;
    }

    let mut report = PretrainReport { checkpoints: Vec::new(), metrics: Vec::new(), final_checkpoint: PathBuf::new() };
    while state.step < cfg.steps {
        let idx = batch_indices(cfg.seed, state.step, cfg.batch, data.len());
        let crops: Vec<Array3<f32>> = idx.iter().map(|&i| sample_crop(&data.samples[i].image, cfg.roi, &mut state.rng)).collect();
        let texts: Vec<Vec<f64>> = idx.iter().map(|&i| data.samples[i].text.clone()).collect();
        let m = match train_step(&mut state, cfg, &crops, &texts) {
            Ok(m) => m,
            Err(e) => {
                if let PretrainError::Divergence { step, diagnostics } = &e {
                    let dump = serde_json::json!({ "step": step, "diagnostics": diagnostics, "batch": idx });
                    fs::write(out_dir.join("diverged.json"), dump.to_string())?;
                }
                return Err(e);
            }
        };
        writeln!(log, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
        if m.step % 10 == 0 || m.step == cfg.steps {
            log::info!("pretrain step {}/{}: l1 {:.5} total {:.5} lr {:.3e}", m.step, cfg.steps, m.l1, m.total, m.lr);
        }
        report.metrics.push(m);
        if state.step % cfg.checkpoint_every == 0 || state.step == cfg.steps {
            let path = checkpoint_path(out_dir, state.step);
            save_checkpoint(&state.to_checkpoint(), &path)?;
            report.checkpoints.push(path);
        }
    }
    log.flush()?;
    report.final_checkpoint = checkpoint_path(out_dir, cfg.steps);
    if !report.final_checkpoint.exists() {
        save_checkpoint(&state.to_checkpoint(), &report.final_checkpoint)?;
    }
    Ok(report)
}
