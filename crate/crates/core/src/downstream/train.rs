use std::collections::BTreeMap;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use triad_tensor::{softmax_channels, Tape, Tensor, Var};

use super::losses::{ncc_loss, smoothness_loss, Similarity};
use super::metrics::{accuracy, confusion, dice_per_class, roc_auc, roc_curve, ConfusionMatrix};
use super::{init_encoder, ClsSample, DownstreamError, FinetuneConfig, RegPair, Result, SegSample, Splits, Task};
use crate::model::{
    build_cls_head, build_reg_head, build_seg_decoder, cls_head_forward, encoder_forward, reg_head_forward,
    seg_decoder_forward, warp, Bound, ParamSet, WarpMode, ENCODER_PREFIX,
};
use crate::pretrain::{lr_schedule, poly_schedule, Optimizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the first update of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<R> {
    /// Parameters of the best validation epoch.
    pub params: ParamSet,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Evaluated on the test split, or on validation when no test split is given.
    pub report: R,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    /// Mean over cases, classes `1..K`.
    pub per_class_dice: Vec<f64>,
    pub mean_fg_dice: f64,
    pub cases: usize,
    /// (case, class) pairs where the class was absent from both volumes and scored 1.0.
    pub absent_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsReport {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    /// Binary tasks with both classes present only.
    pub auc: Option<f64>,
    pub roc: Option<Vec<(f64, f64)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegReport {
    /// Mean foreground dice of the unregistered moving labels.
    pub baseline_dice: f64,
    /// Mean foreground dice of the warped moving labels.
    pub dice: f64,
    pub per_class_dice: Vec<f64>,
    pub pairs: usize,
    pub max_displacement: f64,
}

fn stack<'a>(imgs: impl IntoIterator<Item = &'a Array3<f32>>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut b = 0;
    for a in imgs {
        match &shape {
            None => shape = Some(a.shape().to_vec()),
            Some(s) if s != a.shape() => {
                return Err(DownstreamError::Shape(format!("volumes in a batch differ: {s:?} vs {:?}", a.shape())))
            }
            _ => {}
        }
        data.extend(a.iter().copied());
        b += 1;
    }
    let s = shape.ok_or_else(|| DownstreamError::Input("empty batch".into()))?;
    Ok(Tensor::from_vec(&[b, 1, s[0], s[1], s[2]], data))
}

/// Two-channel `[B, 2, ...]` input from (moving, fixed) pairs.
fn stack_pairs(pairs: &[&RegPair]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let m = stack(pairs.iter().map(|p| &p.moving))?;
    let f = stack(pairs.iter().map(|p| &p.fixed))?;
    if m.shape() != f.shape() {
        return Err(DownstreamError::Shape(format!("moving {:?} vs fixed {:?}", m.shape(), f.shape())));
    }
    let s = m.shape().to_vec();
    let n = s[2] * s[3] * s[4];
    let mut both = Vec::with_capacity(2 * m.numel());
    for b in 0..s[0] {
        both.extend_from_slice(&m.data()[b * n..(b + 1) * n]);
        both.extend_from_slice(&f.data()[b * n..(b + 1) * n]);
    }
    Ok((Tensor::from_vec(&[s[0], 2, s[2], s[3], s[4]], both), m, f))
}

fn labels_flat<'a>(ls: impl IntoIterator<Item = &'a Array3<u16>>) -> Vec<usize> {
    ls.into_iter().flat_map(|l| l.iter().map(|&v| v as usize).collect::<Vec<_>>()).collect()
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 7);
    idx.shuffle(&mut rng);
    idx
}

struct Driver<'c> {
    cfg: &'c FinetuneConfig,
    n_train: usize,
}

impl Driver<'_> {
    fn iters_per_epoch(&self) -> usize {
        self.n_train.div_ceil(self.cfg.batch)
    }

    /// Trains for `cfg.epochs` epochs, keeping the parameters of the best validation score
    /// (latest on ties).
    fn run<L, V>(&self, mut params: ParamSet, lr_at: impl Fn(usize, usize) -> Result<f64>, loss: L, validate: V) -> Result<(ParamSet, usize, Vec<EpochRecord>)>
    where
        L: for<'t> Fn(&'t Tape<f32>, &Bound<'t, f32>, &[usize]) -> Result<Var<'t, f32>>,
        V: Fn(&ParamSet) -> Result<f64>,
    {
        let cfg = self.cfg;
        let trainable = |n: &str| !(cfg.freeze_encoder && n.starts_with(ENCODER_PREFIX));
        let mut opt = Optimizer::new(cfg.optimizer);
        let mut best: Option<(f64, usize, ParamSet)> = None;
        let mut history = Vec::with_capacity(cfg.epochs);
        let ipe = self.iters_per_epoch();
        for epoch in 0..cfg.epochs {
            let order = epoch_order(self.n_train, cfg.seed, epoch);
            let mut total = 0.0;
            let mut first_lr = None;
            for (it, chunk) in order.chunks(cfg.batch).enumerate() {
                let lr = lr_at(epoch, it)?;
                first_lr.get_or_insert(lr);
                let tape = Tape::<f32>::new();
                let p = params.bind(&tape, trainable);
                let l = loss(&tape, &p, chunk)?;
                let lv = l.value().item() as f64;
                if !lv.is_finite() {
                    return Err(DownstreamError::Divergence { epoch, msg: format!("loss {lv} at iteration {it}") });
                }
                total += lv;
                let mut grads = tape.backward(&l);
                let mut by_name = BTreeMap::new();
                for (name, v) in p.iter() {
                    if let Some(g) = grads.take(v) {
                        if !g.all_finite() {
                            return Err(DownstreamError::Divergence { epoch, msg: format!("non-finite gradient in `{name}`") });
                        }
                        by_name.insert(name.to_owned(), g);
                    }
                }
                drop(p);
                opt.step(&mut params, &by_name, lr);
            }
            let val = validate(&params)?;
            log::info!("{:?} epoch {}/{}: loss {:.5} val {:.4}", cfg.task, epoch + 1, cfg.epochs, total / ipe as f64, val);
            history.push(EpochRecord { epoch, lr: first_lr.unwrap_or(0.0), train_loss: total / ipe as f64, val_metric: val });
            if best.as_ref().is_none_or(|b| val >= b.0) {
                best = Some((val, epoch, params.clone()));
            }
        }
        let (_, e, p) = best.expect("at least one epoch");
        Ok((p, e, history))
    }
}

fn check_task(cfg: &FinetuneConfig, task: Task) -> Result<()> {
    cfg.validate()?;
    if cfg.task != task {
        return Err(DownstreamError::Config(format!("config is for {:?}, not {task:?}", cfg.task)));
    }
    Ok(())
}

fn check_nonempty<S>(d: &Splits<S>) -> Result<()> {
    if d.train.is_empty() || d.val.is_empty() {
        return Err(DownstreamError::Input("training and validation splits must be nonempty".into()));
    }
    Ok(())
}

fn check_label_range(l: &Array3<u16>, k: usize, id: &str) -> Result<()> {
    if let Some(&m) = l.iter().max() {
        if m as usize >= k {
            return Err(DownstreamError::Config(format!("`{id}` holds class {m} but the model has {k} classes")));
        }
    }
    Ok(())
}

fn argmax_channels(logits: &Tensor<f32>) -> Vec<usize> {
    let s = logits.shape();
    let (b, k, n) = (s[0], s[1], s[2..].iter().product::<usize>());
    let d = logits.data();
    let mut out = Vec::with_capacity(b * n);
    for bi in 0..b {
        for v in 0..n {
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * n + v] > d[(bi * k + best) * n + v] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

pub fn finetune_seg(cfg: &FinetuneConfig, data: &Splits<SegSample>) -> Result<FinetuneOutcome<SegReport>> {
    check_task(cfg, Task::Seg)?;
    check_nonempty(data)?;
    let k = cfg.n_classes;
    for s in data.train.iter().chain(&data.val).chain(&data.test) {
        check_label_range(&s.labels, k, &s.id)?;
        if s.labels.shape() != s.image.shape() {
            return Err(DownstreamError::Shape(format!("`{}`: labels and image differ in shape", s.id)));
        }
    }
    let mut params = init_encoder(&cfg.model, &cfg.init, cfg.seed)?;
    params.extend(build_seg_decoder(&cfg.model, k, cfg.seed)?);
    let driver = Driver { cfg, n_train: data.train.len() };
    let (params, best_epoch, history) = driver.run(
        params,
        |epoch, _| Ok(poly_schedule(epoch as u64, cfg.lr, cfg.epochs as u64, cfg.poly_power)?),
        |tape, p, idx| {
            let x = tape.constant(stack(idx.iter().map(|&i| &data.train[i].image))?);
            let labels = labels_flat(idx.iter().map(|&i| &data.train[i].labels));
            let pyr = encoder_forward(&cfg.model, p, &x)?;
            let logits = seg_decoder_forward(p, &x, &pyr, k)?;
            Ok(logits.cross_entropy(&labels).add(&logits.soft_dice_loss(&labels, 1e-5)))
        },
        |p| Ok(evaluate_seg(cfg, p, &data.val)?.mean_fg_dice),
    )?;
    let held_out = if data.test.is_empty() { &data.val } else { &data.test };
    let report = evaluate_seg(cfg, &params, held_out)?;
    Ok(FinetuneOutcome { params, best_epoch, history, report })
}

/// Argmax label map of one volume.
pub fn predict_seg(cfg: &FinetuneConfig, params: &ParamSet, image: &Array3<f32>) -> Result<Array3<u16>> {
    let tape = Tape::<f32>::inference();
    let p = params.bind(&tape, |_| false);
    let x = tape.constant(stack([image])?);
    let pyr = encoder_forward(&cfg.model, &p, &x)?;
    let logits = seg_decoder_forward(&p, &x, &pyr, cfg.n_classes)?;
    let ids = argmax_channels(logits.value()).into_iter().map(|v| v as u16).collect();
    Ok(Array3::from_shape_vec(image.raw_dim(), ids).expect("shape"))
}

pub fn evaluate_seg(cfg: &FinetuneConfig, params: &ParamSet, samples: &[SegSample]) -> Result<SegReport> {
    if samples.is_empty() {
        return Err(DownstreamError::Eval("no evaluation cases".into()));
    }
    let k = cfg.n_classes;
    let mut sums = vec![0.0; k - 1];
    let mut absent = 0;
    for s in samples {
        let pred = predict_seg(cfg, params, &s.image)?;
        for (c, (d, present)) in dice_per_class(&pred, &s.labels, k)?.into_iter().enumerate() {
            sums[c] += d;
            absent += (!present) as usize;
        }
    }
    let per_class: Vec<f64> = sums.iter().map(|v| v / samples.len() as f64).collect();
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(SegReport { per_class_dice: per_class, mean_fg_dice: mean, cases: samples.len(), absent_pairs: absent })
}

pub fn finetune_cls(cfg: &FinetuneConfig, data: &Splits<ClsSample>) -> Result<FinetuneOutcome<ClsReport>> {
    check_task(cfg, Task::Cls)?;
    check_nonempty(data)?;
    let k = cfg.n_classes;
    for s in data.train.iter().chain(&data.val).chain(&data.test) {
        if s.label >= k {
            return Err(DownstreamError::Config(format!("`{}` has class {} but the model has {k} classes", s.id, s.label)));
        }
    }
    let mut params = init_encoder(&cfg.model, &cfg.init, cfg.seed)?;
    params.extend(build_cls_head(&cfg.model, k, cfg.cls_hidden, cfg.seed)?);
    let driver = Driver { cfg, n_train: data.train.len() };
    let ipe = driver.iters_per_epoch() as u64;
    let (warm, total) = (cfg.warmup_epochs as u64 * ipe, cfg.epochs as u64 * ipe);
    let (params, best_epoch, history) = driver.run(
        params,
        |epoch, it| Ok(lr_schedule(epoch as u64 * ipe + it as u64, cfg.lr, warm, total)?),
        |tape, p, idx| {
            let x = tape.constant(stack(idx.iter().map(|&i| &data.train[i].image))?);
            let labels: Vec<usize> = idx.iter().map(|&i| data.train[i].label).collect();
            let pyr = encoder_forward(&cfg.model, p, &x)?;
            Ok(cls_head_forward(p, pyr.bottleneck(), k)?.cross_entropy(&labels))
        },
        |p| Ok(evaluate_cls(cfg, p, &data.val)?.accuracy),
    )?;
    let held_out = if data.test.is_empty() { &data.val } else { &data.test };
    let report = evaluate_cls(cfg, &params, held_out)?;
    Ok(FinetuneOutcome { params, best_epoch, history, report })
}

/// Class probabilities `[K]` of one volume.
pub fn predict_cls(cfg: &FinetuneConfig, params: &ParamSet, image: &Array3<f32>) -> Result<Vec<f64>> {
    let tape = Tape::<f32>::inference();
    let p = params.bind(&tape, |_| false);
    let x = tape.constant(stack([image])?);
    let pyr = encoder_forward(&cfg.model, &p, &x)?;
    let logits = cls_head_forward(&p, pyr.bottleneck(), cfg.n_classes)?;
    Ok(softmax_channels(logits.value().data(), 1, cfg.n_classes, 1).into_iter().map(|v| v as f64).collect())
}

pub fn evaluate_cls(cfg: &FinetuneConfig, params: &ParamSet, samples: &[ClsSample]) -> Result<ClsReport> {
    if samples.is_empty() {
        return Err(DownstreamError::Eval("no evaluation cases".into()));
    }
    let mut preds = Vec::new();
    let mut scores = Vec::new();
    for s in samples {
        let prob = predict_cls(cfg, params, &s.image)?;
        let best = (0..prob.len()).fold(0, |b, c| if prob[c] > prob[b] { c } else { b });
        preds.push(best);
        scores.push(prob.get(1).copied().unwrap_or(0.0));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let binary: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    let both = binary.iter().any(|&b| b) && binary.iter().any(|&b| !b);
    let (auc, roc) = if cfg.n_classes == 2 && both {
        (Some(roc_auc(&scores, &binary)?), Some(roc_curve(&scores, &binary)?))
    } else {
        (None, None)
    };
    Ok(ClsReport {
        accuracy: accuracy(&preds, &labels)?,
        confusion: confusion(&preds, &labels, cfg.n_classes)?,
        auc,
        roc,
    })
}

fn similarity<'t>(cfg: &FinetuneConfig, warped: &Var<'t, f32>, fixed: &Var<'t, f32>) -> Var<'t, f32> {
    match cfg.similarity {
        Similarity::Mse => warped.sub(fixed).square().mean(),
        Similarity::Ncc => ncc_loss(warped, fixed, cfg.ncc_window),
    }
}

pub fn finetune_reg(cfg: &FinetuneConfig, data: &Splits<RegPair>) -> Result<FinetuneOutcome<RegReport>> {
    check_task(cfg, Task::Reg)?;
    check_nonempty(data)?;
    let mut params = init_encoder(&cfg.model, &cfg.init, cfg.seed)?;
    params.extend(build_reg_head(&cfg.model, cfg.seed)?);
    let driver = Driver { cfg, n_train: data.train.len() };
    let (params, best_epoch, history) = driver.run(
        params,
        |epoch, _| Ok(poly_schedule(epoch as u64, cfg.lr, cfg.epochs as u64, cfg.poly_power)?),
        |tape, p, idx| {
            let pairs: Vec<&RegPair> = idx.iter().map(|&i| &data.train[i]).collect();
            let (x, m, f) = stack_pairs(&pairs)?;
            let x = tape.constant(x);
            let pyr = encoder_forward(&cfg.model, p, &x)?;
            let u = reg_head_forward(p, &x, &pyr)?;
            let warped = tape.constant(m).warp_trilinear(&u);
            let sim = similarity(cfg, &warped, &tape.constant(f));
            Ok(sim.add(&smoothness_loss(&u).scale(cfg.smooth_weight as f32)))
        },
        |p| Ok(evaluate_reg(cfg, p, &data.val)?.dice),
    )?;
    let held_out = if data.test.is_empty() { &data.val } else { &data.test };
    let report = evaluate_reg(cfg, &params, held_out)?;
    Ok(FinetuneOutcome { params, best_epoch, history, report })
}

/// Displacement field `[1, 3, D, H, W]` for one pair.
pub fn predict_field(cfg: &FinetuneConfig, params: &ParamSet, pair: &RegPair) -> Result<Tensor<f32>> {
    let tape = Tape::<f32>::inference();
    let p = params.bind(&tape, |_| false);
    let (x, _, _) = stack_pairs(&[pair])?;
    let x = tape.constant(x);
    let pyr = encoder_forward(&cfg.model, &p, &x)?;
    Ok(reg_head_forward(&p, &x, &pyr)?.value().clone())
}

fn label_tensor(l: &Array3<u16>) -> Tensor<f32> {
    let s = l.shape();
    Tensor::from_vec(&[1, 1, s[0], s[1], s[2]], l.iter().map(|&v| v as f32).collect())
}

pub fn evaluate_reg(cfg: &FinetuneConfig, params: &ParamSet, pairs: &[RegPair]) -> Result<RegReport> {
    if pairs.is_empty() {
        return Err(DownstreamError::Eval("no evaluation pairs".into()));
    }
    let k = cfg.n_classes;
    let (mut base, mut after) = (vec![0.0; k - 1], vec![0.0; k - 1]);
    let mut max_u = 0.0f64;
    for pair in pairs {
        let (Some(ml), Some(fl)) = (&pair.moving_labels, &pair.fixed_labels) else {
            return Err(DownstreamError::Eval(format!("pair `{}` has no label volumes", pair.id)));
        };
        check_label_range(ml, k, &pair.id)?;
        check_label_range(fl, k, &pair.id)?;
        let u = predict_field(cfg, params, pair)?;
        max_u = u.data().iter().fold(max_u, |m, v| m.max(v.abs() as f64));
        let warped = warp(&label_tensor(ml), &u, WarpMode::Nearest)?;
        let warped = Array3::from_shape_vec(ml.raw_dim(), warped.data().iter().map(|&v| v as u16).collect()).expect("shape");
        for (c, (d, _)) in dice_per_class(ml, fl, k)?.into_iter().enumerate() {
            base[c] += d;
        }
        for (c, (d, _)) in dice_per_class(&warped, fl, k)?.into_iter().enumerate() {
            after[c] += d;
        }
    }
    let n = pairs.len() as f64;
    let per_class: Vec<f64> = after.iter().map(|v| v / n).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / (v.len() as f64 * n);
    Ok(RegReport {
        baseline_dice: mean(&base),
        dice: mean(&after),
        per_class_dice: per_class,
        pairs: pairs.len(),
        max_displacement: max_u,
    })
}
