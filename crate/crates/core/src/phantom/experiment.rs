//! Staged experiment runner: generate -> preprocess -> pretrain -> finetune -> eval.
//!
//! Every stage writes its artifacts under `<out>/<stage>/` and finishes by writing
//! `<out>/<stage>/stage.json`, which records a hash of everything the stage depends on. A
//! stage whose record exists with the same hash is skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{
    corpus_spec, ensure_dir, foreground, gen_phantom, gen_reg_pair, label_volume, write_record, Modality, PhantomError,
    PhantomSpec,
};
use crate::downstream::{
    evaluate_cls, evaluate_reg, evaluate_seg, finetune_cls, finetune_reg, finetune_seg, predict_field, ClsSample,
    DownstreamError, EpochRecord, FinetuneConfig, InitSource, RegPair, SegSample, Splits, Task,
};
use crate::model::ParamSet;
use crate::preprocess::{normalize_unit, preprocess_manifest, PreprocessConfig, PreprocessError};
use crate::pretrain::{
    load_checkpoint, model_hash, pretrain_loop, save_checkpoint, Checkpoint, Optimizer, PretrainConfig, PretrainData,
    PretrainError, RngState, StepMetrics, METRICS_FILE,
};
use crate::text::{EmbeddingTable, ProviderKind, TextError, TextProvider, DEFAULT_DIM};
use crate::volume::{load_manifest, read_nifti, save_manifest, DatasetManifest, ManifestRecord, Split, VolumeError};

pub const SUMMARY_FILE: &str = "summary.json";
const STAGE_FILE: &str = "stage.json";
const FAILURE_FILE: &str = "failure.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {msg}")]
    Stage { stage: Stage, msg: String },
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    /// Validation problems exit with 1, runtime failures with 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Generate,
    Preprocess,
    Pretrain,
    Finetune,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Generate, Stage::Preprocess, Stage::Pretrain, Stage::Finetune, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Preprocess => "preprocess",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
        }
    }

    /// The stage whose outputs this one reads. Fine-tuning reads the pre-training stage only
    /// when some task starts from its checkpoint.
    fn upstream(self, cfg: &ExperimentConfig) -> Result<Option<Stage>> {
        Ok(match self {
            Stage::Generate => None,
            Stage::Preprocess => Some(Stage::Generate),
            Stage::Pretrain => Some(Stage::Preprocess),
            Stage::Finetune if cfg.uses_pretraining()? => Some(Stage::Pretrain),
            Stage::Finetune => Some(Stage::Preprocess),
            Stage::Eval => Some(Stage::Finetune),
        })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Phantom counts and shapes. Splits are `[train, val, test]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub size: [usize; 3],
    pub n_objects: usize,
    pub noise_sigma: f64,
    pub pretrain_count: usize,
    pub seg_split: [usize; 3],
    pub cls_split: [usize; 3],
    pub reg_split: [usize; 3],
    /// Peak displacement of the registration fields, in voxels.
    pub reg_amplitude: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            size: [32; 3],
            n_objects: 3,
            noise_sigma: 0.05,
            pretrain_count: 16,
            seg_split: [16, 4, 4],
            cls_split: [16, 4, 8],
            reg_split: [8, 2, 4],
            reg_amplitude: 3.0,
        }
    }
}

impl GenerateConfig {
    fn base_spec(&self) -> PhantomSpec {
        PhantomSpec { size: self.size, n_objects: self.n_objects, noise_sigma: self.noise_sigma, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub provider: ProviderKind,
    pub dim: usize,
    /// Description list and embedding table of an external provider.
    pub descriptions: Option<PathBuf>,
    pub table: Option<PathBuf>,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig { provider: ProviderKind::Hashing, dim: DEFAULT_DIM, descriptions: None, table: None }
    }
}

impl TextConfig {
    fn provider(&self) -> Result<TextProvider> {
        match self.provider {
            ProviderKind::Hashing => Ok(TextProvider::Hashing { dim: self.dim }),
            ProviderKind::External => {
                let (Some(d), Some(t)) = (&self.descriptions, &self.table) else {
                    return Err(ExperimentError::Config("external text provider needs `descriptions` and `table`".into()));
                };
                let table = EmbeddingTable::load(d, t).map_err(|e| ExperimentError::Config(e.to_string()))?;
                Ok(TextProvider::External(table))
            }
        }
    }
}

/// Raw `[finetune.seg]`, `[finetune.cls]` and `[finetune.reg]` tables. Besides `enabled` and
/// `init` (`triad`, `scratch` or a checkpoint path) they hold overrides of the task's default fine-tuning
/// config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSections {
    pub seg: toml::Table,
    pub cls: toml::Table,
    pub reg: toml::Table,
}

/// Encoder initialization of a fine-tuning task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitChoice {
    /// The final checkpoint of the experiment's own pre-training stage.
    Triad,
    Scratch,
    Checkpoint(PathBuf),
}

impl InitChoice {
    pub fn parse(s: &str) -> Self {
        match s {
            "triad" => InitChoice::Triad,
            "scratch" => InitChoice::Scratch,
            path => InitChoice::Checkpoint(PathBuf::from(path)),
        }
    }
}

/// A resolved fine-tuning section.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskSection {
    pub enabled: bool,
    pub init: InitChoice,
    pub config: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    /// Seeds every stage; the per-section `seed` fields are overwritten with it.
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub generate: GenerateConfig,
    pub preprocess: PreprocessConfig,
    pub text: TextConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneSections,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out: PathBuf::from("runs/experiment"),
            seed: 0,
            stages: Stage::ALL.to_vec(),
            generate: GenerateConfig::default(),
            preprocess: PreprocessConfig { target_grid: [32; 3], ..Default::default() },
            text: TextConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneSections::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl ExperimentConfig {
    pub fn task(&self, task: Task) -> Result<TaskSection> {
        let (name, raw) = match task {
            Task::Seg => ("seg", &self.finetune.seg),
            Task::Cls => ("cls", &self.finetune.cls),
            Task::Reg => ("reg", &self.finetune.reg),
        };
        let bad = |m: String| ExperimentError::Config(format!("[finetune.{name}] {m}"));
        let mut over = raw.clone();
        let enabled = match over.remove("enabled") {
            None => true,
            Some(toml::Value::Boolean(b)) => b,
            Some(v) => return Err(bad(format!("`enabled` must be a boolean, got {v}"))),
        };
        let init = match over.remove("init") {
            None => InitChoice::Triad,
            Some(toml::Value::String(s)) if !s.is_empty() => InitChoice::parse(&s),
            Some(v) => return Err(bad(format!("`init` must be \"triad\", \"scratch\" or a checkpoint path, got {v}"))),
        };
        for key in ["task", "model", "seed"] {
            if over.contains_key(key) {
                return Err(bad(format!("`{key}` is set by the experiment, not the task section")));
            }
        }
        let mut model = self.pretrain.model.clone();
        if task == Task::Reg {
            model.in_channels = 2;
        }
        let defaults = FinetuneConfig { model, seed: self.seed, ..FinetuneConfig::for_task(task) };
        let mut table = toml::Table::try_from(&defaults).map_err(|e| bad(e.to_string()))?;
        merge(&mut table, &over);
        let config: FinetuneConfig = table.try_into().map_err(|e: toml::de::Error| bad(e.message().to_owned()))?;
        Ok(TaskSection { enabled, init, config })
    }

    /// Whether any enabled task starts from the experiment's own pre-trained encoder.
    pub fn uses_pretraining(&self) -> Result<bool> {
        for task in [Task::Seg, Task::Cls, Task::Reg] {
            let t = self.task(task)?;
            if t.enabled && t.init == InitChoice::Triad {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig { seed: self.seed, ..self.pretrain.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: String| ExperimentError::Config(e);
        if self.stages.is_empty() {
            return Err(cfg("no stages requested".into()));
        }
        let g = &self.generate;
        g.base_spec().validate().map_err(|e| cfg(e.to_string()))?;
        if !(0.0..=super::MAX_DISPLACEMENT).contains(&g.reg_amplitude) {
            return Err(cfg(format!("reg_amplitude {} outside [0, {}]", g.reg_amplitude, super::MAX_DISPLACEMENT)));
        }
        if g.pretrain_count == 0 {
            return Err(cfg("pretrain_count must be positive".into()));
        }
        for (name, s) in [("seg_split", g.seg_split), ("cls_split", g.cls_split), ("reg_split", g.reg_split)] {
            if s[0] == 0 || s[1] + s[2] == 0 {
                return Err(cfg(format!("{name} {s:?} needs training and held-out items")));
            }
        }
        self.preprocess.validate().map_err(|e| cfg(e.to_string()))?;
        if self.preprocess.target_grid != g.size {
            return Err(cfg(format!(
                "preprocess grid {:?} must equal the phantom size {:?} so labels stay aligned",
                self.preprocess.target_grid, g.size
            )));
        }
        self.pretrain_config().validate().map_err(|e| cfg(e.to_string()))?;
        if g.size.iter().any(|&d| d < self.pretrain.roi) {
            return Err(cfg(format!("phantom size {:?} is smaller than the roi {}", g.size, self.pretrain.roi)));
        }
        if g.size.iter().any(|d| d % 32 != 0) {
            return Err(cfg(format!("phantom size {:?} must be divisible by 32 for fine-tuning", g.size)));
        }
        for task in [Task::Seg, Task::Cls, Task::Reg] {
            let t = self.task(task)?;
            t.config.validate().map_err(|e| cfg(format!("{task:?}: {e}")))?;
            if let InitChoice::Checkpoint(p) = &t.init {
                if t.enabled && !p.is_file() {
                    return Err(cfg(format!("{task:?}: init checkpoint {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// `last` and every stage it transitively reads from, in execution order.
    pub fn stages_through(&self, last: Stage) -> Result<Vec<Stage>> {
        let mut stages = vec![last];
        while let Some(up) = stages.last().unwrap().upstream(self)? {
            stages.push(up);
        }
        stages.reverse();
        Ok(stages)
    }

    /// Mutable raw section of a fine-tuning task.
    pub fn task_table(&mut self, task: Task) -> &mut toml::Table {
        match task {
            Task::Seg => &mut self.finetune.seg,
            Task::Cls => &mut self.finetune.cls,
            Task::Reg => &mut self.finetune.reg,
        }
    }
}

/// Parses a TOML experiment config and validates it.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {}", path.display(), e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn digest(v: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(v).expect("json value serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of the canonical (key-sorted JSON) form of the config, excluding the output
/// directory.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    v.as_object_mut().unwrap().remove("out");
    digest(&v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub hash: String,
    pub seconds: f64,
    pub metrics: BTreeMap<String, f64>,
    /// Paths relative to the experiment output directory.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: Stage,
    pub error: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub metrics: BTreeMap<String, f64>,
    pub artifacts: BTreeMap<String, String>,
}

fn stage_key(cfg: &ExperimentConfig, stage: Stage, upstream: Option<&str>) -> Result<String> {
    let section = match stage {
        Stage::Generate => serde_json::to_value(&cfg.generate),
        Stage::Preprocess => serde_json::to_value(&cfg.preprocess),
        Stage::Pretrain => serde_json::to_value((&cfg.pretrain_config(), &cfg.text)),
        Stage::Finetune => serde_json::to_value(
            [Task::Seg, Task::Cls, Task::Reg].iter().map(|&t| cfg.task(t)).collect::<Result<Vec<_>>>()?,
        ),
        Stage::Eval => Ok(serde_json::Value::Null),
    }
    .expect("config serializes");
    Ok(digest(&serde_json::json!({
        "stage": stage.name(),
        "seed": cfg.seed,
        "section": section,
        "upstream": upstream,
    })))
}

fn read_record(path: &Path) -> Option<StageRecord> {
    serde_json::from_slice(&fs::read(path).ok()?).ok()
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("record serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    /// Records of stages finished or skipped in this run, or found on disk.
    done: BTreeMap<Stage, StageRecord>,
}

#[derive(Default)]
struct StageOutput {
    metrics: BTreeMap<String, f64>,
    artifacts: BTreeMap<String, String>,
}

impl StageOutput {
    fn metric(&mut self, k: &str, v: f64) {
        self.metrics.insert(k.into(), v);
    }

    fn artifact(&mut self, k: &str, out: &Path, p: &Path) {
        let rel = p.strip_prefix(out).unwrap_or(p);
        self.artifacts.insert(k.into(), rel.display().to_string());
    }
}

/// Runs the requested stages in order, skipping those already completed with the same
/// inputs, and writes `<out>/summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    let out = cfg.out.as_path();
    fs::create_dir_all(out).map_err(io_err(out))?;
    let chash = config_hash(cfg);
    let mut ctx = Ctx { cfg, out, done: BTreeMap::new() };
    let mut records = Vec::new();
    for stage in Stage::ALL {
        if !cfg.stages.contains(&stage) {
            continue;
        }
        let upstream = match stage.upstream(cfg)? {
            None => None,
            Some(up) => Some(ctx.record(up)?.hash.clone()),
        };
        let hash = stage_key(cfg, stage, upstream.as_deref())?;
        let dir = out.join(stage.name());
        let marker = dir.join(STAGE_FILE);
        if let Some(rec) = read_record(&marker).filter(|r| r.hash == hash) {
            info!("stage {stage}: up to date, skipped");
            ctx.done.insert(stage, rec.clone());
            records.push(rec);
            continue;
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        info!("stage {stage}: running");
        let t = Instant::now();
        let result = ctx.run_stage(stage, &dir);
        let seconds = t.elapsed().as_secs_f64();
        let output = match result {
            Ok(o) => o,
            Err(e) => {
                let failure = FailureRecord { stage, error: e.to_string(), config_hash: chash.clone() };
                write_json(&out.join(FAILURE_FILE), &failure)?;
                return Err(match e {
                    ExperimentError::Stage { .. } | ExperimentError::Config(_) => e,
                    other => ExperimentError::Stage { stage, msg: other.to_string() },
                });
            }
        };
        let rec = StageRecord { stage, hash, seconds, metrics: output.metrics, artifacts: output.artifacts };
        write_json(&marker, &rec)?;
        ctx.done.insert(stage, rec.clone());
        records.push(rec);
    }
    let failure = out.join(FAILURE_FILE);
    if failure.exists() {
        fs::remove_file(&failure).map_err(io_err(&failure))?;
    }
    let mut metrics = BTreeMap::new();
    let mut artifacts = BTreeMap::new();
    for r in &records {
        metrics.extend(r.metrics.iter().map(|(k, v)| (k.clone(), *v)));
        artifacts.extend(r.artifacts.iter().map(|(k, v)| (format!("{}.{k}", r.stage), v.clone())));
    }
    let summary = Summary { config_hash: chash, seed: cfg.seed, stages: records, metrics, artifacts };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn stage_err<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> ExperimentError {
    move |e| ExperimentError::Stage { stage, msg: e.to_string() }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn split_of(i: usize, split: [usize; 3]) -> Split {
    if i < split[0] {
        Split::Train
    } else if i < split[0] + split[1] {
        Split::Val
    } else {
        Split::Test
    }
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for h in history {
        writeln!(f, "{}", serde_json::to_string(h).expect("record serializes")).map_err(io_err(path))?;
    }
    Ok(())
}

fn save_params(path: &Path, params: &ParamSet, t: &TaskSection) -> Result<()> {
    let c = Checkpoint {
        params: params.clone(),
        optimizer: Optimizer::new(t.config.optimizer.clone()),
        step: t.config.epochs as u64,
        config_hash: model_hash(&t.config.model),
        rng: RngState { seed: [0; 32], stream: 0, word_pos: 0 },
    };
    save_checkpoint(&c, path).map_err(stage_err(Stage::Finetune))
}

impl Ctx<'_> {
    fn record(&mut self, stage: Stage) -> Result<&StageRecord> {
        if !self.done.contains_key(&stage) {
            let rec = read_record(&self.out.join(stage.name()).join(STAGE_FILE)).ok_or_else(|| {
                ExperimentError::Config(format!("stage `{stage}` has not been run in {}", self.out.display()))
            })?;
            self.done.insert(stage, rec);
        }
        Ok(&self.done[&stage])
    }

    fn artifact(&mut self, stage: Stage, key: &str) -> Result<PathBuf> {
        let out = self.out.to_path_buf();
        let rec = self.record(stage)?;
        let rel = rec.artifacts.get(key).ok_or_else(|| ExperimentError::Stage {
            stage,
            msg: format!("record lacks artifact `{key}`"),
        })?;
        Ok(out.join(rel))
    }

    fn run_stage(&mut self, stage: Stage, dir: &Path) -> Result<StageOutput> {
        match stage {
            Stage::Generate => self.generate(dir),
            Stage::Preprocess => self.preprocess(dir),
            Stage::Pretrain => self.pretrain(dir),
            Stage::Finetune => self.finetune(dir),
            Stage::Eval => self.eval(dir),
        }
    }

    fn generate(&mut self, dir: &Path) -> Result<StageOutput> {
        let err = stage_err::<PhantomError>(Stage::Generate);
        let g = &self.cfg.generate;
        let base = g.base_spec();
        let labels_dir = dir.join("labels");
        ensure_dir(&labels_dir).map_err(&err)?;
        let mut records = Vec::new();
        let seed = self.cfg.seed;
        // disjoint seed families per corpus
        for i in 0..g.pretrain_count {
            let p = gen_phantom(&corpus_spec(&base, seed.wrapping_add(1), i)).map_err(&err)?;
            records.push(write_record(dir, &format!("pre{i:03}"), &p, Split::Pretrain).map_err(&err)?);
        }
        let write_labels = |id: &str, labels: &Array3<u16>, like: &crate::volume::Volume| {
            crate::volume::write_nifti(&label_volume(&foreground(labels), like), labels_dir.join(format!("{id}.nii")))
                .map_err(|e| err(e.into()))
        };
        for i in 0..g.seg_split.iter().sum() {
            let p = gen_phantom(&corpus_spec(&base, seed.wrapping_add(2), i)).map_err(&err)?;
            let id = format!("seg{i:03}");
            records.push(write_record(dir, &id, &p, split_of(i, g.seg_split)).map_err(&err)?);
            write_labels(&id, &p.labels, &p.volume)?;
        }
        for i in 0..g.cls_split.iter().sum() {
            let p = gen_phantom(&corpus_spec(&base, seed.wrapping_add(3), i)).map_err(&err)?;
            records.push(write_record(dir, &format!("cls{i:03}"), &p, split_of(i, g.cls_split)).map_err(&err)?);
        }
        for i in 0..g.reg_split.iter().sum() {
            let r = gen_reg_pair(&corpus_spec(&base, seed.wrapping_add(4), i), g.reg_amplitude).map_err(&err)?;
            let split = split_of(i, g.reg_split);
            for (role, vol, labels) in [("moving", &r.moving, &r.moving_labels), ("fixed", &r.fixed, &r.fixed_labels)] {
                let id = format!("reg{i:03}_{role}");
                let p = super::Phantom { volume: vol.clone(), labels: labels.clone(), meta: r.meta.clone() };
                records.push(write_record(dir, &id, &p, split).map_err(&err)?);
                write_labels(&id, labels, vol)?;
            }
        }
        let manifest = DatasetManifest { records };
        let mpath = dir.join("manifest.jsonl");
        save_manifest(&manifest, &mpath).map_err(|e| err(e.into()))?;
        let mut o = StageOutput::default();
        o.metric("generated_volumes", manifest.len() as f64);
        o.artifact("manifest", self.out, &mpath);
        o.artifact("labels", self.out, &labels_dir);
        Ok(o)
    }

    fn preprocess(&mut self, dir: &Path) -> Result<StageOutput> {
        let err = stage_err::<PreprocessError>(Stage::Preprocess);
        let src = self.artifact(Stage::Generate, "manifest")?;
        let manifest = load_manifest(&src).map_err(|e| err(e.into()))?;
        let report = preprocess_manifest(&manifest, src.parent().unwrap(), dir, &self.cfg.preprocess).map_err(&err)?;
        let mut o = StageOutput::default();
        o.metric("preprocessed_volumes", report.manifest.len() as f64);
        o.metric("preprocess_skipped", report.skipped.len() as f64);
        o.artifact("manifest", self.out, &dir.join("manifest.jsonl"));
        Ok(o)
    }

    fn preprocessed(&mut self) -> Result<(DatasetManifest, PathBuf)> {
        let path = self.artifact(Stage::Preprocess, "manifest")?;
        let mut m = load_manifest(&path).map_err(stage_err::<VolumeError>(Stage::Preprocess))?;
        let base = path.parent().unwrap().to_path_buf();
        m.resolve_paths(&base).map_err(stage_err::<VolumeError>(Stage::Preprocess))?;
        Ok((m, base))
    }

    fn pretrain(&mut self, dir: &Path) -> Result<StageOutput> {
        let err = stage_err::<PretrainError>(Stage::Pretrain);
        let (m, _) = self.preprocessed()?;
        let corpus = DatasetManifest { records: m.split(Split::Pretrain).cloned().collect() };
        let provider = self.cfg.text.provider()?;
        let data = PretrainData::from_manifest(&corpus, &provider).map_err(&err)?;
        let pcfg = self.cfg.pretrain_config();
        let report = pretrain_loop(&pcfg, &data, dir, None).map_err(&err)?;
        let l1: Vec<f64> = report.metrics.iter().map(|m: &StepMetrics| m.l1).collect();
        let k = l1.len().min(10);
        let first = mean(l1[..k].iter().copied());
        let last = mean(l1[l1.len() - k..].iter().copied());
        let mut o = StageOutput::default();
        o.metric("pretrain_steps", l1.len() as f64);
        o.metric("pretrain_l1_first10", first);
        o.metric("pretrain_l1_last10", last);
        o.metric("pretrain_l1_ratio", last / first);
        o.metric("pretrain_finite", report.metrics.iter().all(|m| m.total.is_finite()) as u8 as f64);
        o.artifact("checkpoint", self.out, &report.final_checkpoint);
        o.artifact("metrics", self.out, &dir.join(METRICS_FILE));
        Ok(o)
    }

    fn init_for(&mut self, t: &TaskSection) -> Result<InitSource> {
        Ok(match &t.init {
            InitChoice::Triad => InitSource::Checkpoint(self.artifact(Stage::Pretrain, "checkpoint")?),
            InitChoice::Scratch => InitSource::Scratch,
            InitChoice::Checkpoint(p) => InitSource::Checkpoint(p.clone()),
        })
    }

    fn finetune(&mut self, dir: &Path) -> Result<StageOutput> {
        let err = stage_err::<DownstreamError>(Stage::Finetune);
        let data = self.task_data()?;
        let mut o = StageOutput::default();
        for task in [Task::Seg, Task::Cls, Task::Reg] {
            let mut t = self.cfg.task(task)?;
            if !t.enabled {
                continue;
            }
            t.config.init = self.init_for(&t)?;
            let name = task_name(task);
            let t0 = Instant::now();
            let (params, history, best) = match task {
                Task::Seg => {
                    let r = finetune_seg(&t.config, &data.seg).map_err(&err)?;
                    (r.params, r.history, r.best_epoch)
                }
                Task::Cls => {
                    let r = finetune_cls(&t.config, &data.cls).map_err(&err)?;
                    if let Some(e5) = r.history.get(5) {
                        o.metric("cls_lr_epoch5", e5.lr);
                    }
                    (r.params, r.history, r.best_epoch)
                }
                Task::Reg => {
                    let r = finetune_reg(&t.config, &data.reg).map_err(&err)?;
                    (r.params, r.history, r.best_epoch)
                }
            };
            o.metric(&format!("{name}_seconds"), t0.elapsed().as_secs_f64());
            o.metric(&format!("{name}_best_val"), history[best].val_metric);
            o.metric(&format!("{name}_final_train_loss"), history.last().unwrap().train_loss);
            let hpath = dir.join(format!("{name}_history.jsonl"));
            write_history(&hpath, &history)?;
            let ppath = dir.join(format!("{name}.ckpt"));
            save_params(&ppath, &params, &t)?;
            o.artifact(&format!("{name}_params"), self.out, &ppath);
            o.artifact(&format!("{name}_history"), self.out, &hpath);
        }
        Ok(o)
    }

    fn eval(&mut self, dir: &Path) -> Result<StageOutput> {
        let err = stage_err::<DownstreamError>(Stage::Eval);
        let data = self.task_data()?;
        let mut o = StageOutput::default();
        for task in [Task::Seg, Task::Cls, Task::Reg] {
            let mut t = self.cfg.task(task)?;
            if !t.enabled {
                continue;
            }
            t.config.init = InitSource::Scratch;
            let name = task_name(task);
            let p = self.artifact(Stage::Finetune, &format!("{name}_params"))?;
            let params = load_checkpoint(&p).map_err(stage_err::<PretrainError>(Stage::Eval))?.params;
            let rpath = dir.join(format!("{name}_report.json"));
            match task {
                Task::Seg => {
                    let s = &data.seg;
                    let r = evaluate_seg(&t.config, &params, held_out(s)).map_err(&err)?;
                    o.metric("seg_test_dice", r.mean_fg_dice);
                    write_json(&rpath, &r)?;
                }
                Task::Cls => {
                    let s = &data.cls;
                    let r = evaluate_cls(&t.config, &params, held_out(s)).map_err(&err)?;
                    o.metric("cls_test_accuracy", r.accuracy);
                    if let Some(auc) = r.auc {
                        o.metric("cls_test_auc", auc);
                    }
                    if let Some(roc) = &r.roc {
                        let path = dir.join("cls_roc.csv");
                        let mut text = String::from("fpr,tpr\n");
                        for (f, tp) in roc {
                            text.push_str(&format!("{f},{tp}\n"));
                        }
                        fs::write(&path, text).map_err(io_err(&path))?;
                        o.artifact("cls_roc", self.out, &path);
                    }
                    write_json(&rpath, &r)?;
                }
                Task::Reg => {
                    let s = &data.reg;
                    let pairs = held_out(s);
                    let r = evaluate_reg(&t.config, &params, pairs).map_err(&err)?;
                    o.metric("reg_test_dice", r.dice);
                    o.metric("reg_test_baseline_dice", r.baseline_dice);
                    o.metric("reg_dice_gain", r.dice - r.baseline_dice);
                    // zero-initialized head: the untrained model must be the identity
                    let mut t0 = t.config.clone();
                    t0.init = self.init_for(&t)?;
                    let mut fresh = crate::downstream::init_encoder(&t0.model, &t0.init, t0.seed).map_err(&err)?;
                    fresh.extend(crate::model::build_reg_head(&t0.model, t0.seed).map_err(|e| err(e.into()))?);
                    let u = predict_field(&t0, &fresh, &pairs[0]).map_err(&err)?;
                    o.metric("reg_init_max_displacement", u.data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64)));
                    write_json(&rpath, &r)?;
                }
            }
            o.artifact(&format!("{name}_report"), self.out, &rpath);
        }
        Ok(o)
    }

    fn task_data(&mut self) -> Result<TaskData> {
        let (m, _) = self.preprocessed()?;
        let labels_dir = self.artifact(Stage::Generate, "labels")?;
        let err = stage_err::<String>(Stage::Finetune);
        let image = |r: &ManifestRecord| -> Result<Array3<f32>> {
            let v = read_nifti(&r.volume_path).map_err(|e| err(e.to_string()))?;
            Ok(normalize_unit(&v).map_err(|e| err(e.to_string()))?.data)
        };
        let labels = |id: &str| -> Result<Array3<u16>> {
            let v = read_nifti(labels_dir.join(format!("{id}.nii"))).map_err(|e| err(e.to_string()))?;
            Ok(v.data.mapv(|x| x as u16))
        };
        let mut data = TaskData::default();
        let mut fixed: BTreeMap<String, (Array3<f32>, Array3<u16>)> = BTreeMap::new();
        let mut moving: BTreeMap<String, (Array3<f32>, Array3<u16>, Split)> = BTreeMap::new();
        for r in &m.records {
            let id = r.id.as_str();
            if id.starts_with("seg") {
                let s = SegSample { id: id.into(), image: image(r)?, labels: labels(id)? };
                push(&mut data.seg, r.split, s);
            } else if id.starts_with("cls") {
                let label = match r.modality.as_str() {
                    "T1w" => Modality::T1w,
                    "T2w" => Modality::T2w,
                    other => return Err(err(format!("record `{id}` has unknown modality `{other}`"))),
                };
                push(&mut data.cls, r.split, ClsSample { id: id.into(), image: image(r)?, label: label.class_id() });
            } else if let Some(pair) = id.strip_suffix("_moving") {
                moving.insert(pair.into(), (image(r)?, labels(id)?, r.split));
            } else if let Some(pair) = id.strip_suffix("_fixed") {
                fixed.insert(pair.into(), (image(r)?, labels(id)?));
            }
        }
        for (id, (mi, ml, split)) in moving {
            let (fi, fl) = fixed.remove(&id).ok_or_else(|| err(format!("pair `{id}` lacks its fixed image")))?;
            let pair = RegPair { id, moving: mi, fixed: fi, moving_labels: Some(ml), fixed_labels: Some(fl) };
            push(&mut data.reg, split, pair);
        }
        Ok(data)
    }
}

/// Test split, or validation when no test split exists.
fn held_out<S>(s: &Splits<S>) -> &[S] {
    if s.test.is_empty() {
        &s.val
    } else {
        &s.test
    }
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Seg => "seg",
        Task::Cls => "cls",
        Task::Reg => "reg",
    }
}

struct TaskData {
    seg: Splits<SegSample>,
    cls: Splits<ClsSample>,
    reg: Splits<RegPair>,
}

fn empty<S>() -> Splits<S> {
    Splits { train: Vec::new(), val: Vec::new(), test: Vec::new() }
}

impl Default for TaskData {
    fn default() -> Self {
        TaskData { seg: empty(), cls: empty(), reg: empty() }
    }
}

fn push<S>(s: &mut Splits<S>, split: Split, item: S) {
    match split {
        Split::Train | Split::Pretrain => s.train.push(item),
        Split::Val => s.val.push(item),
        Split::Test => s.test.push(item),
    }
}

impl From<TextError> for ExperimentError {
    fn from(e: TextError) -> Self {
        ExperimentError::Config(e.to_string())
    }
}
