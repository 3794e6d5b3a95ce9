//! `triad`: command-line front end of the experiment harness.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use triad_core::downstream::Task;
use triad_core::phantom::{load_experiment_config, run_experiment, ExperimentConfig, ExperimentError, Stage, Summary};
use triad_core::preprocess::{preprocess_manifest, PreprocessConfig};
use triad_core::volume::load_manifest;

#[derive(Parser, Debug)]
#[command(name = "triad", version, about = "Synthetic MRI pre-training and fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Overrides the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom corpora and their manifest.
    PhantomGen(Common),
    /// Preprocess an experiment's phantoms, or any manifest with `--manifest`.
    Preprocess(PreprocessArgs),
    /// Pre-train the encoder (runs missing upstream stages first).
    Pretrain(Common),
    /// Fine-tune the downstream tasks.
    Finetune(FinetuneArgs),
    /// Evaluate fine-tuned models on the held-out splits.
    Eval(Common),
    /// Run every stage listed in the config.
    Run(Common),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Experiment config file (TOML); optional with `--manifest`.
    #[arg(long, value_name = "FILE", required_unless_present = "manifest")]
    config: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (required with `--manifest`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Preprocess this manifest directly instead of running the experiment stages.
    #[arg(long, value_name = "IN", requires = "out")]
    manifest: Option<PathBuf>,
    /// Target grid as `x,y,z` voxels.
    #[arg(long, value_name = "X,Y,Z", value_parser = parse_grid, requires = "manifest")]
    grid: Option<[usize; 3]>,
    /// Target isotropic spacing in mm.
    #[arg(long, value_name = "MM", requires = "manifest")]
    spacing: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Seg,
    Cls,
    Reg,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Seg => Task::Seg,
            TaskArg::Cls => Task::Cls,
            TaskArg::Reg => Task::Reg,
        }
    }
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Fine-tune only this task.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Encoder initialization: `triad` (the experiment's pre-trained encoder), `scratch`, or a
    /// checkpoint path.
    #[arg(long, value_name = "scratch|triad|CKPT")]
    init: Option<String>,
}

fn load(c: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = load_experiment_config(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn through(mut cfg: ExperimentConfig, last: Stage) -> Result<Summary, ExperimentError> {
    cfg.stages = cfg.stages_through(last)?;
    run_experiment(&cfg)
}

fn finetune(a: &FinetuneArgs) -> Result<Summary, ExperimentError> {
    let mut cfg = load(&a.common)?;
    for task in [Task::Seg, Task::Cls, Task::Reg] {
        let selected = a.task.is_none_or(|t| Task::from(t) == task);
        let table = cfg.task_table(task);
        if !selected {
            table.insert("enabled".into(), false.into());
        } else if let Some(init) = &a.init {
            table.insert("init".into(), init.clone().into());
        }
    }
    cfg.validate()?;
    through(cfg, Stage::Finetune)
}

fn parse_grid(s: &str) -> Result<[usize; 3], String> {
    let dims: Vec<usize> = s.split(',').map(|d| d.trim().parse().map_err(|e| format!("`{d}`: {e}"))).collect::<Result<_, _>>()?;
    dims.try_into().map_err(|d: Vec<usize>| format!("expected 3 comma-separated dims, got {}", d.len()))
}

fn preprocess(a: &PreprocessArgs) -> Result<Option<Summary>, ExperimentError> {
    let Some(manifest) = &a.manifest else {
        let common = Common { config: a.config.clone().expect("clap requires --config"), seed: a.seed, out: a.out.clone() };
        return through(load(&common)?, Stage::Preprocess).map(Some);
    };
    let mut pcfg = match &a.config {
        Some(path) => load_experiment_config(path)?.preprocess,
        None => PreprocessConfig::default(),
    };
    if let Some(g) = a.grid {
        pcfg.target_grid = g;
    }
    if let Some(s) = a.spacing {
        pcfg.target_spacing_mm = s;
    }
    pcfg.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
    let m = load_manifest(manifest).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let out = a.out.as_ref().expect("clap requires --out");
    let report = preprocess_manifest(&m, base, out, &pcfg)
        .map_err(|e| ExperimentError::Stage { stage: Stage::Preprocess, msg: e.to_string() })?;
    println!("preprocessed {} volumes into {}", report.manifest.len(), out.display());
    for (id, why) in &report.skipped {
        println!("skipped {id}: {why}");
    }
    Ok(None)
}

fn dispatch(cmd: &Command) -> Result<Option<Summary>, ExperimentError> {
    match cmd {
        Command::PhantomGen(c) => through(load(c)?, Stage::Generate).map(Some),
        Command::Preprocess(a) => preprocess(a),
        Command::Pretrain(c) => through(load(c)?, Stage::Pretrain).map(Some),
        Command::Finetune(a) => finetune(a).map(Some),
        Command::Eval(c) => through(load(c)?, Stage::Eval).map(Some),
        Command::Run(c) => {
            let cfg = load(c)?;
            run_experiment(&cfg).map(Some)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(&cli.command) {
        Ok(Some(summary)) => {
            for r in &summary.stages {
                println!("{:<10} {:>9.2}s  {}", r.stage.name(), r.seconds, &r.hash[..12]);
            }
            for (k, v) in &summary.metrics {
                println!("{k} = {v}");
            }
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
