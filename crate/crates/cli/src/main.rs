use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cldiff_core::harness::{self, emit_plots, evaluate_checkpoint, grid_from_checkpoint, run_experiment, DataSource};
use cldiff_core::{Manifest, RunConfig};

/// Continual learning experiments for diffusion models.
///
/// Any config key may also be given as a flag: `--lambda 0.5`,
/// `--eval.n_samples 500`, `--resolution 12`. Bare names must be unambiguous.
#[derive(Parser, Debug)]
#[command(name = "cldiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate every configured strategy for every seed.
    Run(ConfigArgs),
    /// Re-evaluate a saved denoiser checkpoint from a finished run.
    Eval(CheckpointArgs),
    /// Write a sample grid from a saved denoiser checkpoint.
    Grid {
        #[command(flatten)]
        ck: CheckpointArgs,
        /// Output PNG path.
        #[arg(long)]
        output: PathBuf,
    },
    /// Render SVG plots from a metrics file.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        /// Directory for the plots; defaults to `plots` next to the metrics file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the experiment once per value of one config key.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Config key to vary, e.g. `strategy.teacher_steps`.
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML config file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Strategy or comma-separated strategies.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    teacher_steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Experience-replay buffer capacity.
    #[arg(long)]
    buffer: Option<usize>,
    /// Comma-separated master seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// `synthetic`, `idx:IMAGES,LABELS` or `csv:PATH`.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Generic override `KEY=VALUE`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    /// Output directory of a finished run.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    strategy: String,
    /// Task whose checkpoint to load; defaults to the last.
    #[arg(long)]
    task: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        let mut set = |k: &str, v: String| cfg.apply_override(k, &v).with_context(|| format!("--{k}"));
        if let Some(v) = &self.strategy {
            set("strategy.strategy", v.clone())?;
        }
        if let Some(v) = self.teacher_steps {
            set("strategy.teacher_steps", v.to_string())?;
        }
        if let Some(v) = self.lambda {
            set("strategy.lambda", v.to_string())?;
        }
        if let Some(v) = self.buffer {
            set("strategy.buffer", v.to_string())?;
        }
        if let Some(v) = &self.seeds {
            set("run.seeds", v.clone())?;
        }
        if let Some(v) = self.tasks {
            set("run.tasks", v.to_string())?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            set(k, v.to_string())?;
        }
        if let Some(v) = &self.out {
            cfg.run.out = v.clone();
        }
        if let Some(spec) = &self.dataset {
            apply_dataset(&mut cfg, spec)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply_dataset(cfg: &mut RunConfig, spec: &str) -> Result<()> {
    let d = &mut cfg.dataset;
    match spec.split_once(':') {
        None if spec == "synthetic" || spec == "synthetic_shapes" => d.source = DataSource::SyntheticShapes,
        Some(("idx", files)) => {
            let (img, lab) = files.split_once(',').context("idx datasets need IMAGES,LABELS")?;
            d.source = DataSource::IdxImageFiles;
            d.path = img.into();
            d.labels_path = lab.into();
        }
        Some(("csv", path)) => {
            d.source = DataSource::CsvPoints;
            d.path = path.into();
        }
        _ => bail!("unrecognized --dataset `{spec}`"),
    }
    Ok(())
}

const NAMED_FLAGS: [&str; 18] = [
    "config", "strategy", "teacher-steps", "lambda", "buffer", "seeds", "dataset", "tasks", "out", "set", "run",
    "seed", "task", "output", "metrics", "key", "values", "help",
];

/// Full dotted keys and leaf names, including ambiguous ones so that the
/// ambiguity is reported by the override instead of as an unknown flag.
fn is_config_key(name: &str) -> bool {
    let name = name.replace('-', "_");
    let leaf = format!(".{name}");
    RunConfig::keys().iter().any(|k| *k == name || k.ends_with(&leaf))
}

/// Turn `--<config key> VALUE` and `--<config key>=VALUE` into
/// `--set key=VALUE` for keys without a dedicated flag.
fn expand_config_flags(args: Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            out.push(arg);
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if NAMED_FLAGS.contains(&name.as_str()) || !is_config_key(&name) {
            out.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => match it.next() {
                Some(v) => v,
                None => {
                    out.push(arg);
                    continue;
                }
            },
        };
        out.push("--set".into());
        out.push(format!("{name}={value}"));
    }
    out
}

fn checkpoint_paths(ck: &CheckpointArgs) -> Result<(RunConfig, PathBuf, PathBuf, usize)> {
    let cfg = RunConfig::load(&ck.run.join("config.toml"))?;
    let manifest = Manifest::load(&ck.run)?;
    let strategy: cldiff_core::Strategy = ck.strategy.parse()?;
    let seed_entry = manifest.seeds.iter().find(|s| s.seed == ck.seed).context("seed not in manifest")?;
    let run = seed_entry
        .runs
        .iter()
        .find(|r| r.strategy == strategy.name())
        .context("strategy not in manifest")?;
    let task = ck.task.unwrap_or(run.completed_tasks);
    if task == 0 {
        bail!("run has no completed tasks");
    }
    let den = ck.run.join(format!("seed_{}", ck.seed)).join(strategy.name()).join(format!("denoiser_task{task}.ckpt"));
    let labeler = ck.run.join(seed_entry.labeler.as_ref().context("run has no labeler")?);
    Ok((cfg, den, labeler, task))
}

fn main() -> ExitCode {
    let cli = Cli::parse_from(expand_config_flags(std::env::args().collect()));
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    let mut log = |m: &str| eprintln!("{m}");
    match cmd {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let outcome = run_experiment(&cfg, &mut log)?;
            println!("{}", outcome.out_dir.join("manifest.json").display());
            for (seed, run) in outcome.failures() {
                eprintln!("seed {seed} {}: {}", run.strategy, run.error.as_deref().unwrap_or(""));
            }
            if !outcome.failures().is_empty() {
                bail!("{} run(s) failed", outcome.failures().len());
            }
        }
        Command::Eval(ck) => {
            let (cfg, den, labeler, task) = checkpoint_paths(&ck)?;
            let rec = evaluate_checkpoint(&cfg, ck.seed, &den, &labeler, task)?;
            println!("{}", format_record(&rec)?);
        }
        Command::Grid { ck, output } => {
            let (cfg, den, _, _) = checkpoint_paths(&ck)?;
            let shape = vec![cfg.dataset.resolution; 2];
            grid_from_checkpoint(&cfg, &shape, &den, &output, ck.seed)?;
            println!("{}", output.display());
        }
        Command::Plot { metrics, out } => {
            let dir = out.unwrap_or_else(|| metrics.parent().map(|p| p.join("plots")).unwrap_or_else(|| "plots".into()));
            for p in emit_plots(&metrics, &dir, None)? {
                println!("{}", p.display());
            }
        }
        Command::Sweep { config, key, values } => {
            let cfg = config.resolve()?;
            for (v, outcome) in harness::sweep(&cfg, &key, &values, &mut log)? {
                println!("{key}={v}\t{}", outcome.out_dir.display());
            }
        }
    }
    Ok(())
}

fn format_record(rec: &cldiff_core::EvalRecord) -> Result<String> {
    Ok(format!(
        "task {} classes {:?} fid_proxy {} kld {} kld_reverse {} n_samples {} eval_steps {}",
        rec.task_index, rec.classes, rec.fid_proxy, rec.kld, rec.kld_reverse, rec.n_samples, rec.eval_steps
    ))
}
