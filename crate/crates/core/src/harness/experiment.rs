//! Multi-seed, multi-strategy experiment driver and its output layout.
//!
//! ```text
//! <out>/config.toml
//! <out>/metrics.csv                       one row per (strategy, seed, task)
//! <out>/summary.csv                       mean and standard error over seeds
//! <out>/plots/<metric>.svg
//! <out>/seed_<s>/labeler.ckpt
//! <out>/seed_<s>/<strategy>/denoiser_task<i>.ckpt
//! <out>/seed_<s>/<strategy>/classifier_task<i>.ckpt
//! <out>/seed_<s>/<strategy>/grid.png
//! <out>/manifest.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{load_and_split, Dataset};
use super::export::{append_metrics, emit_plots, export_sample_grid, read_metrics, summarize, write_summary, MetricsRow};
use crate::checkpoint::{load_classifier, load_denoiser, save_classifier, save_denoiser};
use crate::classifier::{evaluate_accuracy, train_classifier_task, Classifier, ClassifierReplay};
use crate::denoiser::{Denoiser, MlpEps};
use crate::diffusion::VarianceSchedule;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_generator, train_labeler, EvalRecord, Labeler};
use crate::rng::{stream, substream, Stream};
use crate::strategies::{run_sequence, Strategy, TaskEnd};
use crate::tasks::TaskSequence;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRunEntry {
    pub strategy: String,
    pub completed_tasks: usize,
    pub checkpoints: Vec<PathBuf>,
    pub grid: Option<PathBuf>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    pub class_order: Vec<usize>,
    pub labeler: Option<PathBuf>,
    pub labeler_validation_accuracy: f64,
    pub labeler_reliable: bool,
    pub runs: Vec<StrategyRunEntry>,
}

/// Every file a run produced, relative to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub plots: Vec<PathBuf>,
    pub seeds: Vec<SeedEntry>,
}

impl Manifest {
    pub fn load(out_dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(out_dir.join("manifest.json"))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub manifest: Manifest,
}

impl ExperimentOutcome {
    /// Metrics of `strategy` for `seed` after the last task it completed.
    pub fn final_row(&self, strategy: Strategy, seed: u64) -> Option<&MetricsRow> {
        self.rows.iter().filter(|r| r.strategy == strategy.name() && r.seed == seed).max_by_key(|r| r.task_index)
    }

    pub fn failures(&self) -> Vec<(u64, &StrategyRunEntry)> {
        self.manifest
            .seeds
            .iter()
            .flat_map(|s| s.runs.iter().filter(|r| r.error.is_some()).map(move |r| (s.seed, r)))
            .collect()
    }
}

/// Per-seed data and labeler shared by every strategy of that seed.
pub struct SeedContext {
    pub seed: u64,
    pub data: Dataset,
    pub sequence: TaskSequence,
    pub labeler: Labeler,
}

impl SeedContext {
    pub fn build(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let order = (!cfg.run.class_order.is_empty()).then_some(cfg.run.class_order.as_slice());
        let mut rng = stream(seed, Stream::DataSplit);
        let (data, sequence) =
            load_and_split(&cfg.dataset, cfg.run.tasks, cfg.run.classes_per_task, order, &mut rng)?;
        let labeler =
            train_labeler(&data.train, data.num_classes, &cfg.labeler, &mut stream(seed, Stream::Labeler))?;
        Ok(Self { seed, data, sequence, labeler })
    }
}

fn rel(out: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(out).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

fn record_row(strategy: Strategy, seed: u64, rec: &EvalRecord, accuracy: Option<f64>) -> MetricsRow {
    MetricsRow {
        strategy: strategy.name().to_string(),
        seed,
        task_index: rec.task_index,
        classes: rec.classes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "),
        fid_proxy: rec.fid_proxy,
        kld: rec.kld,
        kld_reverse: rec.kld_reverse,
        classifier_accuracy: accuracy.unwrap_or(f64::NAN),
        n_samples: rec.n_samples,
        eval_steps: rec.eval_steps,
    }
}

/// Train one strategy over the seed's task sequence, training the
/// downstream classifier and evaluating after every task. Rows are appended
/// to `metrics_file` as they are produced.
pub fn run_strategy(
    cfg: &RunConfig,
    ctx: &SeedContext,
    strategy: Strategy,
    schedule: &VarianceSchedule,
    out_dir: &Path,
    metrics_file: &Path,
    log: &mut dyn FnMut(&str),
) -> StrategyRunEntry {
    let seed = ctx.seed;
    let run_dir = out_dir.join(format!("seed_{seed}")).join(strategy.name());
    let mut entry = StrategyRunEntry {
        strategy: strategy.name().to_string(),
        completed_tasks: 0,
        checkpoints: Vec::new(),
        grid: None,
        error: None,
    };
    if let Err(e) = fs::create_dir_all(&run_dir) {
        entry.error = Some(e.to_string());
        return entry;
    }
    let scfg = cfg.strategy.config_for(strategy);
    let ccfg = cfg.classifier.replay_config();
    let seq = &ctx.sequence;
    let init = Denoiser::mlp(cfg.denoiser_descriptor(seq.data_shape()), &mut stream(seed, Stream::ModelInit));
    let mut classifier =
        Classifier::new(cfg.classifier_descriptor(seq.data_dim()), &mut stream(seed, Stream::Classifier));
    let mut prev_generator: Option<Denoiser<MlpEps>> = None;
    let mut checkpoints = Vec::new();

    let hook = |end: TaskEnd<'_, MlpEps>| -> Result<()> {
        let i = end.task_index;
        let accuracy = if cfg.classifier.enabled {
            let prev_classifier = classifier.clone();
            let task_train = &seq.task(i).train;
            let union;
            let (data, replay, allow_plain) = match strategy {
                Strategy::Finetune => (task_train, None, true),
                Strategy::Joint => {
                    union = seq.train_union(i);
                    (&union, None, true)
                }
                _ => (
                    task_train,
                    prev_generator.as_ref().map(|g| ClassifierReplay {
                        prev_classifier: &prev_classifier,
                        generator: g,
                        schedule,
                    }),
                    false,
                ),
            };
            let mut rng = substream(seed, Stream::Classifier, i as u64);
            train_classifier_task(&mut classifier, replay, data, i, allow_plain, &ccfg, &mut rng)?;
            Some(evaluate_accuracy(&classifier, &seq.test_seen(i))?)
        } else {
            None
        };
        let mut rng = substream(seed, Stream::Eval, i as u64);
        let rec = evaluate_generator(
            end.model,
            &ctx.labeler,
            &seq.test_seen(i),
            &seq.classes_seen(i),
            i,
            cfg.eval.n_samples,
            cfg.eval.eval_steps,
            schedule,
            &mut rng,
        )?;
        let row = record_row(strategy, seed, &rec, accuracy);
        append_metrics(metrics_file, &row)?;
        if cfg.run.checkpoints {
            let p = run_dir.join(format!("denoiser_task{i}.ckpt"));
            save_denoiser(&p, end.model)?;
            checkpoints.push(rel(out_dir, &p));
            if cfg.classifier.enabled {
                let p = run_dir.join(format!("classifier_task{i}.ckpt"));
                save_classifier(&p, &classifier)?;
                checkpoints.push(rel(out_dir, &p));
            }
        }
        log(&format!(
            "seed {seed} {strategy} task {i}: fid_proxy {:.4} kld {:.4} accuracy {}",
            rec.fid_proxy,
            rec.kld,
            accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        ));
        prev_generator = Some(end.model.snapshot_frozen());
        Ok(())
    };

    let result = run_sequence(init, &scfg, seq, schedule, seed, hook);
    entry.checkpoints = checkpoints;
    match result {
        Ok(outcome) => {
            entry.completed_tasks = outcome.logs.len();
            let last = outcome.snapshots.last().expect("nonempty sequence");
            if seq.data_shape().len() == 2 {
                let path = run_dir.join("grid.png");
                let mut rng = stream(seed, Stream::Grid);
                match export_sample_grid(
                    last,
                    seq.data_shape(),
                    cfg.eval.grid_samples,
                    cfg.eval.grid_steps,
                    schedule,
                    &path,
                    &mut rng,
                ) {
                    Ok(()) => entry.grid = Some(rel(out_dir, &path)),
                    Err(e) => entry.error = Some(format!("grid export: {e}")),
                }
            }
        }
        Err(failure) => {
            entry.completed_tasks = failure.completed.logs.len();
            log(&format!("seed {seed} {strategy}: {failure}"));
            entry.error = Some(failure.to_string());
        }
    }
    entry
}

/// Run every configured strategy for every seed, then aggregate, plot and
/// write the manifest. A failing strategy run keeps the rows it produced and
/// is reported in the manifest; other runs continue.
pub fn run_experiment(cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out = cfg.run.out.clone();
    fs::create_dir_all(&out)?;
    cfg.save(&out.join("config.toml"))?;
    let metrics_file = out.join("metrics.csv");
    if metrics_file.exists() {
        return Err(Error::Config(format!(
            "{} already exists; choose a fresh output directory",
            metrics_file.display()
        )));
    }
    let schedule = cfg.schedule()?;
    let mut seeds = Vec::new();
    for &seed in &cfg.run.seeds {
        let seed_dir = out.join(format!("seed_{seed}"));
        fs::create_dir_all(&seed_dir)?;
        let ctx = SeedContext::build(cfg, seed)?;
        let acc = ctx.labeler.validation_accuracy();
        log(&format!("seed {seed}: labeler validation accuracy {acc:.4}"));
        if !ctx.labeler.is_reliable() {
            log(&format!("seed {seed}: labeler below the reliability threshold; metrics are flagged"));
        }
        let labeler_path = seed_dir.join("labeler.ckpt");
        save_classifier(&labeler_path, ctx.labeler.classifier())?;
        let mut entry = SeedEntry {
            seed,
            class_order: ctx.sequence.classes_seen(ctx.sequence.len()),
            labeler: Some(rel(&out, &labeler_path)),
            labeler_validation_accuracy: acc,
            labeler_reliable: ctx.labeler.is_reliable(),
            runs: Vec::new(),
        };
        for &strategy in &cfg.strategy.strategy {
            entry.runs.push(run_strategy(cfg, &ctx, strategy, &schedule, &out, &metrics_file, log));
        }
        seeds.push(entry);
    }
    let rows = if metrics_file.exists() { read_metrics(&metrics_file)? } else { Vec::new() };
    let order: Vec<String> = cfg.strategy.strategy.iter().map(|s| s.name().to_string()).collect();
    let summary_file = out.join("summary.csv");
    write_summary(&summary_file, &summarize(&rows, &order))?;
    let plots = if rows.is_empty() {
        Vec::new()
    } else {
        emit_plots(&metrics_file, &out.join("plots"), Some(&order))?
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: PathBuf::from("config.toml"),
        metrics: PathBuf::from("metrics.csv"),
        summary: PathBuf::from("summary.csv"),
        plots: plots.iter().map(|p| rel(&out, p)).collect(),
        seeds,
    };
    fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(ExperimentOutcome { out_dir: out, rows, manifest })
}

/// Re-evaluate a saved denoiser against the labeler stored for `seed`.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    seed: u64,
    denoiser_path: &Path,
    labeler_path: &Path,
    task_index: usize,
) -> Result<EvalRecord> {
    let order = (!cfg.run.class_order.is_empty()).then_some(cfg.run.class_order.as_slice());
    let mut rng = stream(seed, Stream::DataSplit);
    let (_, seq) = load_and_split(&cfg.dataset, cfg.run.tasks, cfg.run.classes_per_task, order, &mut rng)?;
    if task_index < 1 || task_index > seq.len() {
        return Err(Error::InvalidTaskIndex);
    }
    let schedule = cfg.schedule()?;
    let den = load_denoiser(denoiser_path, &cfg.denoiser_descriptor(seq.data_shape()))?;
    let mut labeler_desc = cfg.classifier_descriptor(seq.data_dim());
    labeler_desc.hidden = cfg.labeler.hidden.clone();
    labeler_desc.dropout = cfg.labeler.dropout;
    let labeler = Labeler::new(load_classifier(labeler_path, &labeler_desc)?, f64::NAN);
    evaluate_generator(
        &den,
        &labeler,
        &seq.test_seen(task_index),
        &seq.classes_seen(task_index),
        task_index,
        cfg.eval.n_samples,
        cfg.eval.eval_steps,
        &schedule,
        &mut substream(seed, Stream::Eval, task_index as u64),
    )
}

/// Write a sample grid from a saved denoiser.
pub fn grid_from_checkpoint(
    cfg: &RunConfig,
    data_shape: &[usize],
    denoiser_path: &Path,
    out_path: &Path,
    seed: u64,
) -> Result<()> {
    let den = load_denoiser(denoiser_path, &cfg.denoiser_descriptor(data_shape))?;
    export_sample_grid(
        &den,
        data_shape,
        cfg.eval.grid_samples,
        cfg.eval.grid_steps,
        &cfg.schedule()?,
        out_path,
        &mut stream(seed, Stream::Grid),
    )
}

/// Run the experiment once per value of `key`, each into
/// `<out>/<key>=<value>`.
pub fn sweep(
    cfg: &RunConfig,
    key: &str,
    values: &[String],
    log: &mut dyn FnMut(&str),
) -> Result<Vec<(String, ExperimentOutcome)>> {
    let full = RunConfig::resolve_key(key)?;
    let mut out = Vec::new();
    for v in values {
        let mut c = cfg.clone();
        c.apply_override(&full, v)?;
        c.run.out = cfg.run.out.join(format!("{full}={v}"));
        log(&format!("sweep {full} = {v}"));
        out.push((v.clone(), run_experiment(&c, log)?));
    }
    Ok(out)
}
