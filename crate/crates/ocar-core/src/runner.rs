//! Experiment runner: materialize a stream, drive a strategy over it with
//! continual evaluation, emit all metric artifacts, and run α × α/τ grid
//! searches. Every run is single-threaded and fully determined by
//! (config, seed).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    ConfigError, DatasetConfig, ExperimentConfig, GridSpec, StrategyConfig, StreamConfig,
};
use crate::data::{to_batch, Example};
use crate::hash::git_blob_hash;
use crate::metrics::{
    self, AccuracyMatrix, CumulativeLossTrack, MetricSummary,
};
use crate::nn::{HeadKind, Network, NnError};
use crate::replay::ReplayBuffer;
use crate::stats::{mean, std_dev};
use crate::strategies::{
    EwcStrategy, HyperParams, NgdStrategy, OcarStrategy, StepInfo, Strategy, StrategyError,
};
use crate::streams::{
    gen_blobs, gen_class_incremental, gen_linear_stream, gen_rotation_stream, load_mnist_train,
    LabeledDataset, StreamError, StreamIter, TaskSpec,
};
use crate::trajectory::{
    surface, write_surface_csv, write_trajectory_csv, GridSpec as PlaneGrid, ProjectionBasis,
};

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "OCAR_DATA";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Unsupported(String),
    #[error("{failures} of {total} runs failed; first: {first}")]
    PartialFailure {
        failures: usize,
        total: usize,
        first: String,
    },
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 3 for numerical and
    /// runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Unsupported(_) => 2,
            _ => 3,
        }
    }
}

/// A stream instantiated from config: tasks plus model-facing facts.
pub struct MaterializedStream {
    pub tasks: Vec<TaskSpec>,
    pub input_dim: usize,
    /// Total label-space size for classification streams.
    pub total_classes: Option<usize>,
    pub regression: bool,
}

fn resolve_dataset(cfg: &DatasetConfig, stream_seed: u64) -> Result<LabeledDataset, RunError> {
    match cfg {
        DatasetConfig::Blobs {
            classes,
            per_class,
            side,
            noise_std,
        } => Ok(gen_blobs(*classes, *per_class, *side, *noise_std, stream_seed)),
        DatasetConfig::Mnist { data_dir } => {
            let dir = dataset_dir(data_dir)?;
            Ok(load_mnist_train(&dir)?)
        }
        DatasetConfig::Auto { data_dir, blobs } => {
            let dir = data_dir
                .clone()
                .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from));
            match dir {
                Some(d) if d.join("train-images-idx3-ubyte").exists()
                    || d.join("train-images-idx3-ubyte.gz").exists() =>
                {
                    Ok(load_mnist_train(&d)?)
                }
                _ => resolve_dataset(blobs, stream_seed),
            }
        }
    }
}

fn dataset_dir(configured: &Option<PathBuf>) -> Result<PathBuf, RunError> {
    configured
        .clone()
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            RunError::Unsupported(format!(
                "dataset needs data_dir in config or the {DATA_ROOT_ENV} environment variable"
            ))
        })
}

/// Instantiate the stream described by the config. Data depend only on
/// `stream_seed`, never on run seeds.
pub fn materialize_stream(
    cfg: &StreamConfig,
    stream_seed: u64,
) -> Result<MaterializedStream, RunError> {
    match cfg {
        StreamConfig::Convex(spec) => {
            let (tasks, _) = gen_linear_stream(spec, stream_seed);
            Ok(MaterializedStream {
                input_dim: spec.input_dim,
                tasks,
                total_classes: None,
                regression: true,
            })
        }
        StreamConfig::ClassIncremental {
            dataset,
            n_tasks,
            classes_per_task,
        } => {
            let data = resolve_dataset(dataset, stream_seed)?;
            let input_dim = data.input_dim();
            let tasks = gen_class_incremental(&data, *n_tasks, *classes_per_task, stream_seed)?;
            Ok(MaterializedStream {
                tasks,
                input_dim,
                total_classes: Some(n_tasks * classes_per_task),
                regression: false,
            })
        }
        StreamConfig::Rotation {
            dataset,
            n_tasks,
            max_angle_deg,
        } => {
            let data = resolve_dataset(dataset, stream_seed)?;
            let input_dim = data.input_dim();
            let classes = data.num_classes;
            let tasks = gen_rotation_stream(&data, *n_tasks, *max_angle_deg, stream_seed)?;
            Ok(MaterializedStream {
                tasks,
                input_dim,
                total_classes: Some(classes),
                regression: false,
            })
        }
    }
}

fn build_network(
    config: &ExperimentConfig,
    stream: &MaterializedStream,
    rng: &mut ChaCha8Rng,
) -> Network {
    if stream.regression {
        return Network::linear_model(stream.input_dim, 1, HeadKind::GaussianMSE);
    }
    let initial_classes = match &config.stream {
        // the rotation stream's label set is fixed; class-incremental heads
        // start minimal and grow as classes arrive
        StreamConfig::Rotation { .. } => stream.total_classes.unwrap(),
        _ => 1,
    };
    Network::mlp(
        stream.input_dim,
        &config.hidden,
        initial_classes,
        HeadKind::SoftmaxCE,
        rng,
    )
}

fn build_strategy(cfg: &StrategyConfig, config: &ExperimentConfig, num_layers: usize) -> Strategy {
    match cfg {
        StrategyConfig::Er { alpha, inner_steps } => Strategy::Er {
            alpha: *alpha,
            inner_steps: *inner_steps,
        },
        StrategyConfig::Ocar {
            alpha,
            delta_tau,
            ema_coeff,
            inner_steps,
            lambda_mode,
            n_mc,
        } => Strategy::Ocar(Box::new(OcarStrategy::new(
            HyperParams {
                alpha: *alpha,
                delta_tau: *delta_tau,
                ema_coeff: *ema_coeff,
                inner_steps: *inner_steps,
                new_batch_size: config.new_batch_size,
                buffer_batch_size: config.buffer_batch_size,
                lambda_mode: lambda_mode.clone(),
                n_mc: *n_mc,
            },
            num_layers,
        ))),
        StrategyConfig::Ewc {
            alpha,
            penalty,
            ema_coeff,
            inner_steps,
        } => {
            let mut s = EwcStrategy::new(*alpha, *penalty, *ema_coeff);
            s.inner_steps = *inner_steps;
            Strategy::Ewc(s)
        }
        StrategyConfig::Ngd {
            alpha,
            damping,
            ema_coeff,
            dense,
            inner_steps,
        } => {
            let mut s = if *dense {
                NgdStrategy::dense(*alpha, *damping, *ema_coeff)
            } else {
                NgdStrategy::kfac(*alpha, *damping, *ema_coeff, num_layers)
            };
            s.inner_steps = *inner_steps;
            Strategy::Ngd(s)
        }
    }
}

/// Per-step diagnostics row (written as JSONL).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub factor_traces: Option<Vec<(f64, f64)>>,
}

/// Everything a single (strategy, seed) run produces.
#[derive(Debug)]
pub struct RunRecord {
    pub strategy: String,
    pub seed: u64,
    pub accuracy: AccuracyMatrix,
    pub losses: CumulativeLossTrack,
    pub diagnostics: Vec<StepDiagnostics>,
    pub summary: MetricSummary,
    /// Global batch index at which each task's data started.
    pub task_boundaries: Vec<usize>,
    /// (step, model) snapshots when trajectory capture is on; the first
    /// entry is the initialization. Each snapshot keeps its own architecture
    /// (the classifier may still be growing).
    pub snapshots: Vec<(usize, Network)>,
    pub network: Network,
}

/// Run one strategy for one seed over a materialized stream.
pub fn run_single(
    config: &ExperimentConfig,
    strategy_cfg: &StrategyConfig,
    stream: &MaterializedStream,
    seed: u64,
) -> Result<RunRecord, RunError> {
    match run_single_partial(config, strategy_cfg, stream, seed) {
        (_, Some(err)) => Err(err),
        (record, None) => Ok(record),
    }
}

/// Like [`run_single`], but a mid-run failure still yields the partial
/// record accumulated so far (with the error alongside), so the artifacts
/// can be persisted with a failure marker.
pub fn run_single_partial(
    config: &ExperimentConfig,
    strategy_cfg: &StrategyConfig,
    stream: &MaterializedStream,
    seed: u64,
) -> (RunRecord, Option<RunError>) {
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(0);
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    train_rng.set_stream(1);

    let mut net = build_network(config, stream, &mut init_rng);
    let mut strategy = build_strategy(strategy_cfg, config, net.layers.len());
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);

    let mut accuracy = AccuracyMatrix::default();
    let mut losses = CumulativeLossTrack::default();
    let mut diagnostics = Vec::new();
    let mut task_boundaries = Vec::new();
    let mut snapshots = Vec::new();
    let mut history: Vec<Example> = Vec::new();

    if config.trajectory {
        snapshots.push((0, net.clone()));
    }

    let mut iter = StreamIter::new(&stream.tasks, config.new_batch_size, config.stream_seed);
    let mut tasks_seen = 0usize;
    let mut last_eval_step = None;
    let mut failure: Option<RunError> = None;
    while let Some(batch) = iter.next() {
        let step = batch.global_step;
        let started = iter.tasks_started();
        if started > tasks_seen {
            for _ in tasks_seen..started {
                task_boundaries.push(step);
            }
            // boundary snapshot: the model right before the new task's data
            if config.trajectory && step > 0 {
                snapshots.push((step, net.clone()));
            }
            tasks_seen = started;
        }

        // grow the classifier when labels beyond the current head arrive
        let mut grew = false;
        if !stream.regression {
            let max_label = batch
                .examples
                .iter()
                .filter_map(|e| e.target.class_id())
                .max()
                .unwrap_or(0);
            if max_label >= net.out_dim() {
                grew = net.grow_classifier(max_label + 1, &mut init_rng);
            }
        }

        // loss experienced on the incoming batch, before the update
        let (new_inputs, new_targets) = to_batch(&batch.examples);
        let lp_batch = match net.loss_value(&new_inputs, &new_targets) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e.into());
                break;
            }
        };

        let buf_batch = if buffer.is_empty() {
            Vec::new()
        } else {
            buffer
                .sample(config.buffer_batch_size, &mut train_rng)
                .expect("non-empty buffer")
        };

        let info: StepInfo = match strategy.observe_batch(
            &mut net,
            &batch.examples,
            &buf_batch,
            grew,
            &buffer,
            &mut train_rng,
        ) {
            Ok(info) => info,
            Err(e) => {
                failure = Some(e.into());
                break;
            }
        };

        // buffer update after the inner steps
        buffer.reservoir_update(&batch.examples, &mut train_rng);

        let ls_now = if config.track_full_history {
            history.extend(batch.examples.iter().cloned());
            let (hx, ht) = to_batch(&history);
            match net.loss_value(&hx, &ht) {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(e.into());
                    break;
                }
            }
        } else {
            0.0
        };
        losses.track(lp_batch, ls_now);

        diagnostics.push(StepDiagnostics {
            step,
            train_loss: info.train_loss,
            tau: info.tau,
            lambda: info.lambda,
            grad_norm_ratio: info.grad_ratio.map(|r| r.ratio),
            factor_traces: match &strategy {
                Strategy::Ocar(s) => Some(s.kfac.factor_traces()),
                _ => None,
            },
        });

        if config.trajectory && config.snapshot_every > 0 && (step + 1) % config.snapshot_every == 0
        {
            snapshots.push((step + 1, net.clone()));
        }

        if !stream.regression && config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            let sets: Vec<&[Example]> = stream.tasks[..tasks_seen]
                .iter()
                .map(|t| t.eval.as_slice())
                .collect();
            accuracy.push_row(step + 1, metrics::evaluate(&net, &sets));
            last_eval_step = Some(step + 1);
        }
    }
    let total_steps = iter.num_batches();

    // final evaluation if the cadence missed the last step (skipped when the
    // run aborted: the partial record keeps only what was measured)
    if failure.is_none()
        && !stream.regression
        && config.eval_every > 0
        && last_eval_step != Some(total_steps)
        && tasks_seen > 0
    {
        let sets: Vec<&[Example]> = stream.tasks[..tasks_seen]
            .iter()
            .map(|t| t.eval.as_slice())
            .collect();
        accuracy.push_row(total_steps, metrics::evaluate(&net, &sets));
    }
    if config.trajectory && failure.is_none() {
        snapshots.push((total_steps, net.clone()));
    }

    let probed_acc = if failure.is_none()
        && config.probe
        && !stream.regression
        && net.layers.len() >= 2
    {
        let train: Vec<Example> = stream.tasks.iter().flat_map(|t| t.train.clone()).collect();
        let eval: Vec<Example> = stream.tasks.iter().flat_map(|t| t.eval.clone()).collect();
        Some(metrics::linear_probe(&net, &train, &eval, seed))
    } else {
        None
    };

    let summary = MetricSummary {
        acc: (!accuracy.is_empty()).then(|| metrics::final_acc(&accuracy)),
        aaa: (!accuracy.is_empty()).then(|| metrics::aaa(&accuracy)),
        wc_acc: (!accuracy.is_empty()).then(|| metrics::wc_acc(&accuracy)),
        forgetting_task1: (accuracy.rows.len() >= 2).then(|| metrics::forgetting_task1(&accuracy)),
        probed_acc,
        lp_final: Some(losses.lp),
        ls_final: config.track_full_history.then_some(losses.ls),
    };

    (
        RunRecord {
            strategy: strategy_cfg.name().to_string(),
            seed,
            accuracy,
            losses,
            diagnostics,
            summary,
            task_boundaries,
            snapshots,
            network: net,
        },
        failure,
    )
}

/// Metadata written into every run directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub strategy: String,
    pub seed: u64,
    pub stream_seed: u64,
    pub config_hash: String,
    pub task_boundaries: Vec<usize>,
    pub eval_every: usize,
    /// Documented stand-in formula: per-step worst case over all encountered
    /// tasks including the current one, averaged over evaluation steps.
    pub wc_acc_formula: String,
}

fn write_losses_csv(losses: &CumulativeLossTrack, path: &Path) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,lp_cumulative,ls_cumulative")?;
    for (i, (lp, ls)) in losses.lp_series.iter().zip(&losses.ls_series).enumerate() {
        writeln!(f, "{i},{lp},{ls}")?;
    }
    Ok(())
}

/// Persist one run's artifacts under `dir`.
pub fn write_run(record: &RunRecord, config: &ExperimentConfig, dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.cfg"), &config.source_text)?;
    let meta = RunMeta {
        strategy: record.strategy.clone(),
        seed: record.seed,
        stream_seed: config.stream_seed,
        config_hash: git_blob_hash(config.source_text.as_bytes()),
        task_boundaries: record.task_boundaries.clone(),
        eval_every: config.eval_every,
        wc_acc_formula: "mean over eval steps of min accuracy over encountered tasks".into(),
    };
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&meta).unwrap())?;
    metrics::write_accuracy_csv(&record.accuracy, &dir.join("accuracy.csv"))?;
    write_losses_csv(&record.losses, &dir.join("losses.csv"))?;
    let mut diag = std::fs::File::create(dir.join("diagnostics.jsonl"))?;
    for row in &record.diagnostics {
        writeln!(diag, "{}", serde_json::to_string(row).unwrap())?;
    }
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&record.summary).unwrap(),
    )?;
    if config.trajectory && !record.snapshots.is_empty() {
        let snap_dir = dir.join("snapshots");
        std::fs::create_dir_all(&snap_dir)?;
        for (step, snap) in &record.snapshots {
            crate::nn::write_snapshot(snap, &snap_dir.join(format!("step_{step:06}.bin")))?;
        }
        crate::nn::write_snapshot(&record.network, &snap_dir.join("final.bin"))?;
    }
    Ok(())
}

/// Per-strategy aggregate over seeds: mean ± sample std of each metric.
#[derive(Debug, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MeanStd>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn aggregate(strategy: &str, seeds: &[u64], records: &[&RunRecord]) -> AggregateSummary {
    let mut metrics_map: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut push = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            metrics_map.entry(name.to_string()).or_default().push(v);
        }
    };
    for r in records {
        push("acc", r.summary.acc);
        push("aaa", r.summary.aaa);
        push("wc_acc", r.summary.wc_acc);
        push("forgetting_task1", r.summary.forgetting_task1);
        push("probed_acc", r.summary.probed_acc);
        push("lp_final", r.summary.lp_final);
        push("ls_final", r.summary.ls_final);
    }
    AggregateSummary {
        strategy: strategy.to_string(),
        seeds: seeds.to_vec(),
        metrics: metrics_map
            .into_iter()
            .map(|(k, vs)| {
                (
                    k,
                    MeanStd {
                        mean: mean(&vs),
                        std: std_dev(&vs),
                    },
                )
            })
            .collect(),
    }
}

/// Run every configured strategy for every seed, writing artifacts under
/// `out_root/<strategy>/seed_<n>/` plus per-strategy aggregates. Failures
/// leave a `failure.json` marker in the run directory and are reported after
/// the remaining runs complete.
pub fn run(config: &ExperimentConfig, out_root: &Path) -> Result<Vec<RunRecord>, RunError> {
    let stream = materialize_stream(&config.stream, config.stream_seed)?;
    std::fs::create_dir_all(out_root)?;
    std::fs::write(out_root.join("config.cfg"), &config.source_text)?;

    let mut records = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    let total = config.strategies.len() * config.seeds.len();
    for strategy_cfg in &config.strategies {
        let mut strat_records: Vec<&RunRecord> = Vec::new();
        let strat_dir = out_root.join(strategy_cfg.name());
        let start = records.len();
        for &seed in &config.seeds {
            let dir = strat_dir.join(format!("seed_{seed}"));
            match run_single_partial(config, strategy_cfg, &stream, seed) {
                (record, None) => {
                    write_run(&record, config, &dir)?;
                    records.push(record);
                }
                (partial, Some(e)) => {
                    // persist what was measured before the failure, plus a
                    // marker describing it
                    write_run(&partial, config, &dir)?;
                    std::fs::write(
                        dir.join("failure.json"),
                        serde_json::json!({
                            "strategy": strategy_cfg.name(),
                            "seed": seed,
                            "steps_completed": partial.diagnostics.len(),
                            "error": e.to_string(),
                        })
                        .to_string(),
                    )?;
                    failures.push(format!("{}/seed_{}: {}", strategy_cfg.name(), seed, e));
                }
            }
        }
        strat_records.extend(records[start..].iter());
        if !strat_records.is_empty() {
            let agg = aggregate(strategy_cfg.name(), &config.seeds, &strat_records);
            std::fs::create_dir_all(&strat_dir)?;
            std::fs::write(
                strat_dir.join("summary_agg.json"),
                serde_json::to_string_pretty(&agg).unwrap(),
            )?;
        }
    }
    if let Some(first) = failures.first() {
        return Err(RunError::PartialFailure {
            failures: failures.len(),
            total,
            first: first.clone(),
        });
    }
    Ok(records)
}

/// One grid-search cell result (seed means).
#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub alpha: f64,
    pub ratio: f64,
    pub delta_tau: f64,
    pub acc: f64,
    pub forgetting_task1: f64,
    pub final_task_acc: f64,
}

/// Grid search over α and α/τ for the OCAR strategy.
///
/// The ratio axis fixes where τ should sit at a reference step (the step
/// count of task 1): `Δτ = α·(1/ratio − 1)/T_ref`, clamped at zero because τ
/// starts at α and never decreases.
pub fn grid_search(
    config: &ExperimentConfig,
    grid: &GridSpec,
    out_root: &Path,
) -> Result<Vec<GridCell>, RunError> {
    let base = config
        .strategy("ocar")
        .ok_or_else(|| RunError::Unsupported("grid search needs an [strategy.ocar] section".into()))?
        .clone();
    let stream = materialize_stream(&config.stream, config.stream_seed)?;
    let StrategyConfig::Ocar { inner_steps, .. } = &base else {
        unreachable!()
    };
    let task1_batches = stream.tasks[0]
        .train
        .len()
        .div_ceil(config.new_batch_size);
    let t_ref = (task1_batches * inner_steps.max(&1)) as f64;

    std::fs::create_dir_all(out_root)?;
    let mut cells = Vec::new();
    for &alpha in &grid.alphas {
        for &ratio in &grid.ratios {
            let delta_tau = (alpha * (1.0 / ratio - 1.0) / t_ref).max(0.0);
            let cell_cfg = match base.clone() {
                StrategyConfig::Ocar {
                    ema_coeff,
                    inner_steps,
                    lambda_mode,
                    n_mc,
                    ..
                } => StrategyConfig::Ocar {
                    alpha,
                    delta_tau,
                    ema_coeff,
                    inner_steps,
                    lambda_mode,
                    n_mc,
                },
                _ => unreachable!(),
            };
            let mut accs = Vec::new();
            let mut forgets = Vec::new();
            let mut finals = Vec::new();
            for &seed in &config.seeds {
                // a diverged cell is a legitimate grid outcome (the unstable
                // corner of the α × α/τ plane); record it as NaN instead of
                // aborting the sweep
                let record = match run_single(config, &cell_cfg, &stream, seed) {
                    Ok(r) => r,
                    Err(RunError::Strategy(_)) => continue,
                    Err(e) => return Err(e),
                };
                if let Some(a) = record.summary.acc {
                    accs.push(a);
                }
                if let Some(f) = record.summary.forgetting_task1 {
                    forgets.push(f);
                }
                if let Some(last) = record.accuracy.rows.last() {
                    finals.push(*last.acc.last().unwrap());
                }
            }
            let agg = |vs: &[f64]| if vs.is_empty() { f64::NAN } else { mean(vs) };
            cells.push(GridCell {
                alpha,
                ratio,
                delta_tau,
                acc: agg(&accs),
                forgetting_task1: agg(&forgets),
                final_task_acc: agg(&finals),
            });
        }
    }

    let mut f = std::fs::File::create(out_root.join("grid.csv"))?;
    writeln!(f, "alpha,ratio,delta_tau,acc,forgetting_task1,final_task_acc")?;
    for c in &cells {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            c.alpha, c.ratio, c.delta_tau, c.acc, c.forgetting_task1, c.final_task_acc
        )?;
    }
    std::fs::write(
        out_root.join("grid_meta.json"),
        serde_json::json!({
            "t_ref_steps": t_ref,
            "t_ref_definition": "batches in task 1 times inner steps",
            "delta_tau_rule": "max(0, alpha * (1/ratio - 1) / t_ref)",
            "seeds": config.seeds,
        })
        .to_string(),
    )?;
    Ok(cells)
}

/// Build the 2D loss-surface artifacts for a finished trajectory run.
///
/// Reads the run directory's config copy and snapshots, rebuilds the stream
/// and the projection plane through (init, end of task 1, final), and writes
/// `surface.csv` plus `trajectory.csv`.
pub fn surface_from_run(run_dir: &Path, grid_cells: usize) -> Result<(), RunError> {
    let config = ExperimentConfig::from_text(&std::fs::read_to_string(run_dir.join("config.cfg"))?)?;
    let meta: RunMeta = serde_json::from_str(&std::fs::read_to_string(run_dir.join("run.json"))?)
        .map_err(|e| RunError::Unsupported(format!("bad run.json: {e}")))?;
    let stream = materialize_stream(&config.stream, meta.stream_seed)?;
    let snap_dir = run_dir.join("snapshots");
    let mut step_files: Vec<(usize, PathBuf)> = std::fs::read_dir(&snap_dir)?
        .filter_map(|e| {
            let p = e.ok()?.path();
            let name = p.file_name()?.to_str()?.to_string();
            let step = name
                .strip_prefix("step_")?
                .strip_suffix(".bin")?
                .parse()
                .ok()?;
            Some((step, p))
        })
        .collect();
    step_files.sort();
    if step_files.len() < 3 {
        return Err(RunError::Unsupported(
            "need at least 3 snapshots (init, boundary, final) for a surface".into(),
        ));
    }
    let template = crate::nn::read_snapshot(&snap_dir.join("final.bin"))?;
    // snapshots taken before the classifier finished growing live in a
    // smaller parameter space; embed them by zero-filling the rows of
    // classes that did not exist yet (old-class parameters are preserved
    // exactly under growth, so this is the canonical inclusion)
    let load = |p: &Path| -> Result<Vec<f64>, RunError> {
        Ok(embed_params(&crate::nn::read_snapshot(p)?, &template))
    };
    let w0 = load(&step_files[0].1)?;
    // anchor at the end of the first task: the snapshot at the second task's
    // start boundary (or the nearest snapshot at/after it)
    let boundary_step = meta.task_boundaries.get(1).copied().unwrap_or(1);
    let boundary_file = step_files
        .iter()
        .find(|(s, _)| *s >= boundary_step)
        .unwrap_or(&step_files[step_files.len() / 2]);
    let w1 = load(&boundary_file.1)?;
    let wn = load(&snap_dir.join("final.bin"))?;
    let basis = ProjectionBasis::build(&w0, &w1, &wn)
        .map_err(|e| RunError::Unsupported(e.to_string()))?;

    let mut points = Vec::new();
    for (step, p) in &step_files {
        let w = load(p)?;
        let (x, y) = basis.coords(&w);
        points.push((*step, x, y));
    }
    let coords: Vec<(f64, f64)> = points.iter().map(|(_, x, y)| (*x, *y)).collect();
    let grid = PlaneGrid::covering(&coords, 1.2, grid_cells, grid_cells);
    let sets: Vec<&[Example]> = stream.tasks.iter().map(|t| t.eval.as_slice()).collect();
    let surf = surface(&basis, &grid, &sets, &template)
        .map_err(|e| RunError::Unsupported(e.to_string()))?;
    write_surface_csv(&surf, &run_dir.join("surface.csv"))?;
    write_trajectory_csv(&points, &run_dir.join("trajectory.csv"))?;
    Ok(())
}

/// Flatten `net`'s parameters in `template`'s architecture, zero-filling
/// classifier rows the snapshot does not have yet.
fn embed_params(net: &Network, template: &Network) -> Vec<f64> {
    assert_eq!(net.layers.len(), template.layers.len());
    let mut out = Vec::with_capacity(template.num_params());
    for (l, (small, big)) in net.layers.iter().zip(&template.layers).enumerate() {
        assert_eq!(small.in_dim(), big.in_dim(), "layer {l} input dim differs");
        for row in 0..big.out_dim() {
            if row < small.out_dim() {
                out.extend_from_slice(small.weight.row(row));
            } else {
                out.extend(std::iter::repeat_n(0.0, big.in_dim()));
            }
        }
        for row in 0..big.out_dim() {
            out.push(if row < small.out_dim() {
                small.bias.data[row]
            } else {
                0.0
            });
        }
    }
    out
}

/// Linear-probe a saved snapshot against a labeled dataset directory.
pub fn probe_snapshot(
    snapshot: &Path,
    data_dir: Option<&Path>,
    seed: u64,
) -> Result<f64, RunError> {
    let net = crate::nn::read_snapshot(snapshot)?;
    let dir = dataset_dir(&data_dir.map(PathBuf::from))?;
    let data = load_mnist_train(&dir)?;
    // 90/10 split, seeded for reproducibility
    let mut idx: Vec<usize> = (0..data.len()).collect();
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_eval = (idx.len() / 10).max(1);
    let build = |indices: &[usize]| -> Vec<Example> {
        indices
            .iter()
            .map(|&i| Example::class(data.inputs[i].clone(), data.labels[i]))
            .collect()
    };
    let eval = build(&idx[..n_eval]);
    let train = build(&idx[n_eval..]);
    Ok(metrics::linear_probe(&net, &train, &eval, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::linalg::Matrix;

    fn tiny_convex_config(strategies: &str) -> ExperimentConfig {
        let text = format!(
            "[experiment]\nname = tiny\nseeds = 1\nstream_seed = 5\nbuffer_capacity = 50\n\
             eval_every = 0\nnew_batch_size = 10\nbuffer_batch_size = 10\n\
             track_full_history = true\nstrategies = {strategies}\n\
             [stream]\nkind = convex\ntasks = 3\nsamples_per_task = 100\neval_per_task = 20\n\
             [strategy.er]\nalpha = 0.03\n\
             [strategy.ewc]\nalpha = 0.03\npenalty = 1.0\n\
             [strategy.ngd]\nalpha = 0.3\ndamping = 0.01\nmode = dense\n\
             [strategy.ocar]\nalpha = 0.3\ndelta_tau = 0.001\nlambda_mode = time_growth\n"
        );
        ExperimentConfig::from_text(&text).unwrap()
    }

    #[test]
    fn convex_run_produces_losses() {
        let config = tiny_convex_config("er,ocar");
        let stream = materialize_stream(&config.stream, config.stream_seed).unwrap();
        for strat in &config.strategies {
            let record = run_single(&config, strat, &stream, 1).unwrap();
            assert_eq!(record.losses.lp_series.len(), 30);
            assert!(record.losses.lp > 0.0);
            assert!(record.losses.ls > 0.0);
            assert!(record.summary.acc.is_none());
            assert_eq!(record.task_boundaries, vec![0, 10, 20]);
        }
    }

    #[test]
    fn full_history_loss_matches_sufficient_statistics_oracle() {
        // for the linear model with ½·MSE, the loss over all seen data equals
        // (½wᵀ(XᵀX)w − wᵀ(Xᵀy) + ½yᵀy)/n computed from running sufficient
        // statistics
        let config = tiny_convex_config("er");
        let stream = materialize_stream(&config.stream, config.stream_seed).unwrap();
        let record = run_single(&config, &config.strategies[0], &stream, 1).unwrap();

        // replay the stream batches and maintain XᵀX, Xᵀy, yᵀy
        let mut net = Network::linear_model(10, 1, HeadKind::GaussianMSE);
        let mut train_rng = ChaCha8Rng::seed_from_u64(1);
        train_rng.set_stream(1);
        let mut buffer = ReplayBuffer::new(config.buffer_capacity);
        let d = 11; // augmented with bias
        let mut xtx = Matrix::zeros(d, d);
        let mut xty = vec![0.0; d];
        let mut yty = 0.0;
        let mut n = 0.0;
        for (i, batch) in StreamIter::new(&stream.tasks, 10, config.stream_seed).enumerate() {
            let buf_batch = if buffer.is_empty() {
                Vec::new()
            } else {
                buffer.sample(10, &mut train_rng).unwrap()
            };
            crate::strategies::er_step(&mut net, &batch.examples, &buf_batch, 0.03, &mut train_rng)
                .unwrap();
            buffer.reservoir_update(&batch.examples, &mut train_rng);
            for ex in &batch.examples {
                let mut x = ex.input.clone();
                x.push(1.0);
                let y = match &ex.target {
                    crate::data::Target::Values(v) => v[0],
                    _ => unreachable!(),
                };
                for a in 0..d {
                    for b in 0..d {
                        xtx[(a, b)] += x[a] * x[b];
                    }
                    xty[a] += x[a] * y;
                }
                yty += y * y;
                n += 1.0;
            }
            // oracle loss from sufficient statistics
            let mut w = net.layers[0].weight.row(0).to_vec();
            w.push(net.layers[0].bias.data[0]);
            let mut quad = 0.0;
            for a in 0..d {
                for b in 0..d {
                    quad += w[a] * xtx[(a, b)] * w[b];
                }
            }
            let lin: f64 = w.iter().zip(&xty).map(|(a, b)| a * b).sum();
            let oracle = (0.5 * quad - lin + 0.5 * yty) / n;
            let got = record.losses.ls_series[i]
                - if i == 0 {
                    0.0
                } else {
                    record.losses.ls_series[i - 1]
                };
            assert!(
                (got - oracle).abs() <= 1e-8 * oracle.abs().max(1.0),
                "step {i}: ls increment {got:.10} vs oracle {oracle:.10}"
            );
        }
    }

    #[test]
    fn classification_run_produces_accuracy_and_growth() {
        let text = "[experiment]\nname = cls\nseeds = 2\nstream_seed = 3\nbuffer_capacity = 60\n\
             eval_every = 5\nnew_batch_size = 10\nbuffer_batch_size = 10\nstrategies = ocar\nprobe = true\n\
             [stream]\nkind = class_incremental\ndataset = blobs\nn_tasks = 3\nclasses_per_task = 2\n\
             blobs_classes = 6\nblobs_per_class = 40\nblobs_side = 3\nblobs_noise = 0.5\n\
             [model]\nhidden = 16\n\
             [strategy.ocar]\nalpha = 0.1\ndelta_tau = 0.001\nlambda_mode = class_ratio\n";
        let config = ExperimentConfig::from_text(text).unwrap();
        let stream = materialize_stream(&config.stream, config.stream_seed).unwrap();
        let record = run_single(&config, &config.strategies[0], &stream, 2).unwrap();
        assert!(!record.accuracy.is_empty());
        assert_eq!(record.task_boundaries.len(), 3);
        // head grew to all six classes
        assert_eq!(record.network.out_dim(), 6);
        assert!(record.summary.acc.is_some());
        assert!(record.summary.probed_acc.is_some());
        // final row covers all three tasks
        assert_eq!(record.accuracy.rows.last().unwrap().acc.len(), 3);
    }

    #[test]
    fn run_writes_artifacts_and_is_byte_deterministic() {
        let dir = std::env::temp_dir().join("ocar_runner_determinism");
        let _ = std::fs::remove_dir_all(&dir);
        let mut config = tiny_convex_config("er");
        config.seeds = vec![7];
        let out_a = dir.join("a");
        let out_b = dir.join("b");
        run(&config, &out_a).unwrap();
        run(&config, &out_b).unwrap();
        for file in ["er/seed_7/losses.csv", "er/seed_7/accuracy.csv", "er/seed_7/summary.json"] {
            let a = std::fs::read(out_a.join(file)).unwrap();
            let b = std::fs::read(out_b.join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical runs");
        }
        assert!(out_a.join("er/summary_agg.json").exists());
        assert!(out_a.join("er/seed_7/run.json").exists());
        assert!(out_a.join("er/seed_7/config.cfg").exists());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn grid_search_cell_count_and_delta_tau_rule() {
        let text = "[experiment]\nname = g\nseeds = 1\nstream_seed = 3\nbuffer_capacity = 40\n\
             eval_every = 5\nnew_batch_size = 10\nbuffer_batch_size = 10\nstrategies = ocar\n\
             [stream]\nkind = class_incremental\ndataset = blobs\nn_tasks = 2\nclasses_per_task = 2\n\
             blobs_classes = 4\nblobs_per_class = 30\nblobs_side = 3\nblobs_noise = 0.5\n\
             [model]\nhidden = 8\n\
             [strategy.ocar]\nalpha = 0.1\ndelta_tau = 0.0\nlambda_mode = class_ratio\n";
        let config = ExperimentConfig::from_text(text).unwrap();
        let grid = GridSpec {
            alphas: vec![0.05, 0.1],
            ratios: vec![1.0, 0.1],
        };
        let dir = std::env::temp_dir().join("ocar_grid_test");
        let _ = std::fs::remove_dir_all(&dir);
        let cells = grid_search(&config, &grid, &dir).unwrap();
        assert_eq!(cells.len(), 4);
        // ratio 1 pins τ at α: no growth; smaller ratios grow τ
        for c in &cells {
            if c.ratio >= 1.0 {
                assert_eq!(c.delta_tau, 0.0);
            } else {
                assert!(c.delta_tau > 0.0);
            }
            assert!((0.0..=1.0).contains(&c.acc));
        }
        // 1×1 grid is a single run
        let single = grid_search(
            &config,
            &GridSpec { alphas: vec![0.1], ratios: vec![1.0] },
            &dir,
        )
        .unwrap();
        assert_eq!(single.len(), 1);
        assert!(dir.join("grid.csv").exists());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn trajectory_snapshots_and_surface_artifacts() {
        let text = "[experiment]\nname = t\nseeds = 4\nstream_seed = 9\nbuffer_capacity = 60\n\
             eval_every = 5\nnew_batch_size = 10\nbuffer_batch_size = 10\nstrategies = er\n\
             trajectory = true\nsnapshot_every = 5\n\
             [stream]\nkind = class_incremental\ndataset = blobs\nn_tasks = 2\nclasses_per_task = 2\n\
             blobs_classes = 4\nblobs_per_class = 50\nblobs_side = 3\nblobs_noise = 0.5\n\
             [model]\nhidden = 8\n\
             [strategy.er]\nalpha = 0.1\n";
        let config = ExperimentConfig::from_text(text).unwrap();
        let dir = std::env::temp_dir().join("ocar_surface_test");
        let _ = std::fs::remove_dir_all(&dir);
        run(&config, &dir).unwrap();
        let run_dir = dir.join("er/seed_4");
        assert!(run_dir.join("snapshots/final.bin").exists());
        surface_from_run(&run_dir, 5).unwrap();
        let surface_text = std::fs::read_to_string(run_dir.join("surface.csv")).unwrap();
        // 5×5 grid plus header; loss columns for 2 tasks plus average
        assert_eq!(surface_text.lines().count(), 26);
        assert!(surface_text.starts_with("x,y,loss_task_0,loss_task_1,loss_avg"));
        assert!(run_dir.join("trajectory.csv").exists());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn failed_runs_persist_partial_records_with_marker() {
        // a learning rate past the stability edge with no damping growth:
        // the factors explode after some steps and inversion aborts at the
        // escalation cap; the run directory must still hold the partial
        // artifacts plus the failure marker
        let text = "[experiment]\nname = boom\nseeds = 1\nstream_seed = 77\nbuffer_capacity = 100\n\
             eval_every = 10\nnew_batch_size = 10\nbuffer_batch_size = 10\nstrategies = ocar\n\
             [stream]\nkind = class_incremental\ndataset = blobs\nn_tasks = 5\nclasses_per_task = 2\n\
             blobs_classes = 10\nblobs_per_class = 400\nblobs_side = 8\nblobs_noise = 2.5\n\
             [model]\nhidden = 100,100\n\
             [strategy.ocar]\nalpha = 0.2\ndelta_tau = 0.0001\nema_coeff = 0.05\ninner_steps = 3\n\
             lambda_mode = class_ratio\nclasses_per_task = 2\n";
        let config = ExperimentConfig::from_text(text).unwrap();
        let dir = std::env::temp_dir().join("ocar_partial_failure_test");
        let _ = std::fs::remove_dir_all(&dir);
        let err = run(&config, &dir).unwrap_err();
        assert!(matches!(err, RunError::PartialFailure { .. }));
        let run_dir = dir.join("ocar/seed_1");
        let marker: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(run_dir.join("failure.json")).unwrap())
                .unwrap();
        assert!(marker["error"].as_str().unwrap().contains("positive definite"));
        // the pre-failure steps were persisted alongside the marker
        assert!(marker["steps_completed"].as_u64().unwrap() >= 1);
        let diag = std::fs::read_to_string(run_dir.join("diagnostics.jsonl")).unwrap();
        assert!(diag.lines().count() >= 1);
        assert!(run_dir.join("summary.json").exists());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn presets_materialize() {
        // every preset's stream builds without downloads (auto falls back to
        // blobs when no MNIST directory is configured)
        std::env::remove_var(DATA_ROOT_ENV);
        for name in ["convex_appd", "split_mnist5", "rotation10", "grid_fig2"] {
            let cfg = ExperimentConfig::from_text(preset(name).unwrap()).unwrap();
            let stream = materialize_stream(&cfg.stream, cfg.stream_seed).unwrap();
            assert!(!stream.tasks.is_empty(), "{name} produced no tasks");
        }
    }

    use crate::nn::{HeadKind, Network};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
