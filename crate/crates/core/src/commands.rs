//! Run-level operations behind the command-line tool. Each command reads and
//! writes files and returns a summary; the caller decides how to print it.
//!
//! Files written by [`cmd_train`] into the output directory:
//! `config.json`, `metrics.csv`, `trajectories.csv` (when the graph has a
//! series layer) and `checkpoint.lslu`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{
    ablate_n, ablation_csv, class_selectivity, histogram_csv, latency_bench, selectivity_csv, trajectory_csv,
    AblationRow, LatencyStats, SelectivityReport,
};
use crate::config::{DatasetKind, RunConfig};
use crate::data::{Checkpoint, CheckpointMeta, Dataset, Split};
use crate::error::{Error, Result};
use crate::fusion::{equivalence_report, fuse_network, EquivalenceReport, NotFoldable};
use crate::networks::{gradcheck_graph, GradcheckOptions, GradcheckReport, LayerGraph};
use crate::rng::{self, Stream};
use crate::tensor::{DType, Real, Tensor};
use crate::train::{self, evaluate, metrics_csv, EvalReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.lslu";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAJECTORY_FILE: &str = "trajectories.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SELECTIVITY_FILE: &str = "selectivity.csv";
pub const HISTOGRAM_FILE: &str = "selectivity_hist.csv";

/// Largest tolerated fused-versus-original difference per element type.
pub fn fusion_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-5,
        DType::F64 => 1e-10,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub epochs_run: usize,
    pub final_val_acc: f64,
    pub stopped_early: bool,
    pub params: usize,
}

/// Trains the configured model and writes the run's files.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    match cfg.dtype {
        DType::F32 => train_typed::<f32>(cfg),
        DType::F64 => train_typed::<f64>(cfg),
    }
}

fn train_typed<T: Real>(cfg: &RunConfig) -> Result<TrainSummary> {
    let splits = train::load_splits::<T>(cfg)?;
    let graph = train::build_graph::<T>(cfg, splits.train.sample_shape(), splits.train.classes)?;
    let params = graph.param_count();
    let out = train::train(cfg, graph, &splits.train, &splits.test)?;
    let dir = &cfg.out;
    write(&dir.join(CONFIG_FILE), cfg.to_json()?)?;
    write(&dir.join(METRICS_FILE), metrics_csv(&out.metrics))?;
    if !out.trajectories.is_empty() {
        write(&dir.join(TRAJECTORY_FILE), trajectory_csv(&out.trajectories))?;
    }
    let meta = CheckpointMeta::new(
        &out.graph,
        out.epochs_run(),
        cfg.hash()?,
        cfg.seed,
        splits.normalization.clone(),
        serde_json::to_value(cfg)?,
    );
    Checkpoint::from_graph(&out.graph, meta).save(&dir.join(CHECKPOINT_FILE))?;
    Ok(TrainSummary {
        out_dir: dir.clone(),
        epochs_run: out.epochs_run(),
        final_val_acc: out.final_val_acc().unwrap_or(0.0),
        stopped_early: out.stopped_early,
        params,
    })
}

/// Replaces the dataset a checkpoint's stored configuration points at.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataOverride {
    pub dataset: Option<DatasetKind>,
    pub data_dir: Option<PathBuf>,
    pub limit: Option<usize>,
}

fn stored_config(ckpt: &Checkpoint, data: &DataOverride) -> Result<RunConfig> {
    let mut cfg: RunConfig = serde_json::from_value(ckpt.meta.config.clone())
        .map_err(|e| Error::Corrupt(format!("stored configuration: {e}")))?;
    if let Some(d) = data.dataset {
        cfg.dataset = d;
    }
    if let Some(dir) = &data.data_dir {
        cfg.data_dir = Some(dir.clone());
    }
    if data.limit.is_some() {
        cfg.test_limit = data.limit;
    }
    Ok(cfg)
}

/// The evaluation split of a checkpoint's dataset, standardised with the
/// statistics stored at training time.
fn eval_split<T: Real>(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<Dataset<T>> {
    let raw = train::load_split::<T>(cfg, Split::Test)?;
    ckpt.meta.normalization.apply(&raw)
}

/// Top-1, per-class accuracy and loss of a checkpoint on its test split.
pub fn cmd_eval(checkpoint: &Path, data: &DataOverride) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = stored_config(&ckpt, data)?;
    match ckpt.meta.dtype {
        DType::F32 => eval_typed::<f32>(&ckpt, &cfg),
        DType::F64 => eval_typed::<f64>(&ckpt, &cfg),
    }
}

fn eval_typed<T: Real>(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<EvalReport> {
    let g = ckpt.to_graph::<T>()?;
    let ds = eval_split::<T>(ckpt, cfg)?;
    evaluate(&g, &ds, cfg.batch, cfg.loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuseSummary {
    pub report: EquivalenceReport,
    pub not_foldable: Vec<NotFoldable>,
    pub tolerance: f64,
    pub params_before: usize,
    pub params_after: usize,
}

impl FuseSummary {
    /// Within tolerance and with every probe classified identically.
    pub fn passed(&self) -> bool {
        self.report.max_abs_diff < self.tolerance && self.report.argmax_identical()
    }
}

/// Standard-normal probe inputs shaped for `g`.
pub fn probe_batch<T: Real>(g: &LayerGraph<T>, probes: usize, seed: u64) -> Tensor<T> {
    let [c, h, w] = g.input_shape;
    Tensor::randn([probes, c, h, w], 1.0, &mut rng::stream(seed, Stream::Probe))
}

/// Fuses a checkpoint, writes the fused checkpoint and compares both graphs
/// on `probes` random inputs. The fused file is written even when the
/// comparison fails; check [`FuseSummary::passed`].
pub fn cmd_fuse(input: &Path, output: &Path, probes: usize) -> Result<FuseSummary> {
    if probes == 0 {
        return Err(Error::InvalidConfig("probes must be at least 1".into()));
    }
    let ckpt = Checkpoint::load(input)?;
    match ckpt.meta.dtype {
        DType::F32 => fuse_typed::<f32>(&ckpt, output, probes),
        DType::F64 => fuse_typed::<f64>(&ckpt, output, probes),
    }
}

fn fuse_typed<T: Real>(ckpt: &Checkpoint, output: &Path, probes: usize) -> Result<FuseSummary> {
    let g = ckpt.to_graph::<T>()?;
    let outcome = fuse_network(&g)?;
    let x = probe_batch(&g, probes, ckpt.meta.seed);
    let report = equivalence_report(&g, &outcome.graph, &x)?;
    let m = &ckpt.meta;
    let meta = CheckpointMeta::new(
        &outcome.graph,
        m.epoch,
        m.config_hash.clone(),
        m.seed,
        m.normalization.clone(),
        m.config.clone(),
    );
    Checkpoint::from_graph(&outcome.graph, meta).save(output)?;
    Ok(FuseSummary {
        report,
        not_foldable: outcome.not_foldable,
        tolerance: fusion_tolerance(T::DTYPE),
        params_before: g.param_count(),
        params_after: outcome.graph.param_count(),
    })
}

/// Whole-network gradient check of the configured architecture in f64 on
/// `samples` random inputs.
pub fn cmd_gradcheck(cfg: &RunConfig, samples: usize) -> Result<GradcheckReport> {
    if samples == 0 {
        return Err(Error::InvalidConfig("gradcheck needs at least one sample".into()));
    }
    let (input, classes) = train::dataset_geometry(cfg)?;
    let g = train::build_graph::<f64>(cfg, input, classes)?;
    let opts = GradcheckOptions {
        batch: samples,
        seed: cfg.seed,
        loss: cfg.loss,
        ..GradcheckOptions::default()
    };
    gradcheck_graph(&g, &opts)
}

/// Term counts of the standard ablation.
pub const ABLATION_TERMS: [usize; 5] = [0, 1, 2, 3, 4];

/// Trains one model per term count and writes `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig, n_values: &[usize]) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let rows = match cfg.dtype {
        DType::F32 => ablate_typed::<f32>(cfg, n_values)?,
        DType::F64 => ablate_typed::<f64>(cfg, n_values)?,
    };
    write(&cfg.out.join(ABLATION_FILE), ablation_csv(&rows))?;
    Ok(rows)
}

fn ablate_typed<T: Real>(cfg: &RunConfig, n_values: &[usize]) -> Result<Vec<AblationRow>> {
    let splits = train::load_splits::<T>(cfg)?;
    ablate_n(cfg, n_values, &splits.train, &splits.test)
}

/// Which graphs to time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchTargets {
    pub unfused: bool,
    pub fused: bool,
}

/// Single-sample latency of a checkpoint, as stored and/or fused.
pub fn cmd_bench(
    checkpoint: &Path,
    targets: BenchTargets,
    iters: usize,
    warmup: usize,
) -> Result<Vec<(&'static str, LatencyStats)>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    match ckpt.meta.dtype {
        DType::F32 => bench_typed::<f32>(&ckpt, targets, iters, warmup),
        DType::F64 => bench_typed::<f64>(&ckpt, targets, iters, warmup),
    }
}

fn bench_typed<T: Real>(
    ckpt: &Checkpoint,
    targets: BenchTargets,
    iters: usize,
    warmup: usize,
) -> Result<Vec<(&'static str, LatencyStats)>> {
    let g = ckpt.to_graph::<T>()?;
    let seed = ckpt.meta.seed;
    let mut out = Vec::new();
    if targets.unfused {
        out.push(("unfused", latency_bench(&g, iters, warmup, seed)?));
    }
    if targets.fused {
        let fused = fuse_network(&g)?.graph;
        out.push(("fused", latency_bench(&fused, iters, warmup, seed)?));
    }
    Ok(out)
}

/// Class selectivity of one activation layer (or `"all"`) of a checkpoint
/// on its test split; writes `selectivity.csv` and `selectivity_hist.csv`
/// into `out_dir`.
pub fn cmd_selectivity(
    checkpoint: &Path,
    layer: &str,
    data: &DataOverride,
    out_dir: &Path,
) -> Result<Vec<SelectivityReport>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = stored_config(&ckpt, data)?;
    let reports = match ckpt.meta.dtype {
        DType::F32 => selectivity_typed::<f32>(&ckpt, &cfg, layer)?,
        DType::F64 => selectivity_typed::<f64>(&ckpt, &cfg, layer)?,
    };
    write(&out_dir.join(SELECTIVITY_FILE), selectivity_csv(&reports))?;
    write(&out_dir.join(HISTOGRAM_FILE), histogram_csv(&reports))?;
    Ok(reports)
}

fn selectivity_typed<T: Real>(ckpt: &Checkpoint, cfg: &RunConfig, layer: &str) -> Result<Vec<SelectivityReport>> {
    let g = ckpt.to_graph::<T>()?;
    let ds = eval_split::<T>(ckpt, cfg)?;
    class_selectivity(&g, &ds, layer)
}
