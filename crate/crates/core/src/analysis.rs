//! Measurements: series-parameter trajectories and their convergence, class
//! selectivity, latency and the term-count ablation.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{sequential_batches, Dataset};
use crate::error::{Error, Result};
use crate::networks::{count_params_flops, Activation, LayerGraph, NodeKind};
use crate::nn::Mode;
use crate::rng::{self, Stream};
use crate::series::SeriesParamKind;
use crate::tensor::{Real, Tape, Tensor};
use crate::train;

/// One series scalar at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub run_id: String,
    pub epoch: usize,
    pub layer: String,
    pub kind: String,
    pub term: usize,
    pub value: f64,
}

pub const TRAJECTORY_HEADER: &str = "run_id,epoch,layer,kind,term,value";

/// Current value of every series scalar, in graph order, then θ, ω, α, b,
/// then term.
pub fn record_trajectories<T: Real>(g: &LayerGraph<T>, run_id: &str, epoch: usize) -> Result<Vec<TrajectoryRecord>> {
    let layers = g.series_layers();
    if layers.is_empty() {
        return Err(Error::NoSeriesLayers);
    }
    let mut out = Vec::new();
    for idx in layers {
        let node = &g.nodes[idx];
        let NodeKind::Activation(Activation::Series(p)) = &node.kind else {
            continue;
        };
        for kind in SeriesParamKind::ALL {
            for (term, v) in p.get(kind).value.data().iter().enumerate() {
                out.push(TrajectoryRecord {
                    run_id: run_id.to_string(),
                    epoch,
                    layer: node.name.clone(),
                    kind: kind.as_str().to_string(),
                    term,
                    value: v.f64(),
                });
            }
        }
    }
    Ok(out)
}

pub fn trajectory_csv(records: &[TrajectoryRecord]) -> String {
    let mut s = format!("{TRAJECTORY_HEADER}\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.run_id, r.epoch, r.layer, r.kind, r.term, r.value
        ));
    }
    s
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    if !path.exists() {
        return Err(Error::FileMissing(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Mean of every scalar across runs, per epoch, under the run id `"mean"`.
pub fn average_runs(records: &[TrajectoryRecord]) -> Vec<TrajectoryRecord> {
    let mut acc: BTreeMap<(usize, String, String, usize), (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc
            .entry((r.epoch, r.layer.clone(), r.kind.clone(), r.term))
            .or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|((epoch, layer, kind, term), (sum, n))| TrajectoryRecord {
            run_id: "mean".into(),
            epoch,
            layer,
            kind,
            term,
            value: sum / n as f64,
        })
        .collect()
}

/// Summary of one scalar over the final epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarStats {
    pub run_id: String,
    pub layer: String,
    pub kind: String,
    pub term: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Run, layer, kind and term of one trajectory scalar.
type ScalarKey = (String, String, String, usize);

/// Mean and population standard deviation of every scalar over its last
/// `last_k` recorded epochs.
pub fn convergence_stats(records: &[TrajectoryRecord], last_k: usize) -> Result<Vec<ScalarStats>> {
    if last_k == 0 {
        return Err(Error::InvalidConfig("last_k must be at least 1".into()));
    }
    let mut order = Vec::new();
    let mut series: BTreeMap<ScalarKey, Vec<(usize, f64)>> = BTreeMap::new();
    for r in records {
        let key = (r.run_id.clone(), r.layer.clone(), r.kind.clone(), r.term);
        series
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push((r.epoch, r.value));
    }
    if order.is_empty() {
        return Err(Error::InsufficientHistory {
            needed: last_k,
            have: 0,
        });
    }
    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let mut values = series.remove(&key).unwrap_or_default();
        if values.len() < last_k {
            return Err(Error::InsufficientHistory {
                needed: last_k,
                have: values.len(),
            });
        }
        values.sort_by_key(|&(epoch, _)| epoch);
        let tail: Vec<f64> = values[values.len() - last_k..].iter().map(|&(_, v)| v).collect();
        let (mean, std) = mean_std(&tail);
        let (run_id, layer, kind, term) = key;
        out.push(ScalarStats {
            run_id,
            layer,
            kind,
            term,
            mean,
            std,
        });
    }
    Ok(out)
}

/// Shifted by the first value so a constant series gives exactly
/// `(constant, 0)`.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v[0] + v.iter().map(|x| x - v[0]).sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Denominator guard of the selectivity index.
pub const CSI_EPS: f64 = 1e-12;
pub const CSI_BINS: usize = 50;

/// Selectivity of one filter from its per-class mean activity. Negative
/// means are rectified to 0; the result is clamped to `[0, 1]`.
pub fn selectivity_index(class_means: &[f64]) -> Result<f64> {
    if class_means.len() < 2 {
        return Err(Error::SingleClass);
    }
    let m: Vec<f64> = class_means.iter().map(|&v| v.max(0.0)).collect();
    let (arg, &max) = m
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least two classes");
    let rest = m
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| v)
        .sum::<f64>()
        / (m.len() - 1) as f64;
    Ok(((max - rest) / (max + rest + CSI_EPS)).clamp(0.0, 1.0))
}

/// Selectivity of every filter of one activation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectivityReport {
    pub layer: String,
    pub csi: Vec<f64>,
    /// Counts over `CSI_BINS` equal bins of `[0, 1]`.
    pub histogram: Vec<usize>,
}

impl SelectivityReport {
    fn new(layer: String, csi: Vec<f64>) -> Self {
        let mut histogram = vec![0; CSI_BINS];
        for &c in &csi {
            histogram[((c * CSI_BINS as f64) as usize).min(CSI_BINS - 1)] += 1;
        }
        SelectivityReport { layer, csi, histogram }
    }
}

pub const SELECTIVITY_HEADER: &str = "layer,filter,csi";
pub const HISTOGRAM_HEADER: &str = "layer,bin_lo,bin_hi,count";

pub fn selectivity_csv(reports: &[SelectivityReport]) -> String {
    let mut s = format!("{SELECTIVITY_HEADER}\n");
    for r in reports {
        for (i, c) in r.csi.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", r.layer, i, c));
        }
    }
    s
}

pub fn histogram_csv(reports: &[SelectivityReport]) -> String {
    let mut s = format!("{HISTOGRAM_HEADER}\n");
    let w = 1.0 / CSI_BINS as f64;
    for r in reports {
        for (i, n) in r.histogram.iter().enumerate() {
            s.push_str(&format!("{},{},{},{}\n", r.layer, i as f64 * w, (i + 1) as f64 * w, n));
        }
    }
    s
}

/// Class selectivity of the named activation layer, or of every activation
/// layer for `"all"`. Activity is the eval-mode activation output averaged
/// over spatial positions.
pub fn class_selectivity<T: Real>(g: &LayerGraph<T>, ds: &Dataset<T>, layer: &str) -> Result<Vec<SelectivityReport>> {
    let targets: Vec<usize> = if layer == "all" {
        g.activation_layers()
    } else {
        let idx = g
            .node_index(layer)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
        if !matches!(g.nodes[idx].kind, NodeKind::Activation(_)) {
            return Err(Error::UnknownLayer(format!("{layer} is not an activation layer")));
        }
        vec![idx]
    };
    let counts = ds.class_counts();
    let present: Vec<usize> = (0..ds.classes).filter(|&k| counts[k] > 0).collect();
    if present.len() < 2 {
        return Err(Error::SingleClass);
    }
    let mut g = g.clone();
    g.set_mode(Mode::Eval);
    // sums[target][class][filter]
    let mut sums: Vec<Vec<Vec<f64>>> = vec![Vec::new(); targets.len()];
    for batch in sequential_batches(ds, 256)? {
        let batch = batch?;
        let tape = Tape::new();
        let mut rng = rng::stream(0, Stream::Dropout);
        let pass = g.forward(&tape, tape.constant(batch.images), &mut rng, true)?;
        for (t, &idx) in targets.iter().enumerate() {
            let Some((_, v)) = pass.captures.iter().find(|(i, _)| *i == idx) else {
                continue;
            };
            let act = v.value();
            let shape = act.shape();
            let filters = shape[1];
            let plane: usize = shape[2..].iter().product();
            if sums[t].is_empty() {
                sums[t] = vec![vec![0.0; filters]; ds.classes];
            }
            for (n, &label) in batch.labels.iter().enumerate() {
                for (f, sum) in sums[t][label].iter_mut().enumerate() {
                    let start = (n * filters + f) * plane;
                    let s: f64 = act.data()[start..start + plane].iter().map(|v| v.f64()).sum();
                    *sum += s / plane as f64;
                }
            }
        }
    }
    targets
        .iter()
        .zip(sums)
        .map(|(&idx, s)| {
            let filters = s.first().map_or(0, Vec::len);
            let csi = (0..filters)
                .map(|f| {
                    let means: Vec<f64> = present.iter().map(|&k| s[k][f] / counts[k] as f64).collect();
                    selectivity_index(&means)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SelectivityReport::new(g.nodes[idx].name.clone(), csi))
        })
        .collect()
}

/// Per-inference wall-clock time at batch size 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub iters: usize,
}

/// Times `iters` single-sample eval forward passes after `warmup` untimed
/// ones, on the calling thread.
pub fn latency_bench<T: Real>(g: &LayerGraph<T>, iters: usize, warmup: usize, seed: u64) -> Result<LatencyStats> {
    if iters == 0 {
        return Err(Error::InsufficientIters);
    }
    let mut g = g.clone();
    g.set_mode(Mode::Eval);
    let [c, h, w] = g.input_shape;
    let x = Tensor::<T>::randn([1, c, h, w], 1.0, &mut rng::stream(seed, Stream::Probe));
    for _ in 0..warmup {
        g.predict(&x)?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        std::hint::black_box(g.predict(std::hint::black_box(&x))?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let (mean_ms, std_ms) = mean_std(&times);
    Ok(LatencyStats { mean_ms, std_ms, iters })
}

/// One row of the term-count ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub n: usize,
    pub params: usize,
    pub flops: u64,
    pub acc: f64,
    pub latency_ms: f64,
}

pub const ABLATION_HEADER: &str = "n,params,flops,acc,latency_ms";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.n, r.params, r.flops, r.acc, r.latency_ms
        ));
    }
    s
}

/// Latency iterations per ablation row.
pub const ABLATION_LATENCY_ITERS: usize = 20;

/// Trains one model per term count with otherwise identical settings and
/// reports size, cost, final validation accuracy and latency.
pub fn ablate_n<T: Real>(
    base: &RunConfig,
    n_values: &[usize],
    train_ds: &Dataset<T>,
    val_ds: &Dataset<T>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let mut cfg = base.clone();
        cfg.n = n;
        cfg.run_id = format!("{}-n{n}", base.run_id);
        let g = train::build_graph::<T>(&cfg, train_ds.sample_shape(), train_ds.classes)?;
        let out = train::train(&cfg, g, train_ds, val_ds)?;
        let cost = count_params_flops(&out.graph)?;
        let lat = latency_bench(&out.graph, ABLATION_LATENCY_ITERS, 2, cfg.seed)?;
        rows.push(AblationRow {
            n,
            params: cost.params,
            flops: cost.flops,
            acc: out.final_val_acc().unwrap_or(0.0),
            latency_ms: lat.mean_ms,
        });
    }
    Ok(rows)
}
