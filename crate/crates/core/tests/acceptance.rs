//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use lslu::analysis::{class_selectivity, convergence_stats, read_trajectory_csv, selectivity_index};
use lslu::commands::{
    cmd_ablate, cmd_fuse, cmd_gradcheck, cmd_train, ABLATION_FILE, ABLATION_TERMS, CHECKPOINT_FILE, METRICS_FILE,
    TRAJECTORY_FILE,
};
use lslu::config::{Arch, DatasetKind, RunConfig};
use lslu::data::{Checkpoint, Dataset, Split};
use lslu::fusion::{equivalence_report, fuse_network, NotFoldableReason};
use lslu::networks::{build_mini_vanillanet, Activation, LayerGraph, NodeKind, ParamRole};
use lslu::nn::{BaseActivation, ConvLayer, Linear, Mode};
use lslu::rng::{self, Stream};
use lslu::series::{SeriesActivationParams, SeriesParamKind};
use lslu::{DType, Real, Tape, Tensor};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const BASES: [BaseActivation; 4] = [
    BaseActivation::Relu,
    BaseActivation::LeakyRelu(0.01),
    BaseActivation::Gelu,
    BaseActivation::Silu,
];

/// Outcome of one criterion: pass flag and a one-line summary.
struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join(format!("lslu-acceptance-{}", std::process::id()))
        .join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn synthetic(out: &Path) -> RunConfig {
    RunConfig {
        arch: Arch::MiniVanillanet,
        depth: 5,
        width: 16,
        n: 3,
        synthetic_classes: 4,
        synthetic_shape: [3, 16, 16],
        synthetic_noise: 0.3,
        synthetic_train_per_class: 32,
        synthetic_test_per_class: 16,
        epochs: 4,
        batch: 16,
        lr: 5e-3,
        dropout: 0.2,
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn init_identity() -> Verdict {
    let start = Instant::now();
    fn worst<T: Real>() -> f64 {
        let x = Tensor::<T>::randn([10_000], 3.0, &mut rng::stream(1, Stream::Data));
        let mut worst = 0.0f64;
        for base in BASES {
            let expect = x.map(|v| base.eval(v));
            for terms in 1..=4 {
                let y = SeriesActivationParams::<T>::init(terms, base).eval(&x).unwrap();
                worst = worst.max(y.max_abs_diff(&expect).unwrap().f64());
            }
        }
        worst
    }
    let (w32, w64) = (worst::<f32>(), worst::<f64>());
    let secs = start.elapsed().as_secs_f64();
    verdict(
        w32 == 0.0 && w64 == 0.0 && secs < 1.0,
        format!("max|d| f32 {w32:e}, f64 {w64:e} (required 0); {secs:.2}s (limit 1s)"),
    )
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let configs = [
        (
            "mini-vanillanet d5",
            RunConfig {
                arch: Arch::MiniVanillanet,
                depth: 5,
                ..RunConfig::default()
            },
        ),
        (
            "mini-resnet 2 stages",
            RunConfig {
                arch: Arch::MiniResnet,
                blocks: vec![1, 1],
                ..RunConfig::default()
            },
        ),
    ];
    let required = [
        ParamRole::Series(SeriesParamKind::Theta),
        ParamRole::Series(SeriesParamKind::Omega),
        ParamRole::Series(SeriesParamKind::Alpha),
        ParamRole::Series(SeriesParamKind::Shift),
        ParamRole::BnGamma,
        ParamRole::BnBeta,
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, cfg) in configs {
        let report = cmd_gradcheck(&cfg, 2).unwrap();
        let worst = report.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
        let theta_omega = report
            .groups
            .iter()
            .filter(|g| {
                matches!(
                    g.role,
                    ParamRole::Series(SeriesParamKind::Theta) | ParamRole::Series(SeriesParamKind::Omega)
                )
            })
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max);
        let complete = required.iter().all(|r| report.group(*r).is_some_and(|g| g.checked > 0));
        pass &= report.passed() && worst < 1e-4 && theta_omega < 1e-6 && complete;
        parts.push(format!(
            "{label}: {} groups, worst {worst:.2e} (tol 1e-4), theta/omega {theta_omega:.2e} (tol 1e-6){}",
            report.groups.len(),
            if complete { "" } else { ", missing groups" }
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    verdict(pass, format!("{}; {secs:.1}s (limit 120s)", parts.join("; ")))
}

fn fusion_equivalence() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    let mut fuse_secs = 0.0;
    for (dtype, tol) in [(DType::F32, 1e-5), (DType::F64, 1e-10)] {
        for arch in [Arch::MiniVanillanet, Arch::MiniResnet] {
            let dir = scratch(&format!("fusion-{dtype:?}-{arch:?}"));
            let cfg = RunConfig {
                arch,
                dtype,
                width: 8,
                epochs: 2,
                ..synthetic(&dir)
            };
            cmd_train(&cfg).unwrap();
            let start = Instant::now();
            let s = cmd_fuse(&dir.join(CHECKPOINT_FILE), &dir.join("fused.lslu"), 100).unwrap();
            fuse_secs += start.elapsed().as_secs_f64();
            let ok = s.report.max_abs_diff < tol && s.report.argmax_identical() && s.report.probes == 100;
            pass &= ok;
            parts.push(format!(
                "{dtype:?} {arch:?} max|d| {:.2e} (tol {tol:e}), argmax {}/{}",
                s.report.max_abs_diff, s.report.argmax_agree, s.report.probes
            ));
        }
    }
    pass &= fuse_secs < 30.0;
    verdict(pass, format!("{}; {fuse_secs:.2}s (limit 30s)", parts.join("; ")))
}

/// Mini-vanillanet in eval mode with populated statistics and series
/// parameters set for the fold: shared amplitude per layer, zero shifts.
fn fold_fixture(base: BaseActivation) -> LayerGraph<f64> {
    let mut r = rng::stream(21, Stream::Init);
    let mut g = build_mini_vanillanet::<f64, _>([3, 16, 16], 5, 5, 8, 3, base, 0.0, false, &mut r).unwrap();
    for (_, bn) in g.batch_norms_mut() {
        let c = bn.channels();
        bn.gamma.value = Tensor::uniform([c], 0.5, 1.5, &mut r);
        bn.beta.value = Tensor::randn([c], 0.2, &mut r);
        bn.set_running_stats(Tensor::randn([c], 0.3, &mut r), Tensor::uniform([c], 0.5, 2.0, &mut r))
            .unwrap();
    }
    for (i, node) in g.nodes.iter_mut().enumerate() {
        if let NodeKind::Activation(Activation::Series(p)) = &mut node.kind {
            let n = p.terms();
            p.theta.value = Tensor::full([n], 0.6 + 0.35 * i as f64);
            p.omega.value = Tensor::randn([n], 0.1, &mut r);
            p.alpha.value = Tensor::uniform([n], 0.1, 0.6, &mut r);
            p.shift.value = Tensor::zeros([n]);
        }
    }
    g.set_mode(Mode::Eval);
    g
}

fn theta_fold() -> Verdict {
    let probes = Tensor::randn([100, 3, 16, 16], 1.0, &mut rng::stream(5, Stream::Probe));

    let relu = fold_fixture(BaseActivation::Relu);
    let out = fuse_network(&relu).unwrap();
    let folded = out
        .graph
        .nodes
        .iter()
        .filter_map(|n| match &n.kind {
            NodeKind::Activation(Activation::Series(p)) => Some(p.theta.value.data().iter().all(|&t| t == 1.0)),
            _ => None,
        })
        .collect::<Vec<_>>();
    let relu_report = equivalence_report(&relu, &out.graph, &probes).unwrap();
    let relu_ok = out.not_foldable.is_empty()
        && !folded.is_empty()
        && folded.iter().all(|&f| f)
        && relu_report.max_abs_diff < 1e-10;

    let gelu = fold_fixture(BaseActivation::Gelu);
    let out = fuse_network(&gelu).unwrap();
    let layers = gelu.series_layers().len();
    let refused = out.not_foldable.len() == layers
        && out
            .not_foldable
            .iter()
            .all(|n| matches!(n.reason, NotFoldableReason::NonHomogeneousBase(_)));
    let gelu_report = equivalence_report(&gelu, &out.graph, &probes).unwrap();
    let gelu_ok = refused && gelu_report.max_abs_diff < 1e-10;

    verdict(
        relu_ok && gelu_ok,
        format!(
            "relu: {} layers folded, max|d| {:.2e} (tol 1e-10); gelu: {}/{} NotFoldable, max|d| {:.2e} (tol 1e-10)",
            folded.iter().filter(|&&f| f).count(),
            relu_report.max_abs_diff,
            out.not_foldable.len(),
            layers,
            gelu_report.max_abs_diff
        ),
    )
}

fn mnist(out: &Path, n: usize, seed: u64) -> RunConfig {
    RunConfig {
        run_id: format!("n{n}-s{seed}"),
        arch: Arch::MiniCnn,
        widths: vec![16, 32],
        n,
        base: BaseActivation::Relu,
        dataset: DatasetKind::Mnist,
        data_dir: Some(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/mnist")),
        train_limit: Some(2000),
        test_limit: Some(1000),
        epochs: 10,
        batch: 360,
        lr: 1e-3,
        dropout: 0.2,
        seed,
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];

/// Runs the criterion-5 training matrix; returns the verdict and the
/// trajectory files of the series runs.
fn mnist_efficacy() -> (Verdict, Vec<PathBuf>) {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    let mut trajectories = Vec::new();
    for seed in SEEDS {
        let dir3 = scratch(&format!("mnist-n3-s{seed}"));
        let dir0 = scratch(&format!("mnist-n0-s{seed}"));
        let lslu = cmd_train(&mnist(&dir3, 3, seed)).unwrap().final_val_acc;
        let plain = cmd_train(&mnist(&dir0, 0, seed)).unwrap().final_val_acc;
        pass &= lslu >= 0.90 && lslu >= plain - 0.01;
        parts.push(format!("seed {seed}: N=3 {lslu:.3} vs N=0 {plain:.3}"));
        trajectories.push(dir3.join(TRAJECTORY_FILE));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 300.0;
    (
        verdict(
            pass,
            format!(
                "{} (floor 0.90 and baseline-0.01); {secs:.0}s (limit 300s)",
                parts.join(", ")
            ),
        ),
        trajectories,
    )
}

fn trajectory_hooks(files: &[PathBuf]) -> Verdict {
    if files.is_empty() {
        return verdict(false, "criterion 5 produced no runs");
    }
    let mut pass = true;
    let mut worst_std = 0.0f64;
    let mut rows = 0;
    for file in files {
        let records = read_trajectory_csv(file).unwrap();
        rows += records.len();
        // 2 series layers, 3 terms, 4 kinds, epochs 0..=10
        pass &= records.len() == 2 * 3 * 4 * 11;
        for r in records.iter().filter(|r| r.epoch == 0) {
            match r.kind.as_str() {
                "theta" => pass &= r.value == 1.0,
                "omega" => pass &= r.value == 0.0,
                _ => {}
            }
        }
        let stats = convergence_stats(&records, 10).unwrap();
        pass &= stats.len() == 2 * 3 * 4;
        worst_std = stats.iter().map(|s| s.std).fold(worst_std, f64::max);
    }
    pass &= worst_std < 1e-2;
    verdict(
        pass,
        format!(
            "{} runs, {rows} records, epoch-0 theta=1 omega=0 exact; max std over last 10 epochs {worst_std:.2e} (tol 1e-2)",
            files.len()
        ),
    )
}

fn ablation() -> Verdict {
    let dir = scratch("ablation");
    let cfg = RunConfig {
        epochs: 1,
        width: 8,
        ..synthetic(&dir)
    };
    let rows = cmd_ablate(&cfg, &ABLATION_TERMS).unwrap();
    let csv = fs::read_to_string(dir.join(ABLATION_FILE)).unwrap();
    let header_ok = csv.lines().next() == Some("n,params,flops,acc,latency_ms");
    let layers = 4;
    let steps_ok = rows
        .windows(2)
        .all(|w| w[1].params - w[0].params == 4 * (w[1].n - w[0].n) * layers);
    let ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    let params: Vec<String> = rows.iter().map(|r| r.params.to_string()).collect();
    verdict(
        rows.len() == 5 && csv.lines().count() == 6 && header_ok && steps_ok && ns == ABLATION_TERMS,
        format!(
            "{} rows, n {ns:?}, params {} (+{} per term)",
            rows.len(),
            params.join("/"),
            4 * layers
        ),
    )
}

/// One 1×1 conv feeding a ReLU; images of class `k` are filled with `fill[k]`.
fn selectivity_fixture(fill: &[f64]) -> f64 {
    let mut g = LayerGraph::<f64>::new([1, 4, 4], fill.len());
    let conv = ConvLayer::new(Tensor::ones([1, 1, 1, 1]), Tensor::zeros([1]), 1, 0).unwrap();
    g.push("conv", NodeKind::Conv(conv));
    g.push("act", NodeKind::Activation(Activation::Base(BaseActivation::Relu)));
    g.push("pool", NodeKind::GlobalAvgPool);
    g.push(
        "fc",
        NodeKind::Linear(Linear::kaiming(1, fill.len(), &mut rng::stream(0, Stream::Init))),
    );
    g.set_mode(Mode::Eval);
    let per_class = 5;
    let labels: Vec<usize> = (0..fill.len())
        .flat_map(|k| std::iter::repeat_n(k, per_class))
        .collect();
    let images = Tensor::from_fn([labels.len(), 1, 4, 4], |i| fill[labels[i / 16]]);
    let ds = Dataset::new(images, labels, fill.len(), Split::Test).unwrap();
    class_selectivity(&g, &ds, "act").unwrap()[0].csi[0]
}

fn class_selectivity_properties() -> Verdict {
    let one_index = selectivity_index(&[0.8, 0.0, 0.0, 0.0]).unwrap();
    let zero_index = selectivity_index(&[0.4; 4]).unwrap();
    let one_graph = selectivity_fixture(&[0.0, 0.9, 0.0]);
    let zero_graph = selectivity_fixture(&[0.5, 0.5, 0.5]);
    let derived = selectivity_index(&[0.6, 0.2]).unwrap();

    let dir = scratch("selectivity");
    cmd_train(&RunConfig {
        base: BaseActivation::Gelu,
        epochs: 2,
        ..synthetic(&dir)
    })
    .unwrap();
    let ckpt = Checkpoint::load(&dir.join(CHECKPOINT_FILE)).unwrap();
    let g = ckpt.to_graph::<f32>().unwrap();
    let mut cfg = synthetic(&dir);
    cfg.base = BaseActivation::Gelu;
    let raw = lslu::train::load_split::<f32>(&cfg, Split::Test).unwrap();
    let ds = ckpt.meta.normalization.apply(&raw).unwrap();
    let reports = class_selectivity(&g, &ds, "all").unwrap();
    let filters: usize = reports.iter().map(|r| r.csi.len()).sum();
    let in_range = reports.iter().flat_map(|r| &r.csi).all(|c| (0.0..=1.0).contains(c));

    let pass = in_range
        && (one_index - 1.0).abs() < 1e-9
        && (one_graph - 1.0).abs() < 1e-9
        && zero_index == 0.0
        && zero_graph == 0.0
        && (derived - 0.5).abs() < 1e-12;
    verdict(
        pass,
        format!(
            "{filters} filters in [0,1]: {in_range}; single-class {one_index} / {one_graph} (target 1, tol 1e-9); uniform {zero_index} / {zero_graph} (target 0)"
        ),
    )
}

fn bn_statistics() -> Verdict {
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    let mut r = rng::stream(9, Stream::Data);
    for (batch, c, hw) in [(16, 8, 4), (32, 4, 1), (16, 3, 6)] {
        let scale = Tensor::<f64>::uniform([c], 0.2, 5.0, &mut r);
        let shift = Tensor::<f64>::randn([c], 10.0, &mut r);
        let plane = hw * hw;
        let raw = Tensor::<f64>::randn([batch, c, hw, hw], 1.0, &mut r);
        let x = Tensor::from_fn([batch, c, hw, hw], |i| {
            let ch = (i / plane) % c;
            raw.data()[i] * scale.data()[ch] + shift.data()[ch]
        });
        let gamma = Tensor::<f64>::uniform([c], 0.5, 2.0, &mut r);
        let beta = Tensor::<f64>::randn([c], 1.0, &mut r);
        let tape = Tape::new();
        let (y, _, _) = tape
            .constant(x)
            .batch_norm(tape.constant(gamma.clone()), tape.constant(beta.clone()), 1e-5, None)
            .unwrap();
        let y = y.value();
        for ch in 0..c {
            // undo the affine step to recover the normalised values
            let xhat: Vec<f64> = (0..batch)
                .flat_map(|b| {
                    let start = (b * c + ch) * plane;
                    y.data()[start..start + plane].to_vec()
                })
                .map(|v| (v - beta.data()[ch]) / gamma.data()[ch])
                .collect();
            let n = xhat.len() as f64;
            let mean = xhat.iter().sum::<f64>() / n;
            let var = xhat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            worst_mean = worst_mean.max(mean.abs());
            worst_var = worst_var.max((var - 1.0).abs());
        }
    }
    verdict(
        worst_mean < 1e-6 && worst_var < 1e-4,
        format!("max |mean| {worst_mean:.2e} (tol 1e-6), max |var-1| {worst_var:.2e} (tol 1e-4)"),
    )
}

fn determinism() -> Verdict {
    let dir = scratch("determinism");
    let cfg = synthetic(&dir);
    let read = |f: &str| fs::read(dir.join(f)).unwrap();
    cmd_train(&cfg).unwrap();
    let first = (read(METRICS_FILE), read(TRAJECTORY_FILE));
    cmd_train(&cfg).unwrap();
    let second = (read(METRICS_FILE), read(TRAJECTORY_FILE));
    let metrics = first.0 == second.0;
    let traj = first.1 == second.1;
    verdict(
        metrics && traj && !first.1.is_empty(),
        format!(
            "metrics identical: {metrics} ({} bytes), trajectories identical: {traj} ({} bytes)",
            first.0.len(),
            first.1.len()
        ),
    )
}

fn guarded<T>(f: impl FnOnce() -> T) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())
    })
}

fn main() {
    let mut failures = 0;
    let mut report = |index: usize, name: &str, v: Result<Verdict, String>| {
        let v = v.unwrap_or_else(|msg| verdict(false, format!("error: {msg}")));
        if !v.pass {
            failures += 1;
        }
        println!(
            "criterion {index:>2} {:<28} {}  {}",
            name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    };
    report(1, "init identity", guarded(init_identity));
    report(2, "gradient oracle", guarded(gradient_oracle));
    report(3, "fusion equivalence", guarded(fusion_equivalence));
    report(4, "theta fold", guarded(theta_fold));
    let (v5, files) = match guarded(mnist_efficacy) {
        Ok((v, files)) => (Ok(v), files),
        Err(e) => (Err(e), Vec::new()),
    };
    report(5, "desk-scale training", v5);
    report(6, "trajectory hooks", guarded(|| trajectory_hooks(&files)));
    report(7, "ablation harness", guarded(ablation));
    report(8, "class selectivity", guarded(class_selectivity_properties));
    report(9, "batch-norm statistics", guarded(bn_statistics));
    report(10, "determinism", guarded(determinism));
    let _ = fs::remove_dir_all(std::env::temp_dir().join(format!("lslu-acceptance-{}", std::process::id())));
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
