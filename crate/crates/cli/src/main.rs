use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lslu::commands::{
    cmd_ablate, cmd_bench, cmd_eval, cmd_fuse, cmd_gradcheck, cmd_selectivity, cmd_train, BenchTargets, DataOverride,
    ABLATION_FILE, ABLATION_TERMS, HISTOGRAM_FILE, SELECTIVITY_FILE,
};
use lslu::config::{Arch, DatasetKind, RunConfig};
use lslu::networks::Insertion;
use lslu::nn::BaseActivation;
use lslu::DType;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "lslu",
    version,
    about = "Train, fuse and analyse networks with learnable series activations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, metrics and trajectories.
    Train(RunArgs),
    /// Evaluate a checkpoint on its test split.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Fold batch norm and series amplitudes into convolutions.
    Fuse {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 100)]
        probes: usize,
    },
    /// Compare analytic gradients with central differences in f64.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 2)]
        samples: usize,
    },
    /// Train one model per series term count 0..=4.
    Ablate(RunArgs),
    /// Time single-sample inference of a checkpoint.
    Bench {
        checkpoint: PathBuf,
        #[arg(long)]
        fused: bool,
        #[arg(long)]
        unfused: bool,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
    },
    /// Class selectivity of an activation layer, or of every one with `all`.
    Selectivity {
        checkpoint: PathBuf,
        #[arg(long, default_value = "all")]
        layer: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Cifar10,
    Mnist,
    Folder,
    Synthetic,
}

impl From<DatasetArg> for DatasetKind {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Cifar10 => DatasetKind::Cifar10,
            DatasetArg::Mnist => DatasetKind::Mnist,
            DatasetArg::Folder => DatasetKind::Folder,
            DatasetArg::Synthetic => DatasetKind::Synthetic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[allow(clippy::enum_variant_names)]
enum ArchArg {
    MiniVanillanet,
    MiniResnet,
    MiniCnn,
}

#[derive(Clone, Copy, ValueEnum)]
enum InsertionArg {
    Full,
    Downsampling,
}

/// Run configuration: the file named by `--config` (or the defaults), with
/// any flag given here taking precedence.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    dtype: Option<DTypeArg>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    #[arg(long)]
    n: Option<usize>,
    /// relu, leakyrelu, leakyrelu:<slope>, gelu or silu
    #[arg(long)]
    base: Option<BaseActivation>,
    #[arg(long, value_enum)]
    insertion: Option<InsertionArg>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.dtype {
            cfg.dtype = match v {
                DTypeArg::F32 => DType::F32,
                DTypeArg::F64 => DType::F64,
            };
        }
        if let Some(v) = self.dataset {
            cfg.dataset = v.into();
        }
        if let Some(v) = &self.data_dir {
            cfg.data_dir = Some(v.clone());
        }
        if let Some(v) = self.arch {
            cfg.arch = match v {
                ArchArg::MiniVanillanet => Arch::MiniVanillanet,
                ArchArg::MiniResnet => Arch::MiniResnet,
                ArchArg::MiniCnn => Arch::MiniCnn,
            };
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.base {
            cfg.base = v;
        }
        if let Some(v) = self.insertion {
            cfg.insertion = match v {
                InsertionArg::Full => Insertion::Full,
                InsertionArg::Downsampling => Insertion::DownsamplingOnly,
            };
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if self.patience.is_some() {
            cfg.patience = self.patience;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Replacement dataset for commands that read a checkpoint.
#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Keep only the first samples of the test split.
    #[arg(long)]
    limit: Option<usize>,
}

impl DataArgs {
    fn to_override(&self) -> DataOverride {
        DataOverride {
            dataset: self.dataset.map(Into::into),
            data_dir: self.data_dir.clone(),
            limit: self.limit,
        }
    }
}

/// Outcome of a command that ran to completion.
enum Status {
    Ok,
    ToleranceFailed,
}

fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Train(args) => train(&args.resolve()?),
        Command::Eval { checkpoint, data } => eval(&checkpoint, &data.to_override()),
        Command::Fuse { input, output, probes } => fuse(&input, &output, probes),
        Command::Gradcheck { run, samples } => gradcheck(&run.resolve()?, samples),
        Command::Ablate(args) => ablate(&args.resolve()?),
        Command::Bench {
            checkpoint,
            fused,
            unfused,
            iters,
            warmup,
        } => {
            // neither flag means both
            let targets = BenchTargets {
                unfused: unfused || !fused,
                fused: fused || !unfused,
            };
            println!("graph,mean_ms,std_ms,iters");
            for (label, s) in cmd_bench(&checkpoint, targets, iters, warmup)? {
                println!("{label},{},{},{}", s.mean_ms, s.std_ms, s.iters);
            }
            Ok(Status::Ok)
        }
        Command::Selectivity {
            checkpoint,
            layer,
            out,
            data,
        } => {
            let reports = cmd_selectivity(&checkpoint, &layer, &data.to_override(), &out)?;
            println!("layer,filters,mean_csi");
            for r in &reports {
                let mean = r.csi.iter().sum::<f64>() / r.csi.len().max(1) as f64;
                println!("{},{},{mean}", r.layer, r.csi.len());
            }
            eprintln!(
                "wrote {} and {}",
                out.join(SELECTIVITY_FILE).display(),
                out.join(HISTOGRAM_FILE).display()
            );
            Ok(Status::Ok)
        }
    }
}

fn train(cfg: &RunConfig) -> Result<Status> {
    let s = cmd_train(cfg)?;
    eprintln!(
        "trained {} epochs{} ({} parameters) into {}",
        s.epochs_run,
        if s.stopped_early { ", stopped early" } else { "" },
        s.params,
        s.out_dir.display()
    );
    println!("final_val_acc,{}", s.final_val_acc);
    Ok(Status::Ok)
}

fn eval(checkpoint: &Path, data: &DataOverride) -> Result<Status> {
    let r = cmd_eval(checkpoint, data)?;
    println!("top1,{}", r.top1);
    println!("loss,{}", r.loss);
    println!("samples,{}", r.samples);
    println!("class,count,acc");
    for (k, (acc, count)) in r.per_class.iter().zip(&r.class_counts).enumerate() {
        let acc = acc.map_or_else(String::new, |a| a.to_string());
        println!("{k},{count},{acc}");
    }
    Ok(Status::Ok)
}

fn fuse(input: &Path, output: &Path, probes: usize) -> Result<Status> {
    let s = cmd_fuse(input, output, probes)?;
    for item in &s.not_foldable {
        eprintln!("not foldable: {}: {}", item.layer, item.reason);
    }
    println!("layer,max_abs_diff");
    for l in &s.report.layers {
        println!("{},{}", l.layer, l.max_abs_diff);
    }
    eprintln!(
        "max|d| {:e} (tolerance {:e}), argmax {}/{}, parameters {} -> {}",
        s.report.max_abs_diff, s.tolerance, s.report.argmax_agree, s.report.probes, s.params_before, s.params_after
    );
    Ok(if s.passed() {
        Status::Ok
    } else {
        Status::ToleranceFailed
    })
}

fn gradcheck(cfg: &RunConfig, samples: usize) -> Result<Status> {
    let r = cmd_gradcheck(cfg, samples)?;
    println!("group,tensors,checked,skipped,max_rel_err,pass");
    for g in &r.groups {
        println!(
            "{:?},{},{},{},{:e},{}",
            g.role, g.tensors, g.checked, g.skipped, g.max_rel_err, g.pass
        );
    }
    eprintln!("tolerance {:e}", r.tolerance);
    Ok(if r.passed() {
        Status::Ok
    } else {
        Status::ToleranceFailed
    })
}

fn ablate(cfg: &RunConfig) -> Result<Status> {
    let rows = cmd_ablate(cfg, &ABLATION_TERMS)?;
    print!("{}", lslu::analysis::ablation_csv(&rows));
    eprintln!("wrote {}", cfg.out.join(ABLATION_FILE).display());
    Ok(Status::Ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::ToleranceFailed) => {
            eprintln!("error: tolerance not met");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
