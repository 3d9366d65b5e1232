//! Dataset preparation, graph construction and the training loop.

use std::path::Path;

use crate::analysis::{record_trajectories, TrajectoryRecord};
use crate::config::{Arch, DatasetKind, RunConfig};
use crate::data::{
    self, load_cifar10, load_image_folder, load_mnist_idx, sequential_batches, synthetic_blobs, Dataset, Normalization,
    Split,
};
use crate::error::{Error, Result};
use crate::networks::{build_mini_cnn, build_mini_resnet, build_mini_vanillanet, LayerGraph};
use crate::nn::{self, LossKind, Mode};
use crate::optim::{scheduled_lr, Adam, EarlyStopping, Optimizer, OptimizerKind, Sgd};
use crate::rng::{self, Stream};
use crate::series::BlendSchedule;
use crate::tensor::{Real, Tape};

/// Normalised train and test splits plus the statistics used.
#[derive(Clone, Debug)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    pub normalization: Normalization,
}

fn data_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.data_dir
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("dataset {:?} needs data_dir", cfg.dataset)))
}

/// Loads one raw (unnormalised) split as configured.
pub fn load_split<T: Real>(cfg: &RunConfig, split: Split) -> Result<Dataset<T>> {
    let limit = match split {
        Split::Train => cfg.train_limit,
        Split::Test => cfg.test_limit,
    };
    let ds = match cfg.dataset {
        DatasetKind::Cifar10 => load_cifar10(data_dir(cfg)?, split, limit)?,
        DatasetKind::Mnist => load_mnist_idx(data_dir(cfg)?, split, limit)?,
        DatasetKind::Folder => {
            let sub = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let (ds, _) = load_image_folder(&data_dir(cfg)?.join(sub), split)?;
            match limit {
                Some(n) => ds.take(n)?,
                None => ds,
            }
        }
        DatasetKind::Synthetic => {
            let per_class = match split {
                Split::Train => cfg.synthetic_train_per_class,
                Split::Test => cfg.synthetic_test_per_class,
            };
            let ds = synthetic_blobs(
                cfg.synthetic_classes,
                per_class,
                cfg.synthetic_shape,
                cfg.synthetic_noise,
                cfg.seed,
                split,
            )?;
            match limit {
                Some(n) => ds.take(n)?,
                None => ds,
            }
        }
    };
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ds)
}

/// Loads both splits and standardises them with train-split statistics.
pub fn load_splits<T: Real>(cfg: &RunConfig) -> Result<Splits<T>> {
    let train = load_split::<T>(cfg, Split::Train)?;
    let test = load_split::<T>(cfg, Split::Test)?;
    if train.sample_shape() != test.sample_shape() {
        return Err(Error::DimensionMismatch(format!(
            "train samples {:?}, test samples {:?}",
            train.sample_shape(),
            test.sample_shape()
        )));
    }
    let normalization = Normalization::fit(&train)?;
    Ok(Splits {
        train: normalization.apply(&train)?,
        test: normalization.apply(&test)?,
        normalization,
    })
}

/// Per-sample extents and class count of the configured dataset, without
/// reading it where the geometry is fixed.
pub fn dataset_geometry(cfg: &RunConfig) -> Result<([usize; 3], usize)> {
    match cfg.dataset {
        DatasetKind::Cifar10 => Ok(([3, 32, 32], 10)),
        DatasetKind::Mnist => Ok(([1, 28, 28], 10)),
        DatasetKind::Synthetic => Ok((cfg.synthetic_shape, cfg.synthetic_classes)),
        DatasetKind::Folder => {
            let ds = load_split::<f32>(cfg, Split::Train)?;
            Ok((ds.sample_shape(), ds.classes))
        }
    }
}

/// Builds the configured architecture with weights from the init stream.
pub fn build_graph<T: Real>(cfg: &RunConfig, input: [usize; 3], classes: usize) -> Result<LayerGraph<T>> {
    let mut init = rng::stream(cfg.seed, Stream::Init);
    match cfg.arch {
        Arch::MiniVanillanet => build_mini_vanillanet(
            input,
            classes,
            cfg.depth,
            cfg.width,
            cfg.n,
            cfg.base,
            cfg.dropout,
            cfg.blended,
            &mut init,
        ),
        Arch::MiniResnet => build_mini_resnet(
            input,
            classes,
            &cfg.blocks,
            cfg.width,
            cfg.n,
            cfg.base,
            cfg.insertion,
            cfg.mask.as_deref(),
            cfg.dropout,
            &mut init,
        ),
        Arch::MiniCnn => build_mini_cnn(input, classes, &cfg.widths, cfg.n, cfg.base, cfg.dropout, &mut init),
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_acc,lr";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_acc, r.lr));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// The trained graph, in eval mode.
    pub graph: LayerGraph<T>,
    pub metrics: Vec<EpochMetrics>,
    /// Epoch 0 (initial values) and every completed epoch; empty when the
    /// graph has no series layer.
    pub trajectories: Vec<TrajectoryRecord>,
    pub stopped_early: bool,
}

impl<T> TrainOutcome<T> {
    pub fn epochs_run(&self) -> usize {
        self.metrics.len()
    }

    pub fn final_val_acc(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.val_acc)
    }
}

fn optimizer<T: Real>(cfg: &RunConfig) -> Optimizer<T> {
    match cfg.optimizer {
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps)),
        OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(cfg.momentum)),
    }
}

/// Trains `graph` on `train`, validating on `val` after every epoch.
///
/// Batches come from the per-epoch shuffle stream, dropout masks from the
/// per-epoch dropout stream, so a run is a pure function of the config and
/// seed. The learning rate is set per epoch from the schedule; a blended
/// activation uses ratio `(e + 1) / E` during epoch `e` (0-based), reaching
/// 1 in the last epoch.
pub fn train<T: Real>(
    cfg: &RunConfig,
    mut graph: LayerGraph<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let logged = !graph.series_layers().is_empty();
    let mut trajectories = Vec::new();
    if logged {
        trajectories.extend(record_trajectories(&graph, &cfg.run_id, 0)?);
    }
    let mut opt = optimizer::<T>(cfg);
    let mut stopper = cfg.patience.map(EarlyStopping::new).transpose()?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;
    for e in 0..cfg.epochs {
        let lr = scheduled_lr(cfg.schedule, e, cfg.epochs, cfg.lr, cfg.lr_min);
        graph.set_blend_lambda(BlendSchedule::new(e + 1, cfg.epochs).lambda());
        graph.set_mode(Mode::Train);
        let mut drop_rng = rng::dropout_stream(cfg.seed, e as u64);
        let mut loss_sum = 0.0;
        for batch in data::batches(train, cfg.batch, cfg.seed, e as u64)? {
            let batch = batch?;
            let tape = Tape::new();
            let pass = graph.forward(&tape, tape.constant(batch.images), &mut drop_rng, false)?;
            let loss = nn::loss(cfg.loss, pass.output, &batch.labels)?;
            let value = loss.value().item()?.f64();
            if !value.is_finite() {
                return Err(Error::DomainError {
                    op: "train",
                    detail: format!("non-finite training loss at epoch {}", e + 1),
                });
            }
            loss_sum += value * batch.labels.len() as f64;
            let mut grads = loss.backward()?;
            graph.apply_grads(&mut grads, &pass.param_vars)?;
            opt.step(&mut graph.params_mut(), lr)?;
            graph.apply_batch_stats(&pass.batch_stats);
        }
        graph.zero_grads();
        graph.set_mode(Mode::Eval);
        let report = evaluate(&graph, val, cfg.batch, cfg.loss)?;
        metrics.push(EpochMetrics {
            epoch: e + 1,
            train_loss: loss_sum / train.len() as f64,
            val_acc: report.top1,
            lr,
        });
        if logged {
            trajectories.extend(record_trajectories(&graph, &cfg.run_id, e + 1)?);
        }
        if let Some(s) = stopper.as_mut() {
            if s.observe(report.top1) {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        graph,
        metrics,
        trajectories,
        stopped_early,
    })
}

/// Accuracy and loss of a graph on a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    /// Accuracy per class; `None` for classes absent from the dataset.
    pub per_class: Vec<Option<f64>>,
    pub class_counts: Vec<usize>,
    pub loss: f64,
    pub samples: usize,
}

/// Eval-mode accuracy, per-class accuracy and mean loss.
pub fn evaluate<T: Real>(graph: &LayerGraph<T>, ds: &Dataset<T>, batch: usize, loss: LossKind) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let owned;
    let graph = if graph.mode == Mode::Eval {
        graph
    } else {
        let mut g = graph.clone();
        g.set_mode(Mode::Eval);
        owned = g;
        &owned
    };
    let mut correct = vec![0usize; ds.classes];
    let mut loss_sum = 0.0;
    for b in sequential_batches(ds, batch)? {
        let b = b?;
        let tape = Tape::new();
        let mut rng = rng::stream(0, Stream::Dropout);
        let pass = graph.forward(&tape, tape.constant(b.images), &mut rng, false)?;
        let pred = pass.output.value().argmax_rows()?;
        let l = nn::loss(loss, pass.output, &b.labels)?;
        loss_sum += l.value().item()?.f64() * b.labels.len() as f64;
        for (p, &y) in pred.iter().zip(&b.labels) {
            if *p == y {
                correct[y] += 1;
            }
        }
    }
    let counts = ds.class_counts();
    let per_class = correct
        .iter()
        .zip(&counts)
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    Ok(EvalReport {
        top1: correct.iter().sum::<usize>() as f64 / ds.len() as f64,
        per_class,
        class_counts: counts,
        loss: loss_sum / ds.len() as f64,
        samples: ds.len(),
    })
}
