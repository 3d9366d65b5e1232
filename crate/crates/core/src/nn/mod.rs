//! CNN building blocks on top of the tape: convolution via im2col, batch
//! normalisation, linear, pooling, dropout, base activations and losses.

pub mod activation;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

pub use activation::BaseActivation;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor and the gradient from the most recent backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param { value, grad: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    /// `[C_out, C_in, k, k]`
    pub weight: Param<T>,
    /// `[C_out]`
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> ConvLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let &[c_out, _, k, k2] = weight.shape() else {
            return Err(Error::shape(
                "ConvLayer",
                format!("weight must be rank 4, got {:?}", weight.shape()),
            ));
        };
        if k == 0 || k != k2 || bias.shape() != [c_out] || stride == 0 {
            return Err(Error::shape(
                "ConvLayer",
                format!("weight {:?}, bias {:?}, stride {stride}", weight.shape(), bias.shape()),
            ));
        }
        Ok(ConvLayer {
            weight: Param::new(weight),
            bias: Param::new(bias),
            stride,
            pad,
        })
    }

    /// He-normal weights, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        ConvLayer::new(
            Tensor::randn([c_out, c_in, k, k], std, rng),
            Tensor::zeros([c_out]),
            stride,
            pad,
        )
        .expect("consistent shapes")
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    /// Evaluates the layer on a fresh tape without recording gradients.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = crate::tensor::Tape::new();
        let y = conv2d(
            tape.constant(x.clone()),
            tape.constant(self.weight.value.clone()),
            tape.constant(self.bias.value.clone()),
            self.stride,
            self.pad,
        )?;
        let out = (*y.value()).clone();
        Ok(out)
    }
}

/// Cross-correlation `N,C_in,H,W ⊛ C_out,C_in,k,k + bias` computed as
/// `W · im2col(x) + B`.
pub fn conv2d<'t, T: Real>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    b: Var<'t, T>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t, T>> {
    let xs = x.shape();
    let ws = w.shape();
    let (&[n, c_in, _, _], &[c_out, wc_in, k, _]) = (xs.as_slice(), ws.as_slice()) else {
        return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}")));
    };
    if c_in != wc_in {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c_in} channels, weight expects {wc_in}"),
        ));
    }
    let cols = x.im2col(k, stride, pad)?;
    let plane = cols.shape()[1] / n;
    let (h, wd) = (xs[2], xs[3]);
    let out_h = (h + 2 * pad - k) / stride + 1;
    let out_w = (wd + 2 * pad - k) / stride + 1;
    debug_assert_eq!(plane, out_h * out_w);
    let y = w.reshape([c_out, c_in * k * k])?.matmul(cols)?;
    let y = if n == 1 {
        y.reshape([1, c_out, out_h, out_w])?
    } else {
        y.reshape([c_out, n, out_h, out_w])?.permute(&[1, 0, 2, 3])?
    };
    y.add_channel(b)
}

/// Per-channel batch normalisation state.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    /// Stored with the unbiased (`count − 1`) correction.
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    /// Number of batches folded into the running statistics.
    pub tracked: u64,
}

/// Batch statistics produced by a train-mode pass, applied after the step.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Param::new(Tensor::ones([channels])),
            beta: Param::new(Tensor::zeros([channels])),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            tracked: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn set_running_stats(&mut self, mean: Tensor<T>, var: Tensor<T>) -> Result<()> {
        let c = self.channels();
        if mean.shape() != [c] || var.shape() != [c] {
            return Err(Error::ChannelMismatch(format!(
                "stats {:?}/{:?} for {c} channels",
                mean.shape(),
                var.shape()
            )));
        }
        if var.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::DomainError {
                op: "set_running_stats",
                detail: "negative variance".into(),
            });
        }
        self.running_mean = mean;
        self.running_var = var;
        self.tracked = self.tracked.max(1);
        Ok(())
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::c(self.momentum);
        let keep = T::one() - m;
        let correction = T::c(stats.count as f64 / (stats.count as f64 - 1.0));
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * correction;
        }
        self.tracked += 1;
    }

    /// Per-channel `(scale, shift)` of the eval-mode affine map.
    pub fn eval_affine(&self) -> (Vec<T>, Vec<T>) {
        let eps = T::c(self.eps);
        let scale: Vec<T> = self
            .gamma
            .value
            .data()
            .iter()
            .zip(self.running_var.data())
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let shift = self
            .beta
            .value
            .data()
            .iter()
            .zip(self.running_mean.data())
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

/// Train mode normalises by batch statistics and returns them for the
/// running update; eval mode applies the running statistics.
pub fn batch_norm<'t, T: Real>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    state: &BatchNormState<T>,
    mode: Mode,
) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
    let eps = T::c(state.eps);
    match mode {
        Mode::Train => {
            let shape = x.shape();
            let count = shape[0] * shape[2..].iter().product::<usize>();
            if count < 2 {
                return Err(Error::DegenerateBatch(count));
            }
            let (y, mean, var) = x.batch_norm(gamma, beta, eps, None)?;
            Ok((y, Some(BatchStats { mean, var, count })))
        }
        Mode::Eval => {
            let (y, _, _) = x.batch_norm(
                gamma,
                beta,
                eps,
                Some((state.running_mean.data(), state.running_var.data())),
            )?;
            Ok((y, None))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Param<T>,
    /// `[out]`
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn kaiming<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (1.0 / inputs as f64).sqrt();
        Linear {
            weight: Param::new(Tensor::uniform([outputs, inputs], -bound, bound, rng)),
            bias: Param::new(Tensor::zeros([outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

/// `x · Wᵀ + b`; inputs of rank > 2 are flattened per sample.
pub fn linear<'t, T: Real>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let n = *shape.first().ok_or_else(|| Error::shape("linear", "rank-0 input"))?;
    let features: usize = shape[1..].iter().product();
    let x = if shape.len() == 2 { x } else { x.reshape([n, features])? };
    x.matmul(w.transpose()?)?.add_channel(b)
}

pub fn max_pool<'t, T: Real>(x: Var<'t, T>, k: usize, stride: usize) -> Result<Var<'t, T>> {
    x.max_pool(k, stride)
}

pub fn avg_pool<'t, T: Real>(x: Var<'t, T>, k: usize, stride: usize) -> Result<Var<'t, T>> {
    x.avg_pool(k, stride)
}

/// Mean over the spatial axes: `N,C,H,W → N,C`.
pub fn global_avg_pool<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    if x.shape().len() != 4 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("expected N,C,H,W, got {:?}", x.shape()),
        ));
    }
    x.mean(&[2, 3])
}

pub fn check_dropout_rate(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidRate(p))
    }
}

/// Inverted dropout: survivors are scaled by `1/(1−p)`. Identity in eval
/// mode or at `p = 0`.
pub fn dropout<'t, T: Real, R: Rng + ?Sized>(x: Var<'t, T>, p: f64, mode: Mode, rng: &mut R) -> Result<Var<'t, T>> {
    check_dropout_rate(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep = T::c(1.0 / (1.0 - p));
    let mask = (0..x.value().numel())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    x.mask(mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    BceWithLogits,
}

pub fn loss<'t, T: Real>(kind: LossKind, logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    match kind {
        LossKind::CrossEntropy => logits.cross_entropy(labels),
        LossKind::BceWithLogits => logits.bce_with_logits(labels),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn conv_pointwise_example() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let y = conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(y.value().data(), &[3.0, 5.0, 7.0, 9.0]);
        let ident = conv2d(
            x,
            tape.constant(t(&[1, 1, 1, 1], &[1.0])),
            tape.constant(t(&[1], &[0.0])),
            1,
            0,
        )
        .unwrap();
        assert_eq!(ident.value().data(), x.value().data());
    }

    #[test]
    fn conv_channel_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros([1, 2, 3, 3]));
        let w = tape.constant(Tensor::zeros([1, 3, 1, 1]));
        let b = tape.constant(Tensor::zeros([1]));
        assert!(matches!(conv2d(x, w, b, 1, 0), Err(Error::ShapeMismatch { .. })));
    }

    fn bn_run(values: &[f64], gamma: f64, beta: f64, eps: f64) -> Vec<f64> {
        let tape = Tape::new();
        let mut s = BatchNormState::<f64>::new(1);
        s.eps = eps;
        let x = tape.constant(t(&[values.len(), 1, 1, 1], values));
        let (y, _) = batch_norm(
            x,
            tape.constant(t(&[1], &[gamma])),
            tape.constant(t(&[1], &[beta])),
            &s,
            Mode::Train,
        )
        .unwrap();
        let out = y.value().data().to_vec();
        out
    }

    #[test]
    fn batchnorm_examples() {
        assert_eq!(bn_run(&[1.0, 3.0], 1.0, 0.0, 0.0), vec![-1.0, 1.0]);
        assert_eq!(bn_run(&[1.0, 3.0], 2.0, 1.0, 0.0), vec![-1.0, 3.0]);
        assert_eq!(bn_run(&[0.7; 5], 3.0, 0.25, 1e-5), vec![0.25; 5]);
    }

    #[test]
    fn batchnorm_rejects_single_element() {
        let tape = Tape::new();
        let s = BatchNormState::<f64>::new(1);
        let x = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        let r = batch_norm(
            x,
            tape.constant(Tensor::ones([1])),
            tape.constant(Tensor::zeros([1])),
            &s,
            Mode::Train,
        );
        assert!(matches!(r, Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn running_stats_use_unbiased_variance() {
        let mut s = BatchNormState::<f64>::new(1);
        s.update_running(&BatchStats {
            mean: vec![2.0],
            var: vec![1.0],
            count: 2,
        });
        assert!((s.running_mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((s.running_var.data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
        assert_eq!(s.tracked, 1);
    }

    #[test]
    fn pool_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(max_pool(x, 2, 2).unwrap().value().data(), &[4.0]);
        assert_eq!(avg_pool(x, 2, 2).unwrap().value().data(), &[2.5]);
        let c = tape.constant(Tensor::full([1, 2, 4, 4], 0.75));
        assert!(max_pool(c, 2, 2).unwrap().value().data().iter().all(|&v| v == 0.75));
        assert!(avg_pool(c, 2, 2).unwrap().value().data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let tape = Tape::new();
        let x = tape.param(t(&[1, 1, 2, 2], &[5.0, 5.0, 1.0, 5.0]));
        let g = max_pool(x, 2, 2).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::randn([64], 1.0, &mut rng));
        let y = dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y.value().data(), x.value().data());
        let y = dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y.value().data(), x.value().data());
        assert!(matches!(
            dropout(x, 1.0, Mode::Train, &mut rng),
            Err(Error::InvalidRate(_))
        ));
        assert!(matches!(
            dropout(x, -0.1, Mode::Eval, &mut rng),
            Err(Error::InvalidRate(_))
        ));
    }

    #[test]
    fn dropout_survivor_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones([1_000_000]));
        let y = dropout(x, 0.2, Mode::Train, &mut rng).unwrap();
        let mean = y.value().data().iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn linear_flattens() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let b = tape.constant(t(&[1], &[0.5]));
        assert_eq!(linear(x, w, b).unwrap().value().data(), &[-0.5, -0.5]);
    }
}
