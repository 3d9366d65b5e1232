//! The learnable series activation and the epoch-blended activation.
//!
//! A series activation with `N` terms over a base nonlinearity `f` is
//!
//! ```text
//! S(x) = Σ_{n=1..N} [ θ_n · α_n · f(x + b_n) + ω_n ]
//! ```
//!
//! with four learnable scalars per term (amplitude θ, offset ω, series
//! weight α, shift b), shared across channels and positions of the layer.
//! Initialisation (θ = 1, ω = 0, α = 1/N, b = 0) makes `S ≡ f`, and
//! `N = 0` is the plain base activation.

use crate::error::Result;
use crate::nn::{BaseActivation, Param};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Which per-term vector of a series activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SeriesParamKind {
    Theta,
    Omega,
    Alpha,
    Shift,
}

impl SeriesParamKind {
    pub const ALL: [SeriesParamKind; 4] = [
        SeriesParamKind::Theta,
        SeriesParamKind::Omega,
        SeriesParamKind::Alpha,
        SeriesParamKind::Shift,
    ];

    /// Column value used in trajectory files and parameter names.
    pub fn as_str(self) -> &'static str {
        match self {
            SeriesParamKind::Theta => "theta",
            SeriesParamKind::Omega => "omega",
            SeriesParamKind::Alpha => "alpha",
            SeriesParamKind::Shift => "bias",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesActivationParams<T> {
    pub base: BaseActivation,
    pub theta: Param<T>,
    pub omega: Param<T>,
    pub alpha: Param<T>,
    pub shift: Param<T>,
}

impl<T: Real> SeriesActivationParams<T> {
    /// θ = 1, ω = 0, α = 1/N, b = 0.
    pub fn init(terms: usize, base: BaseActivation) -> Self {
        let alpha = if terms == 0 {
            Tensor::zeros([0])
        } else {
            Tensor::full([terms], T::one() / T::c(terms as f64))
        };
        SeriesActivationParams {
            base,
            theta: Param::new(Tensor::ones([terms])),
            omega: Param::new(Tensor::zeros([terms])),
            alpha: Param::new(alpha),
            shift: Param::new(Tensor::zeros([terms])),
        }
    }

    pub fn terms(&self) -> usize {
        self.theta.value.numel()
    }

    /// Trainable scalars contributed by this layer: `4N`.
    pub fn scalar_count(&self) -> usize {
        4 * self.terms()
    }

    pub fn get(&self, kind: SeriesParamKind) -> &Param<T> {
        match kind {
            SeriesParamKind::Theta => &self.theta,
            SeriesParamKind::Omega => &self.omega,
            SeriesParamKind::Alpha => &self.alpha,
            SeriesParamKind::Shift => &self.shift,
        }
    }

    pub fn get_mut(&mut self, kind: SeriesParamKind) -> &mut Param<T> {
        match kind {
            SeriesParamKind::Theta => &mut self.theta,
            SeriesParamKind::Omega => &mut self.omega,
            SeriesParamKind::Alpha => &mut self.alpha,
            SeriesParamKind::Shift => &mut self.shift,
        }
    }

    pub fn is_finite(&self) -> bool {
        SeriesParamKind::ALL.iter().all(|&k| self.get(k).value.is_finite())
    }

    /// Evaluates `S(x)` without recording gradients.
    pub fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let [th, om, al, sh] = SeriesParamKind::ALL.map(|k| tape.constant(self.get(k).value.clone()));
        let y = series_forward(tape.constant(x.clone()), self.base, self.terms(), [th, om, al, sh])?;
        let out = (*y.value()).clone();
        Ok(out)
    }
}

/// `S(x)` on the tape. `params` are the θ, ω, α, b vars in that order and
/// are ignored when `terms == 0`.
pub fn series_forward<'t, T: Real>(
    x: Var<'t, T>,
    base: BaseActivation,
    terms: usize,
    params: [Var<'t, T>; 4],
) -> Result<Var<'t, T>> {
    if terms == 0 {
        return x.activation(base);
    }
    let [theta, omega, alpha, shift] = params;
    x.series(base, theta, omega, alpha, shift)
}

/// Convenience wrapper binding every series vector as a trainable leaf.
pub fn lslu_forward<'t, T: Real>(
    tape: &'t Tape<T>,
    x: Var<'t, T>,
    params: &SeriesActivationParams<T>,
) -> Result<(Var<'t, T>, [Var<'t, T>; 4])> {
    let vars = SeriesParamKind::ALL.map(|k| tape.param(params.get(k).value.clone()));
    let y = series_forward(x, params.base, params.terms(), vars)?;
    Ok((y, vars))
}

/// Epoch-driven blend ratio `λ = current / total`, clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendSchedule {
    pub current_epoch: usize,
    pub total_epochs: usize,
}

impl BlendSchedule {
    pub fn new(current_epoch: usize, total_epochs: usize) -> Self {
        BlendSchedule {
            current_epoch,
            total_epochs,
        }
    }

    pub fn lambda(&self) -> f64 {
        if self.total_epochs == 0 {
            return 1.0;
        }
        (self.current_epoch as f64 / self.total_epochs as f64).clamp(0.0, 1.0)
    }
}

/// `(1 − λ)·f(x) + λ·x`.
pub fn blended_activation<'t, T: Real>(
    x: Var<'t, T>,
    sched: BlendSchedule,
    base: BaseActivation,
) -> Result<Var<'t, T>> {
    x.blend(base, T::c(sched.lambda()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(p: &SeriesActivationParams<f64>, xs: &[f64]) -> Vec<f64> {
        p.eval(&Tensor::from_f64([xs.len()], xs).unwrap()).unwrap().into_data()
    }

    #[test]
    fn init_is_base_activation() {
        for n in 1..=4 {
            let p = SeriesActivationParams::<f64>::init(n, BaseActivation::Relu);
            assert_eq!(eval(&p, &[-2.0, 2.0]), vec![0.0, 2.0]);
        }
        let p = SeriesActivationParams::<f64>::init(1, BaseActivation::Gelu);
        assert_eq!(p.theta.value.data(), &[1.0]);
        assert_eq!(p.omega.value.data(), &[0.0]);
        assert_eq!(p.alpha.value.data(), &[1.0]);
        assert_eq!(p.shift.value.data(), &[0.0]);
    }

    #[test]
    fn zero_terms_is_base() {
        let p = SeriesActivationParams::<f64>::init(0, BaseActivation::Silu);
        let xs = [-3.0, -0.2, 0.0, 0.9, 4.0];
        let expected: Vec<f64> = xs.iter().map(|&x| BaseActivation::Silu.eval(x)).collect();
        assert_eq!(eval(&p, &xs), expected);
        assert_eq!(p.scalar_count(), 0);
    }

    #[test]
    fn hand_evaluated_two_terms() {
        let mut p = SeriesActivationParams::<f64>::init(2, BaseActivation::Relu);
        p.alpha.value = Tensor::from_f64([2], &[1.0, 0.5]).unwrap();
        p.shift.value = Tensor::from_f64([2], &[0.0, -1.0]).unwrap();
        p.theta.value = Tensor::from_f64([2], &[2.0, 1.0]).unwrap();
        p.omega.value = Tensor::from_f64([2], &[0.1, -0.1]).unwrap();
        // 2·1·0.5 + 0.1 + 1·0.5·0 − 0.1
        assert!((eval(&p, &[0.5])[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn blend_endpoints() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_f64([3], &[-2.0, 0.5, 3.0]).unwrap());
        let pure = blended_activation(x, BlendSchedule::new(0, 10), BaseActivation::Relu).unwrap();
        assert_eq!(pure.value().data(), &[0.0, 0.5, 3.0]);
        let ident = blended_activation(x, BlendSchedule::new(10, 10), BaseActivation::Relu).unwrap();
        assert_eq!(ident.value().data(), x.value().data());
        let half = blended_activation(x, BlendSchedule::new(5, 10), BaseActivation::Relu).unwrap();
        assert_eq!(half.value().data()[0], -1.0);
    }

    #[test]
    fn blend_lambda_is_monotone_and_clamped() {
        let ls: Vec<f64> = (0..=12).map(|e| BlendSchedule::new(e, 10).lambda()).collect();
        assert!(ls.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(ls[0], 0.0);
        assert_eq!(ls[12], 1.0);
    }
}
