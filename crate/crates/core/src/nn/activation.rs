use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Fixed elementwise nonlinearity underlying every activation node.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BaseActivation {
    Relu,
    LeakyRelu(f64),
    Gelu,
    Silu,
}

impl BaseActivation {
    pub fn leaky(slope: f64) -> Result<Self> {
        if slope > 0.0 && slope < 1.0 {
            Ok(BaseActivation::LeakyRelu(slope))
        } else {
            Err(Error::InvalidConfig(format!("leaky slope {slope} outside (0, 1)")))
        }
    }

    #[inline]
    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            BaseActivation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            BaseActivation::LeakyRelu(slope) => {
                if x < T::zero() {
                    T::c(slope) * x
                } else {
                    x
                }
            }
            BaseActivation::Gelu => T::c(0.5) * x * (T::one() + (x * T::FRAC_1_SQRT_2()).erf()),
            BaseActivation::Silu => x * sigmoid(x),
        }
    }

    /// Derivative; the one-sided value `f'(0⁻)` is used at the kink of the
    /// piecewise-linear kinds.
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            BaseActivation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            BaseActivation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::c(slope)
                }
            }
            BaseActivation::Gelu => {
                let cdf = T::c(0.5) * (T::one() + (x * T::FRAC_1_SQRT_2()).erf());
                let pdf = (-(x * x) * T::c(0.5)).exp() / (T::c(2.0) * T::PI()).sqrt();
                cdf + x * pdf
            }
            BaseActivation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
        }
    }

    /// Whether the function has a derivative discontinuity at zero.
    pub fn has_kink(self) -> bool {
        matches!(self, BaseActivation::Relu | BaseActivation::LeakyRelu(_))
    }

    /// `f(c·x) = c·f(x)` for every `c > 0`.
    pub fn is_positively_homogeneous(self) -> bool {
        self.has_kink()
    }

    pub fn apply<'t, T: Real>(self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.activation(self)
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl fmt::Display for BaseActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaseActivation::Relu => write!(f, "relu"),
            BaseActivation::LeakyRelu(s) if *s == DEFAULT_LEAKY_SLOPE => write!(f, "leakyrelu"),
            BaseActivation::LeakyRelu(s) => write!(f, "leakyrelu:{s}"),
            BaseActivation::Gelu => write!(f, "gelu"),
            BaseActivation::Silu => write!(f, "silu"),
        }
    }
}

impl FromStr for BaseActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (lower.as_str(), None),
        };
        match (name, arg) {
            ("relu", None) => Ok(BaseActivation::Relu),
            ("gelu", None) => Ok(BaseActivation::Gelu),
            ("silu", None) => Ok(BaseActivation::Silu),
            ("leakyrelu", None) => Ok(BaseActivation::LeakyRelu(DEFAULT_LEAKY_SLOPE)),
            ("leakyrelu", Some(a)) => {
                let slope: f64 = a
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad leaky slope {a:?}")))?;
                BaseActivation::leaky(slope)
            }
            _ => Err(Error::InvalidConfig(format!("unknown activation {s:?}"))),
        }
    }
}

impl TryFrom<String> for BaseActivation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BaseActivation> for String {
    fn from(a: BaseActivation) -> String {
        a.to_string()
    }
}
