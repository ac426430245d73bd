//! Activation functions `σ` with derivative `σ′` and antiderivative `Σ`.

use std::f64::consts::{FRAC_PI_2, LN_2};
use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error};

/// The supported activation family.
///
/// ReLU-type kinks take the left derivative at `0` (so `σ′_relu(0) = 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    /// `max(slope·s, s)`, `0 ≤ slope ≤ 1`.
    LeakyRelu { slope: f64 },
    /// `s` for `s > 0`, `α(eˢ − 1)` otherwise.
    Elu { alpha: f64 },
    Tanh,
    Arctan,
    /// `1 / (1 + e⁻ˢ)`. Note `σ(0) = ½`.
    Logistic,
}

impl Activation {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            Activation::Relu => s.max(0.0),
            Activation::LeakyRelu { slope } => {
                if s > 0.0 {
                    s
                } else {
                    slope * s
                }
            }
            Activation::Elu { alpha } => {
                if s > 0.0 {
                    s
                } else {
                    alpha * s.exp_m1()
                }
            }
            Activation::Tanh => s.tanh(),
            Activation::Arctan => s.atan(),
            Activation::Logistic => logistic(s),
        }
    }

    pub fn deriv(&self, s: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if s > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Elu { alpha } => {
                if s > 0.0 {
                    1.0
                } else {
                    alpha * s.exp()
                }
            }
            Activation::Tanh => {
                let c = s.cosh();
                if c.is_finite() {
                    1.0 / (c * c)
                } else {
                    0.0
                }
            }
            Activation::Arctan => 1.0 / (1.0 + s * s),
            Activation::Logistic => {
                let h = logistic(s);
                h * (1.0 - h)
            }
        }
    }

    /// `Σ(s) = ∫₀ˢ σ(ξ) dξ` in closed form.
    pub fn antideriv(&self, s: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if s > 0.0 {
                    0.5 * s * s
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if s > 0.0 {
                    0.5 * s * s
                } else {
                    0.5 * slope * s * s
                }
            }
            Activation::Elu { alpha } => {
                if s > 0.0 {
                    0.5 * s * s
                } else {
                    alpha * (s.exp_m1() - s)
                }
            }
            // log cosh s, written to avoid overflow
            Activation::Tanh => {
                let a = s.abs();
                a + (-2.0 * a).exp().ln_1p() - LN_2
            }
            Activation::Arctan => s * s.atan() - 0.5 * (s * s).ln_1p(),
            // softplus(s) − log 2
            Activation::Logistic => softplus(s) - LN_2,
        }
    }

    /// `(σ′(0), σ″(0), σ‴(0))` for kinds that are smooth at the origin.
    pub fn taylor_at_zero(&self) -> Option<[f64; 3]> {
        match self {
            Activation::Tanh => Some([1.0, 0.0, -2.0]),
            Activation::Arctan => Some([1.0, 0.0, -2.0]),
            Activation::Logistic => Some([0.25, 0.0, -0.125]),
            _ => None,
        }
    }

    pub fn is_smooth(&self) -> bool {
        self.taylor_at_zero().is_some()
    }

    /// `σ(0) = 0`; false only for the logistic link.
    pub fn vanishes_at_zero(&self) -> bool {
        !matches!(self, Activation::Logistic)
    }

    /// `s·σ(s) ≥ 0` for all `s`.
    pub fn sign_preserving(&self) -> bool {
        match *self {
            Activation::LeakyRelu { slope } => slope >= 0.0,
            Activation::Elu { alpha } => alpha >= 0.0,
            Activation::Logistic => false,
            _ => true,
        }
    }

    /// `sup |σ′|`, the global Lipschitz constant.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Activation::Relu | Activation::Tanh | Activation::Arctan => 1.0,
            Activation::LeakyRelu { slope } => slope.abs().max(1.0),
            Activation::Elu { alpha } => alpha.abs().max(1.0),
            Activation::Logistic => 0.25,
        }
    }

    /// `sup |σ|` for bounded kinds.
    pub fn sup_abs(&self) -> Option<f64> {
        match self {
            Activation::Tanh => Some(1.0),
            Activation::Arctan => Some(FRAC_PI_2),
            Activation::Logistic => Some(1.0),
            _ => None,
        }
    }

    /// `σ′ > 0` everywhere on `ℝ`.
    pub fn strictly_increasing(&self) -> bool {
        match *self {
            Activation::Relu => false,
            Activation::LeakyRelu { slope } => slope > 0.0,
            Activation::Elu { alpha } => alpha > 0.0,
            Activation::Tanh | Activation::Arctan | Activation::Logistic => true,
        }
    }
}

fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::LeakyRelu { slope } => write!(f, "leaky_relu:{slope}"),
            Activation::Elu { alpha } => write!(f, "elu:{alpha}"),
            Activation::Tanh => write!(f, "tanh"),
            Activation::Arctan => write!(f, "arctan"),
            Activation::Logistic => write!(f, "logistic"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    /// Parses `relu`, `leaky_relu:slope`, `elu:alpha`, `tanh`, `arctan`,
    /// `logistic`. A bare `leaky_relu` means slope 0.1 and a bare `elu` α = 1.
    fn from_str(s: &str) -> Result<Self, Error> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n.trim(), Some(p.trim())),
            None => (s.trim(), None),
        };
        let number = |p: Option<&str>, default: f64| -> Result<f64, Error> {
            match p {
                None => Ok(default),
                Some(p) => p
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| invalid(format!("bad activation parameter '{p}'"))),
            }
        };
        let act = match name {
            "relu" => Activation::Relu,
            "leaky_relu" => {
                let slope = number(param, 0.1)?;
                if !(0.0..=1.0).contains(&slope) {
                    return Err(invalid(format!("leaky_relu slope {slope} outside [0,1]")));
                }
                Activation::LeakyRelu { slope }
            }
            "elu" => {
                let alpha = number(param, 1.0)?;
                if alpha < 0.0 {
                    return Err(invalid(format!("elu alpha {alpha} must be non-negative")));
                }
                Activation::Elu { alpha }
            }
            "tanh" => Activation::Tanh,
            "arctan" => Activation::Arctan,
            "logistic" | "sigmoid" => Activation::Logistic,
            other => return Err(invalid(format!("unknown activation '{other}'"))),
        };
        if param.is_some() && !matches!(name, "leaky_relu" | "elu") {
            return Err(invalid(format!("activation '{name}' takes no parameter")));
        }
        Ok(act)
    }
}
