//! Activation functions and their local piecewise-linear models.
//!
//! Every supported activation behaves like `d + m_+ x` for small positive
//! `x` and `d + m_- x` for small negative `x`, up to an error `eps'` on
//! `|x| <= a(eps')`. The constructions only ever feed activations inputs in
//! that neighbourhood, which is what lets two masked layers act like one
//! linear map.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four activations the constructions know how to linearize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Activation {
    Relu,
    /// Leaky ReLU with negative slope `alpha > 0`.
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

/// Local linear model of an activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linearization {
    pub m_plus: f64,
    pub m_minus: f64,
    pub d: f64,
    /// Half-width of the neighbourhood where the model holds; `f64::INFINITY`
    /// for the piecewise-linear activations.
    pub a: f64,
    pub r: f64,
    pub lipschitz: f64,
}

impl Linearization {
    /// The active slope: `m_+` for `x > 0`, `m_-` for `x < 0`, and 0 at 0.
    pub fn mu_pm(&self, x: f64) -> f64 {
        if x > 0.0 {
            self.m_plus
        } else if x < 0.0 {
            self.m_minus
        } else {
            0.0
        }
    }

    /// The piecewise-linear surrogate `d + mu(x) x`.
    pub fn surrogate(&self, x: f64) -> f64 {
        self.d + self.mu_pm(x) * x
    }

    /// Bound `2 r eps'` on the identity residual inside `|x| <= a`.
    pub fn identity_bound(&self, eps_prime: f64) -> f64 {
        2.0 * self.r * eps_prime
    }
}

/// Free-function form of [`Linearization::mu_pm`].
pub fn mu_pm(lin: &Linearization, x: f64) -> f64 {
    lin.mu_pm(x)
}

// Where the closed-form branch of a(.) stops binding: a(x) reaches its cap.
const TANH_G_BREAK: f64 = (PI / 2.0) * (PI / 2.0) * (PI / 2.0) / 3.0;
const SIGMOID_G_BREAK: f64 = PI * PI * PI / 48.0;
const G_LOW: f64 = 1e-16;

impl Activation {
    pub fn leaky(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "leaky relu slope must be positive, got {alpha}"
            )));
        }
        Ok(Activation::LeakyRelu(alpha))
    }

    pub fn evaluate(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(alpha) => {
                if x >= 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Lipschitz constant on the real line.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Sigmoid => 0.25,
            _ => 1.0,
        }
    }

    /// `phi(0)`.
    pub fn offset(self) -> f64 {
        match self {
            Activation::Sigmoid => 0.5,
            _ => 0.0,
        }
    }

    /// True when the linear model has no error anywhere.
    pub fn is_exactly_linearizable(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu(_))
    }

    /// Positive homogeneity `phi(c x) = c phi(x)` for `c > 0`.
    pub fn is_positively_homogeneous(self) -> bool {
        self.is_exactly_linearizable()
    }

    /// Half-width `a(eps')` of the validity neighbourhood.
    pub fn validity_radius(self, eps_prime: f64) -> f64 {
        match self {
            Activation::Relu | Activation::LeakyRelu(_) => f64::INFINITY,
            Activation::Tanh => (3.0 * eps_prime).cbrt().min(PI / 2.0),
            Activation::Sigmoid => (48.0 * eps_prime).cbrt().min(PI),
        }
    }

    pub fn linearize(self, eps_prime: f64) -> Linearization {
        let (m_plus, m_minus) = match self {
            Activation::Relu => (1.0, 0.0),
            Activation::LeakyRelu(alpha) => (1.0, alpha),
            Activation::Tanh => (1.0, 1.0),
            Activation::Sigmoid => (0.25, 0.25),
        };
        Linearization {
            m_plus,
            m_minus,
            d: self.offset(),
            a: self.validity_radius(eps_prime),
            r: 1.0 / (m_plus + m_minus),
            lipschitz: self.lipschitz(),
        }
    }

    /// `g(x) = x / a(x)`.
    pub fn g(self, x: f64) -> f64 {
        x / self.validity_radius(x)
    }

    /// Range `(low, high]` on which [`Activation::invert_g`] is defined.
    pub fn g_range(self) -> Option<(f64, f64)> {
        let brk = match self {
            Activation::Tanh => TANH_G_BREAK,
            Activation::Sigmoid => SIGMOID_G_BREAK,
            _ => return None,
        };
        Some((self.g(G_LOW), self.g(brk)))
    }

    /// Solves `g(x) = y` by bisection in log space. Only defined for the
    /// smooth activations; the piecewise-linear ones never need it.
    pub fn invert_g(self, y: f64) -> Result<f64> {
        let (low, high) = self.g_range().ok_or_else(|| Error::UnsupportedActivation {
            activation: self.to_string(),
            reason: "linearization is exact, no g-inversion needed".into(),
        })?;
        if !(y > low && y <= high) {
            return Err(Error::OutsideInvertibleRange {
                value: y,
                low,
                high,
            });
        }
        let upper = match self {
            Activation::Tanh => TANH_G_BREAK,
            _ => SIGMOID_G_BREAK,
        };
        let (mut lo, mut hi) = (G_LOW.ln(), upper.ln());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.g(mid.exp()) < y {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-14 {
                break;
            }
        }
        Ok((0.5 * (lo + hi)).exp())
    }

    /// `|x - r (phi(x) - phi(-x))|`, the residual of the identity trick.
    pub fn identity_error(self, x: f64) -> f64 {
        let r = self.linearize(1.0).r;
        (x - r * (self.evaluate(x) - self.evaluate(-x))).abs()
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => f.write_str("relu"),
            Activation::LeakyRelu(alpha) => write!(f, "leaky_relu:{alpha}"),
            Activation::Tanh => f.write_str("tanh"),
            Activation::Sigmoid => f.write_str("sigmoid"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            _ => match s.strip_prefix("leaky_relu:") {
                Some(alpha) => {
                    let alpha: f64 = alpha.parse().map_err(|_| {
                        Error::InvalidArgument(format!("bad leaky relu slope in `{s}`"))
                    })?;
                    Activation::leaky(alpha)
                }
                None => Err(Error::InvalidArgument(format!("unknown activation `{s}`"))),
            },
        }
    }
}

impl TryFrom<String> for Activation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Activation> for String {
    fn from(a: Activation) -> Self {
        a.to_string()
    }
}
