//! Scalar losses and their derivatives with respect to the prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A quantile level strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(q: f64) -> Result<Self> {
        if q > 0.0 && q < 1.0 {
            Ok(Self(q))
        } else {
            Err(Error::Config(format!("quantile level {q} outside (0, 1)")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for QuantileLevel {
    type Error = Error;
    fn try_from(q: f64) -> Result<Self> {
        Self::new(q)
    }
}

impl From<QuantileLevel> for f64 {
    fn from(q: QuantileLevel) -> f64 {
        q.0
    }
}

/// Lower tail level of a symmetric quantile pair, strictly inside (0, 0.5).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct AlphaLevel(f64);

impl AlphaLevel {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha < 0.5 {
            Ok(Self(alpha))
        } else {
            Err(Error::Config(format!("alpha {alpha} outside (0, 0.5)")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The (alpha, 0.5, 1 - alpha) head levels, in head order.
    pub fn head_levels(self) -> [QuantileLevel; 3] {
        [
            QuantileLevel(self.0),
            QuantileLevel(0.5),
            QuantileLevel(1.0 - self.0),
        ]
    }
}

impl TryFrom<f64> for AlphaLevel {
    type Error = Error;
    fn try_from(alpha: f64) -> Result<Self> {
        Self::new(alpha)
    }
}

impl From<AlphaLevel> for f64 {
    fn from(a: AlphaLevel) -> f64 {
        a.0
    }
}

pub fn pinball_loss(y: f64, y_hat: f64, q: QuantileLevel) -> f64 {
    let q = q.0;
    if y >= y_hat {
        q * (y - y_hat)
    } else {
        (1.0 - q) * (y_hat - y)
    }
}

/// d/dŷ of the pinball loss. Equality takes the `y >= ŷ` branch.
pub fn pinball_grad(y: f64, y_hat: f64, q: QuantileLevel) -> f64 {
    if y >= y_hat {
        -q.0
    } else {
        1.0 - q.0
    }
}

/// Gaussian negative log-likelihood in log-variance form, constant dropped.
pub fn gaussian_nll(y: f64, mu: f64, log_var: f64) -> f64 {
    let r = y - mu;
    0.5 * log_var + 0.5 * r * r * (-log_var).exp()
}

/// Partial derivatives of [`gaussian_nll`] with respect to `(mu, log_var)`.
pub fn gaussian_nll_grad(y: f64, mu: f64, log_var: f64) -> (f64, f64) {
    let r = y - mu;
    let inv_var = (-log_var).exp();
    (-r * inv_var, 0.5 - 0.5 * r * r * inv_var)
}

pub fn mse(y: f64, y_hat: f64) -> f64 {
    (y - y_hat) * (y - y_hat)
}

pub fn mse_grad(y: f64, y_hat: f64) -> f64 {
    2.0 * (y_hat - y)
}

/// Training objective over a whole output row.
///
/// Head layouts (network outputs per target column `j`):
/// - `Mse`: one head, `out[j]`.
/// - `Pinball`: `levels.len()` heads at `out[j * L + l]`.
/// - `GaussianNll`: `(mu, log_var)` at `out[2j]`, `out[2j + 1]`.
/// - `ResidualNll`: one log-variance head per column; the target is the
///   residual of an already-fitted mean, so the mean is fixed at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    Mse,
    Pinball { levels: Vec<QuantileLevel> },
    GaussianNll,
    ResidualNll,
}

impl LossKind {
    pub fn heads_per_target(&self) -> usize {
        match self {
            LossKind::Mse | LossKind::ResidualNll => 1,
            LossKind::Pinball { levels } => levels.len(),
            LossKind::GaussianNll => 2,
        }
    }

    /// Loss of one row; writes ∂loss/∂output into `grad`.
    pub fn row_loss_grad(&self, output: &[f64], target: &[f64], grad: &mut [f64]) -> f64 {
        debug_assert_eq!(output.len(), target.len() * self.heads_per_target());
        debug_assert_eq!(grad.len(), output.len());
        let mut total = 0.0;
        match self {
            LossKind::Mse => {
                for ((&o, &y), g) in output.iter().zip(target).zip(grad.iter_mut()) {
                    total += mse(y, o);
                    *g = mse_grad(y, o);
                }
            }
            LossKind::Pinball { levels } => {
                let l = levels.len();
                for (j, &y) in target.iter().enumerate() {
                    for (k, &q) in levels.iter().enumerate() {
                        let idx = j * l + k;
                        total += pinball_loss(y, output[idx], q);
                        grad[idx] = pinball_grad(y, output[idx], q);
                    }
                }
            }
            LossKind::GaussianNll => {
                for (j, &y) in target.iter().enumerate() {
                    let (mu, lv) = (output[2 * j], output[2 * j + 1]);
                    total += gaussian_nll(y, mu, lv);
                    let (gm, gl) = gaussian_nll_grad(y, mu, lv);
                    grad[2 * j] = gm;
                    grad[2 * j + 1] = gl;
                }
            }
            LossKind::ResidualNll => {
                for ((&lv, &r), g) in output.iter().zip(target).zip(grad.iter_mut()) {
                    total += gaussian_nll(r, 0.0, lv);
                    *g = gaussian_nll_grad(r, 0.0, lv).1;
                }
            }
        }
        total
    }
}
