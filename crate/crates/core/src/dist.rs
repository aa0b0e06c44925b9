//! Scalar mark distributions.
//!
//! The catalogue is restricted to families with bounded or light tails,
//! which is the regime where the stability machinery applies. A Pareto with
//! `hi = inf` is accepted but reported as heavy-tailed so that drivers can
//! flag the run metadata.

use crate::error::{HailError, Result};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub enum Dist {
    /// Point mass.
    Fixed(f64),
    /// Uniform on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
    /// Exponential with the given mean.
    Exponential { mean: f64 },
    /// Pareto with index `alpha`, truncated to `[lo, hi]`; `hi` may be
    /// infinite, in which case the law is genuinely heavy-tailed.
    BoundedPareto { alpha: f64, lo: f64, hi: f64 },
}

impl Dist {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Dist::Fixed(v) => v.is_finite(),
            Dist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            Dist::Exponential { mean } => mean.is_finite() && mean > 0.0,
            Dist::BoundedPareto { alpha, lo, hi } => alpha > 0.0 && lo > 0.0 && hi >= lo,
        };
        if ok {
            Ok(())
        } else {
            Err(HailError::config(format!("invalid distribution {self:?}")))
        }
    }

    /// Validate and additionally require nonnegative support.
    pub fn validate_nonneg(&self, what: &str) -> Result<()> {
        self.validate()?;
        let lo = match *self {
            Dist::Fixed(v) => v,
            Dist::Uniform { lo, .. } => lo,
            Dist::Exponential { .. } => 0.0,
            Dist::BoundedPareto { lo, .. } => lo,
        };
        if lo < 0.0 {
            return Err(HailError::config(format!(
                "{what} must be nonnegative, got support starting at {lo}"
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Dist::Fixed(v) => v,
            Dist::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    rng.gen_range(lo..hi)
                }
            }
            Dist::Exponential { mean } => {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                -mean * u.ln()
            }
            Dist::BoundedPareto { alpha, lo, hi } => {
                let u: f64 = rng.gen_range(0.0..1.0);
                if hi.is_infinite() {
                    lo / (1.0 - u).powf(1.0 / alpha)
                } else {
                    let c = 1.0 - (lo / hi).powf(alpha);
                    lo / (1.0 - u * c).powf(1.0 / alpha)
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Fixed(v) => v,
            Dist::Uniform { lo, hi } => 0.5 * (lo + hi),
            Dist::Exponential { mean } => mean,
            Dist::BoundedPareto { alpha, lo, hi } => {
                if hi.is_infinite() {
                    if alpha > 1.0 {
                        alpha * lo / (alpha - 1.0)
                    } else {
                        f64::INFINITY
                    }
                } else if (alpha - 1.0).abs() < 1e-12 {
                    let c = 1.0 - (lo / hi).powf(alpha);
                    lo.powf(alpha) * (hi / lo).ln() * alpha / c
                } else {
                    let c = 1.0 - (lo / hi).powf(alpha);
                    alpha / c * (lo.powf(alpha) * (lo.powf(1.0 - alpha) - hi.powf(1.0 - alpha)))
                        / (alpha - 1.0)
                }
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Dist::Fixed(v) => {
                if x >= v {
                    1.0
                } else {
                    0.0
                }
            }
            Dist::Uniform { lo, hi } => {
                if x < lo {
                    0.0
                } else if x >= hi {
                    1.0
                } else {
                    (x - lo) / (hi - lo)
                }
            }
            Dist::Exponential { mean } => {
                if x <= 0.0 {
                    0.0
                } else {
                    1.0 - (-x / mean).exp()
                }
            }
            Dist::BoundedPareto { alpha, lo, hi } => {
                if x < lo {
                    0.0
                } else if x >= hi {
                    1.0
                } else if hi.is_infinite() {
                    1.0 - (lo / x).powf(alpha)
                } else {
                    let c = 1.0 - (lo / hi).powf(alpha);
                    (1.0 - (lo / x).powf(alpha)) / c
                }
            }
        }
    }

    /// Generalized inverse of the cdf.
    pub fn quantile(&self, q: f64) -> f64 {
        let q = q.clamp(0.0, 1.0);
        match *self {
            Dist::Fixed(v) => v,
            Dist::Uniform { lo, hi } => lo + q * (hi - lo),
            Dist::Exponential { mean } => -mean * (1.0 - q).ln(),
            Dist::BoundedPareto { alpha, lo, hi } => {
                if hi.is_infinite() {
                    lo / (1.0 - q).powf(1.0 / alpha)
                } else {
                    let c = 1.0 - (lo / hi).powf(alpha);
                    lo / (1.0 - q * c).powf(1.0 / alpha)
                }
            }
        }
    }

    /// Upper bound of the support, if bounded.
    pub fn upper_bound(&self) -> Option<f64> {
        match *self {
            Dist::Fixed(v) => Some(v),
            Dist::Uniform { hi, .. } => Some(hi),
            Dist::Exponential { .. } => None,
            Dist::BoundedPareto { hi, .. } => hi.is_finite().then_some(hi),
        }
    }

    /// True when the law lacks every exponential moment.
    pub fn is_heavy_tailed(&self) -> bool {
        matches!(*self, Dist::BoundedPareto { hi, .. } if hi.is_infinite())
    }
}
