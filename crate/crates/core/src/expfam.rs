//! Canonical-link exponential-family responses.
//!
//! The conditional density of a count `y` given the state `w` is
//! `exp{y w - m b(w) + c(y)}` with `b(w) = log(1 + e^w)` for the binary and
//! binomial families and `b(w) = e^w` for the Poisson family. The trial
//! count `m` is fixed at 1 for binary and Poisson responses.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Bound applied to `w` before exponentiation.
pub const W_CLAMP: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Binary,
    Binomial,
    Poisson,
}

/// Conditional mean and variance of a response at a given state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalMoments {
    pub mu: f64,
    pub sigma2: f64,
}

/// Pearson residual together with its first two derivatives in `w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PearsonResidual {
    pub e: f64,
    pub de_dw: f64,
    pub d2e_dw2: f64,
}

#[inline]
fn logistic(w: f64) -> f64 {
    if w >= 0.0 {
        1.0 / (1.0 + (-w).exp())
    } else {
        let z = w.exp();
        z / (1.0 + z)
    }
}

#[inline]
fn log1p_exp(w: f64) -> f64 {
    if w > 0.0 {
        w + (-w).exp().ln_1p()
    } else {
        w.exp().ln_1p()
    }
}

fn check_w(w: f64) -> Result<f64> {
    if !w.is_finite() {
        return Err(Error::Domain(format!("non-finite state w = {w}")));
    }
    Ok(w.clamp(-W_CLAMP, W_CLAMP))
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Binary => "binary",
            Family::Binomial => "binomial",
            Family::Poisson => "poisson",
        }
    }

    /// Whether the family carries a variable trial count.
    pub fn uses_trials(self) -> bool {
        matches!(self, Family::Binomial)
    }

    /// Derivative of the cumulant function `b` of the given order.
    ///
    /// Orders 0 through 3 are the public contract; order 4 is also
    /// available because the second derivative of the Pearson residual
    /// needs it.
    pub fn cumulant(self, w: f64, order: u8) -> Result<f64> {
        let w = check_w(w)?;
        match self {
            Family::Binary | Family::Binomial => {
                if order == 0 {
                    return Ok(log1p_exp(w));
                }
                let p = logistic(w);
                let q = logistic(-w);
                match order {
                    1 => Ok(p),
                    2 => Ok(p * q),
                    3 => Ok(p * q * (q - p)),
                    4 => Ok(p * q * (1.0 - 6.0 * p * q)),
                    _ => Err(Error::Domain(format!("cumulant order {order} unsupported"))),
                }
            }
            Family::Poisson => match order {
                0..=4 => Ok(w.exp()),
                _ => Err(Error::Domain(format!("cumulant order {order} unsupported"))),
            },
        }
    }

    /// Validates that `y` lies in the support for `m` trials.
    pub fn check_support(self, y: u64, m: u64) -> Result<()> {
        match self {
            Family::Binary => {
                if m != 1 || y > 1 {
                    return Err(Error::Domain(format!(
                        "binary response needs y in {{0,1}} and m = 1 (got y = {y}, m = {m})"
                    )));
                }
            }
            Family::Binomial => {
                if m == 0 || y > m {
                    return Err(Error::Domain(format!(
                        "binomial response needs 0 <= y <= m, m >= 1 (got y = {y}, m = {m})"
                    )));
                }
            }
            Family::Poisson => {
                if m != 1 {
                    return Err(Error::Domain(format!("poisson response needs m = 1 (got {m})")));
                }
            }
        }
        Ok(())
    }

    /// The normalizing term `c(y)` of the density.
    pub fn log_normalizer(self, y: u64, m: u64) -> f64 {
        match self {
            Family::Binary => 0.0,
            Family::Binomial => {
                if m == 1 {
                    0.0
                } else {
                    ln_gamma(m as f64 + 1.0) - ln_gamma(y as f64 + 1.0) - ln_gamma((m - y) as f64 + 1.0)
                }
            }
            Family::Poisson => {
                if y < 2 {
                    0.0
                } else {
                    -ln_gamma(y as f64 + 1.0)
                }
            }
        }
    }

    /// Exact `log f(y | w)` including the normalizing term.
    pub fn log_density(self, y: u64, w: f64, m: u64) -> Result<f64> {
        self.check_support(y, m)?;
        let b = self.cumulant(w, 0)?;
        let w = w.clamp(-W_CLAMP, W_CLAMP);
        Ok(y as f64 * w - m as f64 * b + self.log_normalizer(y, m))
    }

    pub fn moments(self, w: f64, m: u64) -> Result<ConditionalMoments> {
        let m = m as f64;
        Ok(ConditionalMoments {
            mu: m * self.cumulant(w, 1)?,
            sigma2: m * self.cumulant(w, 2)?,
        })
    }

    /// Pearson residual `(y - mu) / sigma` and its derivatives in `w`.
    pub fn pearson_residual(self, y: u64, w: f64, m: u64) -> Result<PearsonResidual> {
        let mf = m as f64;
        let mu = mf * self.cumulant(w, 1)?;
        let sigma2 = mf * self.cumulant(w, 2)?;
        if sigma2.is_nan() || sigma2 <= f64::MIN_POSITIVE {
            return Err(Error::DegenerateVariance { w });
        }
        let b3 = mf * self.cumulant(w, 3)?;
        let b4 = mf * self.cumulant(w, 4)?;
        let sigma = sigma2.sqrt();
        let e = (y as f64 - mu) / sigma;
        let ds = b3 / (2.0 * sigma);
        let d2s = (b4 - 2.0 * ds * ds) / (2.0 * sigma);
        let de = -sigma - e * ds / sigma;
        let d2e = -ds - de * ds / sigma - e * (d2s * sigma - ds * ds) / sigma2;
        Ok(PearsonResidual {
            e,
            de_dw: de,
            d2e_dw2: d2e,
        })
    }

    /// Draws one response given the state.
    pub fn sample<R: Rng + ?Sized>(self, w: f64, m: u64, rng: &mut R) -> Result<u64> {
        let w = check_w(w)?;
        match self {
            Family::Binary | Family::Binomial => {
                let p = logistic(w);
                let mut y = 0;
                for _ in 0..m {
                    if rng.random::<f64>() < p {
                        y += 1;
                    }
                }
                Ok(y)
            }
            Family::Poisson => {
                let rate = w.exp();
                let dist = Poisson::new(rate)
                    .map_err(|e| Error::Domain(format!("poisson rate {rate}: {e}")))?;
                Ok(dist.sample(rng) as u64)
            }
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Family::Binary),
            "binomial" => Ok(Family::Binomial),
            "poisson" => Ok(Family::Poisson),
            other => Err(Error::Config(format!("unknown family '{other}'"))),
        }
    }
}
