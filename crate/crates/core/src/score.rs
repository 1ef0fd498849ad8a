//! Score estimation `∇ log ρ_t` from particles and the gauge field β_t.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::{covariance_cholesky, empirical_moments};
use crate::error::{Error, Result};
use crate::points::Points;

/// How the score of a particle cloud is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMethod {
    /// Score of the moment-matched Gaussian.
    #[default]
    Gaussian,
    /// Gaussian-kernel density; Silverman bandwidth when `None`.
    Kde { bandwidth: Option<f64> },
}

/// Gauge choice for β_t.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GaugeMode {
    /// β = −Σ ∇log ρ.
    #[default]
    Natural,
    /// β ≡ 0.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreField {
    Gaussian {
        mean: DVector<f64>,
        precision: DMatrix<f64>,
    },
    Kde {
        points: Arc<Points>,
        bandwidth: f64,
    },
}

/// Silverman's rule with the mean per-dimension standard deviation.
pub fn silverman_bandwidth(points: &Points) -> f64 {
    let n = points.len() as f64;
    let d = points.dim() as f64;
    let (_, cov) = empirical_moments(points);
    let sd = cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).sum::<f64>() / d;
    sd * (4.0 / ((d + 2.0) * n)).powf(1.0 / (d + 4.0))
}

pub fn estimate_score(points: &Points, method: ScoreMethod) -> Result<ScoreField> {
    if points.len() < 2 {
        return Err(Error::spec("score", "need at least 2 particles"));
    }
    match method {
        ScoreMethod::Gaussian => {
            let (mean, cov) = empirical_moments(points);
            let chol = covariance_cholesky(&mean, &cov)?;
            Ok(ScoreField::Gaussian {
                mean,
                precision: chol.inverse(),
            })
        }
        ScoreMethod::Kde { bandwidth } => {
            let h = match bandwidth {
                Some(h) if h.is_finite() && h > 0.0 => h,
                Some(h) => return Err(Error::spec("score.bandwidth", format!("must be positive, got {h}"))),
                None => silverman_bandwidth(points),
            };
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::DegenerateCovariance);
            }
            Ok(ScoreField::Kde {
                points: Arc::new(points.clone()),
                bandwidth: h,
            })
        }
    }
}

impl ScoreField {
    pub fn dim(&self) -> usize {
        match self {
            ScoreField::Gaussian { mean, .. } => mean.len(),
            ScoreField::Kde { points, .. } => points.dim(),
        }
    }

    /// Writes `s(x)` into `out`.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            ScoreField::Gaussian { mean, precision } => {
                let d = mean.len();
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += precision[(i, j)] * (x[j] - mean[j]);
                    }
                    out[i] = -acc;
                }
            }
            ScoreField::Kde { points, bandwidth } => {
                let inv = 1.0 / (bandwidth * bandwidth);
                let mut max_log = f64::NEG_INFINITY;
                for y in points.rows() {
                    let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                    max_log = max_log.max(-0.5 * r2 * inv);
                }
                let mut total = 0.0;
                out.iter_mut().for_each(|o| *o = 0.0);
                for y in points.rows() {
                    let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                    let w = (-0.5 * r2 * inv - max_log).exp();
                    total += w;
                    for (o, (a, b)) in out.iter_mut().zip(x.iter().zip(y)) {
                        *o -= w * (a - b) * inv;
                    }
                }
                out.iter_mut().for_each(|o| *o /= total);
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.eval_into(x, &mut out);
        out
    }
}

/// Gauge field β(x).
#[derive(Debug, Clone, PartialEq)]
pub enum BetaField {
    Zero,
    /// `β(x) = −Σ s(x)`.
    Score {
        sigma: DMatrix<f64>,
        score: Arc<ScoreField>,
    },
    /// `(1 − s) β_a + s β_b`.
    Blend {
        from: Box<BetaField>,
        to: Box<BetaField>,
        weight: f64,
    },
}

pub fn beta_field(score: Arc<ScoreField>, sigma: &DMatrix<f64>, gauge: GaugeMode) -> BetaField {
    if gauge == GaugeMode::Zero || sigma.iter().all(|v| *v == 0.0) {
        return BetaField::Zero;
    }
    BetaField::Score {
        sigma: sigma.clone(),
        score,
    }
}

impl BetaField {
    pub fn is_zero(&self) -> bool {
        match self {
            BetaField::Zero => true,
            BetaField::Blend { from, to, .. } => from.is_zero() && to.is_zero(),
            BetaField::Score { .. } => false,
        }
    }

    /// Writes β(x) into `out`; `tmp` needs the same length.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64], tmp: &mut [f64]) {
        match self {
            BetaField::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            BetaField::Score { sigma, score } => {
                score.eval_into(x, tmp);
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, t) in tmp.iter().enumerate() {
                        acc += sigma[(i, j)] * t;
                    }
                    *o = -acc;
                }
            }
            BetaField::Blend { from, to, weight } => {
                let mut a = vec![0.0; out.len()];
                from.eval_into(x, &mut a, tmp);
                to.eval_into(x, out, tmp);
                for (o, a) in out.iter_mut().zip(&a) {
                    *o = a + weight * (*o - a);
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let mut tmp = vec![0.0; x.len()];
        self.eval_into(x, &mut out, &mut tmp);
        out
    }
}
