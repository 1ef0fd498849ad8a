//! The labelled particle system `(X_t(a), P_t(a))` and statistics of its law.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::points::Points;
use crate::problem::{sample_dist, sample_in_domain, DistributionSpec, ProblemSpec};
use crate::rng::Domain;

/// Seed of the reference samples drawn by [`marginal_divergence`].
pub const DIVERGENCE_SEED: u64 = 0x5EED_D1FF;

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    labels: Points,
    pub states: Points,
    pub costates: Points,
    pub time: f64,
}

impl Ensemble {
    /// Ensemble whose states start at the labels with zero costates.
    pub fn from_labels(labels: Points) -> Self {
        let costates = Points::zeros(labels.len(), labels.dim());
        Ensemble {
            states: labels.clone(),
            labels,
            costates,
            time: 0.0,
        }
    }

    pub fn labels(&self) -> &Points {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.labels.dim()
    }

    /// Same labels, new states, costates and time.
    pub fn advanced(&self, states: Points, costates: Points, time: f64) -> Self {
        Ensemble {
            labels: self.labels.clone(),
            states,
            costates,
            time,
        }
    }
}

/// Labels drawn from `π0`, states equal to labels, costates zero.
pub fn init_ensemble(spec: &ProblemSpec, n: usize, seed: u64) -> Result<Ensemble> {
    if n < 2 {
        return Err(Error::spec("n_particles", "need at least 2 particles"));
    }
    Ok(Ensemble::from_labels(sample_dist(&spec.pi0, n, seed)))
}

/// Sample mean and `1/(n-1)` covariance (exactly symmetric).
pub fn empirical_moments(points: &Points) -> (DVector<f64>, DMatrix<f64>) {
    let n = points.len();
    let d = points.dim();
    let mut mean = DVector::zeros(d);
    for row in points.rows() {
        for i in 0..d {
            mean[i] += row[i];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for row in points.rows() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

/// Cholesky factor of a sample covariance, rejecting clouds whose spread is
/// at round-off level relative to their location.
pub(crate) fn covariance_cholesky(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let scale = cov
        .diagonal()
        .iter()
        .chain(mean.iter().map(|m| m * m).collect::<Vec<_>>().iter())
        .copied()
        .fold(f64::MIN_POSITIVE, f64::max);
    let chol = cov.clone().cholesky().ok_or(Error::DegenerateCovariance)?;
    let piv = chol.l().diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
    if !(piv > 1e-14 * scale) {
        return Err(Error::DegenerateCovariance);
    }
    Ok(chol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceMetric {
    /// KL between moment-matched Gaussians of the ensemble and the target.
    GaussKl,
    /// V-statistic energy distance against fresh target samples.
    EnergyDistance,
}

/// `KL(N(m̂, Ĉ) ‖ N(μ, S))` in closed form.
pub fn gaussian_kl(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    target_mean: &DVector<f64>,
    target_cov: &DMatrix<f64>,
) -> Result<f64> {
    let d = mean.len() as f64;
    let chol_c = covariance_cholesky(mean, cov)?;
    let chol_s = target_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::spec("target.cov", "not positive definite"))?;
    let s_inv = chol_s.inverse();
    let logdet = |l: DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let diff = target_mean - mean;
    let trace = (&s_inv * cov).trace();
    let maha = (diff.transpose() * &s_inv * &diff)[(0, 0)];
    let kl = 0.5 * (trace + maha - d + logdet(chol_s.l()) - logdet(chol_c.l()));
    Ok(kl.max(0.0))
}

pub fn marginal_divergence(
    states: &Points,
    target: &DistributionSpec,
    metric: DivergenceMetric,
) -> Result<f64> {
    match metric {
        DivergenceMetric::GaussKl => {
            let (m, c) = empirical_moments(states);
            let (tm, tc) = target.moments();
            gaussian_kl(&m, &c, &tm, &tc)
        }
        DivergenceMetric::EnergyDistance => {
            let reference = divergence_reference_samples(target, states.len());
            Ok(energy_distance(states, &reference))
        }
    }
}

/// The target samples [`marginal_divergence`] compares against.
pub fn divergence_reference_samples(target: &DistributionSpec, n: usize) -> Points {
    sample_in_domain(target, n, DIVERGENCE_SEED, Domain::Target)
}

fn mean_pair_distance(a: &Points, b: &Points) -> f64 {
    let rows: Vec<f64> = (0..a.len())
        .into_par_iter()
        .map(|i| {
            let x = a.row(i);
            let mut acc = 0.0;
            for y in b.rows() {
                acc += x
                    .iter()
                    .zip(y)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
            }
            acc
        })
        .collect();
    pairwise_sum(&rows) / (a.len() as f64 * b.len() as f64)
}

/// `2 E|X−Y| − E|X−X'| − E|Y−Y'|` over the two point sets.
pub fn energy_distance(a: &Points, b: &Points) -> f64 {
    let cross = mean_pair_distance(a, b);
    let aa = mean_pair_distance(a, a);
    let bb = mean_pair_distance(b, b);
    (2.0 * cross - aa - bb).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_point_moments() {
        let p = Points::from_flat(1, vec![-1.0, 1.0]);
        let (m, c) = empirical_moments(&p);
        assert_eq!(m[0], 0.0);
        assert_relative_eq!(c[(0, 0)], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn equal_points_have_zero_covariance() {
        let p = Points::from_flat(2, vec![1.5, -0.5, 1.5, -0.5, 1.5, -0.5]);
        let (_, c) = empirical_moments(&p);
        assert!(c.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn init_rejects_single_particle() {
        let spec = ProblemSpec::scalar(0.0, 1.0, 0.0, 1.0, 0.0, 1.0);
        assert!(init_ensemble(&spec, 1, 0).is_err());
    }

    #[test]
    fn init_has_zero_costates_and_label_states() {
        let spec = ProblemSpec::scalar(0.0, 1.0, 2.0, 1.0, 0.0, 1.0);
        let e = init_ensemble(&spec, 64, 9).unwrap();
        assert!(e.costates.as_flat().iter().all(|v| *v == 0.0));
        assert_eq!(e.states, *e.labels());
        assert_eq!(e.time, 0.0);
        assert_eq!(init_ensemble(&spec, 64, 9).unwrap(), e);
    }

    #[test]
    fn degenerate_cloud_is_an_error() {
        let p = Points::from_flat(1, vec![0.3; 10]);
        let r = marginal_divergence(&p, &DistributionSpec::scalar(0.0, 1.0), DivergenceMetric::GaussKl);
        assert!(matches!(r, Err(Error::DegenerateCovariance)));
    }

    #[test]
    fn energy_distance_of_identical_sets_is_zero() {
        let target = DistributionSpec::scalar(0.0, 1.0);
        let states = divergence_reference_samples(&target, 500);
        let d = marginal_divergence(&states, &target, DivergenceMetric::EnergyDistance).unwrap();
        assert_eq!(d, 0.0);
    }
}
