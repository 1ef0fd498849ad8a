#![allow(dead_code)]

use std::borrow::Cow;
use std::sync::Arc;

use particle_bridge::bridge::{DynamicsMode, IpfConfig, SolverConfig};
use particle_bridge::dynamics::{FlowFields, StageTime};
use particle_bridge::error::Result;
use particle_bridge::oracle::GaussianBridge;
use particle_bridge::points::Points;
use particle_bridge::potential::PotentialModel;
use particle_bridge::problem::ProblemSpec;
use nalgebra::{DMatrix, DVector};
use particle_bridge::score::{beta_field, BetaField, GaugeMode, ScoreField};

/// N(0,1) → N(2,1) on [0, 1].
pub fn shift_spec(sigma: f64) -> ProblemSpec {
    ProblemSpec::scalar(0.0, 1.0, 2.0, 1.0, sigma, 1.0)
}

pub fn solver(n: usize, steps: usize, seed: u64, damping: f64) -> SolverConfig {
    SolverConfig {
        n_particles: n,
        steps,
        seed,
        ipf: IpfConfig {
            max_outer: 200,
            damping,
            tol_terminal: 1e-5,
            tol_fields: 1e-5,
        },
        mode: DynamicsMode::Meanfield,
        ..SolverConfig::default()
    }
}

/// Rescales a 1-D cloud to mean `m` and `1/n` variance `v` exactly.
pub fn standardize(points: &Points, m: f64, v: f64) -> Points {
    let n = points.len() as f64;
    let x = points.as_flat();
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let s = (v / var).sqrt();
    Points::from_flat(1, x.iter().map(|a| m + (a - mean) * s).collect())
}

pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0))
}

/// Closed-form ψ_t at the exact stage time, β = −Σ ∇log N(m_t, v_t).
pub struct AnalyticFields {
    pub bridge: GaussianBridge,
    pub sigma: DMatrix<f64>,
}

impl FlowFields for AnalyticFields {
    fn potential_at(&self, at: StageTime) -> Cow<'_, PotentialModel> {
        Cow::Owned(self.bridge.potential(at.t))
    }

    fn beta_at(&self, at: StageTime, _: &Points) -> Result<BetaField> {
        let s = self.bridge.at(at.t);
        let score = ScoreField::Gaussian {
            mean: DVector::from_element(1, s.mean),
            precision: DMatrix::from_element(1, 1, 1.0 / s.var),
        };
        Ok(beta_field(Arc::new(score), &self.sigma, GaugeMode::Natural))
    }
}
