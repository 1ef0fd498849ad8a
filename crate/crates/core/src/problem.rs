//! Bridge problem definition and analytic reference distributions.
//!
//! A [`ProblemSpec`] describes the controlled diffusion
//! `dX = (b(X) + G U) dt + √2 Σ^{1/2} dB` with running cost `½‖U‖²_R`
//! and the two marginals it has to connect. Marginals are Gaussians or
//! Gaussian mixtures so that their scores are available in closed form.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{dvec, is_symmetric, min_eigenvalue, SYM_TOL};
use crate::points::Points;
use crate::rng::{self, Domain};

const PD_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
struct Factor {
    chol: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

/// Multivariate normal `N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: Option<Factor>,
}

impl PartialEq for Gaussian {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

impl Gaussian {
    /// Builds the component; an invalid covariance is only reported by
    /// [`validate_spec`] or on first evaluation.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        let factor = Self::factorize(&mean, &cov);
        Gaussian { mean, cov, factor }
    }

    pub fn from_slices(mean: &[f64], cov_rows: &[Vec<f64>]) -> Self {
        let cov = crate::linalg::rows_to_matrix(cov_rows).unwrap_or_else(|| DMatrix::zeros(0, 0));
        Gaussian::new(dvec(mean), cov)
    }

    /// One-dimensional `N(mean, var)`.
    pub fn scalar(mean: f64, var: f64) -> Self {
        Gaussian::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    fn factorize(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Option<Factor> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d || !is_symmetric(cov, SYM_TOL) {
            return None;
        }
        if !cov.iter().all(|v| v.is_finite()) || min_eigenvalue(cov) <= PD_TOL {
            return None;
        }
        let chol = cov.clone().cholesky()?;
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Some(Factor {
            precision: chol.inverse(),
            chol: chol.l(),
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, path: &str) -> Result<()> {
        let d = self.dim();
        if self.cov.nrows() != d || self.cov.ncols() != d {
            return Err(Error::spec(
                format!("{path}.cov"),
                format!("expected {d}×{d}, got {}×{}", self.cov.nrows(), self.cov.ncols()),
            ));
        }
        if !self.mean.iter().all(|v| v.is_finite()) {
            return Err(Error::spec(format!("{path}.mean"), "non-finite entry"));
        }
        if !is_symmetric(&self.cov, SYM_TOL) {
            return Err(Error::spec(format!("{path}.cov"), "not symmetric"));
        }
        if self.factor.is_none() {
            return Err(Error::spec(format!("{path}.cov"), "not positive definite"));
        }
        Ok(())
    }

    fn factor(&self) -> Result<&Factor> {
        self.factor
            .as_ref()
            .ok_or_else(|| Error::spec("cov", "not positive definite"))
    }

    /// `(log N(x), ∇ log N(x))`, score written into `score`.
    fn log_density_score(&self, x: &[f64], score: &mut [f64]) -> Result<f64> {
        let f = self.factor()?;
        let d = self.dim();
        let mut quad = 0.0;
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += f.precision[(i, j)] * (x[j] - self.mean[j]);
            }
            score[i] = -acc;
            quad += (x[i] - self.mean[i]) * acc;
        }
        Ok(f.log_norm - 0.5 * quad)
    }

    fn sample_into<R: Rng>(&self, rng: &mut R, z: &mut [f64], out: &mut [f64]) {
        let l = &self
            .factor
            .as_ref()
            .expect("sampling from an unvalidated Gaussian")
            .chol;
        for v in z.iter_mut() {
            *v = rng.sample(rand_distr::StandardNormal);
        }
        for i in 0..self.dim() {
            let mut acc = self.mean[i];
            for j in 0..=i {
                acc += l[(i, j)] * z[j];
            }
            out[i] = acc;
        }
    }
}

/// A marginal `π` of the bridge problem.
#[derive(Debug, Clone, PartialEq)]
pub enum DistributionSpec {
    Gaussian(Gaussian),
    /// `(weight, component)` pairs; weights sum to one.
    Mixture(Vec<(f64, Gaussian)>),
}

impl DistributionSpec {
    pub fn gaussian(mean: &[f64], cov_rows: &[Vec<f64>]) -> Self {
        DistributionSpec::Gaussian(Gaussian::from_slices(mean, cov_rows))
    }

    pub fn scalar(mean: f64, var: f64) -> Self {
        DistributionSpec::Gaussian(Gaussian::scalar(mean, var))
    }

    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::Gaussian(g) => g.dim(),
            DistributionSpec::Mixture(c) => c.first().map_or(0, |(_, g)| g.dim()),
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        match self {
            DistributionSpec::Gaussian(g) => g.check(path),
            DistributionSpec::Mixture(comps) => {
                if comps.is_empty() {
                    return Err(Error::spec(format!("{path}.components"), "empty mixture"));
                }
                let d = comps[0].1.dim();
                let mut total = 0.0;
                for (k, (w, g)) in comps.iter().enumerate() {
                    let p = format!("{path}.components[{k}]");
                    if !(w.is_finite() && *w >= 0.0) {
                        return Err(Error::spec(format!("{p}.weight"), "must be nonnegative"));
                    }
                    if g.dim() != d {
                        return Err(Error::spec(format!("{p}.mean"), "dimension mismatch"));
                    }
                    g.check(&p)?;
                    total += w;
                }
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::spec(
                        format!("{path}.components"),
                        format!("weights sum to {total}, expected 1"),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Mean and covariance of the distribution.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        match self {
            DistributionSpec::Gaussian(g) => (g.mean.clone(), g.cov.clone()),
            DistributionSpec::Mixture(comps) => {
                let d = self.dim();
                let mut mean = DVector::zeros(d);
                let mut second = DMatrix::zeros(d, d);
                for (w, g) in comps {
                    mean += &g.mean * *w;
                    second += (&g.cov + &g.mean * g.mean.transpose()) * *w;
                }
                let cov = second - &mean * mean.transpose();
                (mean, crate::linalg::symmetrize(&cov))
            }
        }
    }

    /// Exact log-density; the score is written into `score`.
    pub fn log_density_score_into(&self, x: &[f64], score: &mut [f64]) -> Result<f64> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("density argument {x:?}")));
        }
        match self {
            DistributionSpec::Gaussian(g) => g.log_density_score(x, score),
            DistributionSpec::Mixture(comps) => {
                let d = self.dim();
                let mut logs = Vec::with_capacity(comps.len());
                let mut scores = vec![0.0; comps.len() * d];
                for (k, (w, g)) in comps.iter().enumerate() {
                    let lp = g.log_density_score(x, &mut scores[k * d..(k + 1) * d])?;
                    logs.push(w.ln() + lp);
                }
                let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
                let lse = mx + total.ln();
                score.iter_mut().for_each(|s| *s = 0.0);
                for (k, l) in logs.iter().enumerate() {
                    let resp = (l - lse).exp();
                    for i in 0..d {
                        score[i] += resp * scores[k * d + i];
                    }
                }
                Ok(lse)
            }
        }
    }

    pub fn log_density_score(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut s = vec![0.0; x.len()];
        let lp = self.log_density_score_into(x, &mut s)?;
        Ok((lp, s))
    }

    fn sample_one(&self, seed: u64, domain: Domain, index: u64, out: &mut [f64]) {
        let mut rng = rng::stream(seed, domain, 0, index);
        let mut z = vec![0.0; self.dim()];
        match self {
            DistributionSpec::Gaussian(g) => g.sample_into(&mut rng, &mut z, out),
            DistributionSpec::Mixture(comps) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = comps.len() - 1;
                for (k, (w, _)) in comps.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                comps[pick].1.sample_into(&mut rng, &mut z, out);
            }
        }
    }
}

/// Draws `n` i.i.d. points from `dist`, one counter-keyed stream per index.
pub fn sample_dist(dist: &DistributionSpec, n: usize, seed: u64) -> Points {
    sample_in_domain(dist, n, seed, Domain::Sample)
}

pub(crate) fn sample_in_domain(
    dist: &DistributionSpec,
    n: usize,
    seed: u64,
    domain: Domain,
) -> Points {
    use rayon::prelude::*;
    let d = dist.dim();
    let mut pts = Points::zeros(n, d);
    pts.as_flat_mut()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(i, row)| dist.sample_one(seed, domain, i as u64, row));
    pts
}

/// Uncontrolled drift `b(x)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Drift {
    Zero,
    Linear(DMatrix<f64>),
    /// `b(q, v) = (v, 0)` on a state split into equal position/velocity halves.
    Langevin,
}

impl Drift {
    pub fn is_zero(&self) -> bool {
        matches!(self, Drift::Zero)
    }

    /// Adds `b(x)` to `out`.
    pub fn add_to(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Drift::Zero => {}
            Drift::Linear(a) => {
                for (i, o) in out.iter_mut().enumerate() {
                    for (j, xj) in x.iter().enumerate() {
                        *o += a[(i, j)] * xj;
                    }
                }
            }
            Drift::Langevin => {
                let h = x.len() / 2;
                for i in 0..h {
                    out[i] += x[h + i];
                }
            }
        }
    }

    /// Adds `Db(x)ᵀ p` to `out` (the drift Jacobian is constant for every variant).
    pub fn add_jacobian_t(&self, p: &[f64], out: &mut [f64]) {
        match self {
            Drift::Zero => {}
            Drift::Linear(a) => {
                for (j, o) in out.iter_mut().enumerate() {
                    for (i, pi) in p.iter().enumerate() {
                        *o += a[(i, j)] * pi;
                    }
                }
            }
            Drift::Langevin => {
                let h = p.len() / 2;
                for i in 0..h {
                    out[h + i] += p[i];
                }
            }
        }
    }
}

/// The bridge problem `(π0, πT, Σ, R, G, b, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    /// Diffusion matrix Σ (positive semidefinite).
    pub sigma: DMatrix<f64>,
    /// Control weight R (positive definite); cost is `½ uᵀR⁻¹u`.
    pub r: DMatrix<f64>,
    /// Actuation matrix G.
    pub g: DMatrix<f64>,
    pub drift: Drift,
    pub pi0: DistributionSpec,
    pub pi_t: DistributionSpec,
}

impl ProblemSpec {
    /// Fully actuated problem with `R = G = I` and zero drift.
    pub fn new(pi0: DistributionSpec, pi_t: DistributionSpec, sigma: DMatrix<f64>, horizon: f64) -> Self {
        let d = pi0.dim();
        ProblemSpec {
            state_dim: d,
            control_dim: d,
            horizon,
            sigma,
            r: DMatrix::identity(d, d),
            g: DMatrix::identity(d, d),
            drift: Drift::Zero,
            pi0,
            pi_t,
        }
    }

    /// One-dimensional bridge `N(m0, v0) → N(mT, vT)` with scalar Σ.
    pub fn scalar(m0: f64, v0: f64, m_t: f64, v_t: f64, sigma: f64, horizon: f64) -> Self {
        ProblemSpec::new(
            DistributionSpec::scalar(m0, v0),
            DistributionSpec::scalar(m_t, v_t),
            DMatrix::from_element(1, 1, sigma),
            horizon,
        )
    }

    /// `R · Gᵀ`, the map from `∇ψ` to the control.
    pub fn control_gain(&self) -> DMatrix<f64> {
        &self.r * self.g.transpose()
    }

    /// R⁻¹ (R is validated positive definite).
    pub fn r_inverse(&self) -> DMatrix<f64> {
        self.r
            .clone()
            .try_inverse()
            .unwrap_or_else(|| DMatrix::zeros(self.control_dim, self.control_dim))
    }

    /// `true` when every coefficient of Σ is zero.
    pub fn is_deterministic(&self) -> bool {
        self.sigma.iter().all(|v| *v == 0.0)
    }
}

/// Checks every invariant of `spec` and hands it back unchanged.
pub fn validate_spec(spec: ProblemSpec) -> Result<ProblemSpec> {
    let dx = spec.state_dim;
    let du = spec.control_dim;
    if dx == 0 {
        return Err(Error::spec("state_dim", "must be at least 1"));
    }
    if du == 0 {
        return Err(Error::spec("control_dim", "must be at least 1"));
    }
    if !(spec.horizon.is_finite() && spec.horizon > 0.0) {
        return Err(Error::spec("horizon", "must be positive and finite"));
    }
    let shape = |name: &str, m: &DMatrix<f64>, r: usize, c: usize| -> Result<()> {
        if m.nrows() != r || m.ncols() != c {
            return Err(Error::spec(
                name,
                format!("expected {r}×{c}, got {}×{}", m.nrows(), m.ncols()),
            ));
        }
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::spec(name, "non-finite entry"));
        }
        Ok(())
    };
    shape("sigma", &spec.sigma, dx, dx)?;
    shape("r", &spec.r, du, du)?;
    shape("g", &spec.g, dx, du)?;
    if !is_symmetric(&spec.sigma, SYM_TOL) {
        return Err(Error::spec("sigma", "not symmetric"));
    }
    if min_eigenvalue(&spec.sigma) < -PD_TOL {
        return Err(Error::spec("sigma", "not positive semidefinite"));
    }
    if !is_symmetric(&spec.r, SYM_TOL) {
        return Err(Error::spec("r", "not symmetric"));
    }
    if min_eigenvalue(&spec.r) <= PD_TOL {
        return Err(Error::spec("r", "not positive definite"));
    }
    match &spec.drift {
        Drift::Zero => {}
        Drift::Linear(a) => shape("drift.a", a, dx, dx)?,
        Drift::Langevin => check_langevin(&spec)?,
    }
    for (name, dist) in [("pi0", &spec.pi0), ("pi_t", &spec.pi_t)] {
        if dist.dim() != dx {
            return Err(Error::spec(
                name,
                format!("dimension {} does not match state_dim {dx}", dist.dim()),
            ));
        }
        dist.validate(name)?;
    }
    Ok(spec)
}

fn check_langevin(spec: &ProblemSpec) -> Result<()> {
    let dx = spec.state_dim;
    if dx % 2 != 0 {
        return Err(Error::spec("drift", "langevin requires even state dimension"));
    }
    let h = dx / 2;
    if spec.control_dim != h {
        return Err(Error::spec("control_dim", "langevin requires control_dim = state_dim / 2"));
    }
    for i in 0..dx {
        for j in 0..h {
            let want = if i >= h && i - h == j { 1.0 } else { 0.0 };
            if spec.g[(i, j)] != want {
                return Err(Error::spec("g", "langevin requires G = [0; I]"));
            }
        }
    }
    let noise = spec.sigma[(h, h)];
    for i in 0..dx {
        for j in 0..dx {
            let want = if i >= h && i == j { noise } else { 0.0 };
            if (spec.sigma[(i, j)] - want).abs() > SYM_TOL {
                return Err(Error::spec(
                    "sigma",
                    "langevin requires Σ = diag(0, σ I) block form",
                ));
            }
        }
    }
    Ok(())
}
