//! Independent 1-D reference solutions: quantile displacement interpolation,
//! a log-domain grid Sinkhorn bridge and the closed-form Gaussian bridge.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bridge::FieldStack;
use crate::dynamics::TimeGrid;
use crate::error::{Error, Result};
use crate::potential::PotentialModel;
use crate::problem::DistributionSpec;

fn scalar_components(dist: &DistributionSpec) -> Result<Vec<(f64, f64, f64)>> {
    if dist.dim() != 1 {
        return Err(Error::Oracle(format!("requires 1-D marginals, got dimension {}", dist.dim())));
    }
    let comps = match dist {
        DistributionSpec::Gaussian(g) => vec![(1.0, g.mean()[0], g.cov()[(0, 0)].sqrt())],
        DistributionSpec::Mixture(c) => c.iter().map(|(w, g)| (*w, g.mean()[0], g.cov()[(0, 0)].sqrt())).collect(),
    };
    let total: f64 = comps.iter().map(|c| c.0).sum();
    Ok(comps.into_iter().map(|(w, m, s)| (w / total, m, s)).collect())
}

/// Quantile function of a 1-D Gaussian or Gaussian mixture.
#[derive(Debug, Clone)]
pub struct Quantile {
    comps: Vec<(f64, f64, f64)>,
}

impl Quantile {
    pub fn new(dist: &DistributionSpec) -> Result<Self> {
        Ok(Quantile {
            comps: scalar_components(dist)?,
        })
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.comps
            .iter()
            .map(|(w, m, s)| w * Normal::new(*m, *s).expect("validated component").cdf(x))
            .sum()
    }

    pub fn inverse(&self, u: f64) -> f64 {
        if let [(_, m, s)] = self.comps[..] {
            return Normal::new(m, s).expect("validated component").inverse_cdf(u);
        }
        let lo_c = self.comps.iter().map(|(_, m, s)| m - 40.0 * s).fold(f64::INFINITY, f64::min);
        let hi_c = self.comps.iter().map(|(_, m, s)| m + 40.0 * s).fold(f64::NEG_INFINITY, f64::max);
        let (mut lo, mut hi) = (lo_c, hi_c);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * (1.0 + mid.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Monotone displacement interpolation between two 1-D marginals.
#[derive(Debug, Clone)]
pub struct QuantileInterpolation {
    pub fraction: f64,
    q0: Quantile,
    q_t: Quantile,
    gaussian: Option<((f64, f64), (f64, f64))>,
}

/// Displacement interpolation at `t ∈ [0, T]`.
pub fn bb_quantile_interpolation(
    pi0: &DistributionSpec,
    pi_t: &DistributionSpec,
    t: f64,
    horizon: f64,
) -> Result<QuantileInterpolation> {
    if !(horizon > 0.0) || !(0.0..=horizon).contains(&t) {
        return Err(Error::Oracle(format!("time {t} outside [0, {horizon}]")));
    }
    let q0 = Quantile::new(pi0)?;
    let q_t = Quantile::new(pi_t)?;
    let gaussian = match (&q0.comps[..], &q_t.comps[..]) {
        ([(_, m0, s0)], [(_, m1, s1)]) => Some(((*m0, *s0), (*m1, *s1))),
        _ => None,
    };
    Ok(QuantileInterpolation {
        fraction: t / horizon,
        q0,
        q_t,
        gaussian,
    })
}

impl QuantileInterpolation {
    /// `(1 − s) F_0⁻¹(u) + s F_T⁻¹(u)`.
    pub fn at_level(&self, u: f64) -> f64 {
        let s = self.fraction;
        (1.0 - s) * self.q0.inverse(u) + s * self.q_t.inverse(u)
    }

    /// Image of a starting point `x0` under the interpolating map.
    pub fn displace(&self, x0: f64) -> f64 {
        let s = self.fraction;
        if let Some(((m0, s0), (m1, s1))) = self.gaussian {
            let z = (x0 - m0) / s0;
            return (1.0 - s) * x0 + s * (m1 + s1 * z);
        }
        let u = self.q0.cdf(x0).clamp(1e-16, 1.0 - 1e-16);
        (1.0 - s) * x0 + s * self.q_t.inverse(u)
    }

    /// Mean and variance of the interpolated marginal.
    pub fn moments(&self) -> (f64, f64) {
        match self.gaussian {
            Some(((m0, s0), (m1, s1))) => {
                let s = self.fraction;
                let sd = (1.0 - s) * s0 + s * s1;
                ((1.0 - s) * m0 + s * m1, sd * sd)
            }
            None => self.numeric_moments(20_000),
        }
    }

    /// Moments by midpoint quadrature over `levels` quantile levels.
    pub fn numeric_moments(&self, levels: usize) -> (f64, f64) {
        let xs: Vec<f64> = (0..levels).map(|i| self.at_level((i as f64 + 0.5) / levels as f64)).collect();
        let n = levels as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var)
    }
}

/// Uniform grid `[lo, hi]` with `points` nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn nodes(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.points).map(|i| self.lo + h * i as f64).collect()
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    /// Grid covering eight standard deviations around both marginals.
    pub fn covering(pi0: &DistributionSpec, pi_t: &DistributionSpec, points: usize) -> Self {
        let (m0, c0) = pi0.moments();
        let (m1, c1) = pi_t.moments();
        let sd = c0[(0, 0)].max(c1[(0, 0)]).sqrt();
        GridSpec {
            lo: m0[0].min(m1[0]) - 8.0 * sd,
            hi: m0[0].max(m1[0]) + 8.0 * sd,
            points,
        }
    }
}

/// Entropic bridge on a grid with marginals at the requested times.
#[derive(Debug, Clone)]
pub struct GridBridge {
    pub grid: Vec<f64>,
    pub dx: f64,
    pub sigma2: f64,
    pub horizon: f64,
    /// `log φ̂_0` at the nodes (scaling of the initial weights).
    pub log_phi_hat: Vec<f64>,
    /// `log φ_T` at the nodes.
    pub log_phi: Vec<f64>,
    pub times: Vec<f64>,
    /// Densities with `Σ ρ dx = 1`.
    pub marginals: Vec<Vec<f64>>,
    pub iterations: usize,
    p0: Vec<f64>,
    p_t: Vec<f64>,
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Log of the heat kernel with variance `2σ²τ` between nodes.
fn log_heat(x: f64, y: f64, sigma2: f64, tau: f64) -> f64 {
    let var = 2.0 * sigma2 * tau;
    -(x - y) * (x - y) / (2.0 * var) - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
}

fn grid_weights(dist: &DistributionSpec, grid: &[f64]) -> Result<Vec<f64>> {
    let mut w = Vec::with_capacity(grid.len());
    for x in grid {
        w.push(dist.log_density_score(&[*x])?.0.exp());
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Oracle("marginal has no mass on the grid".into()));
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Log-domain Sinkhorn for the heat-kernel plan between `π0` and `πT`.
pub fn grid_sinkhorn_bridge(
    pi0: &DistributionSpec,
    pi_t: &DistributionSpec,
    sigma2: f64,
    horizon: f64,
    grid: GridSpec,
    times: &[f64],
) -> Result<GridBridge> {
    scalar_components(pi0)?;
    scalar_components(pi_t)?;
    if !(sigma2 > 0.0) {
        return Err(Error::Oracle("grid bridge needs sigma2 > 0".into()));
    }
    if grid.points < 3 || !(grid.hi > grid.lo) {
        return Err(Error::Oracle("grid needs at least 3 increasing nodes".into()));
    }
    if let Some(t) = times.iter().find(|t| !(0.0..=horizon).contains(*t)) {
        return Err(Error::Oracle(format!("time {t} outside [0, {horizon}]")));
    }
    let x = grid.nodes();
    let g = x.len();
    let p0 = grid_weights(pi0, &x)?;
    let p_t = grid_weights(pi_t, &x)?;
    let lp0: Vec<f64> = p0.iter().map(|v| v.ln()).collect();
    let lpt: Vec<f64> = p_t.iter().map(|v| v.ln()).collect();
    let log_k = DMatrix::from_fn(g, g, |i, j| log_heat(x[i], x[j], sigma2, horizon));
    if (0..g).any(|i| (0..g).all(|j| log_k[(i, j)].exp() == 0.0)) {
        return Err(Error::Oracle("heat kernel underflows on the grid".into()));
    }

    let mut f = vec![0.0; g];
    let mut h = vec![0.0; g];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < 10_000 {
        iterations += 1;
        let mut change = 0.0f64;
        for i in 0..g {
            let nf = lp0[i] - log_sum_exp((0..g).map(|j| log_k[(i, j)] + h[j]));
            if nf.is_finite() {
                change = change.max((nf - f[i]).abs());
            }
            f[i] = nf;
        }
        for j in 0..g {
            let nh = lpt[j] - log_sum_exp((0..g).map(|i| log_k[(i, j)] + f[i]));
            if nh.is_finite() {
                change = change.max((nh - h[j]).abs());
            }
            h[j] = nh;
        }
        if change <= 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Oracle("Sinkhorn did not converge in 10000 iterations".into()));
    }

    let dx = grid.spacing();
    let mut marginals = Vec::with_capacity(times.len());
    for &t in times {
        let rho: Vec<f64> = if t == 0.0 {
            p0.clone()
        } else if t == horizon {
            p_t.clone()
        } else {
            (0..g)
                .map(|k| {
                    let fwd = log_sum_exp((0..g).map(|i| f[i] + log_heat(x[i], x[k], sigma2, t)));
                    let bwd = log_sum_exp((0..g).map(|j| log_heat(x[k], x[j], sigma2, horizon - t) + h[j]));
                    (fwd + bwd).exp()
                })
                .collect()
        };
        let total: f64 = rho.iter().sum::<f64>() * dx;
        marginals.push(rho.into_iter().map(|v| v / total).collect());
    }
    Ok(GridBridge {
        grid: x,
        dx,
        sigma2,
        horizon,
        log_phi_hat: f,
        log_phi: h,
        times: times.to_vec(),
        marginals,
        iterations,
        p0,
        p_t,
    })
}

impl GridBridge {
    /// Mean and variance of the marginal at `times[k]`.
    pub fn moments(&self, k: usize) -> (f64, f64) {
        let rho = &self.marginals[k];
        let mean: f64 = self.grid.iter().zip(rho).map(|(x, r)| x * r).sum::<f64>() * self.dx;
        let var: f64 = self.grid.iter().zip(rho).map(|(x, r)| (x - mean) * (x - mean) * r).sum::<f64>() * self.dx;
        (mean, var)
    }

    fn log_plan(&self, i: usize, j: usize) -> f64 {
        self.log_phi_hat[i] + log_heat(self.grid[i], self.grid[j], self.sigma2, self.horizon) + self.log_phi[j]
    }

    /// Max deviation of plan row and column sums from the grid marginals.
    pub fn marginal_error(&self) -> f64 {
        let g = self.grid.len();
        let mut err = 0.0f64;
        for i in 0..g {
            let row: f64 = (0..g).map(|j| self.log_plan(i, j).exp()).sum();
            let col: f64 = (0..g).map(|j| self.log_plan(j, i).exp()).sum();
            err = err.max((row - self.p0[i]).abs()).max((col - self.p_t[i]).abs());
        }
        err
    }

    /// Max over recorded interior times and nodes of `|ρ_t − φ_t φ̂_t| / max ρ_t`,
    /// where `ρ_t` is the Brownian-bridge mixture of the plan.
    pub fn factorization_error(&self) -> f64 {
        let g = self.grid.len();
        let x = &self.grid;
        let mut worst = 0.0f64;
        for (k, &t) in self.times.iter().enumerate() {
            if t == 0.0 || t == self.horizon {
                continue;
            }
            let mut rho = vec![0.0; g];
            for (m, r) in rho.iter_mut().enumerate() {
                let terms = (0..g).flat_map(|i| {
                    (0..g).map(move |j| {
                        self.log_plan(i, j) + log_heat(x[i], x[m], self.sigma2, t)
                            + log_heat(x[m], x[j], self.sigma2, self.horizon - t)
                            - log_heat(x[i], x[j], self.sigma2, self.horizon)
                    })
                });
                *r = log_sum_exp(terms).exp();
            }
            let total: f64 = rho.iter().sum::<f64>() * self.dx;
            let peak = rho.iter().fold(0.0f64, |a, b| a.max(*b)) / total;
            for (r, p) in rho.iter().zip(&self.marginals[k]) {
                worst = worst.max((r / total - p).abs() / peak);
            }
        }
        worst
    }
}

/// One slice of the Gaussian bridge: `∇ψ_t(x) = a x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSlice {
    pub mean: f64,
    pub var: f64,
    pub a: f64,
    pub b: f64,
}

impl GaussianSlice {
    /// `c` in `∇ψ = a (x − c)`; undefined when `a = 0`.
    pub fn center(&self) -> f64 {
        -self.b / self.a
    }
}

/// Closed-form 1-D Gaussian bridge with scalar `Σ = σ²`, `R = r`, `G = 1`, `b = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBridge {
    pub m0: f64,
    pub v0: f64,
    pub sigma2: f64,
    pub r: f64,
    pub horizon: f64,
    pub a0: f64,
    pub b0: f64,
}

fn gaussian_params(dist: &DistributionSpec) -> Result<(f64, f64)> {
    match (dist, scalar_components(dist)?.as_slice()) {
        (DistributionSpec::Gaussian(_), [(_, m, s)]) => Ok((*m, s * s)),
        _ => Err(Error::Oracle("closed form requires Gaussian marginals".into())),
    }
}

impl GaussianBridge {
    /// Finds `a_0` by bisection on the terminal variance, then `b_0` from the terminal mean.
    pub fn solve(pi0: &DistributionSpec, pi_t: &DistributionSpec, sigma2: f64, r: f64, horizon: f64) -> Result<Self> {
        let (m0, v0) = gaussian_params(pi0)?;
        let (m1, v1) = gaussian_params(pi_t)?;
        if !(sigma2 >= 0.0 && r > 0.0 && horizon > 0.0) {
            return Err(Error::Oracle("need sigma2 >= 0, r > 0, T > 0".into()));
        }
        let t = horizon;
        let terminal_var = |a0: f64| {
            let d = 1.0 + r * a0 * t;
            d * d * v0 + 2.0 * sigma2 * t * d
        };
        let mut lo = -1.0 / (r * t);
        let mut hi = 1.0;
        let mut grow = 0;
        while terminal_var(hi) < v1 {
            hi *= 2.0;
            grow += 1;
            if grow > 200 {
                return Err(Error::Oracle("bisection bracket failure".into()));
            }
        }
        if terminal_var(lo) >= v1 {
            return Err(Error::Oracle("bisection bracket failure".into()));
        }
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if terminal_var(mid) < v1 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 4.0 * f64::EPSILON * mid.abs().max(1.0) {
                break;
            }
        }
        let a0 = 0.5 * (lo + hi);
        let z = 1.0 + r * a0 * t;
        let b0 = (m1 - z * m0) / (r * t);
        Ok(GaussianBridge {
            m0,
            v0,
            sigma2,
            r,
            horizon,
            a0,
            b0,
        })
    }

    pub fn at(&self, t: f64) -> GaussianSlice {
        let d = 1.0 + self.r * self.a0 * t;
        GaussianSlice {
            mean: d * self.m0 + self.r * self.b0 * t,
            var: d * d * self.v0 + 2.0 * self.sigma2 * t * d,
            a: self.a0 / d,
            b: self.b0 / d,
        }
    }

    /// `ψ_t(x) = ½ a_t x² + b_t x`.
    pub fn potential(&self, t: f64) -> PotentialModel {
        let s = self.at(t);
        PotentialModel::quadratic(DVector::from_element(1, s.b), DMatrix::from_element(1, 1, s.a))
    }

    pub fn field_stack(&self, grid: &TimeGrid) -> FieldStack {
        FieldStack {
            potentials: grid.times().into_iter().map(|t| self.potential(t)).collect(),
        }
    }
}

/// Per-time moments and potential coefficients of the Gaussian bridge.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBridgeCoeffs {
    pub times: Vec<f64>,
    pub slices: Vec<GaussianSlice>,
}

pub fn gaussian_sb_closed_form(
    pi0: &DistributionSpec,
    pi_t: &DistributionSpec,
    sigma2: f64,
    horizon: f64,
    times: &[f64],
) -> Result<GaussianBridgeCoeffs> {
    let bridge = GaussianBridge::solve(pi0, pi_t, sigma2, 1.0, horizon)?;
    Ok(GaussianBridgeCoeffs {
        times: times.to_vec(),
        slices: times.iter().map(|t| bridge.at(*t)).collect(),
    })
}
