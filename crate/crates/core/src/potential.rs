//! Finite-basis potentials ψ_t and their fit from `(X, P)` scatter.
//!
//! A model is `ψ(x) = c + lᵀx + ½ xᵀQx + Σ_k w_k exp(−‖x − z_k‖² / 2h²)`.
//! Gradients, Hessians and `∇(Σ : D²ψ)` are evaluated in closed form.
//! Fitting minimises `(1/n) Σ_i ‖P_i − ∇ψ(X_i)‖² + γ ‖θ‖²` over the
//! coefficients θ, with the constant pinned to zero.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::linalg::{matrix_to_rows, symmetrize};
use crate::points::Points;
use crate::problem::DistributionSpec;
use crate::rng::{self, Domain};
use crate::score::ScoreField;

const FIT_CHUNK: usize = 512;

/// Basis family used by the potential fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BasisFamily {
    #[default]
    Quadratic,
    QuadraticRbf {
        n_centers: usize,
        /// Median pairwise center distance when `None`.
        bandwidth: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub family: BasisFamily,
    /// Ridge weight γ on all coefficients.
    pub ridge: f64,
    /// Seed for RBF center subsampling.
    pub seed: u64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            family: BasisFamily::Quadratic,
            ridge: 0.0,
            seed: 0,
        }
    }
}

impl BasisConfig {
    pub fn quadratic() -> Self {
        Self::default()
    }

    pub fn quadratic_rbf(n_centers: usize, bandwidth: Option<f64>, ridge: f64) -> Self {
        BasisConfig {
            family: BasisFamily::QuadraticRbf { n_centers, bandwidth },
            ridge,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(Error::spec("basis.ridge", "must be nonnegative"));
        }
        if let BasisFamily::QuadraticRbf { n_centers, bandwidth } = &self.family {
            if *n_centers == 0 {
                return Err(Error::spec("basis.n_centers", "must be at least 1"));
            }
            if let Some(h) = bandwidth {
                if !(h.is_finite() && *h > 0.0) {
                    return Err(Error::spec("basis.bandwidth", "must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Gaussian bumps sharing one bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfBlock {
    pub centers: Points,
    pub weights: Vec<f64>,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialModel {
    pub constant: f64,
    pub linear: DVector<f64>,
    /// Exactly symmetric.
    pub quadratic: DMatrix<f64>,
    pub rbf: Vec<RbfBlock>,
}

/// Value and derivatives of ψ at one point; matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
    /// `∇(Σ : D²ψ)`.
    pub grad_trace: Vec<f64>,
}

impl PotentialEval {
    pub fn new(dim: usize) -> Self {
        PotentialEval {
            value: 0.0,
            grad: vec![0.0; dim],
            hess: vec![0.0; dim * dim],
            grad_trace: vec![0.0; dim],
        }
    }
}

impl PotentialModel {
    pub fn zero(dim: usize) -> Self {
        PotentialModel {
            constant: 0.0,
            linear: DVector::zeros(dim),
            quadratic: DMatrix::zeros(dim, dim),
            rbf: Vec::new(),
        }
    }

    /// `ψ(x) = lᵀx + ½ xᵀQx`.
    pub fn quadratic(linear: DVector<f64>, quadratic: DMatrix<f64>) -> Self {
        PotentialModel {
            constant: 0.0,
            linear,
            quadratic: symmetrize(&quadratic),
            rbf: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0
            && self.linear.iter().all(|v| *v == 0.0)
            && self.quadratic.iter().all(|v| *v == 0.0)
            && self.rbf.iter().all(|b| b.weights.iter().all(|w| *w == 0.0))
    }

    /// `self + scale · other`, coefficient-wise; RBF blocks are concatenated.
    pub fn add_scaled(&self, other: &PotentialModel, scale: f64) -> PotentialModel {
        let mut rbf = self.rbf.clone();
        for b in &other.rbf {
            rbf.push(RbfBlock {
                centers: b.centers.clone(),
                weights: b.weights.iter().map(|w| w * scale).collect(),
                bandwidth: b.bandwidth,
            });
        }
        PotentialModel {
            constant: self.constant + scale * other.constant,
            linear: &self.linear + &other.linear * scale,
            quadratic: &self.quadratic + &other.quadratic * scale,
            rbf,
        }
    }

    pub fn scaled(&self, scale: f64) -> PotentialModel {
        PotentialModel::zero(self.dim()).add_scaled(self, scale)
    }

    /// `(1 − s) a + s b`.
    pub fn lerp(a: &PotentialModel, b: &PotentialModel, s: f64) -> PotentialModel {
        if s == 0.0 {
            return a.clone();
        }
        if s == 1.0 {
            return b.clone();
        }
        a.scaled(1.0 - s).add_scaled(b, s)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut v = self.constant;
        for i in 0..d {
            v += self.linear[i] * x[i];
            for j in 0..d {
                v += 0.5 * x[i] * self.quadratic[(i, j)] * x[j];
            }
        }
        for b in &self.rbf {
            let inv = 1.0 / (b.bandwidth * b.bandwidth);
            for (c, w) in b.centers.rows().zip(&b.weights) {
                let r2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                v += w * (-0.5 * r2 * inv).exp();
            }
        }
        v
    }

    /// Writes `∇ψ(x)` into `out`.
    pub fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let mut acc = self.linear[i];
            for j in 0..d {
                acc += self.quadratic[(i, j)] * x[j];
            }
            out[i] = acc;
        }
        for b in &self.rbf {
            let inv = 1.0 / (b.bandwidth * b.bandwidth);
            for (c, w) in b.centers.rows().zip(&b.weights) {
                let r2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                let k = w * (-0.5 * r2 * inv).exp() * inv;
                for i in 0..d {
                    out[i] -= k * (x[i] - c[i]);
                }
            }
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.grad_into(x, &mut g);
        g
    }

    /// Full evaluation of ψ, ∇ψ, D²ψ and ∇(Σ:D²ψ) at `x`.
    pub fn eval_into(&self, x: &[f64], sigma: &DMatrix<f64>, out: &mut PotentialEval) {
        let d = self.dim();
        out.value = self.value(x);
        self.grad_into(x, &mut out.grad);
        for i in 0..d {
            for j in 0..d {
                out.hess[i * d + j] = self.quadratic[(i, j)];
            }
        }
        out.grad_trace.iter_mut().for_each(|g| *g = 0.0);
        if self.rbf.is_empty() {
            return;
        }
        let tr_sigma = sigma.trace();
        let mut r = vec![0.0; d];
        let mut sr = vec![0.0; d];
        for b in &self.rbf {
            let inv = 1.0 / (b.bandwidth * b.bandwidth);
            for (c, w) in b.centers.rows().zip(&b.weights) {
                let mut r2 = 0.0;
                for i in 0..d {
                    r[i] = x[i] - c[i];
                    r2 += r[i] * r[i];
                }
                let k = w * (-0.5 * r2 * inv).exp();
                let mut r_sr = 0.0;
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += sigma[(i, j)] * r[j];
                    }
                    sr[i] = acc;
                    r_sr += r[i] * acc;
                }
                for i in 0..d {
                    for j in 0..d {
                        let delta = if i == j { inv } else { 0.0 };
                        out.hess[i * d + j] += k * (r[i] * r[j] * inv * inv - delta);
                    }
                }
                let g = r_sr * inv * inv - tr_sigma * inv;
                for i in 0..d {
                    out.grad_trace[i] += k * (2.0 * sr[i] * inv * inv - r[i] * inv * g);
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64], sigma: &DMatrix<f64>) -> PotentialEval {
        let mut e = PotentialEval::new(self.dim());
        self.eval_into(x, sigma, &mut e);
        e
    }

    /// Coefficients as a JSON object.
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "constant": self.constant,
            "linear": self.linear.as_slice(),
            "quadratic": matrix_to_rows(&self.quadratic),
            "rbf": self.rbf.iter().map(|b| json!({
                "bandwidth": b.bandwidth,
                "centers": b.centers.rows().map(<[f64]>::to_vec).collect::<Vec<_>>(),
                "weights": b.weights,
            })).collect::<Vec<_>>(),
        })
    }
}

struct Layout {
    dim: usize,
    n_quad: usize,
    centers: Option<(Points, f64)>,
}

impl Layout {
    fn n_params(&self) -> usize {
        self.n_quad + self.dim + self.centers.as_ref().map_or(0, |(c, _)| c.len())
    }

    /// Gradient Jacobian row block: `jac[c * p + k] = ∂(∇ψ)_c / ∂θ_k`.
    fn jacobian(&self, x: &[f64], jac: &mut [f64]) {
        let d = self.dim;
        let p = self.n_params();
        jac.iter_mut().for_each(|v| *v = 0.0);
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                if i == j {
                    jac[i * p + k] = x[i];
                } else {
                    jac[i * p + k] = x[j];
                    jac[j * p + k] = x[i];
                }
                k += 1;
            }
        }
        for i in 0..d {
            jac[i * p + k + i] = 1.0;
        }
        k += d;
        if let Some((centers, h)) = &self.centers {
            let inv = 1.0 / (h * h);
            for (m, c) in centers.rows().enumerate() {
                let r2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                let e = (-0.5 * r2 * inv).exp() * inv;
                for i in 0..d {
                    jac[i * p + k + m] = -e * (x[i] - c[i]);
                }
            }
        }
    }

    fn model(&self, theta: &DVector<f64>) -> PotentialModel {
        let d = self.dim;
        let mut q = DMatrix::zeros(d, d);
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                q[(i, j)] = theta[k];
                q[(j, i)] = theta[k];
                k += 1;
            }
        }
        let linear = DVector::from_fn(d, |i, _| theta[k + i]);
        k += d;
        let rbf = self
            .centers
            .as_ref()
            .map(|(centers, h)| {
                vec![RbfBlock {
                    centers: centers.clone(),
                    weights: (0..centers.len()).map(|m| theta[k + m]).collect(),
                    bandwidth: *h,
                }]
            })
            .unwrap_or_default();
        PotentialModel {
            constant: 0.0,
            linear,
            quadratic: q,
            rbf,
        }
    }
}

fn select_centers(states: &Points, n_centers: usize, seed: u64) -> Points {
    let n = states.len();
    let m = n_centers.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, Domain::Centers, 0, 0);
    for i in 0..m {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut centers = Points::zeros(m, states.dim());
    for (k, &i) in idx[..m].iter().enumerate() {
        centers.row_mut(k).copy_from_slice(states.row(i));
    }
    centers
}

fn median_pairwise_distance(points: &Points) -> f64 {
    let mut d = Vec::new();
    for i in 0..points.len() {
        for j in 0..i {
            let r2: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.push(r2.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let mid = d.len() / 2;
    if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    }
}

/// Least-squares adjoint-matching fit of ψ with `∇ψ(X_i) ≈ P_i`.
pub fn fit_potential(states: &Points, costates: &Points, basis: &BasisConfig) -> Result<PotentialModel> {
    basis.validate()?;
    let n = states.len();
    let d = states.dim();
    if costates.len() != n || costates.dim() != d {
        return Err(Error::spec("costates", "shape differs from states"));
    }
    let needed = d * (d + 3) / 2 + 1;
    if n < needed {
        return Err(Error::spec(
            "states",
            format!("need at least {needed} particles to identify a quadratic in {d} dimensions, got {n}"),
        ));
    }
    let centers = match &basis.family {
        BasisFamily::Quadratic => None,
        BasisFamily::QuadraticRbf { n_centers, bandwidth } => {
            if *n_centers > n {
                return Err(Error::spec("basis.n_centers", "exceeds particle count"));
            }
            let c = select_centers(states, *n_centers, basis.seed);
            let h = bandwidth.unwrap_or_else(|| median_pairwise_distance(&c));
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::RankDeficient("RBF centers coincide".into()));
            }
            Some((c, h))
        }
    };
    let layout = Layout {
        dim: d,
        n_quad: d * (d + 1) / 2,
        centers,
    };
    let p = layout.n_params();

    let partials: Vec<(DMatrix<f64>, DVector<f64>)> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(FIT_CHUNK)
        .map(|chunk| {
            let mut a = DMatrix::zeros(p, p);
            let mut b = DVector::zeros(p);
            let mut jac = vec![0.0; d * p];
            for &i in chunk {
                layout.jacobian(states.row(i), &mut jac);
                let target = costates.row(i);
                for c in 0..d {
                    let row = &jac[c * p..(c + 1) * p];
                    for k in 0..p {
                        let rk = row[k];
                        if rk == 0.0 {
                            continue;
                        }
                        b[k] += rk * target[c];
                        for l in 0..=k {
                            a[(k, l)] += rk * row[l];
                        }
                    }
                }
            }
            (a, b)
        })
        .collect();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for (pa, pb) in &partials {
        a += pa;
        b += pb;
    }
    let inv_n = 1.0 / n as f64;
    for k in 0..p {
        for l in 0..k {
            a[(l, k)] = a[(k, l)];
        }
    }
    a *= inv_n;
    b *= inv_n;
    for k in 0..p {
        a[(k, k)] += basis.ridge;
    }
    if !a.iter().all(|v| v.is_finite()) || !b.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("potential fit normal equations".into()));
    }
    let scale = a.diagonal().iter().copied().fold(0.0, f64::max);
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::RankDeficient(format!("{p} coefficients, {n} particles")))?;
    let piv = chol.l().diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
    if basis.ridge == 0.0 && piv <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::RankDeficient(format!("{p} coefficients, {n} particles")));
    }
    let theta = chol.solve(&b);
    Ok(layout.model(&theta))
}

/// IPF increment Δψ with `∇Δψ(X_T,i) ≈ ∇log π_T(X_T,i) − s_T(X_T,i)`.
pub fn terminal_increment(
    pi_t: &DistributionSpec,
    terminal_score: &ScoreField,
    states_t: &Points,
    basis: &BasisConfig,
) -> Result<PotentialModel> {
    let target = terminal_score_gap(pi_t, terminal_score, states_t)?;
    fit_potential(states_t, &target, basis)
}

/// `∇log π_T(x_i) − s_T(x_i)` for every terminal state.
pub fn terminal_score_gap(
    pi_t: &DistributionSpec,
    terminal_score: &ScoreField,
    states_t: &Points,
) -> Result<Points> {
    let d = states_t.dim();
    let mut gap = Points::zeros(states_t.len(), d);
    let mut s = vec![0.0; d];
    for (i, x) in states_t.rows().enumerate() {
        let row = gap.row_mut(i);
        pi_t.log_density_score_into(x, row)?;
        terminal_score.eval_into(x, &mut s);
        for (g, si) in row.iter_mut().zip(&s) {
            *g -= si;
        }
    }
    Ok(gap)
}

/// `acc + α Δψ`; returns the new accumulator and the undamped increment.
pub fn accumulate_terminal(
    acc: &PotentialModel,
    pi_t: &DistributionSpec,
    terminal_score: &ScoreField,
    damping: f64,
    states_t: &Points,
    basis: &BasisConfig,
) -> Result<(PotentialModel, PotentialModel)> {
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::spec("ipf.damping", "must lie in (0, 1]"));
    }
    let inc = terminal_increment(pi_t, terminal_score, states_t, basis)?;
    Ok((acc.add_scaled(&inc, damping), inc))
}
