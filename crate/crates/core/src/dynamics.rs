//! Time integrators for the constrained Hamiltonian particle system, its
//! stochastic variants and the Lagrangian value scheme, plus energy, cost
//! and action diagnostics.

use std::borrow::Cow;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::linalg::{frobenius, mat_vec, pairwise_sum, psd_sqrt};
use crate::points::Points;
use crate::potential::{PotentialEval, PotentialModel};
use crate::problem::{sample_in_domain, DistributionSpec, Drift, ProblemSpec};
use crate::rng::{self, Domain};
use crate::score::BetaField;

/// Seed of the boundary samples in [`action_value`].
pub const ACTION_SEED: u64 = 0xAC71_0000;

/// Uniform grid `t_k = k T / M`, with `t_M = T` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::spec("M", "need at least one time step"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::spec("horizon", "must be positive"));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    pub fn stage(&self, k: usize, frac: f64) -> StageTime {
        let t = if frac == 1.0 {
            self.time(k + 1)
        } else {
            self.time(k) + frac * self.dt()
        };
        StageTime { k, frac, t }
    }
}

/// A time inside step `k`: `t = t_k + frac Δt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageTime {
    pub k: usize,
    pub frac: f64,
    pub t: f64,
}

/// Time-dependent ψ and β seen by an integrator.
pub trait FlowFields: Sync {
    fn potential_at(&self, at: StageTime) -> Cow<'_, PotentialModel>;
    /// β at this time, possibly depending on the current particle cloud.
    fn beta_at(&self, at: StageTime, states: &Points) -> Result<BetaField>;
}

/// ψ and β held fixed.
#[derive(Debug, Clone, Copy)]
pub struct FrozenFields<'a> {
    pub potential: &'a PotentialModel,
    pub beta: &'a BetaField,
}

impl FlowFields for FrozenFields<'_> {
    fn potential_at(&self, _: StageTime) -> Cow<'_, PotentialModel> {
        Cow::Borrowed(self.potential)
    }

    fn beta_at(&self, _: StageTime, _: &Points) -> Result<BetaField> {
        Ok(self.beta.clone())
    }
}

/// Stochastic interpretation of the FBSDE costate equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    Ito,
    Stratonovich,
}

/// Matrices of the controlled system derived once from a [`ProblemSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct System {
    pub sigma: DMatrix<f64>,
    pub sigma_sqrt: DMatrix<f64>,
    /// `R Gᵀ`, maps ∇ψ to the control.
    pub gain: DMatrix<f64>,
    /// `G R Gᵀ`.
    pub k: DMatrix<f64>,
    pub drift: Drift,
    deterministic: bool,
}

impl System {
    pub fn new(spec: &ProblemSpec) -> Self {
        let gain = spec.control_gain();
        System {
            sigma: spec.sigma.clone(),
            sigma_sqrt: psd_sqrt(&spec.sigma),
            k: &spec.g * &gain,
            gain,
            drift: spec.drift.clone(),
            deterministic: spec.is_deterministic(),
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// `½ ‖u‖²_R = ½ ∇ψᵀ G R Gᵀ ∇ψ`.
    fn kinetic(&self, grad: &[f64]) -> f64 {
        let d = grad.len();
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                acc += grad[i] * self.k[(i, j)] * grad[j];
            }
        }
        0.5 * acc
    }
}

/// `u(x) = R Gᵀ ∇ψ(x)`.
pub fn control_field(model: &PotentialModel, sys: &System, x: &[f64]) -> Vec<f64> {
    let g = model.grad(x);
    let mut u = vec![0.0; sys.gain.nrows()];
    mat_vec(&sys.gain, &g, &mut u);
    u
}

struct Scratch {
    eval: PotentialEval,
    beta: Vec<f64>,
    tmp: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Scratch {
            eval: PotentialEval::new(d),
            beta: vec![0.0; d],
            tmp: vec![0.0; d],
        }
    }
}

/// Writes `b + K∇ψ + β` into `vx` and `−Dbᵀp − ∇(Σ:D²ψ) + D²ψ β` into `vp`.
fn hamiltonian_rates(
    sys: &System,
    psi: &PotentialModel,
    beta: &BetaField,
    x: &[f64],
    p: &[f64],
    vx: &mut [f64],
    vp: &mut [f64],
    s: &mut Scratch,
) {
    let d = x.len();
    psi.eval_into(x, &sys.sigma, &mut s.eval);
    beta.eval_into(x, &mut s.beta, &mut s.tmp);
    mat_vec(&sys.k, &s.eval.grad, vx);
    for i in 0..d {
        vx[i] += s.beta[i];
    }
    sys.drift.add_to(x, vx);
    for i in 0..d {
        let mut acc = -s.eval.grad_trace[i];
        for j in 0..d {
            acc += s.eval.hess[i * d + j] * s.beta[j];
        }
        vp[i] = acc;
    }
    if !sys.drift.is_zero() {
        s.tmp.iter_mut().for_each(|v| *v = 0.0);
        sys.drift.add_jacobian_t(p, &mut s.tmp);
        for i in 0..d {
            vp[i] -= s.tmp[i];
        }
    }
}

fn rates_all(sys: &System, psi: &PotentialModel, beta: &BetaField, x: &Points, p: &Points) -> (Points, Points) {
    let d = x.dim();
    let mut vx = Points::zeros(x.len(), d);
    let mut vp = Points::zeros(x.len(), d);
    vx.as_flat_mut()
        .par_chunks_mut(d)
        .zip(vp.as_flat_mut().par_chunks_mut(d))
        .enumerate()
        .for_each_init(
            || Scratch::new(d),
            |s, (i, (ox, op))| hamiltonian_rates(sys, psi, beta, x.row(i), p.row(i), ox, op, s),
        );
    (vx, vp)
}

fn check_finite(points: &Points, what: &str, t: f64) -> Result<()> {
    match points.first_non_finite() {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!("{what} of particle {i} at t={t}"))),
    }
}

/// One classical RK4 step of the state/costate system over `[t_k, t_k + Δt]`.
pub fn step_meanfield(
    sys: &System,
    ens: &Ensemble,
    fields: &dyn FlowFields,
    grid: &TimeGrid,
    k: usize,
) -> Result<Ensemble> {
    let dt = grid.dt();
    let (x, p) = (&ens.states, &ens.costates);
    let stage = |frac: f64, xs: &Points, ps: &Points| -> Result<(Points, Points)> {
        let at = grid.stage(k, frac);
        let psi = fields.potential_at(at);
        let beta = fields.beta_at(at, xs)?;
        Ok(rates_all(sys, &psi, &beta, xs, ps))
    };
    let (k1x, k1p) = stage(0.0, x, p)?;
    let (x2, p2) = (x.axpy(0.5 * dt, &k1x), p.axpy(0.5 * dt, &k1p));
    let (k2x, k2p) = stage(0.5, &x2, &p2)?;
    let (x3, p3) = (x.axpy(0.5 * dt, &k2x), p.axpy(0.5 * dt, &k2p));
    let (k3x, k3p) = stage(0.5, &x3, &p3)?;
    let (x4, p4) = (x.axpy(dt, &k3x), p.axpy(dt, &k3p));
    let (k4x, k4p) = stage(1.0, &x4, &p4)?;
    let combine = |base: &Points, a: &Points, b: &Points, c: &Points, e: &Points| {
        let mut out = base.clone();
        for (i, o) in out.as_flat_mut().iter_mut().enumerate() {
            let inc = a.as_flat()[i] + 2.0 * b.as_flat()[i] + 2.0 * c.as_flat()[i] + e.as_flat()[i];
            *o += dt / 6.0 * inc;
        }
        out
    };
    let xn = combine(x, &k1x, &k2x, &k3x, &k4x);
    let pn = combine(p, &k1p, &k2p, &k3p, &k4p);
    let t = grid.time(k + 1);
    check_finite(&xn, "state", t)?;
    check_finite(&pn, "costate", t)?;
    Ok(ens.advanced(xn, pn, t))
}

/// Explicit Euler step of the same system with frozen ψ and β.
pub fn step_meanfield_euler(
    sys: &System,
    ens: &Ensemble,
    psi: &PotentialModel,
    beta: &BetaField,
    dt: f64,
) -> Result<Ensemble> {
    let (vx, vp) = rates_all(sys, psi, beta, &ens.states, &ens.costates);
    let xn = ens.states.axpy(dt, &vx);
    let pn = ens.costates.axpy(dt, &vp);
    let t = ens.time + dt;
    check_finite(&xn, "state", t)?;
    check_finite(&pn, "costate", t)?;
    Ok(ens.advanced(xn, pn, t))
}

/// ψ and β at one end of a backward step.
#[derive(Debug, Clone, Copy)]
pub struct SliceField<'a> {
    pub potential: &'a PotentialModel,
    pub beta: &'a BetaField,
}

fn costate_rate_all(sys: &System, psi: &PotentialModel, beta: &BetaField, x: &Points, p: &Points) -> Points {
    rates_all(sys, psi, beta, x, p).1
}

/// Heun reverse step of the costate along the stored path from `t_{k+1}` to `t_k`.
pub fn backward_step_costate(
    sys: &System,
    x_k: &Points,
    x_next: &Points,
    p_next: &Points,
    next: SliceField<'_>,
    prev: SliceField<'_>,
    dt: f64,
) -> Result<Points> {
    let f1 = costate_rate_all(sys, next.potential, next.beta, x_next, p_next);
    let pred = p_next.axpy(-dt, &f1);
    let f0 = costate_rate_all(sys, prev.potential, prev.beta, x_k, &pred);
    let mut out = p_next.clone();
    for (i, o) in out.as_flat_mut().iter_mut().enumerate() {
        *o -= 0.5 * dt * (f1.as_flat()[i] + f0.as_flat()[i]);
    }
    check_finite(&out, "costate", f64::NAN)?;
    Ok(out)
}

/// [`backward_step_costate`] split into `substeps` Heun steps, with the state
/// path, ψ and β interpolated linearly between the two ends.
#[allow(clippy::too_many_arguments)]
pub fn backward_step_costate_substeps(
    sys: &System,
    x_k: &Points,
    x_next: &Points,
    p_next: &Points,
    next: SliceField<'_>,
    prev: SliceField<'_>,
    dt: f64,
    substeps: usize,
) -> Result<Points> {
    let n = substeps.max(1);
    let h = dt / n as f64;
    let at = |s: f64| {
        let psi = PotentialModel::lerp(prev.potential, next.potential, s);
        let beta = BetaField::Blend {
            from: Box::new(prev.beta.clone()),
            to: Box::new(next.beta.clone()),
            weight: s,
        };
        (x_k.lerp(x_next, s), psi, beta)
    };
    let mut p = p_next.clone();
    for j in (0..n).rev() {
        let (xb, psib, betab) = at((j + 1) as f64 / n as f64);
        let (xa, psia, betaa) = at(j as f64 / n as f64);
        p = backward_step_costate(
            sys,
            &xa,
            &xb,
            &p,
            SliceField { potential: &psib, beta: &betab },
            SliceField { potential: &psia, beta: &betaa },
            h,
        )?;
    }
    Ok(p)
}

fn noise_increment(sys: &System, dt: f64, seed: u64, slice: u64, i: usize, xi: &mut [f64], out: &mut [f64]) {
    rng::fill_normal(seed, Domain::Noise, slice, i as u64, xi);
    mat_vec(&sys.sigma_sqrt, xi, out);
    let scale = (2.0 * dt).sqrt();
    out.iter_mut().for_each(|v| *v *= scale);
}

/// One Euler–Maruyama step of the stochastic state/costate system.
///
/// Noise is drawn from the counter stream `(seed, slice, particle)`. With
/// Σ = 0 this is exactly [`step_meanfield_euler`] with β = 0.
pub fn step_fbsde(
    sys: &System,
    ens: &Ensemble,
    psi: &PotentialModel,
    dt: f64,
    seed: u64,
    slice: u64,
    mode: NoiseMode,
) -> Result<Ensemble> {
    if sys.deterministic {
        return step_meanfield_euler(sys, ens, psi, &BetaField::Zero, dt);
    }
    let d = ens.dim();
    let mut xn = ens.states.clone();
    let mut pn = ens.costates.clone();
    xn.as_flat_mut()
        .par_chunks_mut(d)
        .zip(pn.as_flat_mut().par_chunks_mut(d))
        .enumerate()
        .for_each_init(
            || (Scratch::new(d), vec![0.0; d], vec![0.0; d], vec![0.0; d]),
            |(s, xi, db, mid), (i, (ox, op))| {
                let x = ens.states.row(i);
                let p = ens.costates.row(i);
                noise_increment(sys, dt, seed, slice, i, xi, db);
                psi.eval_into(x, &sys.sigma, &mut s.eval);
                mat_vec(&sys.k, &s.eval.grad, &mut s.beta);
                sys.drift.add_to(x, &mut s.beta);
                for j in 0..d {
                    ox[j] = x[j] + s.beta[j] * dt + db[j];
                }
                s.tmp.iter_mut().for_each(|v| *v = 0.0);
                sys.drift.add_jacobian_t(p, &mut s.tmp);
                for j in 0..d {
                    op[j] -= s.tmp[j] * dt;
                }
                if mode == NoiseMode::Stratonovich {
                    for j in 0..d {
                        op[j] -= s.eval.grad_trace[j] * dt;
                        mid[j] = 0.5 * (x[j] + ox[j]);
                    }
                    psi.eval_into(mid, &sys.sigma, &mut s.eval);
                }
                for j in 0..d {
                    let mut acc = 0.0;
                    for l in 0..d {
                        acc += s.eval.hess[j * d + l] * db[l];
                    }
                    op[j] += acc;
                }
            },
        );
    let t = ens.time + dt;
    check_finite(&xn, "state", t)?;
    check_finite(&pn, "costate", t)?;
    Ok(ens.advanced(xn, pn, t))
}

/// Reverse of [`step_fbsde`]'s costate update along a stored path, using
/// the regenerated noise of the same `(seed, slice)`.
#[allow(clippy::too_many_arguments)]
pub fn backward_step_fbsde(
    sys: &System,
    x_k: &Points,
    x_next: &Points,
    p_next: &Points,
    psi: &PotentialModel,
    dt: f64,
    seed: u64,
    slice: u64,
    mode: NoiseMode,
) -> Result<Points> {
    let d = x_k.dim();
    if sys.deterministic {
        let f = costate_rate_all(sys, psi, &BetaField::Zero, x_k, p_next);
        let out = p_next.axpy(-dt, &f);
        check_finite(&out, "costate", f64::NAN)?;
        return Ok(out);
    }
    let mut out = p_next.clone();
    out.as_flat_mut().par_chunks_mut(d).enumerate().for_each_init(
        || (PotentialEval::new(d), vec![0.0; d], vec![0.0; d], vec![0.0; d]),
        |(e, xi, db, mid), (i, op)| {
            let x = x_k.row(i);
            noise_increment(sys, dt, seed, slice, i, xi, db);
            psi.eval_into(x, &sys.sigma, e);
            mid.iter_mut().for_each(|v| *v = 0.0);
            sys.drift.add_jacobian_t(p_next.row(i), mid);
            for j in 0..d {
                op[j] += mid[j] * dt;
            }
            if mode == NoiseMode::Stratonovich {
                for j in 0..d {
                    op[j] += e.grad_trace[j] * dt;
                    mid[j] = 0.5 * (x[j] + x_next.row(i)[j]);
                }
                psi.eval_into(mid, &sys.sigma, e);
            }
            for j in 0..d {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += e.hess[j * d + l] * db[l];
                }
                op[j] -= acc;
            }
        },
    );
    check_finite(&out, "costate", f64::NAN)?;
    Ok(out)
}

/// Heun step of `Ẋ = b + K∇ψ + β`, `Ẏ = ½‖u‖²_R − Σ:D²ψ + ⟨∇ψ, β⟩`.
pub fn step_lagrangian_value(
    sys: &System,
    states: &Points,
    values: &[f64],
    fields: &dyn FlowFields,
    grid: &TimeGrid,
    k: usize,
) -> Result<(Points, Vec<f64>)> {
    let dt = grid.dt();
    let d = states.dim();
    let rates = |frac: f64, x: &Points| -> Result<(Points, Vec<f64>)> {
        let at = grid.stage(k, frac);
        let psi = fields.potential_at(at);
        let beta = fields.beta_at(at, x)?;
        let mut vx = Points::zeros(x.len(), d);
        let mut vy = vec![0.0; x.len()];
        vx.as_flat_mut()
            .par_chunks_mut(d)
            .zip(vy.par_iter_mut())
            .enumerate()
            .for_each_init(
                || Scratch::new(d),
                |s, (i, (ox, oy))| {
                    let xi = x.row(i);
                    psi.eval_into(xi, &sys.sigma, &mut s.eval);
                    beta.eval_into(xi, &mut s.beta, &mut s.tmp);
                    mat_vec(&sys.k, &s.eval.grad, ox);
                    let mut gb = 0.0;
                    for j in 0..d {
                        ox[j] += s.beta[j];
                        gb += s.eval.grad[j] * s.beta[j];
                    }
                    sys.drift.add_to(xi, ox);
                    *oy = sys.kinetic(&s.eval.grad) - frobenius(&sys.sigma, &s.eval.hess) + gb;
                },
            );
        Ok((vx, vy))
    };
    let (v1, y1) = rates(0.0, states)?;
    let pred = states.axpy(dt, &v1);
    let (v2, y2) = rates(1.0, &pred)?;
    let mut xn = states.clone();
    for (i, o) in xn.as_flat_mut().iter_mut().enumerate() {
        *o += 0.5 * dt * (v1.as_flat()[i] + v2.as_flat()[i]);
    }
    let yn: Vec<f64> = values
        .iter()
        .zip(y1.iter().zip(&y2))
        .map(|(y, (a, b))| y + 0.5 * dt * (a + b))
        .collect();
    let t = grid.time(k + 1);
    check_finite(&xn, "state", t)?;
    if let Some(i) = yn.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("value of particle {i} at t={t}")));
    }
    Ok((xn, yn))
}

fn particle_mean<F>(states: &Points, f: F) -> f64
where
    F: Fn(&[f64], usize, &mut PotentialEval) -> f64 + Sync,
{
    let d = states.dim();
    let vals: Vec<f64> = (0..states.len())
        .into_par_iter()
        .map_init(|| PotentialEval::new(d), |e, i| f(states.row(i), i, e))
        .collect();
    pairwise_sum(&vals) / states.len() as f64
}

/// `(1/n) Σ_i [½‖u(X_i)‖²_R + Σ:D²ψ(X_i) + ⟨∇ψ(X_i), b(X_i)⟩]`.
pub fn hamiltonian_energy(sys: &System, states: &Points, psi: &PotentialModel) -> f64 {
    let d = states.dim();
    particle_mean(states, |x, _, e| {
        psi.eval_into(x, &sys.sigma, e);
        let mut h = sys.kinetic(&e.grad) + frobenius(&sys.sigma, &e.hess);
        if !sys.drift.is_zero() {
            let mut b = vec![0.0; d];
            sys.drift.add_to(x, &mut b);
            h += e.grad.iter().zip(&b).map(|(g, b)| g * b).sum::<f64>();
        }
        h
    })
}

/// Ensemble mean of `½‖u‖²_R` at one slice.
pub fn kinetic_energy(sys: &System, states: &Points, psi: &PotentialModel) -> f64 {
    particle_mean(states, |x, _, e| {
        psi.grad_into(x, &mut e.grad);
        sys.kinetic(&e.grad)
    })
}

/// Trapezoid rule over slice values.
pub fn trapezoid(values: &[f64], dt: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..n - 1].iter().sum();
    dt * (0.5 * (values[0] + values[n - 1]) + inner)
}

/// `𝒥 = ∫ (1/n) Σ_i ½‖u_k(X_k,i)‖²_R dt` by the trapezoid rule.
pub fn control_cost(sys: &System, grid: &TimeGrid, states: &[Points], potentials: &[PotentialModel]) -> f64 {
    let vals: Vec<f64> = states
        .iter()
        .zip(potentials)
        .map(|(x, psi)| kinetic_energy(sys, x, psi))
        .collect();
    trapezoid(&vals, grid.dt())
}

/// The discrete action evaluated two ways.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ActionValue {
    /// Integrand `⟨P, Ẋ − b − Gu⟩ − Σ:D²ψ + ½‖u‖²_R − ⟨P − ∇ψ, β⟩`.
    pub lagrangian: f64,
    /// Integrand `⟨P, Ẋ⟩ − H(X, P)`.
    pub hamiltonian: f64,
    /// Boundary terms shared by both.
    pub boundary: f64,
}

/// Inputs for [`action_value`], one entry per slice.
pub struct ActionInputs<'a> {
    pub grid: &'a TimeGrid,
    pub states: &'a [Points],
    pub costates: &'a [Points],
    pub potentials: &'a [PotentialModel],
    pub betas: &'a [BetaField],
    pub pi0: &'a DistributionSpec,
    pub pi_t: &'a DistributionSpec,
}

fn state_velocity(states: &[Points], k: usize, dt: f64) -> Points {
    let m = states.len() - 1;
    if m == 0 {
        return Points::zeros(states[0].len(), states[0].dim());
    }
    let (a, b, h) = if k == 0 {
        (&states[0], &states[1], dt)
    } else if k == m {
        (&states[m - 1], &states[m], dt)
    } else {
        (&states[k - 1], &states[k + 1], 2.0 * dt)
    };
    let mut v = b.axpy(-1.0, a);
    v.as_flat_mut().iter_mut().for_each(|x| *x /= h);
    v
}

/// Discrete action with boundary terms `−mean ψ_T(X_T) + π_T[ψ_T] + mean ψ_0(X_0) − π_0[ψ_0]`.
pub fn action_value(sys: &System, input: &ActionInputs<'_>) -> ActionValue {
    let dt = input.grid.dt();
    let d = sys.dim();
    let m = input.states.len() - 1;
    let mut lag = Vec::with_capacity(m + 1);
    let mut pxdot = Vec::with_capacity(m + 1);
    let mut ham = Vec::with_capacity(m + 1);
    for k in 0..=m {
        let x = &input.states[k];
        let p = &input.costates[k];
        let v = state_velocity(input.states, k, dt);
        let psi = &input.potentials[k];
        let beta = &input.betas[k];
        let terms: Vec<[f64; 3]> = (0..x.len())
            .into_par_iter()
            .map_init(
                || (Scratch::new(d), vec![0.0; d]),
                |(s, flow), i| {
                    let xi = x.row(i);
                    let pi = p.row(i);
                    let vi = v.row(i);
                    psi.eval_into(xi, &sys.sigma, &mut s.eval);
                    beta.eval_into(xi, &mut s.beta, &mut s.tmp);
                    mat_vec(&sys.k, &s.eval.grad, flow);
                    sys.drift.add_to(xi, flow);
                    let kin = sys.kinetic(&s.eval.grad);
                    let tr = frobenius(&sys.sigma, &s.eval.hess);
                    let mut a = -tr + kin;
                    let mut pv = 0.0;
                    let mut h = -kin + tr;
                    for j in 0..d {
                        a += pi[j] * (vi[j] - flow[j]) - (pi[j] - s.eval.grad[j]) * s.beta[j];
                        pv += pi[j] * vi[j];
                        h += pi[j] * (flow[j] + s.beta[j]) - s.eval.grad[j] * s.beta[j];
                    }
                    [a, pv, h]
                },
            )
            .collect();
        let col = |c: usize| pairwise_sum(&terms.iter().map(|t| t[c]).collect::<Vec<_>>()) / x.len() as f64;
        lag.push(col(0));
        pxdot.push(col(1));
        ham.push(col(2));
    }
    let mean_psi = |psi: &PotentialModel, pts: &Points| {
        pairwise_sum(&pts.rows().map(|r| psi.value(r)).collect::<Vec<_>>()) / pts.len() as f64
    };
    let n = input.states[0].len();
    let ref_t = sample_in_domain(input.pi_t, n, ACTION_SEED, Domain::Target);
    let ref_0 = sample_in_domain(input.pi0, n, ACTION_SEED.wrapping_add(1), Domain::Target);
    let psi_t = &input.potentials[m];
    let psi_0 = &input.potentials[0];
    let boundary = -mean_psi(psi_t, &input.states[m]) + mean_psi(psi_t, &ref_t) + mean_psi(psi_0, &input.states[0])
        - mean_psi(psi_0, &ref_0);
    let h_form: Vec<f64> = pxdot.iter().zip(&ham).map(|(a, b)| a - b).collect();
    ActionValue {
        lagrangian: trapezoid(&lag, dt) + boundary,
        hamiltonian: trapezoid(&h_form, dt) + boundary,
        boundary,
    }
}

/// Max over probe points of the centred gradient-HJB residual on `[t_k, t_{k+1}]`:
/// `(∇ψ_{k+1} − ∇ψ_k)/Δt + ½ Σ_{j∈{k,k+1}} [D²ψ_j (b + K∇ψ_j) + Dbᵀ∇ψ_j + ∇(Σ:D²ψ_j)]`.
pub fn gradient_hjb_residual(
    sys: &System,
    psi_k: &PotentialModel,
    psi_next: &PotentialModel,
    dt: f64,
    probes: &Points,
) -> f64 {
    let d = probes.dim();
    let spatial = |psi: &PotentialModel, x: &[f64], e: &mut PotentialEval, out: &mut [f64]| {
        psi.eval_into(x, &sys.sigma, e);
        let mut flow = vec![0.0; d];
        mat_vec(&sys.k, &e.grad, &mut flow);
        sys.drift.add_to(x, &mut flow);
        for i in 0..d {
            let mut acc = e.grad_trace[i];
            for j in 0..d {
                acc += e.hess[i * d + j] * flow[j];
            }
            out[i] = acc;
        }
        flow.iter_mut().for_each(|v| *v = 0.0);
        sys.drift.add_jacobian_t(&e.grad, &mut flow);
        for i in 0..d {
            out[i] += flow[i];
        }
    };
    let vals: Vec<f64> = (0..probes.len())
        .into_par_iter()
        .map_init(
            || (PotentialEval::new(d), vec![0.0; d], vec![0.0; d], vec![0.0; d]),
            |(e, a, b, g0), i| {
                let x = probes.row(i);
                spatial(psi_k, x, e, a);
                g0.copy_from_slice(&e.grad);
                spatial(psi_next, x, e, b);
                (0..d)
                    .map(|j| {
                        let r = (e.grad[j] - g0[j]) / dt + 0.5 * (a[j] + b[j]);
                        r * r
                    })
                    .sum::<f64>()
                    .sqrt()
            },
        )
        .collect();
    vals.into_iter().fold(0.0, f64::max)
}
