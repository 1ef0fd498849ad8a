//! The outer solver: forward ensemble sweeps, backward costate sweeps with
//! per-slice potential refits, and the iterative-proportional-fitting loop
//! on the terminal potential.

use std::borrow::Cow;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    action_value, backward_step_costate, backward_step_fbsde, control_cost, hamiltonian_energy, step_fbsde,
    step_meanfield, ActionInputs, ActionValue, FlowFields, NoiseMode, SliceField, StageTime, System, TimeGrid,
};
use crate::ensemble::{init_ensemble, marginal_divergence, DivergenceMetric, Ensemble};
use crate::error::{Error, Result};
use crate::linalg::mat_vec;
use crate::points::Points;
use crate::potential::{accumulate_terminal, fit_potential, terminal_score_gap, BasisConfig, PotentialModel};
use crate::problem::{sample_in_domain, ProblemSpec};
use crate::rng::Domain;
use crate::score::{beta_field, estimate_score, BetaField, GaugeMode, ScoreField, ScoreMethod};

/// States with any coordinate beyond this magnitude abort the solve.
pub const BLOW_UP_LIMIT: f64 = 1e8;

const PROBE_SEED: u64 = 0x9B0B_E5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DynamicsMode {
    #[default]
    Meanfield,
    FbsdeIto,
    FbsdeStratonovich,
}

impl DynamicsMode {
    fn noise(self) -> Option<NoiseMode> {
        match self {
            DynamicsMode::Meanfield => None,
            DynamicsMode::FbsdeIto => Some(NoiseMode::Ito),
            DynamicsMode::FbsdeStratonovich => Some(NoiseMode::Stratonovich),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpfConfig {
    pub max_outer: usize,
    pub damping: f64,
    pub tol_terminal: f64,
    pub tol_fields: f64,
}

impl Default for IpfConfig {
    fn default() -> Self {
        IpfConfig {
            max_outer: 50,
            damping: 1.0,
            tol_terminal: 1e-4,
            tol_fields: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub n_particles: usize,
    /// Number of time steps M.
    pub steps: usize,
    pub seed: u64,
    pub score: ScoreMethod,
    pub basis: BasisConfig,
    pub gauge: GaugeMode,
    pub mode: DynamicsMode,
    pub ipf: IpfConfig,
    /// Slices persisted by the front end; empty means all.
    pub record_slices: Vec<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            n_particles: 1000,
            steps: 100,
            seed: 0,
            score: ScoreMethod::Gaussian,
            basis: BasisConfig::default(),
            gauge: GaugeMode::Natural,
            mode: DynamicsMode::Meanfield,
            ipf: IpfConfig::default(),
            record_slices: Vec::new(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::spec("n_particles", "need at least 2 particles"));
        }
        if self.steps == 0 {
            return Err(Error::spec("M", "need at least one time step"));
        }
        let ipf = &self.ipf;
        if ipf.max_outer == 0 {
            return Err(Error::spec("ipf.max_outer", "must be at least 1"));
        }
        if !(ipf.damping > 0.0 && ipf.damping <= 1.0) {
            return Err(Error::spec("ipf.damping", "must lie in (0, 1]"));
        }
        if !(ipf.tol_terminal > 0.0) {
            return Err(Error::spec("ipf.tol_terminal", "must be positive"));
        }
        if !(ipf.tol_fields > 0.0) {
            return Err(Error::spec("ipf.tol_fields", "must be positive"));
        }
        if let Some(k) = self.record_slices.iter().find(|k| **k > self.steps) {
            return Err(Error::spec("record_slices", format!("slice {k} exceeds M = {}", self.steps)));
        }
        self.basis.validate()
    }
}

/// Per-slice potentials ψ_0..ψ_M.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldStack {
    pub potentials: Vec<PotentialModel>,
}

impl FieldStack {
    pub fn zero(dim: usize, steps: usize) -> Self {
        FieldStack {
            potentials: vec![PotentialModel::zero(dim); steps + 1],
        }
    }

    pub fn steps(&self) -> usize {
        self.potentials.len() - 1
    }
}

/// One forward sweep and, once the backward sweep ran, its costates.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub grid: TimeGrid,
    pub gauge: GaugeMode,
    pub mode: DynamicsMode,
    /// States used by the backward sweep, slice 0 to M.
    pub states: Vec<Points>,
    /// States of the law when it moves separately (zero gauge with Σ ≠ 0).
    pub law_states: Option<Vec<Points>>,
    pub costates: Vec<Points>,
    /// Score of the law at each slice.
    pub scores: Vec<Arc<ScoreField>>,
    /// β seen by `states` at each slice.
    pub betas: Vec<BetaField>,
    pub fields: FieldStack,
    pub terminal: PotentialModel,
}

impl TrajectoryRecord {
    /// Particle approximation of the marginals ρ_{t_k}.
    pub fn law(&self) -> &[Points] {
        self.law_states.as_deref().unwrap_or(&self.states)
    }
}

/// Diagnostics of one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OuterIteration {
    pub iteration: usize,
    pub terminal_residual: f64,
    /// RMS control change produced by the previous backward sweep.
    pub field_change: f64,
    pub gauss_kl: f64,
    pub energy: Vec<f64>,
    pub cost: f64,
    pub action: ActionValue,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub history: Vec<OuterIteration>,
    pub converged: bool,
    pub record: TrajectoryRecord,
}

impl SolveReport {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    pub fn last(&self) -> &OuterIteration {
        self.history.last().expect("at least one outer iteration")
    }
}

/// ψ interpolated linearly between slices; natural-gauge β re-estimated
/// from whatever cloud is being advanced.
#[derive(Debug, Clone, Copy)]
pub struct SliceFields<'a> {
    pub potentials: &'a [PotentialModel],
    pub sigma: &'a nalgebra::DMatrix<f64>,
    pub score: ScoreMethod,
    pub gauge: GaugeMode,
}

impl FlowFields for SliceFields<'_> {
    fn potential_at(&self, at: StageTime) -> Cow<'_, PotentialModel> {
        if at.frac == 0.0 {
            Cow::Borrowed(&self.potentials[at.k])
        } else if at.frac == 1.0 {
            Cow::Borrowed(&self.potentials[at.k + 1])
        } else {
            Cow::Owned(PotentialModel::lerp(&self.potentials[at.k], &self.potentials[at.k + 1], at.frac))
        }
    }

    fn beta_at(&self, _: StageTime, states: &Points) -> Result<BetaField> {
        if self.gauge == GaugeMode::Zero || self.sigma.iter().all(|v| *v == 0.0) {
            return Ok(BetaField::Zero);
        }
        Ok(beta_field(Arc::new(estimate_score(states, self.score)?), self.sigma, self.gauge))
    }
}

fn check_blow_up(points: &Points, k: usize) -> Result<()> {
    if let Some(i) = points.as_flat().iter().position(|v| !(v.abs() <= BLOW_UP_LIMIT)) {
        return Err(Error::BlowUp {
            context: format!("slice {k}, particle {}", i / points.dim()),
        });
    }
    Ok(())
}

fn at_slice(e: Error, k: usize) -> Error {
    match e {
        Error::RankDeficient(m) => Error::RankDeficient(format!("slice {k}: {m}")),
        Error::NonFinite(m) => Error::NonFinite(format!("slice {k}: {m}")),
        Error::InvalidSpec { field, reason } => Error::InvalidSpec {
            field,
            reason: format!("{reason} (slice {k})"),
        },
        other => other,
    }
}

fn gradients(psi: &PotentialModel, states: &Points) -> Points {
    let mut p = Points::zeros(states.len(), states.dim());
    for (i, x) in states.rows().enumerate() {
        psi.grad_into(x, p.row_mut(i));
    }
    p
}

/// Propagates the labelled ensemble through all slices under `fields`.
pub fn forward_sweep(
    spec: &ProblemSpec,
    fields: &FieldStack,
    ens0: &Ensemble,
    config: &SolverConfig,
    terminal: &PotentialModel,
) -> Result<TrajectoryRecord> {
    let grid = TimeGrid::new(spec.horizon, config.steps)?;
    if fields.potentials.len() != config.steps + 1 {
        return Err(Error::spec("fields", format!("need {} slices", config.steps + 1)));
    }
    let sys = System::new(spec);
    let m = config.steps;
    let noisy = config.mode.noise();
    let separate_law = noisy.is_none() && config.gauge == GaugeMode::Zero && !spec.is_deterministic();

    let mut carrier = ens0.advanced(ens0.states.clone(), gradients(&fields.potentials[0], &ens0.states), 0.0);
    let mut law = separate_law.then(|| carrier.clone());
    let carrier_fields = SliceFields {
        potentials: &fields.potentials,
        sigma: &spec.sigma,
        score: config.score,
        gauge: if noisy.is_some() { GaugeMode::Zero } else { config.gauge },
    };
    let law_fields = SliceFields {
        gauge: GaugeMode::Natural,
        ..carrier_fields
    };

    let mut states = Vec::with_capacity(m + 1);
    let mut law_states = law.as_ref().map(|_| Vec::with_capacity(m + 1));
    let mut costates = Vec::with_capacity(m + 1);
    let mut scores = Vec::with_capacity(m + 1);
    let mut betas = Vec::with_capacity(m + 1);
    for k in 0..=m {
        let law_now = law.as_ref().map_or(&carrier.states, |l| &l.states);
        let score = Arc::new(estimate_score(law_now, config.score).map_err(|e| at_slice(e, k))?);
        let beta = if carrier_fields.gauge == GaugeMode::Natural {
            beta_field(score.clone(), &spec.sigma, GaugeMode::Natural)
        } else {
            BetaField::Zero
        };
        scores.push(score);
        betas.push(beta);
        if k == m {
            break;
        }
        let next = match noisy {
            None => step_meanfield(&sys, &carrier, &carrier_fields, &grid, k),
            Some(mode) => step_fbsde(&sys, &carrier, &fields.potentials[k], grid.dt(), config.seed, k as u64, mode),
        }
        .map_err(|e| at_slice(e, k))?;
        check_blow_up(&next.states, k + 1)?;
        let prev = std::mem::replace(&mut carrier, next);
        states.push(prev.states);
        costates.push(prev.costates);
        if let Some(l) = law.as_mut() {
            let next = step_meanfield(&sys, l, &law_fields, &grid, k).map_err(|e| at_slice(e, k))?;
            check_blow_up(&next.states, k + 1)?;
            let prev = std::mem::replace(l, next);
            law_states.as_mut().expect("law states").push(prev.states);
        }
    }
    states.push(carrier.states);
    costates.push(carrier.costates);
    if let (Some(ls), Some(l)) = (law_states.as_mut(), law) {
        ls.push(l.states);
    }
    Ok(TrajectoryRecord {
        grid,
        gauge: config.gauge,
        mode: config.mode,
        states,
        law_states,
        costates,
        scores,
        betas,
        fields: fields.clone(),
        terminal: terminal.clone(),
    })
}

/// Costates from `P_M = ∇ψ_T(X_M)` backwards with a refit of every slice.
///
/// With `lagged`, the `t_k` end of each reverse step uses the record's own
/// ψ_k; otherwise the just-fitted ψ_{k+1} is used at both ends.
pub fn backward_sweep(
    spec: &ProblemSpec,
    record: &mut TrajectoryRecord,
    terminal: &PotentialModel,
    config: &SolverConfig,
    lagged: bool,
) -> Result<FieldStack> {
    let sys = System::new(spec);
    let m = record.grid.steps;
    let dt = record.grid.dt();
    let basis = &config.basis;
    let mut p = gradients(terminal, &record.states[m]);
    let mut new = vec![PotentialModel::zero(spec.state_dim); m + 1];
    let mut costates = vec![Points::zeros(0, spec.state_dim); m + 1];
    for k in (0..m).rev() {
        let psi_next = fit_potential(&record.states[k + 1], &p, basis).map_err(|e| at_slice(e, k + 1))?;
        let prev_psi = if lagged { &record.fields.potentials[k] } else { &psi_next };
        let p_k = match record.mode.noise() {
            None => backward_step_costate(
                &sys,
                &record.states[k],
                &record.states[k + 1],
                &p,
                SliceField {
                    potential: &psi_next,
                    beta: &record.betas[k + 1],
                },
                SliceField {
                    potential: prev_psi,
                    beta: &record.betas[k],
                },
                dt,
            ),
            Some(mode) => backward_step_fbsde(
                &sys,
                &record.states[k],
                &record.states[k + 1],
                &p,
                &psi_next,
                dt,
                config.seed,
                k as u64,
                mode,
            ),
        }
        .map_err(|e| at_slice(e, k))?;
        costates[k + 1] = std::mem::replace(&mut p, p_k);
        new[k + 1] = psi_next;
    }
    new[0] = fit_potential(&record.states[0], &p, basis).map_err(|e| at_slice(e, 0))?;
    costates[0] = p;
    record.costates = costates;
    Ok(FieldStack { potentials: new })
}

/// Fixed points on which control-field changes are measured.
pub fn probe_points(spec: &ProblemSpec) -> Points {
    let (m0, c0) = spec.pi0.moments();
    let (mt, ct) = spec.pi_t.moments();
    if spec.state_dim == 1 {
        let sd = c0[(0, 0)].max(ct[(0, 0)]).sqrt();
        let lo = m0[0].min(mt[0]) - 3.0 * sd;
        let hi = m0[0].max(mt[0]) + 3.0 * sd;
        let n = 41;
        return Points::from_flat(1, (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect());
    }
    let a = sample_in_domain(&spec.pi0, 128, PROBE_SEED, Domain::Target);
    let b = sample_in_domain(&spec.pi_t, 128, PROBE_SEED + 1, Domain::Target);
    let mut flat = a.as_flat().to_vec();
    flat.extend_from_slice(b.as_flat());
    Points::from_flat(spec.state_dim, flat)
}

/// RMS over slices and probe points of `‖u_a − u_b‖` with `u = R Gᵀ ∇ψ`.
pub fn control_field_change(spec: &ProblemSpec, a: &FieldStack, b: &FieldStack, probes: &Points) -> f64 {
    let gain = spec.control_gain();
    let d = spec.state_dim;
    let mut ga = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let mut u = vec![0.0; gain.nrows()];
    let mut acc = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.potentials.iter().zip(&b.potentials) {
        for x in probes.rows() {
            pa.grad_into(x, &mut ga);
            pb.grad_into(x, &mut gb);
            for (g, h) in ga.iter_mut().zip(&gb) {
                *g -= h;
            }
            mat_vec(&gain, &ga, &mut u);
            acc += u.iter().map(|v| v * v).sum::<f64>();
            count += 1;
        }
    }
    (acc / count.max(1) as f64).sqrt()
}

/// `sqrt(mean_i ‖s_T(X_i) − ∇log π_T(X_i)‖²)`.
pub fn terminal_residual(spec: &ProblemSpec, states: &Points, score: &ScoreField) -> Result<f64> {
    let gap = terminal_score_gap(&spec.pi_t, score, states)?;
    let ss: f64 = gap.as_flat().iter().map(|v| v * v).sum();
    Ok((ss / states.len() as f64).sqrt())
}

fn diagnostics(spec: &ProblemSpec, record: &TrajectoryRecord, iteration: usize, change: f64) -> Result<OuterIteration> {
    let sys = System::new(spec);
    let m = record.grid.steps;
    let law = record.law();
    let terminal_residual = terminal_residual(spec, &law[m], &record.scores[m])?;
    let gauss_kl = marginal_divergence(&law[m], &spec.pi_t, DivergenceMetric::GaussKl)?;
    let energy = law
        .iter()
        .zip(&record.fields.potentials)
        .map(|(x, psi)| hamiltonian_energy(&sys, x, psi))
        .collect();
    let cost = control_cost(&sys, &record.grid, law, &record.fields.potentials);
    let action = action_value(
        &sys,
        &ActionInputs {
            grid: &record.grid,
            states: &record.states,
            costates: &record.costates,
            potentials: &record.fields.potentials,
            betas: &record.betas,
            pi0: &spec.pi0,
            pi_t: &spec.pi_t,
        },
    );
    Ok(OuterIteration {
        iteration,
        terminal_residual,
        field_change: change,
        gauss_kl,
        energy,
        cost,
        action,
    })
}

/// Solves from zero fields and a zero terminal potential.
pub fn solve(spec: &ProblemSpec, config: &SolverConfig) -> Result<SolveReport> {
    solve_from(spec, config, FieldStack::zero(spec.state_dim, config.steps), false)
}

/// Solves starting from `initial` fields, whose last slice seeds the
/// accumulated terminal potential. `warm` marks the fields as an earlier
/// solution so the first backward sweep may lag on them.
pub fn solve_from(spec: &ProblemSpec, config: &SolverConfig, initial: FieldStack, warm: bool) -> Result<SolveReport> {
    config.validate()?;
    if initial.potentials.len() != config.steps + 1 {
        return Err(Error::spec("fields", format!("need {} slices", config.steps + 1)));
    }
    let probes = probe_points(spec);
    let ens0 = init_ensemble(spec, config.n_particles, config.seed)?;
    let mut acc = initial.potentials[config.steps].clone();
    let mut fields = initial;
    let mut lagged = warm;
    let mut change = 0.0;
    let mut history = Vec::new();
    loop {
        let iteration = history.len() + 1;
        let mut record = forward_sweep(spec, &fields, &ens0, config, &acc)?;
        let diag = diagnostics(spec, &record, iteration, change)?;
        let converged = diag.terminal_residual <= config.ipf.tol_terminal && change <= config.ipf.tol_fields;
        history.push(diag);
        if converged || iteration >= config.ipf.max_outer {
            return Ok(SolveReport {
                history,
                converged,
                record,
            });
        }
        let m = config.steps;
        let (next_acc, _) = accumulate_terminal(
            &acc,
            &spec.pi_t,
            &record.scores[m],
            config.ipf.damping,
            &record.law()[m],
            &config.basis,
        )
        .map_err(|e| at_slice(e, m))?;
        acc = next_acc;
        let new_fields = backward_sweep(spec, &mut record, &acc, config, lagged)?;
        change = control_field_change(spec, &fields, &new_fields, &probes);
        fields = new_fields;
        lagged = true;
    }
}
