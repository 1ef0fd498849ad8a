//! Acceptance suite: one line per criterion, non-zero exit status if any fails.
//!
//! Run with `cargo test --test acceptance`.

mod common;

use std::sync::Arc;
use std::time::Instant;

use particle_bridge::bridge::{
    forward_sweep, probe_points, solve, DynamicsMode, FieldStack, SliceFields, SolveReport, SolverConfig,
};
use particle_bridge::cli::run_command;
use particle_bridge::dynamics::{
    gradient_hjb_residual, hamiltonian_energy, step_lagrangian_value, step_meanfield, System, TimeGrid,
};
use particle_bridge::ensemble::{empirical_moments, init_ensemble, Ensemble};
use particle_bridge::oracle::{gaussian_sb_closed_form, grid_sinkhorn_bridge, GaussianBridge, GridSpec};
use particle_bridge::points::Points;
use particle_bridge::potential::PotentialModel;
use particle_bridge::problem::{sample_dist, DistributionSpec, ProblemSpec};
use particle_bridge::score::{GaugeMode, ScoreMethod};

use common::{mean_var, shift_spec, solver, standardize, AnalyticFields};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn law_moments(report: &SolveReport, k: usize) -> (f64, f64) {
    let (m, c) = empirical_moments(&report.record.law()[k]);
    (m[0], c[(0, 0)])
}

fn bb_recovery() -> Outcome {
    let spec = shift_spec(0.0);
    let cfg = solver(4096, 200, 11, 0.5);
    let start = Instant::now();
    let report = solve(&spec, &cfg).expect("solve");
    let secs = start.elapsed().as_secs_f64();
    let cost = report.last().cost;
    let (m, v) = law_moments(&report, 100);
    let pass = report.converged && (cost - 2.0).abs() <= 0.02 * 2.0 && (m - 1.0).abs() <= 0.02 && (v - 1.0).abs() <= 0.05 && secs <= 60.0;
    outcome(
        pass,
        format!(
            "J={cost:.5} mid-time mean={m:.4} var={v:.4}, {} iterations, {secs:.1}s",
            report.iterations()
        ),
    )
}

struct SbRuns {
    natural: Vec<(usize, SolveReport, f64)>,
    zero: SolveReport,
}

fn sb_config(steps: usize) -> SolverConfig {
    solver(2000, steps, 5, 0.5)
}

fn sb_runs() -> SbRuns {
    let spec = shift_spec(0.5);
    let natural = [50, 100, 200]
        .into_iter()
        .map(|m| {
            let start = Instant::now();
            let r = solve(&spec, &sb_config(m)).expect("solve");
            (m, r, start.elapsed().as_secs_f64())
        })
        .collect();
    let mut cfg = sb_config(100);
    cfg.gauge = GaugeMode::Zero;
    SbRuns {
        natural,
        zero: solve(&spec, &cfg).expect("solve"),
    }
}

fn sb_marginals(runs: &SbRuns) -> Outcome {
    let spec = shift_spec(0.5);
    let (_, report, secs) = &runs.natural[1];
    let times = [0.25, 0.5, 0.75];
    let grid = GridSpec::covering(&spec.pi0, &spec.pi_t, 401);
    let oracle = grid_sinkhorn_bridge(&spec.pi0, &spec.pi_t, 0.5, 1.0, grid, &times).expect("oracle");
    let mut worst: (f64, f64) = (0.0, 0.0);
    for (j, k) in [25, 50, 75].into_iter().enumerate() {
        let (m, v) = law_moments(report, k);
        let (om, ov) = oracle.moments(j);
        worst = (worst.0.max((m - om).abs()), worst.1.max((v - ov).abs()));
    }
    let kl = report.last().gauss_kl;
    let pass = report.converged && worst.0 <= 0.02 && worst.1 <= 0.05 && kl <= 1e-3 && *secs <= 120.0;
    outcome(
        pass,
        format!(
            "max |Δmean|={:.4} max |Δvar|={:.4} terminal gauss-kl={kl:.2e}, {secs:.1}s",
            worst.0, worst.1
        ),
    )
}

fn oracle_concordance() -> Outcome {
    let mut worst: f64 = 0.0;
    let times = [0.0, 0.25, 0.5, 0.75, 1.0];
    let pi0 = DistributionSpec::scalar(0.0, 1.0);
    let pi_t = DistributionSpec::scalar(2.0, 1.0);
    for sigma2 in [0.1, 0.5, 1.0] {
        for horizon in [0.5, 1.0] {
            let ts: Vec<f64> = times.iter().map(|s| s * horizon).collect();
            let closed = gaussian_sb_closed_form(&pi0, &pi_t, sigma2, horizon, &ts).expect("closed form");
            let grid = GridSpec::covering(&pi0, &pi_t, 401);
            let g = grid_sinkhorn_bridge(&pi0, &pi_t, sigma2, horizon, grid, &ts).expect("grid");
            for (k, s) in closed.slices.iter().enumerate() {
                let (m, v) = g.moments(k);
                worst = worst.max((m - s.mean).abs()).max((v - s.var).abs());
            }
        }
    }
    let grid = GridSpec::covering(&pi0, &pi_t, 201);
    let g = grid_sinkhorn_bridge(&pi0, &pi_t, 0.5, 1.0, grid, &times).expect("grid");
    let fact = g.factorization_error();
    outcome(
        worst <= 1e-3 && fact <= 1e-6,
        format!("max moment gap={worst:.2e} factorization error={fact:.2e}"),
    )
}

/// Max relative energy drift along the analytic Gaussian bridge with `steps` slices.
fn energy_drift(steps: usize) -> f64 {
    let spec = ProblemSpec::scalar(0.0, 1.0, 0.0, 0.01, 0.05, 1.0);
    let bridge = GaussianBridge::solve(&spec.pi0, &spec.pi_t, 0.05, 1.0, 1.0).expect("bridge");
    let sys = System::new(&spec);
    let grid = TimeGrid::new(1.0, steps).expect("grid");
    let fields = AnalyticFields {
        bridge,
        sigma: spec.sigma.clone(),
    };
    let x0 = standardize(&sample_dist(&spec.pi0, 1000, 3), 0.0, 1.0);
    let mut ens = Ensemble::from_labels(x0);
    let e0 = hamiltonian_energy(&sys, &ens.states, &bridge.potential(0.0));
    let mut worst: f64 = 0.0;
    for k in 0..steps {
        ens = step_meanfield(&sys, &ens, &fields, &grid, k).expect("step");
        let e = hamiltonian_energy(&sys, &ens.states, &bridge.potential(grid.time(k + 1)));
        worst = worst.max((e - e0).abs() / e0.abs().max(1.0));
    }
    worst
}

fn energy_conservation() -> Outcome {
    let coarse = energy_drift(1000);
    let fine = energy_drift(2000);
    let ratio = coarse / fine;
    outcome(
        coarse <= 1e-5 && ratio >= 8.0,
        format!("drift at Δt=1e-3: {coarse:.2e}, at Δt=5e-4: {fine:.2e}, ratio {ratio:.1}"),
    )
}

fn gauge_invariance(runs: &SbRuns) -> Outcome {
    let spec = shift_spec(0.5);
    let sys = System::new(&spec);
    let probes = probe_points(&spec);
    let a = &runs.natural[1].1.record.fields;
    let b = &runs.zero.record.fields;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.potentials.iter().zip(&b.potentials) {
        for x in probes.rows() {
            let ua = particle_bridge::dynamics::control_field(pa, &sys, x);
            let ub = particle_bridge::dynamics::control_field(pb, &sys, x);
            sum += ua.iter().zip(&ub).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            count += 1;
        }
    }
    let rms = (sum / count as f64).sqrt();
    let both = runs.natural[1].1.converged && runs.zero.converged;
    outcome(
        both && rms <= 1e-4,
        format!(
            "RMS control difference={rms:.2e} (natural {} / zero {} iterations)",
            runs.natural[1].1.iterations(),
            runs.zero.iterations()
        ),
    )
}

fn max_hjb_residual(spec: &ProblemSpec, fields: &FieldStack, dt: f64) -> f64 {
    let sys = System::new(spec);
    let probes = probe_points(spec);
    (0..fields.steps())
        .map(|k| gradient_hjb_residual(&sys, &fields.potentials[k], &fields.potentials[k + 1], dt, &probes))
        .fold(0.0, f64::max)
}

fn hjb_residual(runs: &SbRuns) -> Outcome {
    let spec = shift_spec(0.5);
    let bridge = GaussianBridge::solve(&spec.pi0, &spec.pi_t, 0.5, 1.0, 1.0).expect("bridge");
    let grid = TimeGrid::new(1.0, 1000).expect("grid");
    let analytic = max_hjb_residual(&spec, &bridge.field_stack(&grid), grid.dt());
    let fitted: Vec<f64> = runs
        .natural
        .iter()
        .map(|(m, r, _)| max_hjb_residual(&spec, &r.record.fields, 1.0 / *m as f64))
        .collect();
    let monotone = fitted.windows(2).all(|w| w[1] < w[0]);
    outcome(
        analytic <= 1e-6 && monotone,
        format!(
            "analytic at Δt=1e-3: {analytic:.2e}; fitted at M=50/100/200: {:.2e} / {:.2e} / {:.2e}",
            fitted[0], fitted[1], fitted[2]
        ),
    )
}

fn terminal_mean(spec: &ProblemSpec, fields: &FieldStack, seed: u64, mode: DynamicsMode) -> (f64, f64) {
    let mut cfg = solver(10_000, fields.steps(), seed, 1.0);
    cfg.mode = mode;
    let ens0 = init_ensemble(spec, cfg.n_particles, seed).expect("ensemble");
    let zero = PotentialModel::zero(1);
    let r = forward_sweep(spec, fields, &ens0, &cfg, &zero).expect("sweep");
    mean_var(r.law()[fields.steps()].as_flat())
}

fn stochastic_agreement() -> Outcome {
    let spec = shift_spec(0.5);
    let bridge = GaussianBridge::solve(&spec.pi0, &spec.pi_t, 0.5, 1.0, 1.0).expect("bridge");
    let grid = TimeGrid::new(1.0, 100).expect("grid");
    let fields = bridge.field_stack(&grid);
    let (mf, _) = terminal_mean(&spec, &fields, 0, DynamicsMode::Meanfield);
    let (sd, var) = terminal_mean(&spec, &fields, 0, DynamicsMode::FbsdeIto);
    let se = (var / 10_000.0).sqrt();
    let z = (sd - mf).abs() / se;
    let seeds = 1..=20u64;
    let mf_means: Vec<f64> = seeds.clone().map(|s| terminal_mean(&spec, &fields, s, DynamicsMode::Meanfield).0).collect();
    let sd_means: Vec<f64> = seeds.map(|s| terminal_mean(&spec, &fields, s, DynamicsMode::FbsdeIto).0).collect();
    let (_, v_mf) = mean_var(&mf_means);
    let (_, v_sd) = mean_var(&sd_means);
    outcome(
        z <= 3.0 && v_sd > v_mf,
        format!("|Δmean|={:.2e} ({z:.2} SE); estimator variance fbsde {v_sd:.2e} > meanfield {v_mf:.2e}", (sd - mf).abs()),
    )
}

/// Max over slices of the spread of `Y − ψ_k(X)` after removing its slice mean.
fn lagrangian_gap(spec: &ProblemSpec, report: &SolveReport) -> f64 {
    let sys = System::new(spec);
    let rec = &report.record;
    let grid = rec.grid;
    let psi = &rec.fields.potentials;
    let fields = SliceFields {
        potentials: psi,
        sigma: &spec.sigma,
        score: ScoreMethod::Gaussian,
        gauge: GaugeMode::Natural,
    };
    let mut x: Points = rec.states[0].clone();
    let mut y: Vec<f64> = x.rows().map(|r| psi[0].value(r)).collect();
    let mut worst: f64 = 0.0;
    for k in 0..grid.steps {
        let (xn, yn) = step_lagrangian_value(&sys, &x, &y, &fields, &grid, k).expect("step");
        x = xn;
        y = yn;
        let gaps: Vec<f64> = x.rows().zip(&y).map(|(r, v)| v - psi[k + 1].value(r)).collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        worst = worst.max(gaps.iter().map(|g| (g - mean).abs()).fold(0.0, f64::max));
    }
    worst
}

fn lagrangian_mode(runs: &SbRuns) -> Outcome {
    let spec = shift_spec(0.5);
    let coarse = lagrangian_gap(&spec, &runs.natural[1].1);
    let fine = lagrangian_gap(&spec, &runs.natural[2].1);
    outcome(
        fine < coarse,
        format!("max |Y − ψ(X) − c_k| at M=100: {coarse:.2e}, at M=200: {fine:.2e}"),
    )
}

fn diffusion_pin() -> Outcome {
    let spec = ProblemSpec::scalar(0.0, 1.0, 0.0, 1.0, 1.0, 0.5);
    let cfg = solver(10_000, 100, 9, 1.0);
    let ens0 = init_ensemble(&spec, cfg.n_particles, cfg.seed).expect("ensemble");
    let zero = PotentialModel::zero(1);
    let r = forward_sweep(&spec, &FieldStack::zero(1, 100), &ens0, &cfg, &zero).expect("sweep");
    let (_, v) = mean_var(r.law()[100].as_flat());
    outcome((v - 2.0).abs() <= 0.05, format!("terminal variance {v:.4}"))
}

const DETERMINISM_CONFIG: &str = r#"
[problem]
sigma = 0.5
pi0 = { mean = [0.0], cov = [[1.0]] }
pi_t = { mean = [2.0], cov = [[1.0]] }

[solver]
n_particles = 500
steps = 40
seed = 21

[solver.ipf]
max_outer = 6
"#;

fn run_outputs(dir: &std::path::Path, config: &std::path::Path, threads: Option<usize>) -> (Vec<u8>, Vec<u8>) {
    let mut args = vec!["particle-bridge".to_string()];
    if let Some(t) = threads {
        args.push("--threads".into());
        args.push(t.to_string());
    }
    args.extend(["solve".into(), config.display().to_string(), "--output".into(), dir.display().to_string()]);
    let code = run_command(args);
    assert!(code == 0 || code == 1, "solve exited with {code}");
    (
        std::fs::read(dir.join("trajectory.csv")).expect("trajectory"),
        std::fs::read(dir.join("metrics.json")).expect("metrics"),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, DETERMINISM_CONFIG).expect("write config");
    let runs: Vec<_> = [None, None, Some(1), Some(4)]
        .into_iter()
        .enumerate()
        .map(|(i, t)| run_outputs(&tmp.path().join(format!("out{i}")), &config, t))
        .collect();
    let same = runs.windows(2).all(|w| w[0] == w[1]);
    outcome(
        same,
        format!("4 runs (default, default, 1 thread, 4 threads): {}", if same { "byte-identical" } else { "differ" }),
    )
}

fn main() {
    let start = Instant::now();
    let runs = Arc::new(sb_runs());
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 Benamou-Brenier recovery", Box::new(bb_recovery)),
        ("2 Schrödinger bridge marginals", Box::new({
            let r = runs.clone();
            move || sb_marginals(&r)
        })),
        ("3 oracle concordance", Box::new(oracle_concordance)),
        ("4 energy conservation", Box::new(energy_conservation)),
        ("5 gauge invariance", Box::new({
            let r = runs.clone();
            move || gauge_invariance(&r)
        })),
        ("6 gradient-HJB residual", Box::new({
            let r = runs.clone();
            move || hjb_residual(&r)
        })),
        ("7 stochastic/deterministic agreement", Box::new(stochastic_agreement)),
        ("8 Lagrangian mode", Box::new({
            let r = runs.clone();
            move || lagrangian_mode(&r)
        })),
        ("9 diffusion constant", Box::new(diffusion_pin)),
        ("10 determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!("[{}] criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!(
        "acceptance: {} passed, {failed} failed ({:.1}s)",
        criteria.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
