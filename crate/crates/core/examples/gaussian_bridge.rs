//! Solves the 1-D Gaussian bridge N(0,1) → N(2,1) and prints slice moments.
//!
//! Usage: `cargo run --release --example gaussian_bridge [sigma] [damping]`

use particle_bridge::bridge::{solve, SolverConfig};
use particle_bridge::ensemble::empirical_moments;
use particle_bridge::problem::ProblemSpec;

fn main() -> particle_bridge::error::Result<()> {
    let sigma: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let damping: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let spec = ProblemSpec::scalar(0.0, 1.0, 2.0, 1.0, sigma, 1.0);
    let mut config = SolverConfig {
        n_particles: 2000,
        steps: 100,
        ..SolverConfig::default()
    };
    config.ipf.damping = damping;
    config.ipf.tol_terminal = 1e-5;
    config.ipf.tol_fields = 1e-5;
    let report = solve(&spec, &config)?;
    for it in &report.history {
        println!(
            "iter {:3}  residual {:.3e}  change {:.3e}  kl {:.3e}  cost {:.6}",
            it.iteration, it.terminal_residual, it.field_change, it.gauss_kl, it.cost
        );
    }
    let law = report.record.law();
    for k in [0, 25, 50, 75, 100] {
        let (m, c) = empirical_moments(&law[k]);
        println!("t = {:.2}  mean {:.5}  var {:.5}", k as f64 / 100.0, m[0], c[(0, 0)]);
    }
    println!("converged: {}", report.converged);
    Ok(())
}
