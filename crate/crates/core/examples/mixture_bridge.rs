//! Bridges N(0,1) to a two-component mixture with an RBF basis and KDE score,
//! then checks slice moments against the grid Sinkhorn reference.

use particle_bridge::bridge::{solve, SolverConfig};
use particle_bridge::ensemble::empirical_moments;
use particle_bridge::oracle::{grid_sinkhorn_bridge, GridSpec};
use particle_bridge::potential::{BasisConfig, BasisFamily};
use particle_bridge::problem::{DistributionSpec, Gaussian, ProblemSpec};
use particle_bridge::score::ScoreMethod;

fn main() -> particle_bridge::error::Result<()> {
    let noise = 1.0;
    let target = DistributionSpec::Mixture(vec![(0.5, Gaussian::scalar(-1.0, 0.5)), (0.5, Gaussian::scalar(1.0, 0.5))]);
    let spec = ProblemSpec {
        pi_t: target,
        ..ProblemSpec::scalar(0.0, 1.0, 0.0, 1.0, noise, 1.0)
    };
    let mut config = SolverConfig {
        n_particles: 600,
        steps: 50,
        seed: 3,
        score: ScoreMethod::Kde { bandwidth: Some(0.3) },
        basis: BasisConfig {
            family: BasisFamily::QuadraticRbf {
                n_centers: 8,
                bandwidth: Some(1.0),
            },
            ridge: 1e-2,
            seed: 1,
        },
        ..SolverConfig::default()
    };
    config.ipf.damping = 0.5;
    config.ipf.max_outer = 30;
    config.ipf.tol_terminal = 0.15;
    let report = solve(&spec, &config)?;
    println!("iterations {}  converged {}", report.iterations(), report.converged);

    let times = [0.0, 0.25, 0.5, 0.75, 1.0];
    let grid = GridSpec::covering(&spec.pi0, &spec.pi_t, 401);
    let reference = grid_sinkhorn_bridge(&spec.pi0, &spec.pi_t, noise, 1.0, grid, &times)?;
    let law = report.record.law();
    for (i, t) in times.iter().enumerate() {
        let (m, c) = empirical_moments(&law[(t * 50.0).round() as usize]);
        let (rm, rv) = reference.moments(i);
        println!("t = {t:.2}  particles ({:+.4}, {:.4})  grid ({rm:+.4}, {rv:.4})", m[0], c[(0, 0)]);
    }
    Ok(())
}
