//! Runs the same Gaussian bridge with deterministic and noisy particle
//! dynamics and prints the terminal moments of each.

use particle_bridge::bridge::{solve, DynamicsMode, SolverConfig};
use particle_bridge::ensemble::empirical_moments;
use particle_bridge::problem::ProblemSpec;

fn main() -> particle_bridge::error::Result<()> {
    let spec = ProblemSpec::scalar(0.0, 1.0, 2.0, 1.0, 0.5, 1.0);
    for mode in [DynamicsMode::Meanfield, DynamicsMode::FbsdeIto, DynamicsMode::FbsdeStratonovich] {
        let mut config = SolverConfig {
            n_particles: 2000,
            steps: 100,
            seed: 9,
            mode,
            ..SolverConfig::default()
        };
        config.ipf.damping = 0.5;
        config.ipf.tol_terminal = 1e-3;
        let report = solve(&spec, &config)?;
        let (m, c) = empirical_moments(&report.record.law()[100]);
        println!(
            "{mode:?}: {} iterations, terminal mean {:.4} var {:.4}",
            report.iterations(),
            m[0],
            c[(0, 0)]
        );
    }
    Ok(())
}
