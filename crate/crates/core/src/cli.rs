//! Command-line front end: `validate`, `solve`, `oracle`, `compare`.
//!
//! Exit codes: 0 success, 1 non-convergence or a failed comparison,
//! 2 configuration, specification or I/O error, 3 numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::bridge::{probe_points, solve, SolveReport};
use crate::config::{parse_config, print_config, RunConfig};
use crate::dynamics::control_field;
use crate::dynamics::{System, TimeGrid};
use crate::ensemble::empirical_moments;
use crate::error::{Error, Result};
use crate::oracle::{bb_quantile_interpolation, gaussian_sb_closed_form, grid_sinkhorn_bridge, GridSpec};
use crate::points::Points;
use crate::problem::{DistributionSpec, ProblemSpec};

#[derive(Debug, Parser)]
#[command(name = "particle-bridge", version, about = "Particle solver for Schrödinger and Benamou–Brenier bridges")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a configuration and print it with every default filled in.
    Validate { config: PathBuf },
    /// Run the solver and write trajectory.csv, metrics.json and fields.csv.
    Solve {
        config: PathBuf,
        /// Overrides `output.directory`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Reference marginal moments of a one-dimensional problem (oracle.csv).
    Oracle {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Nodes of the Sinkhorn grid when no closed form applies.
        #[arg(long, default_value_t = 401)]
        grid_points: usize,
    },
    /// Solve, then compare marginal moments with the oracle (compare.csv).
    Compare {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 0.02)]
        mean_tol: f64,
        #[arg(long, default_value_t = 0.05)]
        var_tol: f64,
        #[arg(long, default_value_t = 401)]
        grid_points: usize,
    },
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidSpec { .. } | Error::NonFinite(_) | Error::Io { .. } => 2,
        Error::DegenerateCovariance | Error::RankDeficient(_) | Error::BlowUp { .. } | Error::Oracle(_) => 3,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_command<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(&cli.command)),
            Err(e) => {
                eprintln!("error: thread pool: {e}");
                return 2;
            }
        },
        None => execute(&cli.command),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn execute(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Validate { config } => {
            let c = load_config(config)?;
            print!("{}", print_config(&c));
            Ok(0)
        }
        Command::Solve { config, output } => {
            let c = load_config(config)?;
            let dir = output.clone().unwrap_or_else(|| c.output.directory.clone());
            let report = solve(&c.problem, &c.solver)?;
            emit_outputs(&dir, &c, &report)?;
            let last = report.last();
            println!(
                "{} after {} iterations: terminal residual {}, cost {}",
                if report.converged { "converged" } else { "not converged" },
                report.iterations(),
                last.terminal_residual,
                last.cost
            );
            Ok(if report.converged { 0 } else { 1 })
        }
        Command::Oracle {
            config,
            output,
            grid_points,
        } => {
            let c = load_config(config)?;
            let dir = output.clone().unwrap_or_else(|| c.output.directory.clone());
            let slices = selected_slices(&c);
            let times: Vec<f64> = slices.iter().map(|k| slice_time(&c, *k)).collect();
            let (method, moments) = oracle_moments(&c.problem, &times, *grid_points)?;
            let mut text = String::from("slice,t,mean,var\n");
            for ((k, t), (m, v)) in slices.iter().zip(&times).zip(&moments) {
                let _ = writeln!(text, "{k},{t},{m},{v}");
            }
            write_file(&dir, "oracle.csv", &text)?;
            println!("oracle ({method}) written for {} slices", slices.len());
            Ok(0)
        }
        Command::Compare {
            config,
            output,
            mean_tol,
            var_tol,
            grid_points,
        } => {
            let c = load_config(config)?;
            let dir = output.clone().unwrap_or_else(|| c.output.directory.clone());
            let slices = selected_slices(&c);
            let times: Vec<f64> = slices.iter().map(|k| slice_time(&c, *k)).collect();
            let (method, oracle) = oracle_moments(&c.problem, &times, *grid_points)?;
            let report = solve(&c.problem, &c.solver)?;
            emit_outputs(&dir, &c, &report)?;
            let mut text = String::from("slice,t,solver_mean,solver_var,oracle_mean,oracle_var\n");
            for ((k, t), (om, ov)) in slices.iter().zip(&times).zip(&oracle) {
                let (m, cov) = empirical_moments(&report.record.law()[*k]);
                let _ = writeln!(text, "{k},{t},{},{},{om},{ov}", m[0], cov[(0, 0)]);
            }
            write_file(&dir, "compare.csv", &text)?;
            let verdict = compare_verdict(&text, *mean_tol, *var_tol)?;
            println!(
                "{} against {method}: max mean error {}, max variance error {}{}",
                if verdict.pass { "PASS" } else { "FAIL" },
                verdict.max_mean_error,
                verdict.max_var_error,
                if report.converged { "" } else { " (solver did not converge)" }
            );
            Ok(if verdict.pass { 0 } else { 1 })
        }
    }
}

fn selected_slices(c: &RunConfig) -> Vec<usize> {
    if c.output.slices.is_empty() {
        (0..=c.solver.steps).collect()
    } else {
        c.output.slices.clone()
    }
}

fn slice_time(c: &RunConfig, k: usize) -> f64 {
    TimeGrid {
        horizon: c.problem.horizon,
        steps: c.solver.steps,
    }
    .time(k)
}

/// Reference `(mean, var)` per time, with the name of the method used.
///
/// Σ = 0 uses the quantile interpolation, Gaussian marginals the closed
/// form, anything else the grid Sinkhorn bridge.
pub fn oracle_moments(spec: &ProblemSpec, times: &[f64], grid_points: usize) -> Result<(&'static str, Vec<(f64, f64)>)> {
    if spec.state_dim != 1 || !spec.drift.is_zero() {
        return Err(Error::spec("problem", "oracle supports one-dimensional problems without drift"));
    }
    let h = spec.horizon;
    let sigma2 = spec.sigma[(0, 0)];
    if sigma2 == 0.0 {
        let m = times
            .iter()
            .map(|t| bb_quantile_interpolation(&spec.pi0, &spec.pi_t, *t, h).map(|q| q.moments()))
            .collect::<Result<_>>()?;
        return Ok(("quantile interpolation", m));
    }
    if let (DistributionSpec::Gaussian(_), DistributionSpec::Gaussian(_)) = (&spec.pi0, &spec.pi_t) {
        let c = gaussian_sb_closed_form(&spec.pi0, &spec.pi_t, sigma2, h, times)?;
        return Ok(("closed form", c.slices.iter().map(|s| (s.mean, s.var)).collect()));
    }
    let grid = GridSpec::covering(&spec.pi0, &spec.pi_t, grid_points);
    let b = grid_sinkhorn_bridge(&spec.pi0, &spec.pi_t, sigma2, h, grid, times)?;
    Ok(("grid Sinkhorn", (0..times.len()).map(|k| b.moments(k)).collect()))
}

/// Outcome of a moment comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub pass: bool,
    pub max_mean_error: f64,
    pub max_var_error: f64,
}

/// Recomputes the comparison verdict from the text of a compare.csv file.
pub fn compare_verdict(csv: &str, mean_tol: f64, var_tol: f64) -> Result<Verdict> {
    let bad = |line: usize, what: &str| Error::Config {
        line: Some(line),
        message: format!("compare.csv: {what}"),
    };
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad(1, "empty file"))?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| bad(1, &format!("missing column {name}")));
    let (sm, sv, om, ov) = (col("solver_mean")?, col("solver_var")?, col("oracle_mean")?, col("oracle_var")?);
    let mut max_mean_error: f64 = 0.0;
    let mut max_var_error: f64 = 0.0;
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let get = |j: usize| -> Result<f64> {
            cells
                .get(j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(i + 2, "malformed row"))
        };
        max_mean_error = max_mean_error.max((get(sm)? - get(om)?).abs());
        max_var_error = max_var_error.max((get(sv)? - get(ov)?).abs());
    }
    let pass = max_mean_error <= mean_tol && max_var_error <= var_tol;
    Ok(Verdict {
        pass,
        max_mean_error,
        max_var_error,
    })
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes trajectory.csv (if enabled), metrics.json and fields.csv.
pub fn emit_outputs(dir: &Path, c: &RunConfig, report: &SolveReport) -> Result<()> {
    let rec = &report.record;
    let d = c.problem.state_dim;
    let slices = selected_slices(c);
    let times = rec.grid.times();

    if c.output.save_trajectory {
        let mut text = String::from("t,particle");
        for j in 0..d {
            let _ = write!(text, ",x_{j}");
        }
        for j in 0..d {
            let _ = write!(text, ",p_{j}");
        }
        text.push('\n');
        for &k in &slices {
            for (i, (x, p)) in rec.states[k].rows().zip(rec.costates[k].rows()).enumerate() {
                let _ = write!(text, "{},{i}", times[k]);
                for v in x.iter().chain(p) {
                    let _ = write!(text, ",{v}");
                }
                text.push('\n');
            }
        }
        write_file(dir, "trajectory.csv", &text)?;
    }

    let probes = match &c.output.probe {
        Some(p) => Points::from_rows(&p.nodes()),
        None => probe_points(&c.problem),
    };
    let sys = System::new(&c.problem);
    let du = c.problem.control_dim;
    let mut text = String::from("t");
    for j in 0..d {
        let _ = write!(text, ",x_{j}");
    }
    for j in 0..d {
        let _ = write!(text, ",grad_{j}");
    }
    for j in 0..du {
        let _ = write!(text, ",u_{j}");
    }
    text.push('\n');
    for &k in &slices {
        let psi = &rec.fields.potentials[k];
        for x in probes.rows() {
            let _ = write!(text, "{}", times[k]);
            for v in x.iter().chain(&psi.grad(x)).chain(&control_field(psi, &sys, x)) {
                let _ = write!(text, ",{v}");
            }
            text.push('\n');
        }
    }
    write_file(dir, "fields.csv", &text)?;

    let h = &report.history;
    let marginals: Vec<_> = slices
        .iter()
        .map(|&k| {
            let (m, cov) = empirical_moments(&rec.law()[k]);
            let rows: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| cov[(i, j)]).collect()).collect();
            json!({ "slice": k, "t": times[k], "mean": m.as_slice(), "cov": rows })
        })
        .collect();
    let metrics = json!({
        "converged": report.converged,
        "iterations": report.iterations(),
        "seed": c.solver.seed,
        "terminal_residual": h.iter().map(|o| o.terminal_residual).collect::<Vec<_>>(),
        "field_change": h.iter().map(|o| o.field_change).collect::<Vec<_>>(),
        "gauss_kl": h.iter().map(|o| o.gauss_kl).collect::<Vec<_>>(),
        "cost": h.iter().map(|o| o.cost).collect::<Vec<_>>(),
        "action": h.iter().map(|o| &o.action).collect::<Vec<_>>(),
        "times": times,
        "energy": &report.last().energy,
        "marginals": marginals,
        "config": print_config(c),
    });
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";
    write_file(dir, "metrics.json", &text)
}
