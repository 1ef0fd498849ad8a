//! Run configuration: a strict TOML schema with `problem`, `solver` and
//! `output` sections.
//!
//! ```toml
//! [problem]
//! horizon = 1.0
//! sigma = 0.5            # scalar times identity, or a matrix as row lists
//! pi0 = { mean = [0.0], cov = [[1.0]] }
//! pi_t = { mean = [2.0], cov = [[1.0]] }
//!
//! [solver]
//! n_particles = 2000
//! steps = 100
//! ```
//!
//! Defaults: `gauge = "natural"`, `score = "gaussian"`,
//! `basis.family = "quadratic"`, `ipf.damping = 1.0`, `mode = "meanfield"`.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use toml::{Table, Value};

use crate::bridge::{DynamicsMode, IpfConfig, SolverConfig};
use crate::error::{Error, Result};
use crate::linalg::{matrix_to_rows, rows_to_matrix};
use crate::potential::{BasisConfig, BasisFamily};
use crate::problem::{validate_spec, DistributionSpec, Drift, Gaussian, ProblemSpec};
use crate::score::{GaugeMode, ScoreMethod};

/// Tensor probe grid for field dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points: usize,
}

impl ProbeGrid {
    /// All `points^d` nodes, last coordinate varying fastest.
    pub fn nodes(&self) -> Vec<Vec<f64>> {
        let d = self.lo.len();
        let n = self.points;
        let total = n.pow(d as u32);
        (0..total)
            .map(|mut idx| {
                let mut x = vec![0.0; d];
                for j in (0..d).rev() {
                    let i = idx % n;
                    idx /= n;
                    x[j] = if n == 1 {
                        self.lo[j]
                    } else {
                        self.lo[j] + (self.hi[j] - self.lo[j]) * i as f64 / (n - 1) as f64
                    };
                }
                x
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub save_trajectory: bool,
    /// Slices written to the trajectory and field files; empty means all.
    pub slices: Vec<usize>,
    pub probe: Option<ProbeGrid>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: PathBuf::from("output"),
            save_trajectory: true,
            slices: Vec::new(),
            probe: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub solver: SolverConfig,
    pub output: OutputConfig,
}

struct Doc<'a> {
    text: &'a str,
}

impl Doc<'_> {
    /// First line mentioning `key` as an assignment or table header.
    fn line_of(&self, key: &str) -> Option<usize> {
        self.text.lines().position(|line| {
            let l = line.trim_start();
            let assign = l.strip_prefix(key).is_some_and(|rest| {
                let rest = rest.trim_start();
                rest.starts_with('=') || rest.starts_with('.')
            });
            let header = l.starts_with('[')
                && l.trim_start_matches('[')
                    .trim_end_matches(']')
                    .split('.')
                    .any(|part| part.trim() == key);
            let inline = l.contains(&format!("{key} =")) || l.contains(&format!("{key}="));
            assign || header || inline
        })
        .map(|i| i + 1)
    }

    fn error(&self, key: &str, message: impl Into<String>) -> Error {
        Error::Config {
            line: self.line_of(key),
            message: message.into(),
        }
    }
}

struct Section<'a> {
    doc: &'a Doc<'a>,
    path: String,
    table: &'a Table,
}

fn nearest<'k>(key: &str, allowed: &[&'k str]) -> &'k str {
    allowed
        .iter()
        .min_by_key(|a| strsim::levenshtein(key, a))
        .copied()
        .unwrap_or("")
}

impl<'a> Section<'a> {
    fn full(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for key in self.table.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(self.doc.error(
                    key,
                    format!(
                        "unknown key `{}`; did you mean `{}`?",
                        self.full(key),
                        self.full(nearest(key, allowed))
                    ),
                ));
            }
        }
        Ok(())
    }

    fn bad(&self, key: &str, what: &str) -> Error {
        self.doc.error(key, format!("`{}`: expected {what}", self.full(key)))
    }

    fn value(&self, key: &str) -> Option<&'a Value> {
        self.table.get(key)
    }

    fn required(&self, key: &str) -> Result<&'a Value> {
        self.value(key)
            .ok_or_else(|| self.doc.error(&self.path, format!("missing key `{}`", self.full(key))))
    }

    fn sub(&self, key: &str) -> Result<Option<Section<'a>>> {
        match self.value(key) {
            None => Ok(None),
            Some(Value::Table(t)) => Ok(Some(Section {
                doc: self.doc,
                path: self.full(key),
                table: t,
            })),
            Some(_) => Err(self.bad(key, "a table")),
        }
    }

    fn float_of(&self, key: &str, v: &Value) -> Result<f64> {
        match v {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            _ => Err(self.bad(key, "a number")),
        }
    }

    fn float(&self, key: &str) -> Result<Option<f64>> {
        self.value(key).map(|v| self.float_of(key, v)).transpose()
    }

    fn count(&self, key: &str) -> Result<Option<usize>> {
        match self.value(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
            Some(_) => Err(self.bad(key, "a nonnegative integer")),
        }
    }

    fn flag(&self, key: &str) -> Result<Option<bool>> {
        match self.value(key) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(*b)),
            Some(_) => Err(self.bad(key, "true or false")),
        }
    }

    fn string(&self, key: &str) -> Result<Option<&'a str>> {
        match self.value(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(self.bad(key, "a string")),
        }
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)]) -> Result<Option<T>> {
        let Some(s) = self.string(key)? else {
            return Ok(None);
        };
        options
            .iter()
            .find(|(name, _)| *name == s)
            .map(|(_, v)| Some(*v))
            .ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|o| o.0).collect();
                self.doc.error(
                    key,
                    format!("`{}`: unknown value \"{s}\"; expected one of {}", self.full(key), names.join(", ")),
                )
            })
    }

    fn vector_of(&self, key: &str, v: &Value) -> Result<Vec<f64>> {
        match v {
            Value::Array(a) => a.iter().map(|x| self.float_of(key, x)).collect(),
            Value::Float(_) | Value::Integer(_) => Ok(vec![self.float_of(key, v)?]),
            _ => Err(self.bad(key, "a list of numbers")),
        }
    }

    fn vector(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.value(key).map(|v| self.vector_of(key, v)).transpose()
    }

    fn indices(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.value(key) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .map(|x| match x {
                    Value::Integer(i) if *i >= 0 => Ok(*i as usize),
                    _ => Err(self.bad(key, "a list of nonnegative integers")),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(_) => Err(self.bad(key, "a list of nonnegative integers")),
        }
    }

    /// Row lists, or a bare number for `scale · I` of size `dim`.
    fn matrix(&self, key: &str, dim: usize) -> Result<Option<DMatrix<f64>>> {
        match self.value(key) {
            None => Ok(None),
            Some(Value::Float(_) | Value::Integer(_)) => {
                let s = self.float(key)?.expect("present");
                Ok(Some(DMatrix::identity(dim, dim) * s))
            }
            Some(Value::Array(rows)) => {
                let rows: Vec<Vec<f64>> = rows
                    .iter()
                    .map(|r| match r {
                        Value::Array(_) => self.vector_of(key, r),
                        _ => Err(self.bad(key, "a matrix given as a list of rows")),
                    })
                    .collect::<Result<_>>()?;
                rows_to_matrix(&rows)
                    .map(Some)
                    .ok_or_else(|| self.bad(key, "rows of equal length"))
            }
            Some(_) => Err(self.bad(key, "a matrix given as a list of rows")),
        }
    }
}

fn gaussian_of(s: &Section<'_>) -> Result<Gaussian> {
    s.check_keys(&["mean", "cov", "weight"])?;
    let mean = s.vector_of("mean", s.required("mean")?)?;
    s.required("cov")?;
    let cov = s.matrix("cov", mean.len())?.expect("present");
    Ok(Gaussian::new(DVector::from_vec(mean), cov))
}

fn distribution_of(s: &Section<'_>) -> Result<DistributionSpec> {
    if s.value("components").is_none() {
        s.check_keys(&["mean", "cov", "components"])?;
        return Ok(DistributionSpec::Gaussian(gaussian_of(s)?));
    }
    s.check_keys(&["components"])?;
    let Some(Value::Array(items)) = s.value("components") else {
        return Err(s.bad("components", "a list of tables"));
    };
    let mut comps = Vec::with_capacity(items.len());
    for (k, item) in items.iter().enumerate() {
        let Value::Table(t) = item else {
            return Err(s.bad("components", "a list of tables"));
        };
        let c = Section {
            doc: s.doc,
            path: format!("{}.components[{k}]", s.path),
            table: t,
        };
        let w = c.float("weight")?.ok_or_else(|| c.bad("weight", "a number"))?;
        comps.push((w, gaussian_of(&c)?));
    }
    Ok(DistributionSpec::Mixture(comps))
}

const PROBLEM_KEYS: &[&str] = &["horizon", "sigma", "r", "g", "drift", "pi0", "pi_t"];
const SOLVER_KEYS: &[&str] = &[
    "n_particles",
    "steps",
    "seed",
    "score",
    "score_bandwidth",
    "gauge",
    "mode",
    "basis",
    "ipf",
];
const BASIS_KEYS: &[&str] = &["family", "n_centers", "bandwidth", "ridge", "seed"];
const IPF_KEYS: &[&str] = &["max_outer", "damping", "tol_terminal", "tol_fields"];
const OUTPUT_KEYS: &[&str] = &["directory", "save_trajectory", "slices", "probe"];
const PROBE_KEYS: &[&str] = &["lo", "hi", "points"];

fn problem_of(s: &Section<'_>) -> Result<ProblemSpec> {
    s.check_keys(PROBLEM_KEYS)?;
    let pi0 = distribution_of(&s.sub("pi0")?.ok_or_else(|| s.doc.error("problem", "missing key `problem.pi0`"))?)?;
    let pi_t = distribution_of(&s.sub("pi_t")?.ok_or_else(|| s.doc.error("problem", "missing key `problem.pi_t`"))?)?;
    let d = pi0.dim();
    let horizon = s.float("horizon")?.unwrap_or(1.0);
    let sigma = s.matrix("sigma", d)?.unwrap_or_else(|| DMatrix::zeros(d, d));
    let drift = match s.value("drift") {
        None => Drift::Zero,
        Some(Value::String(name)) => match name.as_str() {
            "zero" => Drift::Zero,
            "langevin" => Drift::Langevin,
            other => {
                return Err(s.doc.error(
                    "drift",
                    format!("`problem.drift`: unknown value \"{other}\"; expected zero, langevin or {{ linear = [[...]] }}"),
                ))
            }
        },
        Some(Value::Table(_)) => {
            let t = s.sub("drift")?.expect("present");
            t.check_keys(&["linear"])?;
            Drift::Linear(t.matrix("linear", d)?.ok_or_else(|| t.bad("linear", "a matrix"))?)
        }
        Some(_) => return Err(s.bad("drift", "a string or a table")),
    };
    let default_g = if drift == Drift::Langevin && d % 2 == 0 {
        let h = d / 2;
        DMatrix::from_fn(d, h, |i, j| if i >= h && i - h == j { 1.0 } else { 0.0 })
    } else {
        DMatrix::identity(d, d)
    };
    let g = s.matrix("g", d)?.unwrap_or(default_g);
    let du = g.ncols();
    let r = s.matrix("r", du)?.unwrap_or_else(|| DMatrix::identity(du, du));
    Ok(ProblemSpec {
        state_dim: d,
        control_dim: du,
        horizon,
        sigma,
        r,
        g,
        drift,
        pi0,
        pi_t,
    })
}

fn solver_of(s: Option<&Section<'_>>) -> Result<SolverConfig> {
    let mut c = SolverConfig::default();
    let Some(s) = s else {
        return Ok(c);
    };
    s.check_keys(SOLVER_KEYS)?;
    if let Some(n) = s.count("n_particles")? {
        c.n_particles = n;
    }
    if let Some(m) = s.count("steps")? {
        c.steps = m;
    }
    if let Some(seed) = s.count("seed")? {
        c.seed = seed as u64;
    }
    let kde = ScoreMethod::Kde { bandwidth: None };
    if let Some(m) = s.choice("score", &[("gaussian", ScoreMethod::Gaussian), ("kde", kde)])? {
        c.score = m;
    }
    if let Some(h) = s.float("score_bandwidth")? {
        match &mut c.score {
            ScoreMethod::Kde { bandwidth } => *bandwidth = Some(h),
            ScoreMethod::Gaussian => {
                return Err(s.doc.error("score_bandwidth", "`solver.score_bandwidth` requires score = \"kde\""))
            }
        }
    }
    if let Some(g) = s.choice("gauge", &[("natural", GaugeMode::Natural), ("zero", GaugeMode::Zero)])? {
        c.gauge = g;
    }
    let modes = [
        ("meanfield", DynamicsMode::Meanfield),
        ("fbsde-ito", DynamicsMode::FbsdeIto),
        ("fbsde-stratonovich", DynamicsMode::FbsdeStratonovich),
    ];
    if let Some(m) = s.choice("mode", &modes)? {
        c.mode = m;
    }
    if let Some(b) = s.sub("basis")? {
        c.basis = basis_of(&b)?;
    }
    if let Some(i) = s.sub("ipf")? {
        i.check_keys(IPF_KEYS)?;
        let d = IpfConfig::default();
        c.ipf = IpfConfig {
            max_outer: i.count("max_outer")?.unwrap_or(d.max_outer),
            damping: i.float("damping")?.unwrap_or(d.damping),
            tol_terminal: i.float("tol_terminal")?.unwrap_or(d.tol_terminal),
            tol_fields: i.float("tol_fields")?.unwrap_or(d.tol_fields),
        };
    }
    Ok(c)
}

fn basis_of(b: &Section<'_>) -> Result<BasisConfig> {
    b.check_keys(BASIS_KEYS)?;
    let family = b.choice("family", &[("quadratic", false), ("quadratic-rbf", true)])?.unwrap_or(false);
    let n_centers = b.count("n_centers")?;
    let bandwidth = match b.value("bandwidth") {
        None => None,
        Some(Value::String(s)) if s == "auto" => None,
        Some(v) => Some(b.float_of("bandwidth", v).map_err(|_| b.bad("bandwidth", "a number or \"auto\""))?),
    };
    if !family && (n_centers.is_some() || bandwidth.is_some()) {
        return Err(b.doc.error(
            "family",
            "`solver.basis`: n_centers and bandwidth require family = \"quadratic-rbf\"",
        ));
    }
    Ok(BasisConfig {
        family: if family {
            BasisFamily::QuadraticRbf {
                n_centers: n_centers.unwrap_or(32),
                bandwidth,
            }
        } else {
            BasisFamily::Quadratic
        },
        ridge: b.float("ridge")?.unwrap_or(0.0),
        seed: b.count("seed")?.unwrap_or(0) as u64,
    })
}

fn output_of(s: Option<&Section<'_>>, dim: usize) -> Result<OutputConfig> {
    let mut o = OutputConfig::default();
    let Some(s) = s else {
        return Ok(o);
    };
    s.check_keys(OUTPUT_KEYS)?;
    if let Some(d) = s.string("directory")? {
        o.directory = PathBuf::from(d);
    }
    if let Some(b) = s.flag("save_trajectory")? {
        o.save_trajectory = b;
    }
    if let Some(v) = s.indices("slices")? {
        o.slices = v;
    }
    if let Some(p) = s.sub("probe")? {
        p.check_keys(PROBE_KEYS)?;
        let lo = p.vector("lo")?.ok_or_else(|| p.bad("lo", "a list of numbers"))?;
        let hi = p.vector("hi")?.ok_or_else(|| p.bad("hi", "a list of numbers"))?;
        let points = p.count("points")?.unwrap_or(41);
        if lo.len() != dim || hi.len() != dim {
            return Err(p.doc.error("probe", format!("`output.probe`: lo and hi need {dim} entries")));
        }
        if points == 0 || lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return Err(p.doc.error("probe", "`output.probe`: need points ≥ 1 and lo ≤ hi"));
        }
        o.probe = Some(ProbeGrid { lo, hi, points });
    }
    Ok(o)
}

fn syntax_error(text: &str, e: toml::de::Error) -> Error {
    let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    Error::Config {
        line,
        message: e.message().trim().to_string(),
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let table: Table = text.parse().map_err(|e| syntax_error(text, e))?;
    let doc = Doc { text };
    let root = Section {
        doc: &doc,
        path: String::new(),
        table: &table,
    };
    root.check_keys(&["problem", "solver", "output"])?;
    let problem = root
        .sub("problem")?
        .ok_or_else(|| Error::Config {
            line: None,
            message: "missing section [problem]".into(),
        })?;
    let problem = validate_spec(problem_of(&problem)?)?;
    let mut solver = solver_of(root.sub("solver")?.as_ref())?;
    let output = output_of(root.sub("output")?.as_ref(), problem.state_dim)?;
    solver.record_slices = output.slices.clone();
    solver.validate()?;
    if solver.seed > i64::MAX as u64 {
        return Err(doc.error("seed", "`solver.seed` exceeds the integer range"));
    }
    Ok(RunConfig { problem, solver, output })
}

fn matrix_value(m: &DMatrix<f64>) -> Value {
    Value::Array(
        matrix_to_rows(m)
            .into_iter()
            .map(|r| Value::Array(r.into_iter().map(Value::Float).collect()))
            .collect(),
    )
}

fn vector_value(v: &[f64]) -> Value {
    Value::Array(v.iter().copied().map(Value::Float).collect())
}

fn gaussian_table(g: &Gaussian) -> Table {
    let mut t = Table::new();
    t.insert("mean".into(), vector_value(g.mean().as_slice()));
    t.insert("cov".into(), matrix_value(g.cov()));
    t
}

fn distribution_value(d: &DistributionSpec) -> Value {
    match d {
        DistributionSpec::Gaussian(g) => Value::Table(gaussian_table(g)),
        DistributionSpec::Mixture(comps) => {
            let items = comps
                .iter()
                .map(|(w, g)| {
                    let mut t = gaussian_table(g);
                    t.insert("weight".into(), Value::Float(*w));
                    Value::Table(t)
                })
                .collect();
            let mut t = Table::new();
            t.insert("components".into(), Value::Array(items));
            Value::Table(t)
        }
    }
}

fn str_value(s: &str) -> Value {
    Value::String(s.to_string())
}

/// Canonical TOML text with every default resolved.
pub fn print_config(c: &RunConfig) -> String {
    let p = &c.problem;
    let mut problem = Table::new();
    problem.insert("horizon".into(), Value::Float(p.horizon));
    problem.insert("sigma".into(), matrix_value(&p.sigma));
    problem.insert("r".into(), matrix_value(&p.r));
    problem.insert("g".into(), matrix_value(&p.g));
    let drift = match &p.drift {
        Drift::Zero => str_value("zero"),
        Drift::Langevin => str_value("langevin"),
        Drift::Linear(a) => {
            let mut t = Table::new();
            t.insert("linear".into(), matrix_value(a));
            Value::Table(t)
        }
    };
    problem.insert("drift".into(), drift);
    problem.insert("pi0".into(), distribution_value(&p.pi0));
    problem.insert("pi_t".into(), distribution_value(&p.pi_t));

    let s = &c.solver;
    let mut solver = Table::new();
    solver.insert("n_particles".into(), Value::Integer(s.n_particles as i64));
    solver.insert("steps".into(), Value::Integer(s.steps as i64));
    solver.insert("seed".into(), Value::Integer(s.seed as i64));
    match s.score {
        ScoreMethod::Gaussian => {
            solver.insert("score".into(), str_value("gaussian"));
        }
        ScoreMethod::Kde { bandwidth } => {
            solver.insert("score".into(), str_value("kde"));
            if let Some(h) = bandwidth {
                solver.insert("score_bandwidth".into(), Value::Float(h));
            }
        }
    }
    let gauge = match s.gauge {
        GaugeMode::Natural => "natural",
        GaugeMode::Zero => "zero",
    };
    solver.insert("gauge".into(), str_value(gauge));
    let mode = match s.mode {
        DynamicsMode::Meanfield => "meanfield",
        DynamicsMode::FbsdeIto => "fbsde-ito",
        DynamicsMode::FbsdeStratonovich => "fbsde-stratonovich",
    };
    solver.insert("mode".into(), str_value(mode));
    let mut basis = Table::new();
    match &s.basis.family {
        BasisFamily::Quadratic => {
            basis.insert("family".into(), str_value("quadratic"));
        }
        BasisFamily::QuadraticRbf { n_centers, bandwidth } => {
            basis.insert("family".into(), str_value("quadratic-rbf"));
            basis.insert("n_centers".into(), Value::Integer(*n_centers as i64));
            basis.insert(
                "bandwidth".into(),
                bandwidth.map_or_else(|| str_value("auto"), Value::Float),
            );
        }
    }
    basis.insert("ridge".into(), Value::Float(s.basis.ridge));
    basis.insert("seed".into(), Value::Integer(s.basis.seed as i64));
    solver.insert("basis".into(), Value::Table(basis));
    let mut ipf = Table::new();
    ipf.insert("max_outer".into(), Value::Integer(s.ipf.max_outer as i64));
    ipf.insert("damping".into(), Value::Float(s.ipf.damping));
    ipf.insert("tol_terminal".into(), Value::Float(s.ipf.tol_terminal));
    ipf.insert("tol_fields".into(), Value::Float(s.ipf.tol_fields));
    solver.insert("ipf".into(), Value::Table(ipf));

    let o = &c.output;
    let mut output = Table::new();
    output.insert("directory".into(), str_value(&o.directory.to_string_lossy()));
    output.insert("save_trajectory".into(), Value::Boolean(o.save_trajectory));
    output.insert(
        "slices".into(),
        Value::Array(o.slices.iter().map(|k| Value::Integer(*k as i64)).collect()),
    );
    if let Some(pg) = &o.probe {
        let mut t = Table::new();
        t.insert("lo".into(), vector_value(&pg.lo));
        t.insert("hi".into(), vector_value(&pg.hi));
        t.insert("points".into(), Value::Integer(pg.points as i64));
        output.insert("probe".into(), Value::Table(t));
    }

    let mut root = Table::new();
    root.insert("problem".into(), Value::Table(problem));
    root.insert("solver".into(), Value::Table(solver));
    root.insert("output".into(), Value::Table(output));
    toml::to_string(&root).expect("config tables serialize")
}
