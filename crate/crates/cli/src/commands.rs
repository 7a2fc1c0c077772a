//! The `solve`, `verify`, `certify` and `sweep` commands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kamtori::dynamics::{conjugacy_residual, IntegratorConfig};
use kamtori::io::TorusFile;
use kamtori::solver::{certificate, run, Certificate, CertificateVerdict, ConstantTracker, KamReport, NormMode, Verdict};
use kamtori::TorusState;
use log::{info, warn};
use serde::Serialize;

use crate::config::{load_torus, ConfigError, Problem, ProblemConfig};

/// Process exit status of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Not converged, or a verification check failed.
    Failed,
    NotCertified,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Success => 0,
            Status::Failed => 2,
            Status::NotCertified => 3,
        }
    }
}

/// The solver could not start or stopped with an error; exit code 2.
#[derive(Debug)]
pub struct RunFailed(pub String);

impl std::fmt::Display for RunFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "solver failed: {}", self.0)
    }
}

impl std::error::Error for RunFailed {}

/// Absolute round-off allowance of the zero-average identity.
const ZERO_AVERAGE_FLOOR: f64 = 1e-14;
const IDENTITY_TOL: f64 = 1e-8;
const INTEGRATOR_TOL: f64 = 1e-12;

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn load_problem(config: &Path) -> Result<Problem, ConfigError> {
    ProblemConfig::load(config)?.validate()
}

/// Loads a coefficient file and checks it against the problem.
fn load_state(problem: &Problem, torus: &Path) -> Result<TorusState, ConfigError> {
    let file = load_torus(torus)?;
    let emb = file.to_embedding().map_err(|e| ConfigError::new("torus", e))?;
    problem.check_shape(&emb, "torus")?;
    let omega = &problem.config.omega;
    let mismatch = file.omega.iter().zip(omega).any(|(a, b)| (a - b).abs() > 1e-14 * b.abs().max(1.0));
    if mismatch {
        return Err(ConfigError::new("omega", format!("torus file carries omega = {:?}, configuration has {omega:?}", file.omega)));
    }
    problem.state(emb)
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl IdentityCheck {
    fn new(name: &'static str, value: f64, threshold: f64) -> Self {
        Self { name, value, threshold, pass: value <= threshold }
    }
}

/// Identities that hold on every embedding.
fn identity_checks(state: &TorusState) -> Result<Vec<IdentityCheck>> {
    let z = state.zero_average_identity()?;
    let d = state.error_derivative_identity()?;
    Ok(vec![
        IdentityCheck::new("zero_average", z.residual, IDENTITY_TOL * z.scale + ZERO_AVERAGE_FLOOR),
        IdentityCheck::new("error_derivative", d.residual, IDENTITY_TOL * (1.0 + d.scale)),
    ])
}

#[derive(Serialize)]
struct SolveArtifact<'a> {
    #[serde(flatten)]
    report: &'a KamReport,
    final_eps: f64,
    iterations: usize,
    final_distance: f64,
    checks: Vec<IdentityCheck>,
}

fn write_samples(path: &Path, state: &TorusState) -> Result<()> {
    let n = state.torus_dim();
    let m = state.embedding().phase_dim();
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    let header: Vec<String> = (0..n)
        .map(|j| format!("theta_{j}"))
        .chain((0..m).map(|i| format!("k_{i}")))
        .chain((0..m).map(|i| format!("e_{i}")))
        .collect();
    w.write_record(&header)?;
    for ((theta, k), e) in state.nodes().iter().zip(state.k_samples()).zip(state.e_grid()) {
        let row: Vec<String> = theta.iter().chain(k.iter()).chain(e.iter()).map(|v| format!("{v:e}")).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the solver and writes `report.json`, `torus.json` and `samples.csv` into `out`.
fn solve_into(problem: &Problem, out: &Path) -> Result<KamReport> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let initial = problem.state(problem.initial_embedding()?)?;
    let outcome = run(initial, problem.schedule, &problem.config.solver_options()).map_err(|e| RunFailed(e.to_string()))?;
    let report = outcome.report;
    let state = outcome.final_state;
    let artifact = SolveArtifact {
        report: &report,
        final_eps: report.final_eps(),
        iterations: report.iterations(),
        final_distance: report.final_distance(),
        checks: identity_checks(&state)?,
    };
    write_json(&out.join("report.json"), &artifact)?;
    write_json(&out.join("torus.json"), &TorusFile::from_embedding(state.embedding(), &problem.config.omega))?;
    write_samples(&out.join("samples.csv"), &state)?;
    Ok(report)
}

pub fn solve(config: &Path, out: &Path) -> Result<Status> {
    let problem = load_problem(config)?;
    let report = solve_into(&problem, out)?;
    info!("{:?} after {} iterations, eps = {:e}", report.verdict, report.iterations(), report.final_eps());
    if report.verdict == Verdict::Converged {
        Ok(Status::Success)
    } else {
        warn!("not converged: {}", report.message.as_deref().unwrap_or("no message"));
        Ok(Status::Failed)
    }
}

#[derive(Serialize)]
struct VerifyArtifact {
    eps: f64,
    horizon: f64,
    samples: usize,
    seed: u64,
    checks: Vec<IdentityCheck>,
    failed: Vec<&'static str>,
}

/// Thresholds of `verify`.
#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub horizon: f64,
    pub samples: usize,
    pub seed: u64,
    pub eps_tol: f64,
    pub conjugacy_tol: f64,
}

pub fn verify(torus: &Path, config: &Path, out: &Path, opts: VerifyOptions) -> Result<Status> {
    let problem = load_problem(config)?;
    let state = load_state(&problem, torus)?;
    if !(opts.horizon >= 0.0) || opts.samples == 0 {
        return Err(ConfigError::new("", "the horizon must be non-negative and at least one sample is required").into());
    }
    let eps = state.eps();
    let conj = conjugacy_residual(
        state.system().as_ref(),
        state.embedding(),
        &state.frequency().omega,
        opts.horizon,
        opts.samples,
        opts.seed,
        &IntegratorConfig::adaptive(INTEGRATOR_TOL),
    );
    // a trajectory leaving the domain is a failed check, not an input error
    let conj = conj.unwrap_or_else(|e| {
        warn!("conjugacy: {e}");
        f64::INFINITY
    });
    let mut checks = vec![
        IdentityCheck::new("invariance", eps, opts.eps_tol),
        IdentityCheck::new("conjugacy", conj, opts.conjugacy_tol),
    ];
    checks.extend(identity_checks(&state)?);
    let failed: Vec<&'static str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let artifact = VerifyArtifact { eps, horizon: opts.horizon, samples: opts.samples, seed: opts.seed, checks, failed };
    write_json(&out.join("verify.json"), &artifact)?;
    if artifact.failed.is_empty() {
        Ok(Status::Success)
    } else {
        for c in artifact.checks.iter().filter(|c| !c.pass) {
            eprintln!("check failed: {} = {:e} exceeds {:e}", c.name, c.value, c.threshold);
        }
        Ok(Status::Failed)
    }
}

#[derive(Serialize)]
struct CertifyArtifact {
    norm_mode: NormMode,
    #[serde(flatten)]
    certificate: Certificate,
    constant: ConstantTracker,
}

pub fn certify(torus: &Path, config: &Path, out: &Path) -> Result<Status> {
    let problem = load_problem(config)?;
    let state = load_state(&problem, torus)?;
    let tracker = problem.tracker(&state)?;
    let mode = problem.config.norm_mode;
    let cert = certificate(&state, &problem.schedule, &tracker, problem.config.certificate.r, mode)?;
    info!("kappa = {:e}: {}", cert.kappa, cert.label);
    let verdict = cert.verdict;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    write_json(&out.join("certificate.json"), &CertifyArtifact { norm_mode: mode, certificate: cert, constant: tracker })?;
    Ok(match verdict {
        CertificateVerdict::Certified => Status::Success,
        CertificateVerdict::NotCertified => Status::NotCertified,
    })
}

/// Parses a comma-separated list of numbers.
pub fn parse_values(list: &str) -> Result<Vec<f64>, ConfigError> {
    let values: Vec<f64> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| ConfigError::new("values", format!("{s:?}: {e}"))))
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(ConfigError::new("values", "the value list is empty"));
    }
    Ok(values)
}

const SWEEPABLE: [&str; 7] = ["modes", "rho_0", "delta_0", "gamma", "sigma", "target", "max_iter"];

/// Sets `param` to `value` in a copy of `base`: a configuration field or a system parameter.
pub fn with_param(base: &ProblemConfig, param: &str, value: f64) -> Result<ProblemConfig, ConfigError> {
    let mut cfg = base.clone();
    let count = |v: f64| -> Result<usize, ConfigError> {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(ConfigError::new(param, format!("{v} is not a non-negative integer")))
        }
    };
    match param {
        "modes" => cfg.modes = vec![count(value)?; cfg.modes.len()],
        "rho_0" => cfg.rho_0 = value,
        "delta_0" => cfg.delta_0 = Some(value),
        "gamma" => cfg.gamma = value,
        "sigma" => cfg.sigma = value,
        "target" => cfg.solver.target = value,
        "max_iter" => cfg.solver.max_iter = count(value)?,
        name => {
            let entry = kamtori::poisson::registry::lookup(&cfg.system.name).map_err(|e| ConfigError::new("system.name", e))?;
            if !entry.params.iter().any(|(k, _)| *k == name) {
                let known: Vec<&str> = SWEEPABLE.iter().copied().chain(entry.params.iter().map(|(k, _)| *k)).collect();
                return Err(ConfigError::new("param", format!("{name:?} is not sweepable; known: {}", known.join(", "))));
            }
            cfg.system.params.insert(name.to_string(), value);
        }
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub eps0: Option<f64>,
    pub iterations: Option<usize>,
    pub final_eps: Option<f64>,
    pub distance: Option<f64>,
    pub verdict: String,
    pub error: String,
}

fn sweep_one(cfg: ProblemConfig, value: f64, dir: PathBuf) -> SweepRow {
    let outcome = cfg.validate().map_err(anyhow::Error::from).and_then(|p| solve_into(&p, &dir));
    match outcome {
        Ok(r) => SweepRow {
            value,
            eps0: r.records.first().map(|x| x.eps),
            iterations: Some(r.iterations()),
            final_eps: Some(r.final_eps()),
            distance: Some(r.final_distance()),
            verdict: serde_json::to_value(r.verdict).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            error: r.message.unwrap_or_default(),
        },
        Err(e) => SweepRow {
            value,
            eps0: None,
            iterations: None,
            final_eps: None,
            distance: None,
            verdict: "error".into(),
            error: format!("{e:#}"),
        },
    }
}

/// One run per value, each in its own subdirectory of `out`; writes `sweep.csv`.
pub fn sweep(config: &Path, param: &str, values: &str, out: &Path) -> Result<Status> {
    let base = ProblemConfig::load(config)?;
    let values = parse_values(values)?;
    let configs: Vec<ProblemConfig> = values.iter().map(|v| with_param(&base, param, *v)).collect::<Result<_, _>>()?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let rows: Vec<SweepRow> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .into_iter()
            .zip(&values)
            .enumerate()
            .map(|(i, (cfg, v))| {
                let dir = out.join(format!("run_{i:03}"));
                s.spawn(move || sweep_one(cfg, *v, dir))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep run panicked")).collect()
    });
    let path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let failures = rows.iter().filter(|r| r.verdict != "converged").count();
    if failures > 0 {
        warn!("{failures} of {} runs did not converge", rows.len());
        return Ok(Status::Failed);
    }
    Ok(Status::Success)
}
