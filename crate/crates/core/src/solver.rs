//! Outer iteration, convergence monitor and smallness certificate.

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fourier::russmann_mu;
use crate::geometry::{GeometryError, NdReport, TorusState};
use crate::newton::{newton_step, NewtonError, StepOptions};
use crate::norms::{mat_max, vec_max};

/// Errors below this are treated as round-off in the decay fit.
pub const NOISE_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SolverError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("initial torus is degenerate: {0}")]
    InitialDegenerate(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Shrinking strips `rho_m` and losses `delta_m = delta_0 2^-m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub rho_0: f64,
    pub delta_0: f64,
}

impl Schedule {
    pub fn new(rho_0: f64, delta_0: f64) -> Result<Self, SolverError> {
        if !(rho_0 > 0.0) {
            return Err(SolverError::Schedule(format!("rho_0 must be positive, got {rho_0}")));
        }
        let cap = 1f64.min(rho_0 / 12.0);
        if !(delta_0 > 0.0 && delta_0 <= cap * (1.0 + 1e-12)) {
            return Err(SolverError::Schedule(format!(
                "delta_0 must satisfy 0 < delta_0 <= min(1, rho_0/12) = {cap}, got {delta_0}"
            )));
        }
        Ok(Self { rho_0, delta_0 })
    }

    /// `delta_0 = rho_0 / 12`.
    pub fn standard(rho_0: f64) -> Result<Self, SolverError> {
        Self::new(rho_0, 1f64.min(rho_0 / 12.0))
    }

    pub fn delta(&self, m: usize) -> f64 {
        self.delta_0 * 0.5f64.powi(m as i32)
    }

    pub fn rho(&self, m: usize) -> f64 {
        self.rho_0 - 6.0 * self.delta_0 * (1.0 - 0.5f64.powi(m as i32))
    }

    pub fn rho_inf(&self) -> f64 {
        self.rho_0 - 6.0 * self.delta_0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Grid sup norm at `rho = 0`.
    #[default]
    Practical,
    /// Weighted norms on the shrinking strips.
    Theoretical,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolverOptions {
    pub target: f64,
    pub max_iter: usize,
    pub step: StepOptions,
    pub norm_mode: NormMode,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            target: 1e-12,
            max_iter: 30,
            step: StepOptions::default(),
            norm_mode: NormMode::Practical,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub m: usize,
    /// Grid sup of the error of `K_m`.
    pub eps: f64,
    /// Weighted norm of the error on the strip `rho_m`, when representable.
    pub eps_weighted: Option<f64>,
    pub rho: f64,
    /// `sup |K_m - K_0|`.
    pub distance: f64,
    pub lagrangian: Option<f64>,
    pub nd: NdReport,
    /// Size of the step that produced `K_m`.
    pub delta_norm: Option<f64>,
    /// Linearized residual of the step that produced `K_m`.
    pub residual_linear: Option<f64>,
    pub halvings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Converged,
    MaxIter,
    Diverged,
    NdFailure,
    StepFailed,
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftCheck {
    pub beta: f64,
    pub d0: f64,
    pub nu0: f64,
    pub s0: f64,
    pub d_max: f64,
    pub nu_max: f64,
    pub s_max: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct KamReport {
    pub system: String,
    pub omega: Vec<f64>,
    pub gamma: f64,
    pub sigma: f64,
    pub schedule: Schedule,
    pub norm_mode: NormMode,
    pub target: f64,
    pub records: Vec<IterationRecord>,
    pub verdict: Verdict,
    pub message: Option<String>,
    pub drift: Option<DriftCheck>,
}

impl KamReport {
    pub fn eps_sequence(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.eps).collect()
    }

    pub fn final_eps(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.eps)
    }

    pub fn final_distance(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.distance)
    }

    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: KamReport,
    pub final_state: TorusState,
}

fn record(m: usize, state: &TorusState, initial: &TorusState, schedule: &Schedule) -> IterationRecord {
    let rho = schedule.rho(m);
    IterationRecord {
        m,
        eps: state.eps(),
        eps_weighted: state.e_map().weighted_norm(rho).ok(),
        rho,
        distance: state.embedding().distance(initial.embedding()).unwrap_or(f64::NAN),
        lagrangian: state.lagrangian_defect().ok(),
        nd: state.nondegeneracy_report(),
        delta_norm: None,
        residual_linear: None,
        halvings: 0,
    }
}

/// Iterates the quasi-Newton step from `initial` until the grid error drops below the target.
pub fn run(initial: TorusState, schedule: Schedule, opts: &SolverOptions) -> Result<RunOutcome, SolverError> {
    let nd = initial.nondegeneracy_report();
    if !nd.pass() {
        return Err(SolverError::InitialDegenerate(format!(
            "ND1 pass = {}, ND2 pass = {} (min det {:e}, condition {:?})",
            nd.nd1_pass, nd.nd2_pass, nd.nd1_min_det, nd.nd2_condition
        )));
    }
    let freq = initial.frequency().clone();
    let mut records = vec![record(0, &initial, &initial, &schedule)];
    let mut state = initial.with_embedding(initial.embedding().clone())?;
    let mut verdict = Verdict::MaxIter;
    let mut message = None;
    let mut increases = 0;
    let mut m = 0;
    loop {
        let eps = state.eps();
        info!("iteration {m}: eps = {eps:.3e}");
        if eps <= opts.target {
            verdict = Verdict::Converged;
            break;
        }
        if m >= opts.max_iter {
            message = Some(format!("target {:e} not reached in {} iterations", opts.target, opts.max_iter));
            break;
        }
        let step = match newton_step(&state, &opts.step) {
            Ok(s) => s,
            Err(err) => {
                verdict = match err {
                    NewtonError::NoTwist { .. } | NewtonError::Geometry(GeometryError::Nd1Violation { .. }) => Verdict::NdFailure,
                    _ => Verdict::StepFailed,
                };
                message = Some(err.to_string());
                break;
            }
        };
        if step.eps_after > eps {
            increases += 1;
        } else {
            increases = 0;
        }
        m += 1;
        let mut rec = record(m, &step.new_state, &initial, &schedule);
        rec.delta_norm = Some(step.delta_norm);
        rec.residual_linear = Some(step.residual_linear);
        rec.halvings = step.halvings;
        let nd_ok = rec.nd.pass();
        records.push(rec);
        state = step.new_state;
        if !nd_ok {
            verdict = Verdict::NdFailure;
            message = Some(format!("iterate {m} failed the non-degeneracy checks"));
            break;
        }
        if increases >= 2 {
            verdict = Verdict::Diverged;
            message = Some("error grew in two consecutive steps".into());
            break;
        }
    }
    let drift = match opts.norm_mode {
        NormMode::Theoretical => Some(drift_check(&records, freq.gamma, freq.sigma, &schedule)),
        NormMode::Practical => None,
    };
    let report = KamReport {
        system: initial.system().name().to_string(),
        omega: freq.omega.clone(),
        gamma: freq.gamma,
        sigma: freq.sigma,
        schedule,
        norm_mode: opts.norm_mode,
        target: opts.target,
        records,
        verdict,
        message,
        drift,
    };
    Ok(RunOutcome { report, final_state: state })
}

/// `beta = gamma^2 delta_0^(2 sigma - 1) 2^-(4 sigma + 1) (1 + 2^(4 sigma - 1))`.
pub fn drift_budget(gamma: f64, sigma: f64, schedule: &Schedule) -> f64 {
    gamma * gamma * schedule.delta_0.powf(2.0 * sigma - 1.0) * 2f64.powf(-(4.0 * sigma + 1.0)) * (1.0 + 2f64.powf(4.0 * sigma - 1.0))
}

/// Compares `d_m`, `nu_m`, `s_m` with the initial values plus the budget `beta`.
pub fn drift_check(records: &[IterationRecord], gamma: f64, sigma: f64, schedule: &Schedule) -> DriftCheck {
    let beta = drift_budget(gamma, sigma, schedule);
    let first = &records[0].nd;
    let d0 = first.dk_norm;
    let nu0 = first.n_norm.unwrap_or(f64::INFINITY);
    let s0 = first.s0_avg_inv_norm.unwrap_or(f64::INFINITY);
    let d_max = records.iter().map(|r| r.nd.dk_norm).fold(0.0, f64::max);
    let nu_max = records.iter().map(|r| r.nd.n_norm.unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    let s_max = records.iter().map(|r| r.nd.s0_avg_inv_norm.unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    DriftCheck {
        beta,
        d0,
        nu0,
        s0,
        d_max,
        nu_max,
        s_max,
        pass: d_max <= d0 + beta && nu_max <= nu0 + beta && s_max <= s0 + beta,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct QuadraticFit {
    /// `eps_m / (gamma^-4 delta^-4 sigma eps_{m-1}^2)` for each usable pair.
    pub constants: Vec<f64>,
    /// Smallest constant for which every usable pair satisfies the bound.
    pub fitted: f64,
    /// `max / min` of the constants.
    pub spread: f64,
    pub pass: bool,
}

/// Fits `eps_m <= C gamma^-4 delta^-4 sigma eps_{m-1}^2` with `delta = delta_0`
/// (practical) or `delta_{m-1}` (theoretical) and checks the constant is stable
/// within a factor 8. Pairs with an error below [`NOISE_FLOOR`] are skipped.
pub fn quadratic_decay_check(
    eps: &[f64],
    gamma: f64,
    sigma: f64,
    schedule: &Schedule,
    mode: NormMode,
) -> Result<QuadraticFit, SolverError> {
    let mut constants = Vec::new();
    for m in 1..eps.len() {
        if eps[m] < NOISE_FLOOR || eps[m - 1] < NOISE_FLOOR {
            continue;
        }
        let delta = match mode {
            NormMode::Practical => schedule.delta_0,
            NormMode::Theoretical => schedule.delta(m - 1),
        };
        let scale = gamma.powi(-4) * delta.powf(-4.0 * sigma) * eps[m - 1] * eps[m - 1];
        constants.push(eps[m] / scale);
    }
    if constants.len() < 2 {
        return Err(SolverError::InsufficientData(format!(
            "{} usable error pairs above {NOISE_FLOOR:e}; need at least 2",
            constants.len()
        )));
    }
    let max = constants.iter().cloned().fold(0.0, f64::max);
    let min = constants.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = if min > 0.0 { max / min } else { f64::INFINITY };
    Ok(QuadraticFit {
        fitted: max,
        pass: spread <= 8.0,
        spread,
        constants,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstantMode {
    Heuristic,
    User,
}

/// Composite constant `c` and the pieces it is assembled from.
#[derive(Debug, Clone, Serialize)]
pub struct ConstantTracker {
    pub mode: ConstantMode,
    pub c: f64,
    pub mu: f64,
    pub a_bound: f64,
    pub s0_bound: f64,
    pub h_bound: f64,
    pub d0: f64,
    pub nu0: f64,
    pub s0: f64,
    pub beta: f64,
    pub b_norm: f64,
    pub binv_norm: f64,
    pub b_c1: f64,
    pub h_c2: f64,
    pub b_c2: f64,
    pub h_c3: f64,
    pub lambda: f64,
}

impl ConstantTracker {
    /// Takes `c` verbatim.
    pub fn user(c: f64) -> Self {
        Self {
            mode: ConstantMode::User,
            c,
            mu: f64::NAN,
            a_bound: f64::NAN,
            s0_bound: f64::NAN,
            h_bound: f64::NAN,
            d0: f64::NAN,
            nu0: f64::NAN,
            s0: f64::NAN,
            beta: f64::NAN,
            b_norm: f64::NAN,
            binv_norm: f64::NAN,
            b_c1: f64::NAN,
            h_c2: f64::NAN,
            b_c2: f64::NAN,
            h_c3: f64::NAN,
            lambda: f64::NAN,
        }
    }

    /// Composes the explicit component bounds into a non-rigorous `c`.
    /// Norms of `B` and `H` are sampled at the grid points of `K_0`.
    pub fn heuristic(initial: &TorusState, schedule: &Schedule) -> Result<Self, SolverError> {
        let n = initial.torus_dim() as f64;
        let freq = initial.frequency();
        let fields = initial.point_fields();
        let mut b_c1: f64 = 0.0;
        let mut h_c2: f64 = 0.0;
        let mut b_norm: f64 = 0.0;
        for p in fields {
            b_norm = b_norm.max(crate::norms::op_norm(&p.b));
            b_c1 = b_c1.max(mat_max(&p.b));
            for d in &p.db {
                b_c1 = b_c1.max(mat_max(d));
            }
            h_c2 = h_c2.max(vec_max(&p.grad)).max(mat_max(&p.hess));
        }
        let (b_c2, h_c3) = initial.system().higher_norms(initial.k_samples());
        let binv = initial.binv()?;
        let binv_norm = crate::norms::sup_op(&binv);
        let nd = initial.nondegeneracy_report();
        let d0 = nd.dk_norm;
        let nu0 = nd.n_norm.ok_or_else(|| SolverError::InitialDegenerate("ND1 fails".into()))?;
        let s0 = nd.s0_avg_inv_norm.ok_or_else(|| SolverError::InitialDegenerate("ND2 fails".into()))?;
        let beta = drift_budget(freq.gamma, freq.sigma, schedule);
        let (d, nu, s) = (d0 + beta, nu0 + beta, s0 + beta);
        let a_bound = 2.0 * b_c1 * h_c2;
        let s0_bound = 2.0 * n * (16.0 * n * n + 5.0) * (nu + 1.0).powi(3) * (d + 1.0).powi(4) * b_c1 * b_c1 * h_c2;
        let mu = russmann_mu(initial.torus_dim(), freq.sigma);
        let lambda = mu * mu * (d + 1.0) * (nu + 1.0) * (b_norm + 1.0) * (binv_norm + 1.0) * (s + 1.0) * (1.0 + s0_bound) * (1.0 + a_bound);
        let h_bound = 4.0 * b_c2 * h_c3;
        let c2 = lambda;
        let c3 = lambda * (1.0 + a_bound);
        Ok(Self {
            mode: ConstantMode::Heuristic,
            c: c3 + c2 * c2 * h_bound,
            mu,
            a_bound,
            s0_bound,
            h_bound,
            d0,
            nu0,
            s0,
            beta,
            b_norm,
            binv_norm,
            b_c1,
            h_c2,
            b_c2,
            h_c3,
            lambda,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateVerdict {
    Certified,
    NotCertified,
}

#[derive(Debug, Clone, Serialize)]
pub struct Condition {
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub eps0: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub delta0: f64,
    pub c: f64,
    pub r: f64,
    pub mode: ConstantMode,
    pub rigorous: bool,
    pub kappa: f64,
    pub big_c: f64,
    /// `kappa <= 1/2`.
    pub kappa_condition: Condition,
    /// `C gamma^-4 delta_0^-4 sigma eps_0 <= 1/2`.
    pub smallness: Condition,
    /// `C gamma^-2 delta_0^-2 sigma eps_0 < r`.
    pub radius: Condition,
    /// `[1 + 2^4 sigma / (2^2 sigma - 1)] c gamma^-2 delta_0^-2 sigma eps_0 < r`.
    pub radius_sum: Condition,
    /// `c gamma^-2 delta_0^-2 sigma eps_0 (1 + kappa 2^4 sigma / (2^2 sigma - 1))`.
    pub distance_bound: f64,
    pub verdict: CertificateVerdict,
    pub label: String,
}

impl Certificate {
    pub fn evaluate(eps0: f64, gamma: f64, sigma: f64, delta0: f64, c: f64, r: f64, mode: ConstantMode) -> Self {
        let g2 = gamma.powi(-2) * delta0.powf(-2.0 * sigma);
        let g4 = gamma.powi(-4) * delta0.powf(-4.0 * sigma);
        let p4 = 2f64.powf(4.0 * sigma);
        let p2 = 2f64.powf(2.0 * sigma);
        let kappa = p4 * c * g4 * eps0;
        let big_c = (1.0 + 2f64.powf(4.0 * sigma - 1.0)) * c;
        let kappa_condition = Condition { lhs: kappa, rhs: 0.5, pass: kappa <= 0.5 };
        let s = big_c * g4 * eps0;
        let smallness = Condition { lhs: s, rhs: 0.5, pass: s <= 0.5 };
        let rad = big_c * g2 * eps0;
        let radius = Condition { lhs: rad, rhs: r, pass: rad < r || (rad == 0.0 && r == 0.0) };
        let rad_sum = (1.0 + p4 / (p2 - 1.0)) * c * g2 * eps0;
        let radius_sum = Condition { lhs: rad_sum, rhs: r, pass: rad_sum < r || (rad_sum == 0.0 && r == 0.0) };
        let distance_bound = c * g2 * eps0 * (1.0 + kappa * p4 / (p2 - 1.0));
        let ok = kappa_condition.pass && smallness.pass && radius.pass;
        let rigorous = mode == ConstantMode::User;
        let verdict = if ok { CertificateVerdict::Certified } else { CertificateVerdict::NotCertified };
        let label = match (verdict, rigorous) {
            (CertificateVerdict::Certified, true) => "certified".to_string(),
            (CertificateVerdict::Certified, false) => "certified (non-rigorous: heuristic constant)".to_string(),
            (CertificateVerdict::NotCertified, true) => "not certified".to_string(),
            (CertificateVerdict::NotCertified, false) => "not certified (non-rigorous: heuristic constant)".to_string(),
        };
        Self {
            eps0,
            gamma,
            sigma,
            delta0,
            c,
            r,
            mode,
            rigorous,
            kappa,
            big_c,
            kappa_condition,
            smallness,
            radius,
            radius_sum,
            distance_bound,
            verdict,
            label,
        }
    }
}

/// Evaluates the certificate for `initial` with `eps_0` in the norm selected by `mode`.
pub fn certificate(initial: &TorusState, schedule: &Schedule, tracker: &ConstantTracker, r: f64, mode: NormMode) -> Result<Certificate, SolverError> {
    let eps0 = match mode {
        NormMode::Practical => initial.eps(),
        NormMode::Theoretical => initial.e_map().weighted_norm(schedule.rho_0).map_err(GeometryError::from)?,
    };
    let f = initial.frequency();
    Ok(Certificate::evaluate(eps0, f.gamma, f.sigma, schedule.delta_0, tracker.c, r, tracker.mode))
}

#[derive(Debug, Clone, Serialize)]
pub struct DistanceCheck {
    pub measured: f64,
    pub predicted: f64,
    pub ratio: f64,
    /// `None` when the constant is heuristic: only the ratio is reported.
    pub pass: Option<bool>,
}

pub fn distance_check(report: &KamReport, cert: &Certificate) -> DistanceCheck {
    let measured = report.final_distance();
    let predicted = cert.distance_bound;
    let ratio = if predicted > 0.0 { measured / predicted } else if measured == 0.0 { 0.0 } else { f64::INFINITY };
    DistanceCheck {
        measured,
        predicted,
        ratio,
        pass: cert.rigorous.then_some(measured <= predicted),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CascadeEntry {
    pub j: usize,
    pub eps: f64,
    pub bound: f64,
    pub pass: bool,
}

/// `eps_j <= kappa^(2^j - 1) 2^(-4 sigma j) eps_0` along the recorded sequence.
pub fn cascade_check(eps: &[f64], cert: &Certificate) -> Vec<CascadeEntry> {
    let eps0 = eps.first().copied().unwrap_or(0.0);
    eps.iter()
        .enumerate()
        .map(|(j, &e)| {
            let bound = cert.kappa.powf(2f64.powi(j as i32) - 1.0) * 2f64.powf(-4.0 * cert.sigma * j as f64) * eps0;
            CascadeEntry { j, eps: e, bound, pass: e <= bound * (1.0 + 1e-12) }
        })
        .collect()
}

/// Per-iteration conditions of the convergence theorem.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionRecord {
    pub m: usize,
    /// `r_m <= (1 + kappa 2^4 sigma / (2^2 sigma - 1)) c gamma^-2 delta_0^-2 sigma eps_0`.
    pub c1: bool,
    /// `eps_m <= 2^(-4 sigma (m - 1)) kappa^(2^m - 1) eps_0`.
    pub c2: bool,
    /// `d_m, nu_m, s_m` inside the drift budget, so `c_m <= c`.
    pub c3: bool,
    /// `c gamma^-2 delta_m^-(2 sigma + 1) eps_m <= 1/2`.
    pub c4: bool,
}

pub fn monitor_conditions(report: &KamReport, cert: &Certificate) -> Vec<ConditionRecord> {
    let s = &report.schedule;
    let (g, sg) = (cert.gamma, cert.sigma);
    let beta = drift_budget(g, sg, s);
    let first = &report.records[0].nd;
    let eps0 = cert.eps0;
    report
        .records
        .iter()
        .map(|r| {
            let m = r.m;
            let c2_bound = 2f64.powf(-4.0 * sg * (m as f64 - 1.0)) * cert.kappa.powf(2f64.powi(m as i32) - 1.0) * eps0;
            let eps_m = match report.norm_mode {
                NormMode::Practical => r.eps,
                NormMode::Theoretical => r.eps_weighted.unwrap_or(f64::INFINITY),
            };
            let within = |v: Option<f64>, v0: Option<f64>| match (v, v0) {
                (Some(a), Some(b)) => a <= b + beta,
                _ => false,
            };
            ConditionRecord {
                m,
                c1: r.distance <= cert.distance_bound * (1.0 + 1e-12),
                c2: eps_m <= c2_bound * (1.0 + 1e-12),
                c3: r.nd.dk_norm <= first.dk_norm + beta
                    && within(r.nd.n_norm, first.n_norm)
                    && within(r.nd.s0_avg_inv_norm, first.s0_avg_inv_norm),
                c4: cert.c * g.powi(-2) * s.delta(m).powf(-(2.0 * sg + 1.0)) * eps_m <= 0.5,
            }
        })
        .collect()
}

/// `2^(j-1) sum_{s=1}^{j-1} s 2^-s <= 2^j - j - 1`.
pub fn combinatorial_lemma(j: u32) -> (f64, f64) {
    let sum: f64 = (1..j).map(|s| s as f64 * 0.5f64.powi(s as i32)).sum();
    (2f64.powi(j as i32 - 1) * sum, 2f64.powi(j as i32) - j as f64 - 1.0)
}
