//! Time-stepping verification: flows, conjugacy, Poisson maps and phase alignment.
//!
//! Nothing here touches the spectral machinery of the solver apart from
//! evaluating a finished embedding pointwise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Embedding;
use crate::norms::mat_max;
use crate::poisson::{a_matrix, vector_field, PoissonSystem};

pub const ALIGN_THRESHOLD: f64 = 1e-8;
const ALIGN_GRID: usize = 64;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DynamicsError {
    #[error("invalid integrator configuration: {0}")]
    Config(String),
    #[error("trajectory left the domain at t = {t}")]
    Domain { t: f64 },
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("step budget of {0} exhausted")]
    TooManySteps(usize),
    #[error("embeddings have different windings or dimensions")]
    Incompatible,
    #[error("not the same torus: aligned residual {residual:e} exceeds {threshold:e}")]
    NotSameTorus { tau: Vec<f64>, residual: f64, threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Rk4 { step: f64 },
    DormandPrince { rtol: f64, atol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self::adaptive(1e-12)
    }
}

impl IntegratorConfig {
    pub fn rk4(step: f64) -> Self {
        Self { method: Method::Rk4 { step }, max_steps: 10_000_000 }
    }

    pub fn adaptive(tol: f64) -> Self {
        Self { method: Method::DormandPrince { rtol: tol, atol: tol }, max_steps: 10_000_000 }
    }

    /// Nominal accuracy of one unit of time.
    pub fn tolerance(&self) -> f64 {
        match self.method {
            Method::Rk4 { step } => step.powi(4),
            Method::DormandPrince { rtol, atol } => rtol.max(atol),
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let ok = match self.method {
            Method::Rk4 { step } => step > 0.0 && step.is_finite(),
            Method::DormandPrince { rtol, atol } => rtol > 0.0 && atol > 0.0 && rtol.is_finite() && atol.is_finite(),
        };
        if ok && self.max_steps > 0 {
            Ok(())
        } else {
            Err(DynamicsError::Config(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowResult {
    pub z: DVector<f64>,
    /// `D phi_T`, when requested.
    pub jacobian: Option<DMatrix<f64>>,
    pub steps: usize,
}

fn augmented_rhs(sys: &dyn PoissonSystem, y: &DVector<f64>, variational: bool, t: f64) -> Result<DVector<f64>, DynamicsError> {
    let d = sys.dim();
    let z = y.rows(0, d).into_owned();
    let f = vector_field(sys, &z).map_err(|_| DynamicsError::Domain { t })?;
    if !variational {
        return Ok(f);
    }
    let a = a_matrix(sys, &z).map_err(|_| DynamicsError::Domain { t })?;
    let phi = DMatrix::from_column_slice(d, d, &y.as_slice()[d..]);
    let dphi = a * phi;
    let mut out = DVector::zeros(d + d * d);
    out.rows_mut(0, d).copy_from(&f);
    out.rows_mut(d, d * d).copy_from_slice(dphi.as_slice());
    Ok(out)
}

fn integrate(
    rhs: impl Fn(f64, &DVector<f64>) -> Result<DVector<f64>, DynamicsError>,
    y0: DVector<f64>,
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<(DVector<f64>, usize), DynamicsError> {
    cfg.validate()?;
    if !t_end.is_finite() {
        return Err(DynamicsError::Config(format!("horizon must be finite, got {t_end}")));
    }
    if t_end == 0.0 {
        return Ok((y0, 0));
    }
    let dir = t_end.signum();
    match cfg.method {
        Method::Rk4 { step } => {
            let n = (t_end.abs() / step).ceil().max(1.0) as usize;
            if n > cfg.max_steps {
                return Err(DynamicsError::TooManySteps(cfg.max_steps));
            }
            let h = t_end / n as f64;
            let mut y = y0;
            for i in 0..n {
                let t = i as f64 * h;
                let k1 = rhs(t, &y)?;
                let k2 = rhs(t + h / 2.0, &(&y + &k1 * (h / 2.0)))?;
                let k3 = rhs(t + h / 2.0, &(&y + &k2 * (h / 2.0)))?;
                let k4 = rhs(t + h, &(&y + &k3 * h))?;
                y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
            Ok((y, n))
        }
        Method::DormandPrince { rtol, atol } => dormand_prince(rhs, y0, t_end, dir, rtol, atol, cfg.max_steps),
    }
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn dormand_prince(
    rhs: impl Fn(f64, &DVector<f64>) -> Result<DVector<f64>, DynamicsError>,
    y0: DVector<f64>,
    t_end: f64,
    dir: f64,
    rtol: f64,
    atol: f64,
    max_steps: usize,
) -> Result<(DVector<f64>, usize), DynamicsError> {
    let mut t = 0.0;
    let mut y = y0;
    let mut h = dir * (t_end.abs() * 1e-3).min(0.01);
    let mut k0 = rhs(t, &y)?;
    let mut steps = 0;
    while (t_end - t) * dir > 0.0 {
        if steps >= max_steps {
            return Err(DynamicsError::TooManySteps(max_steps));
        }
        if (t + h - t_end) * dir > 0.0 {
            h = t_end - t;
        }
        if h.abs() < 1e-14 * t_end.abs().max(1.0) && (t_end - t).abs() > h.abs() {
            return Err(DynamicsError::StepUnderflow { t, h });
        }
        let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);
        k.push(k0.clone());
        let mut failed = false;
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate() {
                if DP_A[s][j] != 0.0 {
                    ys += kj * (h * DP_A[s][j]);
                }
            }
            match rhs(t + DP_C[s] * h, &ys) {
                Ok(v) => k.push(v),
                Err(DynamicsError::Domain { .. }) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let err_norm = if failed {
            f64::INFINITY
        } else {
            let mut y_new = y.clone();
            let mut err = DVector::zeros(y.len());
            for s in 0..7 {
                y_new += &k[s] * (h * DP_B[s]);
                err += &k[s] * (h * DP_E[s]);
            }
            let mut acc: f64 = 0.0;
            for i in 0..y.len() {
                let sc = atol + rtol * y[i].abs().max(y_new[i].abs());
                acc = acc.max((err[i] / sc).abs());
            }
            if acc <= 1.0 {
                t += h;
                y = y_new;
                k0 = k[6].clone();
                steps += 1;
            }
            acc
        };
        if failed && h.abs() < 1e-12 {
            return Err(DynamicsError::Domain { t });
        }
        let factor = if err_norm == 0.0 { 5.0 } else { (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
        if h.abs() < 1e-300 {
            return Err(DynamicsError::StepUnderflow { t, h });
        }
    }
    Ok((y, steps))
}

/// Integrates `z' = B(z) grad H(z)` to time `t`, with `D phi_t` if `variational`.
pub fn flow(sys: &dyn PoissonSystem, z0: &DVector<f64>, t: f64, cfg: &IntegratorConfig, variational: bool) -> Result<FlowResult, DynamicsError> {
    let d = sys.dim();
    if !sys.in_domain(z0) {
        return Err(DynamicsError::Domain { t: 0.0 });
    }
    let mut y0 = DVector::zeros(if variational { d + d * d } else { d });
    y0.rows_mut(0, d).copy_from(z0);
    if variational {
        let id = DMatrix::<f64>::identity(d, d);
        y0.rows_mut(d, d * d).copy_from_slice(id.as_slice());
    }
    let (y, steps) = integrate(|s, y| augmented_rhs(sys, y, variational, s), y0, t, cfg)?;
    let z = y.rows(0, d).into_owned();
    if !sys.in_domain(&z) {
        return Err(DynamicsError::Domain { t });
    }
    let jacobian = variational.then(|| DMatrix::from_column_slice(d, d, &y.as_slice()[d..]));
    Ok(FlowResult { z, jacobian, steps })
}

/// `|H(phi_t(z)) - H(z)|`.
pub fn energy_drift(sys: &dyn PoissonSystem, z0: &DVector<f64>, t: f64, cfg: &IntegratorConfig) -> Result<f64, DynamicsError> {
    let z = flow(sys, z0, t, cfg, false)?.z;
    Ok((sys.hamiltonian(&z) - sys.hamiltonian(z0)).abs())
}

/// Max over seeded random `theta` of `|phi_T(K(theta)) - K(theta + omega T)|`.
pub fn conjugacy_residual(
    sys: &dyn PoissonSystem,
    emb: &Embedding,
    omega: &[f64],
    t: f64,
    n_samples: usize,
    seed: u64,
    cfg: &IntegratorConfig,
) -> Result<f64, DynamicsError> {
    let n = emb.torus_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thetas: Vec<Vec<f64>> = (0..n_samples).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
    let results: Vec<Result<f64, DynamicsError>> = std::thread::scope(|s| {
        let handles: Vec<_> = thetas
            .iter()
            .map(|theta| {
                s.spawn(move || {
                    let z0 = emb.eval(theta);
                    let z = flow(sys, &z0, t, cfg, false)?.z;
                    let shifted: Vec<f64> = theta.iter().zip(omega).map(|(a, w)| a + w * t).collect();
                    Ok((z - emb.eval(&shifted)).amax())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("trajectory thread panicked")).collect()
    });
    let mut worst: f64 = 0.0;
    for r in results {
        worst = worst.max(r?);
    }
    Ok(worst)
}

/// `max |D phi_T B(z) D phi_T^T - B(phi_T(z))|`.
pub fn poisson_map_residual(sys: &dyn PoissonSystem, z: &DVector<f64>, t: f64, cfg: &IntegratorConfig) -> Result<f64, DynamicsError> {
    let out = flow(sys, z, t, cfg, true)?;
    let dphi = out.jacobian.expect("variational flow requested");
    let pushed = &dphi * sys.structure(z) * dphi.transpose();
    Ok(mat_max(&(pushed - sys.structure(&out.z))))
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseAlignment {
    /// Phase in `[0, 1)^n` with `K1(theta + tau) ~ K2(theta)`.
    pub tau: Vec<f64>,
    /// Sup over the grid of `|K1(. + tau) - K2|`.
    pub residual: f64,
}

fn l2_misfit(k1: &Embedding, k2: &Embedding, tau: &[f64]) -> f64 {
    let shifted = k1.shift(tau);
    let trunc: Vec<usize> = shifted.trunc().iter().zip(k2.trunc()).map(|(a, b)| *a.max(b)).collect();
    let diff = shifted.periodic().sub(k2.periodic()).with_trunc(&trunc);
    let mut acc = 0.0;
    for k in diff.lattice() {
        for c in 0..diff.dim_range() {
            acc += diff.coeff(&k, c).norm_sqr();
        }
    }
    acc.sqrt()
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-16 {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Finds `tau` minimizing `|K1(. + tau) - K2|`: a 64-point search per axis,
/// then golden-section refinement along each axis.
pub fn align_phase(k1: &Embedding, k2: &Embedding, threshold: f64) -> Result<PhaseAlignment, DynamicsError> {
    if k1.winding() != k2.winding() || k1.torus_dim() != k2.torus_dim() || k1.phase_dim() != k2.phase_dim() {
        return Err(DynamicsError::Incompatible);
    }
    let n = k1.torus_dim();
    let total = ALIGN_GRID.pow(n as u32);
    let mut best = (f64::INFINITY, vec![0.0; n]);
    for idx in 0..total {
        let mut rem = idx;
        let tau: Vec<f64> = (0..n)
            .map(|_| {
                let i = rem % ALIGN_GRID;
                rem /= ALIGN_GRID;
                i as f64 / ALIGN_GRID as f64
            })
            .collect();
        let v = l2_misfit(k1, k2, &tau);
        if v < best.0 {
            best = (v, tau);
        }
    }
    let mut tau = best.1;
    let mut width = 1.0 / ALIGN_GRID as f64;
    for _ in 0..6 {
        for j in 0..n {
            let centre = tau[j];
            let x = golden_section(
                |s| {
                    let mut t = tau.clone();
                    t[j] = s;
                    l2_misfit(k1, k2, &t)
                },
                centre - width,
                centre + width,
            );
            tau[j] = x;
        }
        width /= 4.0;
    }
    let tau: Vec<f64> = tau.iter().map(|t| t.rem_euclid(1.0)).collect();
    let residual = k1.shift(&tau).distance(k2).ok_or(DynamicsError::Incompatible)?;
    if residual > threshold {
        return Err(DynamicsError::NotSameTorus { tau, residual, threshold });
    }
    Ok(PhaseAlignment { tau, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poisson::registry::{build_system, registry, Params};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn pendulum(eps: f64) -> Arc<dyn PoissonSystem> {
        let mut p = Params::new();
        p.insert("epsilon".into(), eps);
        build_system("pendulum", &p).unwrap()
    }

    #[test]
    fn free_rotor_flow() {
        let sys = pendulum(0.0);
        let w = 0.618;
        let out = flow(sys.as_ref(), &DVector::from_vec(vec![0.0, w]), 1.0, &IntegratorConfig::default(), true).unwrap();
        assert_relative_eq!(out.z[0].rem_euclid(1.0), w, epsilon = 1e-12);
        assert_relative_eq!(out.z[1], w, epsilon = 1e-12);
    }

    #[test]
    fn zero_horizon_is_identity() {
        let sys = pendulum(0.1);
        let z = DVector::from_vec(vec![0.2, 0.3]);
        let out = flow(sys.as_ref(), &z, 0.0, &IntegratorConfig::default(), true).unwrap();
        assert_eq!(out.z, z);
        assert_eq!(out.jacobian.unwrap(), DMatrix::identity(2, 2));
        assert_eq!(poisson_map_residual(sys.as_ref(), &z, 0.0, &IntegratorConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn invalid_config_rejected() {
        let sys = pendulum(0.1);
        let z = DVector::from_vec(vec![0.2, 0.3]);
        assert!(flow(sys.as_ref(), &z, 1.0, &IntegratorConfig::adaptive(0.0), false).is_err());
        assert!(flow(sys.as_ref(), &z, f64::INFINITY, &IntegratorConfig::default(), false).is_err());
    }

    #[test]
    fn energy_is_conserved_on_builtins() {
        let tol = 1e-10;
        let cfg = IntegratorConfig::adaptive(tol);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for entry in registry() {
            let sys = (entry.build)(&entry.default_params()).unwrap();
            for _ in 0..3 {
                let z = sys.sample_point(&mut rng);
                let t = 2.0;
                let drift = energy_drift(sys.as_ref(), &z, t, &cfg).unwrap();
                let scale = 1.0 + sys.hamiltonian(&z).abs();
                assert!(drift <= tol * t * scale, "{}: drift {drift:e}", entry.name);
            }
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        let sys = pendulum(0.5);
        let z = DVector::from_vec(vec![0.1, 0.4]);
        let reference = flow(sys.as_ref(), &z, 1.0, &IntegratorConfig::adaptive(1e-14), false).unwrap().z;
        let err = |h: f64| (flow(sys.as_ref(), &z, 1.0, &IntegratorConfig::rk4(h), false).unwrap().z - &reference).amax();
        let (e1, e2, e3) = (err(0.1), err(0.05), err(0.025));
        for ratio in [e1 / e2, e2 / e3] {
            assert!((ratio / 16.0 - 1.0).abs() <= 0.2, "ratio {ratio}");
        }
    }

    #[test]
    fn flow_is_a_poisson_map() {
        let cfg = IntegratorConfig::adaptive(1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pend = pendulum(0.1);
        let z = pend.sample_point(&mut rng);
        assert!(poisson_map_residual(pend.as_ref(), &z, 2.0, &cfg).unwrap() <= 1e-8);
        let mut p = Params::new();
        p.insert("epsilon".into(), 0.1);
        let scaled = build_system("scaled2d", &p).unwrap();
        let z = scaled.sample_point(&mut rng);
        assert!(poisson_map_residual(scaled.as_ref(), &z, 2.0, &cfg).unwrap() <= 1e-7);
    }

    #[test]
    fn flat_torus_of_free_rotor_is_conjugate() {
        let sys = pendulum(0.0);
        let w = 0.618;
        let emb = Embedding::flat(&[w], &[4]);
        let cfg = IntegratorConfig::adaptive(1e-12);
        let r = conjugacy_residual(sys.as_ref(), &emb, &[w], 3.0, 8, 1, &cfg).unwrap();
        assert!(r <= 1e-10, "{r:e}");
        let perturbed = conjugacy_residual(pendulum(1e-2).as_ref(), &emb, &[w], 5.0, 8, 1, &cfg).unwrap();
        assert!(perturbed > 1e3 * r.max(1e-12));
    }

    #[test]
    fn constructed_shift_is_recovered() {
        let emb = Embedding::from_fn(crate::geometry::standard_winding(1), &[8], |t| {
            let s = 2.0 * std::f64::consts::PI * t[0];
            vec![0.05 * s.sin(), 0.6 + 0.02 * s.cos() + 0.01 * (2.0 * s).sin()]
        });
        let shifted = emb.shift(&[0.3]);
        let a = align_phase(&emb, &shifted, 1e-12).unwrap();
        assert_relative_eq!(a.tau[0], 0.3, epsilon = 1e-12);
        assert!(a.residual <= 1e-12);
        let other = Embedding::flat(&[0.5], &[8]);
        assert!(matches!(align_phase(&emb, &other, ALIGN_THRESHOLD), Err(DynamicsError::NotSameTorus { .. })));
    }
}
