//! One quasi-Newton step on the invariance equation.
//!
//! The correction is written `Delta = M xi` in the adapted frame, which turns
//! the linearized equation into the triangular pair
//! `omega.grad xi_y = -p_y`, `omega.grad xi_x = S0 xi_y - p_x`.
//! The mean of `xi_y` is fixed so that the second equation is solvable and
//! the mean of `xi_x` is pinned to zero.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::fourier::{FourierError, FourierMap};
use crate::geometry::{GeometryError, TorusState};
use crate::norms::{op_norm, sup_op, sup_vec, vec_max};

/// Relative tolerance on the means that must vanish inside the reduced solve.
pub const MEAN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NewtonError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Fourier(#[from] FourierError),
    #[error("averaged torsion is not invertible (no twist): condition number {condition:e}")]
    NoTwist { condition: f64 },
    #[error("mean of {name} is {mean:e}, above the tolerance {tolerance:e}")]
    NonzeroMean { name: &'static str, mean: f64, tolerance: f64 },
    #[error("step rejected after {halvings} halvings: {reason}")]
    StepTooLarge { halvings: usize, reason: String },
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepOptions {
    /// Retry with `Delta / 2` when the step leaves the domain or increases the error.
    pub damping: bool,
    pub max_halvings: usize,
    /// Relative threshold of the tail truncation applied to the updated embedding.
    pub tail_threshold: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            damping: true,
            max_halvings: 4,
            tail_threshold: 1e-16,
        }
    }
}

/// Solution of the reduced system.
#[derive(Debug, Clone)]
pub struct ReducedSolution {
    pub xi_x: FourierMap,
    pub xi_y: FourierMap,
    /// Zero-mean part of `xi_y`.
    pub xi_tilde_y: FourierMap,
    pub xi_bar_y: Vec<f64>,
    /// `|<S0 xi_y - p_x>|` after the mean correction.
    pub solvability_residual: f64,
    pub solvability_scale: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepDiagnostics {
    pub px_norm: f64,
    pub py_norm: f64,
    /// `|<p_y>|` before it is discarded.
    pub py_mean: f64,
    pub xi_x_norm: f64,
    pub xi_y_norm: f64,
    /// `sup ||M^-1 E||`, the dropped coupling term.
    pub c_norm: f64,
    /// `sup |M_e e|`, the dropped inverse correction.
    pub w_norm: f64,
    /// Mass of the correction beyond the cutoff of `K`.
    pub tail_mass: f64,
}

#[derive(Debug)]
pub struct StepResult {
    /// Correction actually applied to `K`.
    pub delta_k: FourierMap,
    pub reduced: ReducedSolution,
    pub new_state: TorusState,
    pub eps_before: f64,
    pub eps_after: f64,
    /// `sup |A Delta - omega.grad Delta + e|` for the full, undamped correction.
    pub residual_linear: f64,
    pub delta_norm: f64,
    pub halvings: usize,
    pub diagnostics: StepDiagnostics,
}

/// Right-hand sides `p_x = N^T DK^T [B DK N DK^T B^-1 - I] e` and `p_y = -DK^T B^-1 e`.
pub fn rhs_components(state: &TorusState) -> Result<(FourierMap, FourierMap), NewtonError> {
    let metric = state.metric()?;
    let dk = state.dk();
    let e = state.e_grid();
    let dim = e[0].len();
    let mut px = Vec::with_capacity(dk.len());
    let mut py = Vec::with_capacity(dk.len());
    for i in 0..dk.len() {
        let b = &state.point_fields()[i].b;
        let binv = &metric.binv[i];
        let n = &metric.n[i];
        let proj = b * &dk[i] * n * dk[i].transpose() * binv - DMatrix::identity(dim, dim);
        px.push(n.transpose() * dk[i].transpose() * proj * &e[i]);
        py.push(-(dk[i].transpose() * binv * &e[i]));
    }
    Ok((state.to_fourier(&px)?, state.to_fourier(&py)?))
}

fn remove_mean(f: &FourierMap) -> FourierMap {
    let avg = f.average();
    f.sub(&FourierMap::constant(f.trunc(), &avg))
}

fn grid_mean(field: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(field[0].len());
    for v in field {
        acc += v;
    }
    acc / field.len() as f64
}

/// Solves the triangular reduced system with the mean correction of `xi_y`.
pub fn solve_reduced(state: &TorusState, px: &FourierMap, py: &FourierMap) -> Result<ReducedSolution, NewtonError> {
    let torsion = match state.torsion() {
        Ok(t) => t,
        Err(GeometryError::Nd2Violation { condition }) => return Err(NewtonError::NoTwist { condition }),
        Err(other) => return Err(other.into()),
    };
    let freq = state.frequency();
    let n = state.torus_dim();

    let py_mean = py.average().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let py_tol = (MEAN_TOL * py.weighted_norm(0.0)?).max(roundoff_floor(state)?);
    if py_mean > py_tol {
        return Err(NewtonError::NonzeroMean {
            name: "p_y",
            mean: py_mean,
            tolerance: py_tol,
        });
    }
    let xi_tilde_y = remove_mean(&py.scale(-1.0)).cohomological_solve(freq)?;

    let s0 = &torsion.s0;
    let xt_grid = state.to_grid(&xi_tilde_y);
    let s0_xt: Vec<DVector<f64>> = s0.iter().zip(&xt_grid).map(|(s, x)| s * x).collect();
    let px_avg = DVector::from_vec(px.average());
    let xi_bar = &torsion.average_inv * (px_avg - grid_mean(&s0_xt));

    let xi_y = xi_tilde_y.add(&FourierMap::constant(xi_tilde_y.trunc(), xi_bar.as_slice()));
    let xy_grid = state.to_grid(&xi_y);
    let px_grid = state.to_grid(px);
    let rhs: Vec<DVector<f64>> = s0
        .iter()
        .zip(&xy_grid)
        .zip(&px_grid)
        .map(|((s, y), p)| s * y - p)
        .collect();
    let rhs_map = state.to_fourier(&rhs)?;
    let solvability_residual = rhs_map.average().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let solvability_scale = sup_op(s0) * sup_vec(&xy_grid) + sup_vec(&px_grid);
    let solvability_tol = (MEAN_TOL * solvability_scale).max(f64::EPSILON * state.eps());
    if solvability_residual > solvability_tol {
        return Err(NewtonError::NonzeroMean {
            name: "S0 xi_y - p_x",
            mean: solvability_residual,
            tolerance: solvability_tol,
        });
    }
    let xi_x = remove_mean(&rhs_map).cohomological_solve(freq)?;
    debug_assert_eq!(xi_bar.len(), n);
    Ok(ReducedSolution {
        xi_x,
        xi_y,
        xi_tilde_y,
        xi_bar_y: xi_bar.iter().copied().collect(),
        solvability_residual,
        solvability_scale,
    })
}

/// `Delta = M xi` on the grid, returned at the field cutoff of the state.
pub fn frame_correction(state: &TorusState, reduced: &ReducedSolution) -> Result<FourierMap, NewtonError> {
    let frame = state.frame()?;
    let xs = state.to_grid(&reduced.xi_x);
    let ys = state.to_grid(&reduced.xi_y);
    let n = state.torus_dim();
    let delta: Vec<DVector<f64>> = frame
        .m
        .iter()
        .zip(xs.iter().zip(&ys))
        .map(|(m, (x, y))| {
            let mut xi = DVector::zeros(2 * n);
            xi.rows_mut(0, n).copy_from(x);
            xi.rows_mut(n, n).copy_from(y);
            m * xi
        })
        .collect();
    Ok(state.to_fourier(&delta)?)
}

/// `sup |A Delta - omega.grad Delta + e|` on the de-aliased grid.
pub fn linearized_residual(state: &TorusState, delta: &FourierMap) -> f64 {
    let d = state.to_grid(delta);
    let dd = state.to_grid(&delta.directional_derivative(&state.frequency().omega));
    let mut worst: f64 = 0.0;
    for i in 0..d.len() {
        let r = &state.point_fields()[i].a * &d[i] - &dd[i] + &state.e_grid()[i];
        worst = worst.max(vec_max(&r));
    }
    worst
}

fn diagnostics(state: &TorusState, px: &FourierMap, py: &FourierMap, reduced: &ReducedSolution, tail_mass: f64) -> StepDiagnostics {
    let frame = state.frame().ok();
    let c_norm = state.frame_identity_residual().map(|(_, c)| c).unwrap_or(f64::NAN);
    let w_norm = frame.map_or(f64::NAN, |f| {
        f.m_e
            .iter()
            .zip(state.e_grid())
            .map(|(me, e)| vec_max(&(me * e)))
            .fold(0.0, f64::max)
    });
    StepDiagnostics {
        px_norm: px.grid_sup_norm(),
        py_norm: py.grid_sup_norm(),
        py_mean: py.average().iter().fold(0.0f64, |a, v| a.max(v.abs())),
        xi_x_norm: reduced.xi_x.grid_sup_norm(),
        xi_y_norm: reduced.xi_y.grid_sup_norm(),
        c_norm,
        w_norm,
        tail_mass,
    }
}

/// Applies `K + scale * Delta` and rebuilds the state.
fn apply(state: &TorusState, delta: &FourierMap, opts: &StepOptions) -> Result<TorusState, GeometryError> {
    let emb = state.embedding().add_periodic(delta);
    let (periodic, _) = emb.periodic().truncate_tail(opts.tail_threshold);
    let emb = crate::geometry::Embedding::new(emb.winding().clone(), periodic)?;
    state.with_embedding(emb)
}

/// Assembles `Delta = M xi`, updates `K` and recomputes the error from scratch.
pub fn assemble_step(
    state: &TorusState,
    px: &FourierMap,
    py: &FourierMap,
    reduced: ReducedSolution,
    opts: &StepOptions,
) -> Result<StepResult, NewtonError> {
    let full = frame_correction(state, &reduced)?;
    let projected = full.with_trunc(state.embedding().trunc());
    let tail_mass = full.sub(&projected.with_trunc(full.trunc())).weighted_norm(0.0)?;
    let residual_linear = linearized_residual(state, &projected);
    let eps_before = state.eps();
    let diag = diagnostics(state, px, py, &reduced, tail_mass);

    let mut scale = 1.0;
    let mut halvings = 0;
    loop {
        let delta = projected.scale(scale);
        let outcome = apply(state, &delta, opts);
        let reason = match outcome {
            Ok(new_state) => {
                let eps_after = new_state.eps();
                if eps_after <= eps_before || !opts.damping || eps_before == 0.0 {
                    if halvings > 0 {
                        warn!("step accepted after {halvings} halvings");
                    }
                    debug!("step: eps {eps_before:.3e} -> {eps_after:.3e}");
                    return Ok(StepResult {
                        delta_norm: delta.grid_sup_norm(),
                        delta_k: delta,
                        reduced,
                        new_state,
                        eps_before,
                        eps_after,
                        residual_linear,
                        halvings,
                        diagnostics: diag,
                    });
                }
                format!("error grows from {eps_before:e} to {eps_after:e}")
            }
            Err(GeometryError::OutsideDomain { theta, .. }) => format!("embedding leaves the domain at theta = {theta:?}"),
            Err(other) => return Err(other.into()),
        };
        if !opts.damping || halvings >= opts.max_halvings {
            return Err(NewtonError::StepTooLarge { halvings, reason });
        }
        warn!("halving the Newton step: {reason}");
        halvings += 1;
        scale *= 0.5;
    }
}

/// Round-off level of `DK^T B^-1 e`: the error is a difference of terms of size `|f(K)|`.
fn roundoff_floor(state: &TorusState) -> Result<f64, NewtonError> {
    let f_sup = state.point_fields().iter().map(|p| vec_max(&p.f)).fold(0.0, f64::max);
    let binv = state.binv()?;
    Ok(64.0 * f64::EPSILON * sup_op(state.dk()) * sup_op(&binv) * f_sup)
}

/// Full quasi-Newton step from `state`.
pub fn newton_step(state: &TorusState, opts: &StepOptions) -> Result<StepResult, NewtonError> {
    let (px, py) = rhs_components(state)?;
    let reduced = solve_reduced(state, &px, &py)?;
    assemble_step(state, &px, &py, reduced, opts)
}

/// `|<S0>^-1|` with the operator norm; convenience for reports.
pub fn twist_norm(state: &TorusState) -> Result<f64, NewtonError> {
    match state.torsion() {
        Ok(t) => Ok(op_norm(&t.average_inv)),
        Err(GeometryError::Nd2Violation { condition }) => Err(NewtonError::NoTwist { condition }),
        Err(e) => Err(e.into()),
    }
}
