//! Geometry of a candidate torus `K: T^n -> R^2n`.
//!
//! An [`Embedding`] is `K(theta) = W theta + P(theta)` with an integer winding
//! matrix `W` and a periodic Fourier part `P`. A [`TorusState`] evaluates the
//! system along `K` on the de-aliased grid and derives the invariance error,
//! the metric inverse `N`, the Lagrangian defect `L`, the torsion `S0`, and
//! the adapted frame `M` with its approximate inverse.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::fourier::{FourierError, FourierMap, Frequency, Grid, GridSamples};
use crate::norms::{mat_max, op_norm, sup_op, sup_vec, vec_max};
use crate::poisson::{point_fields, PoissonError, PoissonSystem, PointFields};

/// ND1 fails when `min |det Gram| < ND1_FLOOR * (mean diagonal)^n`.
pub const ND1_FLOOR: f64 = 1e-10;
/// ND2 fails when `cond(<S0>)` exceeds this.
pub const ND2_MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeometryError {
    #[error("embedding leaves the domain at theta = {theta:?} (K = {point:?})")]
    OutsideDomain { theta: Vec<f64>, point: Vec<f64> },
    #[error("degenerate metric (ND1) at theta = {theta:?}: det(DK^T DK) = {determinant:e}")]
    Nd1Violation { theta: Vec<f64>, determinant: f64 },
    #[error("structure matrix singular along the torus at theta = {theta:?}")]
    StructureSingular { theta: Vec<f64> },
    #[error("averaged torsion not invertible (ND2): condition number {condition:e}")]
    Nd2Violation { condition: f64 },
    #[error("frame matrix singular at theta = {theta:?}")]
    FrameSingular { theta: Vec<f64> },
    #[error("Neumann condition violated: sup |V^-1 R| = {value} > 1/2")]
    SmallnessViolation { value: f64 },
    #[error("embedding shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Fourier(#[from] FourierError),
}

/// `K(theta) = W theta + P(theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    winding: DMatrix<f64>,
    periodic: FourierMap,
}

impl Embedding {
    pub fn new(winding: DMatrix<f64>, periodic: FourierMap) -> Result<Self, GeometryError> {
        if winding.nrows() != periodic.dim_range() || winding.ncols() != periodic.dim_domain() {
            return Err(GeometryError::Shape(format!(
                "winding is {}x{} but the periodic part maps T^{} to R^{}",
                winding.nrows(),
                winding.ncols(),
                periodic.dim_domain(),
                periodic.dim_range()
            )));
        }
        if periodic.dim_range() != 2 * periodic.dim_domain() {
            return Err(GeometryError::Shape(format!(
                "a torus of dimension {} needs a phase space of dimension {}, got {}",
                periodic.dim_domain(),
                2 * periodic.dim_domain(),
                periodic.dim_range()
            )));
        }
        Ok(Self { winding, periodic })
    }

    /// Periodic part sampled from `f` on the de-aliased grid of `trunc`.
    pub fn from_fn(winding: DMatrix<f64>, trunc: &[usize], f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let grid = Grid::dealiased(trunc);
        let samples = GridSamples::from_fn(grid, winding.nrows(), f);
        let periodic = FourierMap::from_samples(&samples, trunc).expect("de-aliased grid carries the truncation");
        Self { winding, periodic }
    }

    /// `K(theta) = (theta, omega)`.
    pub fn flat(omega: &[f64], trunc: &[usize]) -> Self {
        let n = omega.len();
        let mut value = vec![0.0; 2 * n];
        value[n..].copy_from_slice(omega);
        Self {
            winding: standard_winding(n),
            periodic: FourierMap::constant(trunc, &value),
        }
    }

    pub fn winding(&self) -> &DMatrix<f64> {
        &self.winding
    }

    pub fn periodic(&self) -> &FourierMap {
        &self.periodic
    }

    pub fn torus_dim(&self) -> usize {
        self.periodic.dim_domain()
    }

    pub fn phase_dim(&self) -> usize {
        self.periodic.dim_range()
    }

    pub fn trunc(&self) -> &[usize] {
        self.periodic.trunc()
    }

    pub fn eval(&self, theta: &[f64]) -> DVector<f64> {
        DVector::from_vec(self.periodic.eval(theta)) + &self.winding * DVector::from_column_slice(theta)
    }

    /// `K` at the grid nodes.
    pub fn samples(&self, grid: &Grid) -> Vec<DVector<f64>> {
        let p = self.periodic.to_samples(grid);
        (0..grid.len())
            .map(|i| DVector::from_column_slice(p.point(i)) + &self.winding * DVector::from_vec(grid.node(i)))
            .collect()
    }

    /// `DK` at the grid nodes.
    pub fn jacobian_samples(&self, grid: &Grid) -> Vec<DMatrix<f64>> {
        let n = self.torus_dim();
        let cols: Vec<GridSamples> = (0..n).map(|j| self.periodic.partial_derivative(j).to_samples(grid)).collect();
        (0..grid.len())
            .map(|i| {
                let mut dk = self.winding.clone();
                for (j, c) in cols.iter().enumerate() {
                    for (r, v) in c.point(i).iter().enumerate() {
                        dk[(r, j)] += v;
                    }
                }
                dk
            })
            .collect()
    }

    /// `K + delta` with `delta` projected onto the cutoff box of `K`.
    pub fn add_periodic(&self, delta: &FourierMap) -> Embedding {
        Self {
            winding: self.winding.clone(),
            periodic: self.periodic.add(&delta.with_trunc(self.trunc())).with_trunc(self.trunc()),
        }
    }

    /// `theta -> K(theta + tau)`.
    pub fn shift(&self, tau: &[f64]) -> Embedding {
        let offset = &self.winding * DVector::from_column_slice(tau);
        let constant = FourierMap::constant(self.trunc(), offset.as_slice());
        Self {
            winding: self.winding.clone(),
            periodic: self.periodic.shift(tau).add(&constant),
        }
    }

    /// Sup over the de-aliased grid of `|K - other|`; `None` if the windings differ.
    pub fn distance(&self, other: &Embedding) -> Option<f64> {
        if self.winding != other.winding || self.torus_dim() != other.torus_dim() {
            return None;
        }
        let trunc: Vec<usize> = self.trunc().iter().zip(other.trunc()).map(|(a, b)| *a.max(b)).collect();
        Some(self.periodic.sub(&other.periodic).with_trunc(&trunc).grid_sup_norm())
    }
}

/// `W = [I; 0]`, the winding of a torus graph over the angles.
pub fn standard_winding(n: usize) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(2 * n, n);
    for i in 0..n {
        w[(i, i)] = 1.0;
    }
    w
}

/// `N`, `B^-1`, `L` on the grid.
#[derive(Debug, Clone)]
pub struct Metric {
    pub n: Vec<DMatrix<f64>>,
    pub binv: Vec<DMatrix<f64>>,
    pub l: Vec<DMatrix<f64>>,
    pub min_det: f64,
}

/// `S0` on the grid with its average.
#[derive(Debug, Clone)]
pub struct Torsion {
    pub s0: Vec<DMatrix<f64>>,
    pub average: DMatrix<f64>,
    pub average_inv: DMatrix<f64>,
    pub condition: f64,
}

/// Adapted frame and the pieces of its approximate inverse.
#[derive(Debug, Clone)]
pub struct FrameDecomposition {
    pub m: Vec<DMatrix<f64>>,
    pub v: Vec<DMatrix<f64>>,
    pub v_inv: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    /// Direct pointwise inverse of `M`.
    pub m_inv: Vec<DMatrix<f64>>,
    /// `M_e` from the Neumann-type formula.
    pub m_e: Vec<DMatrix<f64>>,
    /// `sup ||M_e||`.
    pub me_bound: f64,
}

/// Grid data of the invariance error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct InvarianceError {
    /// Sup over the de-aliased grid.
    pub grid_sup: f64,
    /// Weighted norm of the Fourier interpolant at the working strip.
    pub weighted: f64,
    /// Weighted norm at `rho = 0`.
    pub weighted_zero: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NdReport {
    pub nd1_min_det: f64,
    pub nd1_threshold: f64,
    pub nd1_pass: bool,
    /// `|<S0>^-1|` as an operator norm, when `<S0>` is available.
    pub s0_avg_inv_norm: Option<f64>,
    pub nd2_condition: Option<f64>,
    pub nd2_pass: bool,
    /// `sup ||DK||`.
    pub dk_norm: f64,
    /// `sup ||N||`, when ND1 holds.
    pub n_norm: Option<f64>,
}

impl NdReport {
    pub fn pass(&self) -> bool {
        self.nd1_pass && self.nd2_pass
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ApproxInverseReport {
    /// `sup ||M_e||` from the formula.
    pub me_norm: f64,
    /// `sup ||M^-1 - V^-1 M^T B^-1||` with the direct inverse.
    pub me_direct_norm: f64,
    /// `sup ||(V^-1 M^T B^-1 + M_e) M - I||`.
    pub identity_residual: f64,
    /// `sup ||V^-1 R||`.
    pub neumann: f64,
    /// `2 sup ||V^-1|| sup ||L|| sup ||V^-1 M^T B^-1||`.
    pub bound: f64,
    /// `||M_e|| / (gamma^-1 delta^-(sigma+1) eps)`, the empirical constant.
    pub scaled_constant: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct IdentityResidual {
    pub residual: f64,
    pub scale: f64,
}

/// Candidate torus with the system evaluated along it.
pub struct TorusState {
    sys: Arc<dyn PoissonSystem>,
    embedding: Embedding,
    freq: Frequency,
    rho: f64,
    grid: Grid,
    nodes: Vec<Vec<f64>>,
    k: Vec<DVector<f64>>,
    dk: Vec<DMatrix<f64>>,
    fields: Vec<PointFields>,
    e_grid: Vec<DVector<f64>>,
    e_map: FourierMap,
    metric: OnceLock<Result<Metric, GeometryError>>,
    torsion: OnceLock<Result<Torsion, GeometryError>>,
    frame: OnceLock<Result<FrameDecomposition, GeometryError>>,
}

impl std::fmt::Debug for TorusState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TorusState")
            .field("system", &self.sys.name())
            .field("trunc", &self.embedding.trunc())
            .field("omega", &self.freq.omega)
            .field("eps", &self.eps())
            .finish()
    }
}

fn cached<T: Clone>(cell: &OnceLock<Result<T, GeometryError>>, init: impl FnOnce() -> Result<T, GeometryError>) -> Result<&T, GeometryError> {
    cell.get_or_init(init).as_ref().map_err(Clone::clone)
}

impl TorusState {
    pub fn new(sys: Arc<dyn PoissonSystem>, embedding: Embedding, freq: Frequency, rho: f64) -> Result<Self, GeometryError> {
        let n = embedding.torus_dim();
        if freq.dim() != n {
            return Err(GeometryError::Shape(format!("frequency has {} entries for a torus of dimension {n}", freq.dim())));
        }
        if sys.dim() != 2 * n {
            return Err(GeometryError::Shape(format!(
                "system '{}' has phase dimension {} but the torus needs {}",
                sys.name(),
                sys.dim(),
                2 * n
            )));
        }
        let grid = Grid::dealiased(embedding.trunc());
        let nodes = grid.nodes();
        let k = embedding.samples(&grid);
        let dk = embedding.jacobian_samples(&grid);
        let mut fields = Vec::with_capacity(k.len());
        for (z, theta) in k.iter().zip(&nodes) {
            fields.push(point_fields(sys.as_ref(), z).map_err(|err| match err {
                PoissonError::OutsideDomain { point, .. } => GeometryError::OutsideDomain { theta: theta.clone(), point },
                other => GeometryError::Shape(other.to_string()),
            })?);
        }
        let omega = DVector::from_column_slice(&freq.omega);
        let e_grid: Vec<DVector<f64>> = fields.iter().zip(&dk).map(|(p, d)| &p.f - d * &omega).collect();
        let values = e_grid.iter().flat_map(|v| v.iter().copied()).collect();
        let samples = GridSamples::new(grid.clone(), 2 * n, values)?;
        let e_map = FourierMap::from_samples(&samples, &grid.max_trunc())?;
        Ok(Self {
            sys,
            embedding,
            freq,
            rho,
            grid,
            nodes,
            k,
            dk,
            fields,
            e_grid,
            e_map,
            metric: OnceLock::new(),
            torsion: OnceLock::new(),
            frame: OnceLock::new(),
        })
    }

    /// Same system, frequency and strip with a new embedding.
    pub fn with_embedding(&self, embedding: Embedding) -> Result<Self, GeometryError> {
        Self::new(self.sys.clone(), embedding, self.freq.clone(), self.rho)
    }

    pub fn with_rho(&self, rho: f64) -> Result<Self, GeometryError> {
        Self::new(self.sys.clone(), self.embedding.clone(), self.freq.clone(), rho)
    }

    pub fn system(&self) -> &Arc<dyn PoissonSystem> {
        &self.sys
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    pub fn frequency(&self) -> &Frequency {
        &self.freq
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn torus_dim(&self) -> usize {
        self.embedding.torus_dim()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Cutoff of grid fields transformed back to Fourier space.
    pub fn field_trunc(&self) -> Vec<usize> {
        self.grid.max_trunc()
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn k_samples(&self) -> &[DVector<f64>] {
        &self.k
    }

    pub fn dk(&self) -> &[DMatrix<f64>] {
        &self.dk
    }

    pub fn point_fields(&self) -> &[PointFields] {
        &self.fields
    }

    pub fn a_grid(&self) -> Vec<DMatrix<f64>> {
        self.fields.iter().map(|p| p.a.clone()).collect()
    }

    pub fn e_grid(&self) -> &[DVector<f64>] {
        &self.e_grid
    }

    pub fn e_map(&self) -> &FourierMap {
        &self.e_map
    }

    /// Grid sup of the invariance error.
    pub fn eps(&self) -> f64 {
        sup_vec(&self.e_grid)
    }

    pub fn invariance_error(&self) -> Result<InvarianceError, GeometryError> {
        Ok(InvarianceError {
            grid_sup: self.eps(),
            weighted: self.e_map.weighted_norm(self.rho)?,
            weighted_zero: self.e_map.weighted_norm(0.0)?,
            rho: self.rho,
        })
    }

    /// Transforms a grid field of vectors to a Fourier map at the field cutoff.
    pub fn to_fourier(&self, field: &[DVector<f64>]) -> Result<FourierMap, GeometryError> {
        let m = field.first().map_or(0, |v| v.len());
        let values = field.iter().flat_map(|v| v.iter().copied()).collect();
        let samples = GridSamples::new(self.grid.clone(), m, values)?;
        Ok(FourierMap::from_samples(&samples, &self.field_trunc())?)
    }

    /// Grid values of a Fourier map as vectors.
    pub fn to_grid(&self, f: &FourierMap) -> Vec<DVector<f64>> {
        let s = f.to_samples(&self.grid);
        (0..s.len()).map(|i| DVector::from_column_slice(s.point(i))).collect()
    }

    /// Spectral `omega . grad` of a grid field of matrices.
    pub fn directional_derivative_matrices(&self, field: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>, GeometryError> {
        let (r, c) = field[0].shape();
        let flat: Vec<DVector<f64>> = field.iter().map(|m| DVector::from_column_slice(m.as_slice())).collect();
        let d = self.to_fourier(&flat)?.directional_derivative(&self.freq.omega);
        Ok(self.to_grid(&d).into_iter().map(|v| DMatrix::from_column_slice(r, c, v.as_slice())).collect())
    }

    pub fn binv(&self) -> Result<Vec<DMatrix<f64>>, GeometryError> {
        self.fields
            .iter()
            .zip(&self.nodes)
            .map(|(p, theta)| {
                p.b.clone()
                    .try_inverse()
                    .ok_or_else(|| GeometryError::StructureSingular { theta: theta.clone() })
            })
            .collect()
    }

    /// `N = (DK^T DK)^-1`, `B^-1` and `L = DK^T B^-1 DK`.
    pub fn metric(&self) -> Result<&Metric, GeometryError> {
        cached(&self.metric, || {
            let n = self.torus_dim();
            let binv = self.binv()?;
            let grams: Vec<DMatrix<f64>> = self.dk.iter().map(|d| d.transpose() * d).collect();
            let mut min_det = f64::INFINITY;
            let mut worst = 0;
            let mut diag = 0.0;
            for (i, g) in grams.iter().enumerate() {
                let det = g.determinant().abs();
                if det < min_det {
                    min_det = det;
                    worst = i;
                }
                diag += g.trace() / n as f64;
            }
            diag /= grams.len() as f64;
            if !(min_det >= ND1_FLOOR * diag.powi(n as i32)) || diag == 0.0 {
                return Err(GeometryError::Nd1Violation {
                    theta: self.nodes[worst].clone(),
                    determinant: min_det,
                });
            }
            let nmat: Vec<DMatrix<f64>> = grams
                .into_iter()
                .map(|g| g.try_inverse().expect("Gram matrix passed the determinant floor"))
                .collect();
            let l = self.dk.iter().zip(&binv).map(|(d, bi)| d.transpose() * bi * d).collect();
            Ok(Metric { n: nmat, binv, l, min_det })
        })
    }

    /// Sup of `|L|` over the grid (entrywise max).
    pub fn lagrangian_defect(&self) -> Result<f64, GeometryError> {
        Ok(crate::norms::sup_max(&self.metric()?.l))
    }

    /// `S0 = N DK^T { A B - B A - D_f B + B DK N DK^T (A + A^T) } DK N` and `<S0>`.
    pub fn torsion(&self) -> Result<&Torsion, GeometryError> {
        cached(&self.torsion, || {
            let metric = self.metric()?;
            let n = self.torus_dim();
            let mut s0 = Vec::with_capacity(self.dk.len());
            let mut average = DMatrix::zeros(n, n);
            for ((p, dk), nm) in self.fields.iter().zip(&self.dk).zip(&metric.n) {
                let a = &p.a;
                let b = &p.b;
                let braces = a * b - b * a - &p.dfb + b * dk * nm * dk.transpose() * (a + a.transpose());
                let s = nm * dk.transpose() * braces * dk * nm;
                average += &s;
                s0.push(s);
            }
            average /= s0.len() as f64;
            let (average_inv, condition) = match average.clone().try_inverse() {
                Some(inv) => {
                    let c = op_norm(&average) * op_norm(&inv);
                    (inv, c)
                }
                None => (DMatrix::zeros(n, n), f64::INFINITY),
            };
            if !(condition <= ND2_MAX_CONDITION) {
                return Err(GeometryError::Nd2Violation { condition });
            }
            Ok(Torsion { s0, average, average_inv, condition })
        })
    }

    pub fn frame(&self) -> Result<&FrameDecomposition, GeometryError> {
        cached(&self.frame, || {
            let metric = self.metric()?;
            let n = self.torus_dim();
            let len = self.dk.len();
            let mut out = FrameDecomposition {
                m: Vec::with_capacity(len),
                v: Vec::with_capacity(len),
                v_inv: Vec::with_capacity(len),
                r: Vec::with_capacity(len),
                m_inv: Vec::with_capacity(len),
                m_e: Vec::with_capacity(len),
                me_bound: 0.0,
            };
            for i in 0..len {
                let dk = &self.dk[i];
                let b = &self.fields[i].b;
                let nm = &metric.n[i];
                let bdkn = b * dk * nm;
                let g = nm.transpose() * dk.transpose() * &bdkn;
                let mut m = DMatrix::zeros(2 * n, 2 * n);
                m.view_mut((0, 0), (2 * n, n)).copy_from(dk);
                m.view_mut((0, n), (2 * n, n)).copy_from(&bdkn);
                let v = block2(&DMatrix::zeros(n, n), &DMatrix::identity(n, n), &(-DMatrix::identity(n, n)), &(-&g));
                let v_inv = block2(&(-&g), &(-DMatrix::identity(n, n)), &DMatrix::identity(n, n), &DMatrix::zeros(n, n));
                let r = block2(&metric.l[i], &DMatrix::zeros(n, n), &DMatrix::zeros(n, n), &DMatrix::zeros(n, n));
                let m_inv = m
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| GeometryError::FrameSingular { theta: self.nodes[i].clone() })?;
                let m_e = me_formula(&v_inv, &r, &m, &metric.binv[i])
                    .ok_or_else(|| GeometryError::FrameSingular { theta: self.nodes[i].clone() })?;
                out.me_bound = out.me_bound.max(op_norm(&m_e));
                out.m.push(m);
                out.v.push(v);
                out.v_inv.push(v_inv);
                out.r.push(r);
                out.m_inv.push(m_inv);
                out.m_e.push(m_e);
            }
            Ok(out)
        })
    }

    /// Compares the formula for `M_e` against the direct inverse.
    pub fn approx_inverse_check(&self, delta: f64) -> Result<ApproxInverseReport, GeometryError> {
        let frame = self.frame()?;
        let metric = self.metric()?;
        let mut rep = ApproxInverseReport {
            me_norm: frame.me_bound,
            me_direct_norm: 0.0,
            identity_residual: 0.0,
            neumann: 0.0,
            bound: 0.0,
            scaled_constant: 0.0,
        };
        let (mut vinv_sup, mut l_sup, mut main_sup) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..frame.m.len() {
            let main = &frame.v_inv[i] * frame.m[i].transpose() * &metric.binv[i];
            let dim = main.nrows();
            rep.neumann = rep.neumann.max(op_norm(&(&frame.v_inv[i] * &frame.r[i])));
            rep.me_direct_norm = rep.me_direct_norm.max(op_norm(&(&frame.m_inv[i] - &main)));
            let approx = &main + &frame.m_e[i];
            rep.identity_residual = rep
                .identity_residual
                .max(mat_max(&(approx * &frame.m[i] - DMatrix::identity(dim, dim))));
            vinv_sup = vinv_sup.max(op_norm(&frame.v_inv[i]));
            l_sup = l_sup.max(op_norm(&metric.l[i]));
            main_sup = main_sup.max(op_norm(&main));
        }
        if rep.neumann > 0.5 {
            return Err(GeometryError::SmallnessViolation { value: rep.neumann });
        }
        rep.bound = 2.0 * vinv_sup * l_sup * main_sup;
        let scale = self.eps() / (self.freq.gamma * delta.powf(self.freq.sigma + 1.0));
        rep.scaled_constant = if scale > 0.0 { rep.me_norm / scale } else { 0.0 };
        Ok(rep)
    }

    /// `|<DK^T B^-1 e>|`, which vanishes for every embedding.
    pub fn zero_average_identity(&self) -> Result<IdentityResidual, GeometryError> {
        let binv = self.binv()?;
        let n = self.torus_dim();
        let mut acc = DVector::zeros(n);
        for ((dk, bi), e) in self.dk.iter().zip(&binv).zip(&self.e_grid) {
            acc += dk.transpose() * bi * e;
        }
        acc /= self.dk.len() as f64;
        Ok(IdentityResidual {
            residual: vec_max(&acc),
            scale: self.eps(),
        })
    }

    /// `sup |A DK - omega.grad DK - De|` with the scale `sup |De|`.
    pub fn error_derivative_identity(&self) -> Result<IdentityResidual, GeometryError> {
        let n = self.torus_dim();
        let per = self.embedding.periodic();
        let mut residual: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for j in 0..n {
            let dw_dk = self.to_grid(&per.partial_derivative(j).directional_derivative(&self.freq.omega));
            let de = self.to_grid(&self.e_map.partial_derivative(j));
            for i in 0..self.dk.len() {
                let lhs = &self.fields[i].a * self.dk[i].column(j) - &dw_dk[i];
                residual = residual.max(vec_max(&(lhs - &de[i])));
                scale = scale.max(vec_max(&de[i]));
            }
        }
        Ok(IdentityResidual { residual, scale })
    }

    /// `E = A M - omega.grad M - M [[0, S0], [0, 0]]`; returns `(sup ||E||, sup ||M^-1 E||)`.
    pub fn frame_identity_residual(&self) -> Result<(f64, f64), GeometryError> {
        let frame = self.frame()?;
        let torsion = self.torsion()?;
        let n = self.torus_dim();
        let dm = self.directional_derivative_matrices(&frame.m)?;
        let (mut e_sup, mut c_sup) = (0.0f64, 0.0f64);
        for i in 0..frame.m.len() {
            let upper = block2(&DMatrix::zeros(n, n), &torsion.s0[i], &DMatrix::zeros(n, n), &DMatrix::zeros(n, n));
            let e = &self.fields[i].a * &frame.m[i] - &dm[i] - &frame.m[i] * upper;
            c_sup = c_sup.max(op_norm(&(&frame.m_inv[i] * &e)));
            e_sup = e_sup.max(op_norm(&e));
        }
        Ok((e_sup, c_sup))
    }

    pub fn nondegeneracy_report(&self) -> NdReport {
        let n = self.torus_dim();
        let dk_norm = sup_op(&self.dk);
        let grams: Vec<DMatrix<f64>> = self.dk.iter().map(|d| d.transpose() * d).collect();
        let min_det = grams.iter().map(|g| g.determinant().abs()).fold(f64::INFINITY, f64::min);
        let diag = grams.iter().map(|g| g.trace() / n as f64).sum::<f64>() / grams.len() as f64;
        let threshold = ND1_FLOOR * diag.powi(n as i32);
        let metric = self.metric().ok();
        let nd1_pass = metric.is_some();
        let (inv_norm, cond, nd2_pass) = if nd1_pass {
            match self.torsion() {
                Ok(t) => (Some(op_norm(&t.average_inv)), Some(t.condition), true),
                Err(GeometryError::Nd2Violation { condition }) => (None, Some(condition), false),
                Err(_) => (None, None, false),
            }
        } else {
            (None, None, false)
        };
        NdReport {
            nd1_min_det: min_det,
            nd1_threshold: threshold,
            nd1_pass,
            s0_avg_inv_norm: inv_norm,
            nd2_condition: cond,
            nd2_pass,
            dk_norm,
            n_norm: metric.map(|m| sup_op(&m.n)),
        }
    }
}

fn block2(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(a);
    out.view_mut((0, n), (n, n)).copy_from(b);
    out.view_mut((n, 0), (n, n)).copy_from(c);
    out.view_mut((n, n), (n, n)).copy_from(d);
    out
}

/// `M_e = -(I + V^-1 R)^-1 V^-1 R V^-1 M^T B^-1`.
pub fn me_formula(v_inv: &DMatrix<f64>, r: &DMatrix<f64>, m: &DMatrix<f64>, binv: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let dim = m.nrows();
    let vr = v_inv * r;
    let inner = (DMatrix::identity(dim, dim) + &vr).try_inverse()?;
    Some(-(inner * vr * v_inv * m.transpose() * binv))
}

/// `V^-1 M^T B^-1 + M_e`, the approximate inverse of the frame.
pub fn approx_inverse(v_inv: &DMatrix<f64>, r: &DMatrix<f64>, m: &DMatrix<f64>, binv: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Some(v_inv * m.transpose() * binv + me_formula(v_inv, r, m, binv)?)
}
