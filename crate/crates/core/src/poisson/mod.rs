//! Generalized Hamiltonian systems `z' = B(z) grad H(z)`.
//!
//! A [`PoissonSystem`] supplies `H`, its gradient and Hessian, the structure
//! matrix `B` and the partial derivatives `dB/dz_l` analytically. The free
//! functions here build the derived fields used by the Newton step and check
//! the structure-matrix axioms numerically.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::norms::mat_max;

pub mod registry;

pub use registry::{build_system, registry, SystemRegistryEntry};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PoissonError {
    #[error("point {point:?} lies outside the domain of system '{system}'")]
    OutsideDomain { system: String, point: Vec<f64> },
    #[error("unknown system '{0}'")]
    UnknownSystem(String),
    #[error("system '{system}' has no parameter '{param}'")]
    UnknownParameter { system: String, param: String },
    #[error("invalid parameter for '{system}': {message}")]
    InvalidParameter { system: String, message: String },
}

/// A Poisson system with analytic derivatives. Points are phase-space vectors of length [`dim`](Self::dim).
pub trait PoissonSystem: Send + Sync + Debug {
    fn name(&self) -> &str;

    /// Phase-space dimension `2n`.
    fn dim(&self) -> usize;

    fn hamiltonian(&self, z: &DVector<f64>) -> f64;

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64>;

    /// `Psi(z) = D grad H(z)`.
    fn hessian(&self, z: &DVector<f64>) -> DMatrix<f64>;

    fn structure(&self, z: &DVector<f64>) -> DMatrix<f64>;

    /// `dB/dz_l` for `l = 0..dim`.
    fn structure_derivative(&self, z: &DVector<f64>) -> Vec<DMatrix<f64>>;

    fn in_domain(&self, z: &DVector<f64>) -> bool {
        z.iter().all(|v| v.is_finite())
    }

    /// Random point of the working region, used by the axiom checks.
    fn sample_point(&self, rng: &mut ChaCha8Rng) -> DVector<f64>;

    /// `(||B||_{C^2}, ||H||_{C^3})` over the given points: the largest entry
    /// of `B`, `DB`, `D^2 B` and of `grad H`, `D^2 H`, `D^3 H`.
    /// The default differences the analytic first derivatives once more.
    fn higher_norms(&self, points: &[DVector<f64>]) -> (f64, f64) {
        let h = 1e-5;
        let dim = self.dim();
        let mut nb: f64 = 0.0;
        let mut nh: f64 = 0.0;
        for z in points {
            nb = nb.max(mat_max(&self.structure(z)));
            for d in self.structure_derivative(z) {
                nb = nb.max(mat_max(&d));
            }
            nh = nh.max(crate::norms::vec_max(&self.gradient(z)));
            nh = nh.max(mat_max(&self.hessian(z)));
            for l in 0..dim {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[l] += h;
                zm[l] -= h;
                if !self.in_domain(&zp) || !self.in_domain(&zm) {
                    continue;
                }
                let dp = self.structure_derivative(&zp);
                let dm = self.structure_derivative(&zm);
                for (a, b) in dp.iter().zip(&dm) {
                    nb = nb.max(mat_max(&((a - b) / (2.0 * h))));
                }
                let hd = (self.hessian(&zp) - self.hessian(&zm)) / (2.0 * h);
                nh = nh.max(mat_max(&hd));
            }
        }
        (nb, nh)
    }
}

/// Everything the geometry needs at one phase-space point.
#[derive(Debug, Clone)]
pub struct PointFields {
    pub b: DMatrix<f64>,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    pub db: Vec<DMatrix<f64>>,
    /// `f = B grad H`.
    pub f: DVector<f64>,
    /// `A = Phi + B Psi`, the Jacobian of `f`.
    pub a: DMatrix<f64>,
    /// `sum_l f_l dB/dz_l`, the derivative of `B` along `f`.
    pub dfb: DMatrix<f64>,
}

pub fn check_domain(sys: &dyn PoissonSystem, z: &DVector<f64>) -> Result<(), PoissonError> {
    if sys.in_domain(z) {
        Ok(())
    } else {
        Err(PoissonError::OutsideDomain {
            system: sys.name().to_string(),
            point: z.iter().copied().collect(),
        })
    }
}

pub fn point_fields(sys: &dyn PoissonSystem, z: &DVector<f64>) -> Result<PointFields, PoissonError> {
    check_domain(sys, z)?;
    let b = sys.structure(z);
    let grad = sys.gradient(z);
    let hess = sys.hessian(z);
    let db = sys.structure_derivative(z);
    let f = &b * &grad;
    let a = phi_from(&db, &grad) + &b * &hess;
    let dfb = derivative_along(&db, &f);
    Ok(PointFields { b, grad, hess, db, f, a, dfb })
}

/// `sum_l v_l dB/dz_l`.
pub fn derivative_along(db: &[DMatrix<f64>], v: &DVector<f64>) -> DMatrix<f64> {
    let dim = v.len();
    let mut out = DMatrix::zeros(dim, dim);
    for (l, d) in db.iter().enumerate() {
        out += d * v[l];
    }
    out
}

/// `Phi_ik = sum_j dB_ij/dz_k dH/dz_j`: column `k` is `(dB/dz_k) grad H`.
pub fn phi_from(db: &[DMatrix<f64>], grad: &DVector<f64>) -> DMatrix<f64> {
    let dim = grad.len();
    let mut phi = DMatrix::zeros(dim, dim);
    for (k, d) in db.iter().enumerate() {
        phi.set_column(k, &(d * grad));
    }
    phi
}

pub fn vector_field(sys: &dyn PoissonSystem, z: &DVector<f64>) -> Result<DVector<f64>, PoissonError> {
    check_domain(sys, z)?;
    Ok(sys.structure(z) * sys.gradient(z))
}

pub fn phi_matrix(sys: &dyn PoissonSystem, z: &DVector<f64>) -> Result<DMatrix<f64>, PoissonError> {
    check_domain(sys, z)?;
    Ok(phi_from(&sys.structure_derivative(z), &sys.gradient(z)))
}

pub fn a_matrix(sys: &dyn PoissonSystem, z: &DVector<f64>) -> Result<DMatrix<f64>, PoissonError> {
    Ok(point_fields(sys, z)?.a)
}

/// Largest cyclic sum `sum_l (dB_ij/dz_l b_lk + dB_jk/dz_l b_li + dB_ki/dz_l b_lj)`.
pub fn jacobi_residual(sys: &dyn PoissonSystem, z: &DVector<f64>) -> Result<f64, PoissonError> {
    check_domain(sys, z)?;
    let b = sys.structure(z);
    let db = sys.structure_derivative(z);
    Ok(jacobi_from(&b, &db))
}

fn jacobi_from(b: &DMatrix<f64>, db: &[DMatrix<f64>]) -> f64 {
    let dim = b.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            for k in 0..dim {
                let mut s = 0.0;
                for (l, d) in db.iter().enumerate() {
                    s += d[(i, j)] * b[(l, k)] + d[(j, k)] * b[(l, i)] + d[(k, i)] * b[(l, j)];
                }
                worst = worst.max(s.abs());
            }
        }
    }
    worst
}

/// Max-norm of `A B + B A^T - D_f B`.
pub fn structure_identity_residual(sys: &dyn PoissonSystem, z: &DVector<f64>) -> Result<f64, PoissonError> {
    let p = point_fields(sys, z)?;
    Ok(mat_max(&(&p.a * &p.b + &p.b * p.a.transpose() - &p.dfb)))
}

/// Outcome of one axiom check.
#[derive(Debug, Clone, Serialize)]
pub struct AxiomCheck {
    pub name: &'static str,
    pub worst: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub system: String,
    pub n_points: usize,
    pub checks: Vec<AxiomCheck>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&AxiomCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

const ANTISYMMETRY_TOL: f64 = 1e-12;
const JACOBI_TOL: f64 = 1e-10;
const DETERMINANT_FLOOR: f64 = 1e-10;
const CONSISTENCY_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;

/// Checks antisymmetry, Jacobi, invertibility of `B` and consistency of the
/// analytic derivatives with central differences at random points.
pub fn validate_system(sys: &dyn PoissonSystem, n_points: usize, seed: u64) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = sys.dim();
    let (mut anti, mut jac, mut det_min, mut grad_err, mut hess_err, mut db_err) =
        (0.0f64, 0.0f64, f64::INFINITY, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n_points {
        let z = sys.sample_point(&mut rng);
        let b = sys.structure(&z);
        let db = sys.structure_derivative(&z);
        anti = anti.max(mat_max(&(&b + b.transpose())));
        jac = jac.max(jacobi_from(&b, &db));
        det_min = det_min.min(b.determinant().abs());
        let grad = sys.gradient(&z);
        let hess = sys.hessian(&z);
        for l in 0..dim {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[l] += FD_STEP;
            zm[l] -= FD_STEP;
            let dh = (sys.hamiltonian(&zp) - sys.hamiltonian(&zm)) / (2.0 * FD_STEP);
            grad_err = grad_err.max((dh - grad[l]).abs());
            let dg = (sys.gradient(&zp) - sys.gradient(&zm)) / (2.0 * FD_STEP);
            hess_err = hess_err.max(crate::norms::vec_max(&(dg - hess.column(l))));
            let dbl = (sys.structure(&zp) - sys.structure(&zm)) / (2.0 * FD_STEP);
            db_err = db_err.max(mat_max(&(dbl - &db[l])));
        }
    }
    let checks = vec![
        AxiomCheck { name: "antisymmetry", worst: anti, threshold: ANTISYMMETRY_TOL, pass: anti <= ANTISYMMETRY_TOL },
        AxiomCheck { name: "jacobi", worst: jac, threshold: JACOBI_TOL, pass: jac <= JACOBI_TOL },
        AxiomCheck { name: "invertibility", worst: det_min, threshold: DETERMINANT_FLOOR, pass: det_min >= DETERMINANT_FLOOR },
        AxiomCheck { name: "gradient", worst: grad_err, threshold: CONSISTENCY_TOL, pass: grad_err <= CONSISTENCY_TOL },
        AxiomCheck { name: "hessian", worst: hess_err, threshold: CONSISTENCY_TOL, pass: hess_err <= CONSISTENCY_TOL },
        AxiomCheck { name: "structure_derivative", worst: db_err, threshold: CONSISTENCY_TOL, pass: db_err <= CONSISTENCY_TOL },
    ];
    ValidationReport {
        system: sys.name().to_string(),
        n_points,
        checks,
    }
}
