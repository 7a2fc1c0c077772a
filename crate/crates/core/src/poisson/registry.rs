//! Built-in example systems and their default initial tori.
//!
//! Phase-space points are ordered `(x_1..x_n, y_1..y_n)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{PoissonError, PoissonSystem};
use crate::geometry::Embedding;

pub type Params = BTreeMap<String, f64>;

type Builder = fn(&Params) -> Result<Arc<dyn PoissonSystem>, PoissonError>;
type TorusBuilder = fn(&Params, &[f64], &[usize]) -> Result<Embedding, PoissonError>;

/// A named system with default parameters and a default initial torus.
pub struct SystemRegistryEntry {
    pub name: &'static str,
    pub description: &'static str,
    /// Torus dimension `n`; the phase space has dimension `2n`.
    pub torus_dim: usize,
    pub params: &'static [(&'static str, f64)],
    pub build: Builder,
    pub initial_torus: TorusBuilder,
}

impl SystemRegistryEntry {
    pub fn default_params(&self) -> Params {
        self.params.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    /// Defaults overridden by `given`; unknown keys are rejected.
    pub fn resolve(&self, given: &Params) -> Result<Params, PoissonError> {
        let mut out = self.default_params();
        for (k, v) in given {
            if !out.contains_key(k) {
                return Err(PoissonError::UnknownParameter {
                    system: self.name.to_string(),
                    param: k.clone(),
                });
            }
            out.insert(k.clone(), *v);
        }
        Ok(out)
    }
}

impl std::fmt::Debug for SystemRegistryEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SystemRegistryEntry").field("name", &self.name).finish()
    }
}

pub fn registry() -> &'static [SystemRegistryEntry] {
    &REGISTRY
}

pub fn lookup(name: &str) -> Result<&'static SystemRegistryEntry, PoissonError> {
    REGISTRY
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| PoissonError::UnknownSystem(name.to_string()))
}

/// Builds a registered system from (possibly partial) parameters.
pub fn build_system(name: &str, params: &Params) -> Result<Arc<dyn PoissonSystem>, PoissonError> {
    let entry = lookup(name)?;
    (entry.build)(&entry.resolve(params)?)
}

static REGISTRY: [SystemRegistryEntry; 4] = [
    SystemRegistryEntry {
        name: "pendulum",
        description: "B = J, H = y^2/2 + eps/(2 pi)^2 (1 - cos 2 pi x)",
        torus_dim: 1,
        params: &[("epsilon", 1e-3)],
        build: |p| Ok(Arc::new(Pendulum { epsilon: p["epsilon"] })),
        initial_torus: |_, omega, trunc| Ok(Embedding::flat(omega, trunc)),
    },
    SystemRegistryEntry {
        name: "scaled2d",
        description: "B = (1 + mu cos 2 pi x) J, pendulum Hamiltonian",
        torus_dim: 1,
        params: &[("epsilon", 1e-3), ("mu", 0.3)],
        build: |p| Ok(Arc::new(Scaled2d::new(p["epsilon"], p["mu"])?)),
        initial_torus: scaled2d_torus,
    },
    SystemRegistryEntry {
        name: "lotka_volterra",
        description: "B = x y J, H = delta x - gamma ln x + beta y - alpha ln y on the positive quadrant",
        torus_dim: 1,
        params: &[("alpha", 1.0), ("beta", 1.0), ("gamma", 1.0), ("delta", 1.0), ("amplitude", 0.1)],
        build: |p| Ok(Arc::new(LotkaVolterra::new(p)?)),
        initial_torus: lotka_volterra_torus,
    },
    SystemRegistryEntry {
        name: "coupled4d",
        description: "B = J_4, H = (y1^2 + y2^2)/2 + eps (cos 2 pi x1 + cos 2 pi x1 cos 2 pi x2)",
        torus_dim: 2,
        params: &[("epsilon", 1e-4)],
        build: |p| Ok(Arc::new(Coupled4d { epsilon: p["epsilon"] })),
        initial_torus: |_, omega, trunc| Ok(Embedding::flat(omega, trunc)),
    },
];

/// Canonical symplectic matrix `[[0, I], [-I, 0]]` of size `2n`.
pub fn canonical_j(n: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    j
}

fn unit_box(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(2 * n, |i, _| if i < n { rng.random_range(0.0..1.0) } else { rng.random_range(-2.0..2.0) })
}

#[derive(Debug, Clone)]
pub struct Pendulum {
    pub epsilon: f64,
}

impl PoissonSystem for Pendulum {
    fn name(&self) -> &str {
        "pendulum"
    }
    fn dim(&self) -> usize {
        2
    }
    fn hamiltonian(&self, z: &DVector<f64>) -> f64 {
        0.5 * z[1] * z[1] + self.epsilon / (4.0 * PI * PI) * (1.0 - (2.0 * PI * z[0]).cos())
    }
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![self.epsilon / (2.0 * PI) * (2.0 * PI * z[0]).sin(), z[1]])
    }
    fn hessian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[self.epsilon * (2.0 * PI * z[0]).cos(), 0.0, 0.0, 1.0])
    }
    fn structure(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        canonical_j(1)
    }
    fn structure_derivative(&self, _z: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(2, 2); 2]
    }
    fn sample_point(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        unit_box(rng, 1)
    }
}

#[derive(Debug, Clone)]
pub struct Scaled2d {
    pub pendulum: Pendulum,
    pub mu: f64,
}

impl Scaled2d {
    pub fn new(epsilon: f64, mu: f64) -> Result<Self, PoissonError> {
        if mu.abs() >= 1.0 {
            return Err(PoissonError::InvalidParameter {
                system: "scaled2d".into(),
                message: format!("|mu| must be below 1 for B to stay invertible, got {mu}"),
            });
        }
        Ok(Self { pendulum: Pendulum { epsilon }, mu })
    }
}

impl PoissonSystem for Scaled2d {
    fn name(&self) -> &str {
        "scaled2d"
    }
    fn dim(&self) -> usize {
        2
    }
    fn hamiltonian(&self, z: &DVector<f64>) -> f64 {
        self.pendulum.hamiltonian(z)
    }
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        self.pendulum.gradient(z)
    }
    fn hessian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        self.pendulum.hessian(z)
    }
    fn structure(&self, z: &DVector<f64>) -> DMatrix<f64> {
        canonical_j(1) * (1.0 + self.mu * (2.0 * PI * z[0]).cos())
    }
    fn structure_derivative(&self, z: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let gx = -2.0 * PI * self.mu * (2.0 * PI * z[0]).sin();
        vec![canonical_j(1) * gx, DMatrix::zeros(2, 2)]
    }
    fn sample_point(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        unit_box(rng, 1)
    }
}

/// Exact invariant circle of the unperturbed scaled system: `y = c` and
/// `x(theta)` solving `dx/dtheta = (1 + mu cos 2 pi x) / sqrt(1 - mu^2)`.
fn scaled2d_torus(p: &Params, omega: &[f64], trunc: &[usize]) -> Result<Embedding, PoissonError> {
    let mu = p["mu"];
    let s = (1.0 - mu * mu).sqrt();
    let c = omega[0] / s;
    let r = ((1.0 - mu) / (1.0 + mu)).sqrt();
    let winding = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
    Ok(Embedding::from_fn(winding, trunc, |t| {
        // t in [0, 1): the branch of atan2 stays in [0, pi]
        let a = PI * t[0];
        let x = (a.sin() / r).atan2(a.cos()) / PI;
        vec![x - t[0], c]
    }))
}

#[derive(Debug, Clone)]
pub struct LotkaVolterra {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl LotkaVolterra {
    fn new(p: &Params) -> Result<Self, PoissonError> {
        let sys = Self {
            alpha: p["alpha"],
            beta: p["beta"],
            gamma: p["gamma"],
            delta: p["delta"],
        };
        if [sys.alpha, sys.beta, sys.gamma, sys.delta].iter().any(|v| !(*v > 0.0)) {
            return Err(PoissonError::InvalidParameter {
                system: "lotka_volterra".into(),
                message: "alpha, beta, gamma and delta must be positive".into(),
            });
        }
        Ok(sys)
    }

    pub fn equilibrium(&self) -> (f64, f64) {
        (self.gamma / self.delta, self.alpha / self.beta)
    }

    /// Frequency of small oscillations about the equilibrium (cycles per unit time).
    pub fn linear_frequency(&self) -> f64 {
        (self.alpha * self.gamma).sqrt() / (2.0 * PI)
    }
}

impl PoissonSystem for LotkaVolterra {
    fn name(&self) -> &str {
        "lotka_volterra"
    }
    fn dim(&self) -> usize {
        2
    }
    fn hamiltonian(&self, z: &DVector<f64>) -> f64 {
        self.delta * z[0] - self.gamma * z[0].ln() + self.beta * z[1] - self.alpha * z[1].ln()
    }
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![self.delta - self.gamma / z[0], self.beta - self.alpha / z[1]])
    }
    fn hessian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[self.gamma / (z[0] * z[0]), 0.0, 0.0, self.alpha / (z[1] * z[1])])
    }
    fn structure(&self, z: &DVector<f64>) -> DMatrix<f64> {
        canonical_j(1) * (z[0] * z[1])
    }
    fn structure_derivative(&self, z: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![canonical_j(1) * z[1], canonical_j(1) * z[0]]
    }
    fn in_domain(&self, z: &DVector<f64>) -> bool {
        z.len() == 2 && z[0] > 0.0 && z[1] > 0.0 && z[0].is_finite() && z[1].is_finite()
    }
    fn sample_point(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let (xs, ys) = self.equilibrium();
        DVector::from_vec(vec![xs * rng.random_range(0.3..3.0), ys * rng.random_range(0.3..3.0)])
    }
}

/// Ellipse of the linearization about the equilibrium with relative amplitude `amplitude`.
fn lotka_volterra_torus(p: &Params, omega: &[f64], trunc: &[usize]) -> Result<Embedding, PoissonError> {
    let sys = LotkaVolterra::new(p)?;
    let a = p["amplitude"];
    if !(a > 0.0 && a < 1.0) {
        return Err(PoissonError::InvalidParameter {
            system: "lotka_volterra".into(),
            message: format!("amplitude must lie in (0, 1), got {a}"),
        });
    }
    let (xs, ys) = sys.equilibrium();
    let big_omega = 2.0 * PI * omega[0];
    let winding = DMatrix::zeros(2, 1);
    Ok(Embedding::from_fn(winding, trunc, |t| {
        let phase = 2.0 * PI * t[0];
        vec![xs * (1.0 + a * phase.cos()), ys - a * xs * big_omega * phase.sin() / (xs * sys.beta)]
    }))
}

#[derive(Debug, Clone)]
pub struct Coupled4d {
    pub epsilon: f64,
}

impl PoissonSystem for Coupled4d {
    fn name(&self) -> &str {
        "coupled4d"
    }
    fn dim(&self) -> usize {
        4
    }
    fn hamiltonian(&self, z: &DVector<f64>) -> f64 {
        let (c1, c2) = ((2.0 * PI * z[0]).cos(), (2.0 * PI * z[1]).cos());
        0.5 * (z[2] * z[2] + z[3] * z[3]) + self.epsilon * (c1 + c1 * c2)
    }
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let tp = 2.0 * PI;
        let (s1, c1) = (tp * z[0]).sin_cos();
        let (s2, c2) = (tp * z[1]).sin_cos();
        let e = self.epsilon;
        DVector::from_vec(vec![-tp * e * s1 * (1.0 + c2), -tp * e * c1 * s2, z[2], z[3]])
    }
    fn hessian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let tp2 = 4.0 * PI * PI;
        let (s1, c1) = (2.0 * PI * z[0]).sin_cos();
        let (s2, c2) = (2.0 * PI * z[1]).sin_cos();
        let e = self.epsilon;
        let mut h = DMatrix::zeros(4, 4);
        h[(0, 0)] = -tp2 * e * c1 * (1.0 + c2);
        h[(0, 1)] = tp2 * e * s1 * s2;
        h[(1, 0)] = h[(0, 1)];
        h[(1, 1)] = -tp2 * e * c1 * c2;
        h[(2, 2)] = 1.0;
        h[(3, 3)] = 1.0;
        h
    }
    fn structure(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        canonical_j(2)
    }
    fn structure_derivative(&self, _z: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(4, 4); 4]
    }
    fn sample_point(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        unit_box(rng, 2)
    }
}
