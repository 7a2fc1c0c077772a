//! Truncated real Fourier series on the torus `T^n = R^n / Z^n`.
//!
//! A [`FourierMap`] stores the complex coefficients `c_k` of a map
//! `T^n -> R^m` for every lattice vector `k` inside the box `|k_j| <= N_j`.
//! Values on real `theta` are `sum_k c_k exp(2 pi i k.theta)`, so the real
//! symmetry `c_{-k} = conj(c_k)` is maintained after every transform.
//!
//! Grid transforms go through `rustfft` axis by axis on a row-major grid
//! (last axis fastest). Node `j` on an axis of size `G` sits at `j / G`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest divisor `|k.omega|` accepted by the cohomological solver.
pub const RESONANCE_FLOOR: f64 = 1e-13;

/// Default relative zero-average tolerance of the cohomological solver.
pub const ZERO_AVERAGE_TOL: f64 = 1e-10;

/// Largest exponent `2 pi rho |k|_1` the weighted norm accepts.
const MAX_WEIGHT_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FourierError {
    #[error("grid size {grid} on axis {axis} cannot carry truncation {trunc}: need at least {need} nodes")]
    Truncation {
        axis: usize,
        grid: usize,
        trunc: usize,
        need: usize,
    },
    #[error("weighted strip norm overflows at rho = {rho} with |k|_1 up to {max_order}; use a smaller strip")]
    NormOverflow { rho: f64, max_order: usize },
    #[error("strip width must be nonnegative, got {0}")]
    NegativeStrip(f64),
    #[error("cohomological equation not solvable: average {average:e} exceeds tolerance {tolerance:e}")]
    NotSolvable { average: f64, tolerance: f64 },
    #[error("near resonance at k = {k:?}: |k.omega| = {divisor:e} below floor {floor:e}")]
    Resonance { k: Vec<i64>, divisor: f64, floor: f64 },
    #[error("frequency is resonant at k = {k:?}")]
    ResonantFrequency { k: Vec<i64> },
    #[error("invalid Diophantine parameters: {0}")]
    InvalidFrequency(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Frequency vector together with its Diophantine constants `(gamma, sigma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frequency {
    pub omega: Vec<f64>,
    pub gamma: f64,
    pub sigma: f64,
}

impl Frequency {
    pub fn new(omega: Vec<f64>, gamma: f64, sigma: f64) -> Result<Self, FourierError> {
        if omega.is_empty() {
            return Err(FourierError::InvalidFrequency("empty frequency vector".into()));
        }
        if !(gamma > 0.0) {
            return Err(FourierError::InvalidFrequency(format!("gamma must be positive, got {gamma}")));
        }
        if !(sigma >= 1.0) {
            return Err(FourierError::InvalidFrequency(format!("sigma must be at least 1, got {sigma}")));
        }
        Ok(Self { omega, gamma, sigma })
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    /// Checks `|k.omega| >= gamma |k|_1^-sigma` for all `0 < |k|_1 <= k_check`.
    pub fn is_certified(&self, k_check: usize) -> Result<bool, FourierError> {
        let (best, _) = diophantine_margin(&self.omega, self.sigma, k_check)?;
        Ok(self.gamma <= best)
    }
}

/// Sizes of a regular grid on `T^n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    sizes: Vec<usize>,
}

impl Grid {
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.iter().all(|&s| s > 0), "grid sizes must be positive");
        Self { sizes }
    }

    /// Grid carrying products of maps truncated at `trunc`: at least twice
    /// the `2N + 1` nodes per axis, rounded up to a power of two.
    pub fn dealiased(trunc: &[usize]) -> Self {
        Self::new(trunc.iter().map(|&n| (4 * n + 2).next_power_of_two()).collect())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn dim(&self) -> usize {
        self.sizes.len()
    }

    pub fn len(&self) -> usize {
        self.sizes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest truncation representable without aliasing on this grid.
    pub fn max_trunc(&self) -> Vec<usize> {
        self.sizes.iter().map(|&g| (g - 1) / 2).collect()
    }

    pub fn node(&self, index: usize) -> Vec<f64> {
        let mut rem = index;
        let mut theta = vec![0.0; self.sizes.len()];
        for axis in (0..self.sizes.len()).rev() {
            let g = self.sizes[axis];
            theta[axis] = (rem % g) as f64 / g as f64;
            rem /= g;
        }
        theta
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }
}

/// Values of an `m`-vector map at the nodes of a [`Grid`], point-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSamples {
    pub grid: Grid,
    pub dim_range: usize,
    pub values: Vec<f64>,
}

impl GridSamples {
    pub fn new(grid: Grid, dim_range: usize, values: Vec<f64>) -> Result<Self, FourierError> {
        if values.len() != grid.len() * dim_range {
            return Err(FourierError::Shape(format!(
                "{} values for a grid of {} points with {} components",
                values.len(),
                grid.len(),
                dim_range
            )));
        }
        Ok(Self { grid, dim_range, values })
    }

    pub fn from_fn(grid: Grid, dim_range: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let mut values = Vec::with_capacity(grid.len() * dim_range);
        for i in 0..grid.len() {
            let v = f(&grid.node(i));
            assert_eq!(v.len(), dim_range, "sample function returned wrong length");
            values.extend_from_slice(&v);
        }
        Self { grid, dim_range, values }
    }

    pub fn point(&self, index: usize) -> &[f64] {
        &self.values[index * self.dim_range..(index + 1) * self.dim_range]
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Maximum over nodes of the max-norm of the value.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Trapezoid-rule mean of each component.
    pub fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim_range];
        for i in 0..self.len() {
            for (a, v) in acc.iter_mut().zip(self.point(i)) {
                *a += v;
            }
        }
        let n = self.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Report of [`FourierMap::strip_norm`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StripNorm {
    pub rho: f64,
    /// `sum_k max_i |c_{k,i}| exp(2 pi rho |k|_1)`, an upper bound of the sup on the strip.
    pub weighted: f64,
    /// Sup over the real grid, reported only for `rho = 0`.
    pub grid_sup: Option<f64>,
}

/// Truncated Fourier series of a real map `T^n -> R^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierMap {
    trunc: Vec<usize>,
    dim_range: usize,
    // comp * box_len + box_index, last axis fastest inside the box
    coeffs: Vec<Complex64>,
}

fn box_len(trunc: &[usize]) -> usize {
    trunc.iter().map(|&n| 2 * n + 1).product()
}

fn box_k(trunc: &[usize], index: usize) -> Vec<i64> {
    let mut rem = index;
    let mut k = vec![0i64; trunc.len()];
    for axis in (0..trunc.len()).rev() {
        let w = 2 * trunc[axis] + 1;
        k[axis] = (rem % w) as i64 - trunc[axis] as i64;
        rem /= w;
    }
    k
}

fn box_index(trunc: &[usize], k: &[i64]) -> Option<usize> {
    let mut idx = 0usize;
    for (axis, &kj) in k.iter().enumerate() {
        let n = trunc[axis] as i64;
        if kj.abs() > n {
            return None;
        }
        idx = idx * (2 * trunc[axis] + 1) + (kj + n) as usize;
    }
    Some(idx)
}

fn grid_index(sizes: &[usize], k: &[i64]) -> usize {
    let mut idx = 0usize;
    for (axis, &kj) in k.iter().enumerate() {
        let g = sizes[axis] as i64;
        idx = idx * sizes[axis] + kj.rem_euclid(g) as usize;
    }
    idx
}

/// In-place multidimensional FFT on a row-major array. Unnormalized in both directions.
fn fft_nd(data: &mut [Complex64], sizes: &[usize], direction: FftDirection) {
    let mut planner = FftPlanner::new();
    let total = data.len();
    let mut stride = 1usize;
    let mut line = Vec::new();
    for axis in (0..sizes.len()).rev() {
        let len = sizes[axis];
        if len > 1 {
            let fft = planner.plan_fft(len, direction);
            line.resize(len, Complex64::new(0.0, 0.0));
            let block = len * stride;
            for outer in (0..total).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    for (t, slot) in line.iter_mut().enumerate() {
                        *slot = data[base + t * stride];
                    }
                    fft.process(&mut line);
                    for (t, value) in line.iter().enumerate() {
                        data[base + t * stride] = *value;
                    }
                }
            }
        }
        stride *= len;
    }
}

fn l1(k: &[i64]) -> i64 {
    k.iter().map(|v| v.abs()).sum()
}

fn dot(k: &[i64], omega: &[f64]) -> f64 {
    k.iter().zip(omega).map(|(&a, &b)| a as f64 * b).sum()
}

impl FourierMap {
    pub fn zeros(trunc: &[usize], dim_range: usize) -> Self {
        Self {
            trunc: trunc.to_vec(),
            dim_range,
            coeffs: vec![Complex64::new(0.0, 0.0); box_len(trunc) * dim_range],
        }
    }

    pub fn constant(trunc: &[usize], value: &[f64]) -> Self {
        let mut f = Self::zeros(trunc, value.len());
        let zero = vec![0i64; trunc.len()];
        for (comp, &v) in value.iter().enumerate() {
            f.set_coeff(&zero, comp, Complex64::new(v, 0.0));
        }
        f
    }

    pub fn dim_domain(&self) -> usize {
        self.trunc.len()
    }

    pub fn dim_range(&self) -> usize {
        self.dim_range
    }

    pub fn trunc(&self) -> &[usize] {
        &self.trunc
    }

    pub fn box_len(&self) -> usize {
        box_len(&self.trunc)
    }

    /// Lattice vectors of the cutoff box in storage order.
    pub fn lattice(&self) -> Vec<Vec<i64>> {
        (0..self.box_len()).map(|i| box_k(&self.trunc, i)).collect()
    }

    pub fn coeff(&self, k: &[i64], comp: usize) -> Complex64 {
        match box_index(&self.trunc, k) {
            Some(i) => self.coeffs[comp * self.box_len() + i],
            None => Complex64::new(0.0, 0.0),
        }
    }

    /// Sets `c_k` for one component. The caller keeps the real symmetry.
    pub fn set_coeff(&mut self, k: &[i64], comp: usize, value: Complex64) {
        let len = self.box_len();
        let i = box_index(&self.trunc, k).expect("lattice vector outside the cutoff box");
        self.coeffs[comp * len + i] = value;
    }

    /// Sets `c_k` and `c_{-k} = conj(c_k)` together.
    pub fn set_real_mode(&mut self, k: &[i64], comp: usize, value: Complex64) {
        let neg: Vec<i64> = k.iter().map(|v| -v).collect();
        if neg == k {
            self.set_coeff(k, comp, Complex64::new(value.re, 0.0));
        } else {
            self.set_coeff(k, comp, value);
            self.set_coeff(&neg, comp, value.conj());
        }
    }

    fn comp_slice(&self, comp: usize) -> &[Complex64] {
        let len = self.box_len();
        &self.coeffs[comp * len..(comp + 1) * len]
    }

    /// Scalar map holding one component.
    pub fn component(&self, comp: usize) -> FourierMap {
        Self {
            trunc: self.trunc.clone(),
            dim_range: 1,
            coeffs: self.comp_slice(comp).to_vec(),
        }
    }

    /// Stacks maps with a common truncation into one vector-valued map.
    pub fn stack(parts: &[FourierMap]) -> Result<FourierMap, FourierError> {
        let first = parts
            .first()
            .ok_or_else(|| FourierError::Shape("cannot stack an empty list".into()))?;
        let mut coeffs = Vec::new();
        let mut dim_range = 0;
        for p in parts {
            if p.trunc != first.trunc {
                return Err(FourierError::Shape("stacked maps have different truncations".into()));
            }
            coeffs.extend_from_slice(&p.coeffs);
            dim_range += p.dim_range;
        }
        Ok(Self {
            trunc: first.trunc.clone(),
            dim_range,
            coeffs,
        })
    }

    /// Copy with a new cutoff box: modes outside are dropped, new modes are zero.
    pub fn with_trunc(&self, trunc: &[usize]) -> FourierMap {
        assert_eq!(trunc.len(), self.trunc.len(), "torus dimension mismatch");
        if trunc == self.trunc.as_slice() {
            return self.clone();
        }
        let mut out = Self::zeros(trunc, self.dim_range);
        let new_len = out.box_len();
        for i in 0..new_len {
            let k = box_k(trunc, i);
            if let Some(j) = box_index(&self.trunc, &k) {
                for comp in 0..self.dim_range {
                    out.coeffs[comp * new_len + i] = self.coeffs[comp * self.box_len() + j];
                }
            }
        }
        out
    }

    fn zip_with(&self, other: &FourierMap, f: impl Fn(Complex64, Complex64) -> Complex64) -> FourierMap {
        assert_eq!(self.dim_range, other.dim_range, "range dimension mismatch");
        let trunc: Vec<usize> = self.trunc.iter().zip(&other.trunc).map(|(a, b)| *a.max(b)).collect();
        let a = self.with_trunc(&trunc);
        let b = other.with_trunc(&trunc);
        FourierMap {
            trunc,
            dim_range: self.dim_range,
            coeffs: a.coeffs.iter().zip(&b.coeffs).map(|(x, y)| f(*x, *y)).collect(),
        }
    }

    pub fn add(&self, other: &FourierMap) -> FourierMap {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &FourierMap) -> FourierMap {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> FourierMap {
        FourierMap {
            trunc: self.trunc.clone(),
            dim_range: self.dim_range,
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
        }
    }

    /// Largest coefficient modulus over all modes and components.
    pub fn max_coeff(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |acc, c| acc.max(c.norm()))
    }

    /// Replaces `c_k` by `(c_k + conj(c_{-k})) / 2`.
    pub fn enforce_real_symmetry(&mut self) {
        let len = self.box_len();
        for comp in 0..self.dim_range {
            for i in 0..len {
                // the box is symmetric: -k sits at the mirrored index
                let j = len - 1 - i;
                if j < i {
                    continue;
                }
                let a = self.coeffs[comp * len + i];
                let b = self.coeffs[comp * len + j];
                let sym = (a + b.conj()) * 0.5;
                self.coeffs[comp * len + i] = sym;
                self.coeffs[comp * len + j] = sym.conj();
            }
        }
    }

    /// Interpolating trigonometric polynomial of grid samples.
    pub fn from_samples(samples: &GridSamples, trunc: &[usize]) -> Result<FourierMap, FourierError> {
        let sizes = samples.grid.sizes();
        if sizes.len() != trunc.len() {
            return Err(FourierError::Shape(format!(
                "grid has {} axes but truncation has {}",
                sizes.len(),
                trunc.len()
            )));
        }
        for (axis, (&g, &n)) in sizes.iter().zip(trunc).enumerate() {
            if g < 2 * n + 1 {
                return Err(FourierError::Truncation {
                    axis,
                    grid: g,
                    trunc: n,
                    need: 2 * n + 1,
                });
            }
        }
        let total = samples.len();
        let m = samples.dim_range;
        let mut out = FourierMap::zeros(trunc, m);
        let len = out.box_len();
        let lattice: Vec<Vec<i64>> = (0..len).map(|i| box_k(trunc, i)).collect();
        let mut buf = vec![Complex64::new(0.0, 0.0); total];
        for comp in 0..m {
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex64::new(samples.values[i * m + comp], 0.0);
            }
            fft_nd(&mut buf, sizes, FftDirection::Forward);
            for (i, k) in lattice.iter().enumerate() {
                out.coeffs[comp * len + i] = buf[grid_index(sizes, k)] / total as f64;
            }
        }
        out.enforce_real_symmetry();
        Ok(out)
    }

    /// Values of the trigonometric polynomial at the grid nodes.
    pub fn to_samples(&self, grid: &Grid) -> GridSamples {
        assert_eq!(grid.dim(), self.dim_domain(), "grid dimension mismatch");
        let sizes = grid.sizes();
        let total = grid.len();
        let m = self.dim_range;
        let len = self.box_len();
        let lattice = self.lattice();
        let mut values = vec![0.0; total * m];
        let mut buf = vec![Complex64::new(0.0, 0.0); total];
        for comp in 0..m {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (i, k) in lattice.iter().enumerate() {
                buf[grid_index(sizes, k)] += self.coeffs[comp * len + i];
            }
            fft_nd(&mut buf, sizes, FftDirection::Inverse);
            for (i, c) in buf.iter().enumerate() {
                values[i * m + comp] = c.re;
            }
        }
        GridSamples {
            grid: grid.clone(),
            dim_range: m,
            values,
        }
    }

    /// Pointwise evaluation at an arbitrary real `theta`.
    pub fn eval(&self, theta: &[f64]) -> Vec<f64> {
        assert_eq!(theta.len(), self.dim_domain(), "point dimension mismatch");
        let len = self.box_len();
        let phases: Vec<Complex64> = (0..len)
            .map(|i| {
                let k = box_k(&self.trunc, i);
                Complex64::from_polar(1.0, 2.0 * PI * k.iter().zip(theta).map(|(&a, &b)| a as f64 * b).sum::<f64>())
            })
            .collect();
        (0..self.dim_range)
            .map(|comp| {
                self.comp_slice(comp)
                    .iter()
                    .zip(&phases)
                    .map(|(c, p)| (c * p).re)
                    .sum()
            })
            .collect()
    }

    fn map_modes(&self, f: impl Fn(&[i64]) -> Complex64) -> FourierMap {
        let len = self.box_len();
        let factors: Vec<Complex64> = (0..len).map(|i| f(&box_k(&self.trunc, i))).collect();
        let mut out = self.clone();
        for comp in 0..self.dim_range {
            for (c, fac) in out.coeffs[comp * len..(comp + 1) * len].iter_mut().zip(&factors) {
                *c *= fac;
            }
        }
        out
    }

    /// Spectral `d/dtheta_j`: mode `k` scaled by `2 pi i k_j`.
    pub fn partial_derivative(&self, axis: usize) -> FourierMap {
        self.map_modes(|k| Complex64::new(0.0, 2.0 * PI * k[axis] as f64))
    }

    /// `omega . grad`: mode `k` scaled by `2 pi i (k . omega)`.
    pub fn directional_derivative(&self, omega: &[f64]) -> FourierMap {
        assert_eq!(omega.len(), self.dim_domain(), "frequency dimension mismatch");
        self.map_modes(|k| Complex64::new(0.0, 2.0 * PI * dot(k, omega)))
    }

    /// Translation `theta -> theta + tau`.
    pub fn shift(&self, tau: &[f64]) -> FourierMap {
        self.map_modes(|k| Complex64::from_polar(1.0, 2.0 * PI * k.iter().zip(tau).map(|(&a, &b)| a as f64 * b).sum::<f64>()))
    }

    /// Mean over `T^n`, i.e. the real part of `c_0`.
    pub fn average(&self) -> Vec<f64> {
        let zero = vec![0i64; self.dim_domain()];
        (0..self.dim_range).map(|comp| self.coeff(&zero, comp).re).collect()
    }

    /// Weighted coefficient norm `sum_k max_i |c_{k,i}| exp(2 pi rho |k|_1)`.
    pub fn weighted_norm(&self, rho: f64) -> Result<f64, FourierError> {
        if rho < 0.0 {
            return Err(FourierError::NegativeStrip(rho));
        }
        let max_order: usize = self.trunc.iter().sum();
        if 2.0 * PI * rho * max_order as f64 > MAX_WEIGHT_EXPONENT {
            return Err(FourierError::NormOverflow { rho, max_order });
        }
        let len = self.box_len();
        let mut total = 0.0;
        for i in 0..len {
            let k = box_k(&self.trunc, i);
            let amp = (0..self.dim_range)
                .map(|comp| self.coeffs[comp * len + i].norm())
                .fold(0.0, f64::max);
            if amp > 0.0 {
                total += amp * (2.0 * PI * rho * l1(&k) as f64).exp();
            }
        }
        Ok(total)
    }

    /// Sup over the real torus, sampled on the de-aliased grid.
    pub fn grid_sup_norm(&self) -> f64 {
        self.to_samples(&Grid::dealiased(&self.trunc)).sup_norm()
    }

    pub fn strip_norm(&self, rho: f64) -> Result<StripNorm, FourierError> {
        let weighted = self.weighted_norm(rho)?;
        let grid_sup = if rho == 0.0 { Some(self.grid_sup_norm()) } else { None };
        Ok(StripNorm { rho, weighted, grid_sup })
    }

    /// Zeros modes with `|c_k| < threshold * max |c|`; returns the discarded mass
    /// `sum_k max_i |c_{k,i}|` over the dropped modes.
    pub fn truncate_tail(&self, threshold: f64) -> (FourierMap, f64) {
        let cut = threshold * self.max_coeff();
        let len = self.box_len();
        let mut out = self.clone();
        let mut discarded = 0.0;
        for i in 0..len {
            let amp = (0..self.dim_range)
                .map(|comp| self.coeffs[comp * len + i].norm())
                .fold(0.0, f64::max);
            if amp > 0.0 && amp < cut {
                discarded += amp;
                for comp in 0..self.dim_range {
                    out.coeffs[comp * len + i] = Complex64::new(0.0, 0.0);
                }
            }
        }
        (out, discarded)
    }

    /// Solves `omega . grad v = h` with `<v> = 0` using the default tolerances.
    pub fn cohomological_solve(&self, freq: &Frequency) -> Result<FourierMap, FourierError> {
        self.cohomological_solve_with(freq, ZERO_AVERAGE_TOL, RESONANCE_FLOOR)
    }

    /// Mode-wise division `v_k = h_k / (2 pi i k.omega)` after checking that
    /// `|<h>| <= avg_tol * ||h||_0`. The mean of `h` is discarded.
    pub fn cohomological_solve_with(
        &self,
        freq: &Frequency,
        avg_tol: f64,
        resonance_floor: f64,
    ) -> Result<FourierMap, FourierError> {
        if freq.dim() != self.dim_domain() {
            return Err(FourierError::Shape(format!(
                "frequency has {} entries but the torus has dimension {}",
                freq.dim(),
                self.dim_domain()
            )));
        }
        let scale = self.weighted_norm(0.0)?;
        let tolerance = avg_tol * scale;
        let average = self.average().iter().fold(0.0, |a: f64, v| a.max(v.abs()));
        if average > tolerance {
            return Err(FourierError::NotSolvable { average, tolerance });
        }
        let len = self.box_len();
        let mut out = FourierMap::zeros(&self.trunc, self.dim_range);
        for i in 0..len {
            let k = box_k(&self.trunc, i);
            if k.iter().all(|&v| v == 0) {
                continue;
            }
            let kw = dot(&k, &freq.omega);
            let nonzero = (0..self.dim_range).any(|comp| self.coeffs[comp * len + i].norm() > 0.0);
            if !nonzero {
                continue;
            }
            if kw.abs() < resonance_floor {
                return Err(FourierError::Resonance {
                    k,
                    divisor: kw.abs(),
                    floor: resonance_floor,
                });
            }
            let divisor = Complex64::new(0.0, 2.0 * PI * kw);
            for comp in 0..self.dim_range {
                out.coeffs[comp * len + i] = self.coeffs[comp * len + i] / divisor;
            }
        }
        Ok(out)
    }
}

/// Constant of the small-divisor estimate for the `2 pi`-periodic torus:
/// `2^(n/2 - sigma - 1) 3^(n/2 + 1) sigma^(1/2) pi sqrt(Gamma(2 sigma))`.
pub fn russmann_mu(n: usize, sigma: f64) -> f64 {
    let half_n = n as f64 / 2.0;
    2f64.powf(half_n - sigma - 1.0)
        * 3f64.powf(half_n + 1.0)
        * sigma.sqrt()
        * PI
        * statrs::function::gamma::gamma(2.0 * sigma).sqrt()
}

/// Best Diophantine constant over the window `0 < |k|_1 <= k_check`:
/// `min |k.omega| |k|_1^sigma` together with a minimizing `k`.
pub fn diophantine_margin(omega: &[f64], sigma: f64, k_check: usize) -> Result<(f64, Vec<i64>), FourierError> {
    if k_check == 0 {
        return Err(FourierError::InvalidFrequency("k_check must be at least 1".into()));
    }
    let n = omega.len();
    let trunc = vec![k_check; n];
    let len = box_len(&trunc);
    let mut best = f64::INFINITY;
    let mut worst = vec![0i64; n];
    for i in 0..len {
        let k = box_k(&trunc, i);
        let order = l1(&k);
        if order == 0 || order as usize > k_check {
            continue;
        }
        // one representative of each +/- pair: first nonzero entry positive
        if k.iter().find(|&&v| v != 0).is_some_and(|&v| v < 0) {
            continue;
        }
        let kw = dot(&k, omega);
        let scale: f64 = k.iter().zip(omega).map(|(&a, &b)| (a as f64 * b).abs()).sum();
        if kw.abs() <= 4.0 * f64::EPSILON * scale {
            return Err(FourierError::ResonantFrequency { k });
        }
        let value = kw.abs() * (order as f64).powf(sigma);
        if value < best {
            best = value;
            worst = k;
        }
    }
    Ok((best, worst))
}
