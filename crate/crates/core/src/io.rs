//! Serializable torus coefficient files.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fourier::FourierMap;
use crate::geometry::Embedding;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TorusFileError {
    #[error("unsupported format version {found}, expected {FORMAT_VERSION}")]
    Version { found: u32 },
    #[error("malformed torus file: {0}")]
    Shape(String),
}

/// One Fourier coefficient `[k, re, im]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient(pub Vec<i64>, pub f64, pub f64);

/// `K(theta) = W theta + sum_k c_k exp(2 pi i k.theta)` on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusFile {
    pub format_version: u32,
    /// Torus dimension.
    pub n: usize,
    /// Phase-space dimension.
    pub m: usize,
    pub cutoffs: Vec<usize>,
    pub omega: Vec<f64>,
    /// Rows of the `m x n` winding matrix.
    pub winding: Vec<Vec<f64>>,
    /// Nonzero coefficients, one list per phase-space component.
    pub coefficients: Vec<Vec<Coefficient>>,
}

impl TorusFile {
    pub fn from_embedding(emb: &Embedding, omega: &[f64]) -> Self {
        let p = emb.periodic();
        let w = emb.winding();
        let lattice = p.lattice();
        let coefficients = (0..p.dim_range())
            .map(|c| {
                lattice
                    .iter()
                    .filter_map(|k| {
                        let v = p.coeff(k, c);
                        (v.re != 0.0 || v.im != 0.0).then(|| Coefficient(k.clone(), v.re, v.im))
                    })
                    .collect()
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            n: emb.torus_dim(),
            m: emb.phase_dim(),
            cutoffs: emb.trunc().to_vec(),
            omega: omega.to_vec(),
            winding: (0..w.nrows()).map(|r| w.row(r).iter().copied().collect()).collect(),
            coefficients,
        }
    }

    pub fn to_embedding(&self) -> Result<Embedding, TorusFileError> {
        if self.format_version != FORMAT_VERSION {
            return Err(TorusFileError::Version { found: self.format_version });
        }
        let shape = |msg: String| Err(TorusFileError::Shape(msg));
        if self.cutoffs.len() != self.n || self.omega.len() != self.n {
            return shape(format!("n = {} but {} cutoffs and {} frequencies", self.n, self.cutoffs.len(), self.omega.len()));
        }
        if self.winding.len() != self.m || self.winding.iter().any(|r| r.len() != self.n) {
            return shape(format!("winding must be {} x {}", self.m, self.n));
        }
        if self.coefficients.len() != self.m {
            return shape(format!("expected {} coefficient lists, found {}", self.m, self.coefficients.len()));
        }
        let mut p = FourierMap::zeros(&self.cutoffs, self.m);
        for (c, list) in self.coefficients.iter().enumerate() {
            for Coefficient(k, re, im) in list {
                if k.len() != self.n || k.iter().zip(&self.cutoffs).any(|(a, &t)| a.unsigned_abs() as usize > t) {
                    return shape(format!("mode {k:?} of component {c} lies outside the cutoff box"));
                }
                p.set_coeff(k, c, Complex64::new(*re, *im));
            }
        }
        let w = DMatrix::from_fn(self.m, self.n, |r, c| self.winding[r][c]);
        Embedding::new(w, p).map_err(|e| TorusFileError::Shape(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::standard_winding;

    #[test]
    fn round_trip_is_exact() {
        let emb = Embedding::from_fn(standard_winding(2), &[3, 2], |t| {
            let s = (2.0 * std::f64::consts::PI * (t[0] + 2.0 * t[1])).sin();
            vec![0.1 * s, 0.2 * s * s, 0.3, -0.01 * s]
        });
        let file = TorusFile::from_embedding(&emb, &[0.6, 0.7]);
        let back = file.to_embedding().unwrap();
        assert_eq!(back, emb);
    }

    #[test]
    fn malformed_files_rejected() {
        let emb = Embedding::flat(&[0.6], &[4]);
        let mut file = TorusFile::from_embedding(&emb, &[0.6]);
        file.format_version = 9;
        assert!(matches!(file.to_embedding(), Err(TorusFileError::Version { found: 9 })));
        let mut file = TorusFile::from_embedding(&emb, &[0.6]);
        file.coefficients[1].push(Coefficient(vec![7], 1.0, 0.0));
        assert!(file.to_embedding().is_err());
    }
}
