#![allow(dead_code)]

use std::f64::consts::PI;
use std::sync::Arc;

use kamtori::fourier::FourierMap;
use kamtori::geometry::Embedding;
use kamtori::poisson::registry::{build_system, lookup, Params};
use kamtori::poisson::PoissonSystem;
use kamtori::{Frequency, TorusState};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn golden() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

pub fn params(pairs: &[(&str, f64)]) -> Params {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

pub fn system(name: &str, pairs: &[(&str, f64)]) -> Arc<dyn PoissonSystem> {
    let entry = lookup(name).unwrap();
    build_system(name, &entry.resolve(&params(pairs)).unwrap()).unwrap()
}

/// Frequency used for each built-in system in the tests.
pub fn frequency_for(name: &str) -> Frequency {
    match name {
        "coupled4d" => Frequency::new(vec![golden(), 2f64.sqrt() - 1.0], 0.05, 2.0).unwrap(),
        "lotka_volterra" => Frequency::new(vec![0.15], 0.01, 1.0).unwrap(),
        _ => Frequency::new(vec![golden()], 0.1, 1.0).unwrap(),
    }
}

pub fn default_torus(name: &str, pairs: &[(&str, f64)], freq: &Frequency, trunc: &[usize]) -> Embedding {
    let entry = lookup(name).unwrap();
    let p = entry.resolve(&params(pairs)).unwrap();
    (entry.initial_torus)(&p, &freq.omega, trunc).unwrap()
}

pub fn state(name: &str, pairs: &[(&str, f64)], trunc: &[usize]) -> TorusState {
    let freq = frequency_for(name);
    let emb = default_torus(name, pairs, &freq, trunc);
    TorusState::new(system(name, pairs), emb, freq, 0.0).unwrap()
}

/// Random real trigonometric polynomial with coefficients of size `amp exp(-|k|_1)`.
pub fn random_map(rng: &mut ChaCha8Rng, trunc: &[usize], dim: usize, amp: f64, zero_mean: bool) -> FourierMap {
    let mut f = FourierMap::zeros(trunc, dim);
    for k in f.lattice() {
        let positive = k.iter().find(|v| **v != 0).is_none_or(|v| *v > 0);
        if !positive {
            continue;
        }
        let order: i64 = k.iter().map(|v| v.abs()).sum();
        if order == 0 && zero_mean {
            continue;
        }
        for c in 0..dim {
            let size = amp * (-(order as f64)).exp();
            let re = size * (2.0 * rng.random::<f64>() - 1.0);
            let im = if order == 0 { 0.0 } else { size * (2.0 * rng.random::<f64>() - 1.0) };
            f.set_real_mode(&k, c, Complex64::new(re, im));
        }
    }
    f
}

/// Adds a random analytic perturbation of size `amp` to `base`.
pub fn perturbed(base: &Embedding, rng: &mut ChaCha8Rng, amp: f64) -> Embedding {
    let delta = random_map(rng, base.trunc(), base.phase_dim(), amp, false);
    base.add_periodic(&delta)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense collocation solve of `A Delta - omega Delta' = -e` for `n = 1` in
/// the real cosine/sine basis up to the cutoff of `K`, by SVD least squares on
/// the de-aliased grid.
pub fn dense_collocation_step(state: &TorusState) -> FourierMap {
    assert_eq!(state.torus_dim(), 1);
    let trunc = state.embedding().trunc()[0];
    let m = state.embedding().phase_dim();
    let omega = state.frequency().omega[0];
    let per = 2 * trunc + 1;
    let nodes = state.nodes();
    let rows = nodes.len() * m;
    let cols = per * m;
    let mut mat = DMatrix::zeros(rows, cols);
    let mut rhs = DVector::zeros(rows);
    for (i, node) in nodes.iter().enumerate() {
        let t = node[0];
        let a = &state.point_fields()[i].a;
        let mut basis = vec![(1.0, 0.0); per];
        for k in 1..=trunc {
            let w = 2.0 * PI * k as f64;
            let (s, c) = (w * t).sin_cos();
            basis[2 * k - 1] = (c, -w * s);
            basis[2 * k] = (s, w * c);
        }
        for r in 0..m {
            let row = i * m + r;
            rhs[row] = -state.e_grid()[i][r];
            for c in 0..m {
                for (j, (v, dv)) in basis.iter().enumerate() {
                    let mut entry = a[(r, c)] * v;
                    if r == c {
                        entry -= omega * dv;
                    }
                    mat[(row, c * per + j)] = entry;
                }
            }
        }
    }
    let svd = mat.svd(true, true);
    let tol = 1e-13 * svd.singular_values.max();
    let sol = svd.solve(&rhs, tol).unwrap();
    let mut delta = FourierMap::zeros(&[trunc], m);
    for c in 0..m {
        let base = c * per;
        delta.set_coeff(&[0], c, Complex64::new(sol[base], 0.0));
        for k in 1..=trunc {
            let (a, b) = (sol[base + 2 * k - 1], sol[base + 2 * k]);
            delta.set_real_mode(&[k as i64], c, Complex64::new(a / 2.0, -b / 2.0));
        }
    }
    delta
}

/// `max / min` of a positive sequence; `None` when every entry is zero.
pub fn spread(values: &[f64]) -> Option<f64> {
    if values.iter().all(|v| *v == 0.0) {
        return None;
    }
    let max = values.iter().cloned().fold(0.0, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    Some(if min > 0.0 { max / min } else { f64::INFINITY })
}
