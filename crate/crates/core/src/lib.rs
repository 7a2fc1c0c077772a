//! Quasi-periodic invariant tori of Poisson systems `z' = B(z) grad H(z)`.
//!
//! The crate computes a parameterization `K: T^n -> R^2n` of an invariant torus
//! with prescribed Diophantine frequency by a quasi-Newton iteration on the
//! invariance equation, and checks every intermediate identity a posteriori.
//!
//! * [`fourier`]: truncated Fourier series, grid transforms, small-divisor solver.
//! * [`norms`]: max-norms and operator norms on matrices.
//! * [`poisson`]: systems `(H, B)`, structure checks and built-in examples.
//! * [`geometry`]: error, metric, Lagrangian defect, torsion and frame of an embedding.
//! * [`newton`]: one reduced quasi-Newton step.
//! * [`solver`]: outer iteration, convergence monitor and smallness certificate.
//! * [`dynamics`]: flow integration, conjugacy and phase alignment.
//! * [`io`]: serializable coefficient files.

pub mod dynamics;
pub mod fourier;
pub mod geometry;
pub mod io;
pub mod newton;
pub mod norms;
pub mod poisson;
pub mod solver;

pub use fourier::{FourierMap, Frequency, Grid, GridSamples};
pub use geometry::{Embedding, TorusState};
pub use poisson::PoissonSystem;
