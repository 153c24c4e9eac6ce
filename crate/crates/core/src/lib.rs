//! Constructive Kolmogorov–Arnold–Moser iteration on truncated
//! Fourier–Taylor series.
//!
//! Given `H(r, theta) = m + omega.r + r.S(theta).r / 2 + eps h + g` with a
//! Diophantine `omega` and a non-degenerate twist, the crate builds a
//! near-identity symplectic change of variables that conjugates `H` to
//! `omega.r + O(r^2)`, step by step with a quadratically convergent scheme,
//! and checks the result against independent pointwise oracles.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cohomology;
pub mod diophantine;
pub mod error;
mod grid;
pub mod iteration;
pub mod matrix;
pub mod series;
pub mod step;
pub mod verify;

pub use error::{KamError, Result};
pub use series::{AnalyticityDomain, FourierTaylorSeries, SeriesShape};
