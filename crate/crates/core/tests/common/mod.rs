#![allow(dead_code)]

use kam_core::diophantine::certify;
use kam_core::matrix::AngleMatrix;
use kam_core::step::KolmogorovForm;
use kam_core::{AnalyticityDomain, FourierTaylorSeries, SeriesShape};

pub const GOLDEN: f64 = 1.618_033_988_749_895;

/// `r + r^2/2 + eps cos(theta)` with `K = 16`, `M = 4` on `A_{1,1}`.
pub fn pendulum(eps: f64) -> KolmogorovForm {
    near_integrable(&[1.0], &[1], eps, 16, 4)
}

/// `omega.r + |r|^2/2 + eps cos(theta_1 + theta_2)`, golden frequency.
pub fn golden2d(eps: f64) -> KolmogorovForm {
    near_integrable(&[1.0, GOLDEN], &[1, 1], eps, 16, 4)
}

pub fn near_integrable(omega: &[f64], mode: &[i32], eps: f64, k: u32, m: u32) -> KolmogorovForm {
    let d = omega.len();
    let shape = SeriesShape::new(d, k, m).unwrap();
    let freq = certify(omega, d as f64, k).unwrap();
    let mut f0 = FourierTaylorSeries::zero(shape);
    for (i, w) in omega.iter().enumerate() {
        let mut e = vec![0u32; d];
        e[i] = 1;
        f0.add_term(&vec![0; d], &e, (*w).into()).unwrap();
        e[i] = 2;
        f0.add_term(&vec![0; d], &e, 0.5.into()).unwrap();
    }
    let f1 = FourierTaylorSeries::cosine(shape, mode, 1.0).unwrap();
    let domain = AnalyticityDomain::new(1.0, 1.0).unwrap();
    KolmogorovForm::from_near_integrable(&f0, &f1, eps, freq, domain).unwrap()
}

pub fn identity_form_matrix(shape: SeriesShape) -> AngleMatrix {
    AngleMatrix::identity(shape)
}
