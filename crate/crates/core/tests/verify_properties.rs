mod common;

use common::{golden2d, pendulum};
use kam_core::diophantine::certify;
use kam_core::iteration::ComposedMap;
use kam_core::step::KolmogorovForm;
use kam_core::verify::{
    conjugacy_residual, flow_invariance, symplectic_check, FlowOptions, PointHamiltonian,
};
use kam_core::{AnalyticityDomain, FourierTaylorSeries, SeriesShape};

fn identity(f: &KolmogorovForm) -> ComposedMap {
    ComposedMap::identity(
        f.shape(),
        AnalyticityDomain::new(0.375, 0.375).unwrap(),
        f.domain(),
    )
}

/// `r + r^2/2 + r^5`: integrable, with a fifth derivative that the
/// extrapolated difference quotient sees at order `h^4`.
fn quintic() -> KolmogorovForm {
    let shape = SeriesShape::new(1, 4, 5).unwrap();
    let mut f0 = FourierTaylorSeries::zero(shape);
    f0.add_term(&[0], &[1], 1.0.into()).unwrap();
    f0.add_term(&[0], &[2], 0.5.into()).unwrap();
    f0.add_term(&[0], &[5], 1.0.into()).unwrap();
    let f1 = FourierTaylorSeries::zero(shape);
    let omega = certify(&[1.0], 1.0, 4).unwrap();
    KolmogorovForm::from_near_integrable(
        &f0,
        &f1,
        0.0,
        omega,
        AnalyticityDomain::new(1.0, 1.0).unwrap(),
    )
    .unwrap()
}

#[test]
fn identity_conjugates_an_integrable_hamiltonian() {
    for f in [pendulum(0.0), golden2d(0.0)] {
        let ham = PointHamiltonian::new(&f).unwrap();
        let map = identity(&f);
        let omega = f.omega().omega().to_vec();
        let res = conjugacy_residual(&ham, &map, &omega, 8, 1e-5).unwrap();
        assert!(res.freq_err < 1e-10, "{res:?}");
        assert_eq!(res.angle_dep_err, 0.0);
        let opts = FlowOptions {
            horizon: 10.0,
            ..Default::default()
        };
        let flow = flow_invariance(&ham, &map, &omega, &vec![0.3; f.dim()], &opts).unwrap();
        assert!(flow.max_distance < 1e-12, "{flow:?}");
        assert!(flow.rotation_error < 1e-12, "{flow:?}");
    }
}

#[test]
fn difference_quotient_error_shrinks_with_the_step() {
    let f = quintic();
    let ham = PointHamiltonian::new(&f).unwrap();
    let map = identity(&f);
    // error of (4 D(h/2) - D(h)) / 3 for r^5 at r = 0 is h^4 / 4
    let coarse = conjugacy_residual(&ham, &map, &[1.0], 4, 0.1)
        .unwrap()
        .freq_err;
    let fine = conjugacy_residual(&ham, &map, &[1.0], 4, 0.05)
        .unwrap()
        .freq_err;
    assert!((coarse - 0.1f64.powi(4) / 4.0).abs() < 1e-12, "{coarse:e}");
    assert!(coarse / fine >= 3.0, "{coarse:e} -> {fine:e}");
}

#[test]
fn identity_is_symplectic() {
    let f = golden2d(0.0);
    let map = identity(&f);
    let defect = symplectic_check(&map, &map.domain(), 50, 3).unwrap();
    assert!(defect < 1e-9, "{defect:e}");
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let f = pendulum(0.0);
    let ham = PointHamiltonian::new(&f).unwrap();
    let map = identity(&golden2d(0.0));
    assert!(conjugacy_residual(&ham, &map, &[1.0], 8, 1e-5).is_err());
    assert!(conjugacy_residual(&ham, &identity(&f), &[1.0], 0, 1e-5).is_err());
}
