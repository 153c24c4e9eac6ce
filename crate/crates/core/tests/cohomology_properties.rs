use kam_core::cohomology::{lemma_bound, lemma_integral, solve};
use kam_core::diophantine::certify;
use kam_core::{AnalyticityDomain, FourierTaylorSeries, SeriesShape};
use num_complex::Complex64;
use proptest::prelude::*;

const GOLDEN: f64 = 1.618_033_988_749_895;

fn zero_mean_series(dim: usize, cutoff: u32) -> impl Strategy<Value = FourierTaylorSeries> {
    let k = cutoff as i32;
    prop::collection::vec(
        (
            prop::collection::vec(-k..=k, dim),
            prop::collection::vec(0u32..=1, dim),
            -1.0f64..1.0,
            -1.0f64..1.0,
        ),
        1..12,
    )
    .prop_map(move |terms| {
        let shape = SeriesShape::new(dim, cutoff, 2).unwrap();
        let mut g = FourierTaylorSeries::zero(shape);
        for (k, m, re, im) in terms {
            if k.iter().any(|&x| x != 0) {
                g.add_term(&k, &m, Complex64::new(re, im)).unwrap();
            }
        }
        g
    })
}

/// `int |x|_inf^tau exp(-|x|_inf) dx` by the midpoint rule on `[0, L]^d`
/// times the `2^d` symmetric copies.
fn quadrature(tau: f64, dim: usize) -> f64 {
    let n = 3000;
    let l = 60.0;
    let h = l / n as f64;
    let f = |s: f64| s.powf(tau) * (-s).exp();
    let mut total = 0.0;
    if dim == 1 {
        for i in 0..n {
            total += f((i as f64 + 0.5) * h) * h;
        }
        return 2.0 * total;
    }
    for i in 0..n {
        let x = (i as f64 + 0.5) * h;
        for j in 0..n {
            let y = (j as f64 + 0.5) * h;
            total += f(x.max(y)) * h * h;
        }
    }
    4.0 * total
}

#[test]
fn lemma_integral_matches_quadrature() {
    for &(tau, d) in &[(0.5, 1), (1.0, 1), (1.0, 2), (2.0, 2), (1.5, 2)] {
        let exact = lemma_integral(tau, d);
        let numeric = quadrature(tau, d);
        assert!(
            (exact - numeric).abs() < 1e-3 * exact,
            "tau={tau} d={d}: {exact} vs {numeric}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solution_inverts_the_lie_derivative(
        (dim, cutoff, g) in (1usize..=2, 1u32..=16).prop_flat_map(|(d, k)| (Just(d), Just(k), zero_mean_series(d, k)))
    ) {
        let omega: Vec<f64> = if dim == 1 { vec![1.0] } else { vec![1.0, GOLDEN] };
        let w = certify(&omega, dim as f64, cutoff).unwrap();
        let f = solve(&g, &w).unwrap();
        let dom = AnalyticityDomain::new(1.0, 0.5).unwrap();
        prop_assert!(f.average().is_zero());
        let residual = f.lie_derivative(&omega).unwrap().sub(&g).unwrap();
        prop_assert!(residual.majorant(&dom).unwrap() <= 1e-12 * g.majorant(&dom).unwrap());
    }

    #[test]
    fn solution_is_linear(g in zero_mean_series(2, 6), h in zero_mean_series(2, 6), a in -3.0f64..3.0) {
        let w = certify(&[1.0, GOLDEN], 2.0, 6).unwrap();
        let lhs = solve(&g.linear_combination(a, &h, 1.0).unwrap(), &w).unwrap();
        let rhs = solve(&g, &w).unwrap().linear_combination(a, &solve(&h, &w).unwrap(), 1.0).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12 * (1.0 + lhs.max_abs()));
    }

    #[test]
    fn majorant_respects_the_lemma(g in zero_mean_series(2, 8), delta in prop::sample::select(vec![0.1, 0.2, 0.4])) {
        let w = certify(&[1.0, GOLDEN], 1.0, 8).unwrap();
        let cert = w.certificate().unwrap().clone();
        let f = solve(&g, &w).unwrap();
        let outer = AnalyticityDomain::new(1.0, 0.5).unwrap();
        let inner = outer.with_strip(0.5 - delta);
        let ratio = f.majorant(&inner).unwrap() / g.majorant(&outer).unwrap();
        prop_assert!(ratio <= lemma_bound(delta, cert.c, cert.tau, 2).unwrap());
    }
}
