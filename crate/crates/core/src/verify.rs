//! Pointwise checks of a computed conjugacy.
//!
//! Nothing here composes series: the Hamiltonian and the map are only
//! evaluated at points, derivatives come from finite differences and the
//! dynamics from a fixed-step Runge-Kutta integrator.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::iteration::ComposedMap;
use crate::series::{AnalyticityDomain, FourierTaylorSeries};
use crate::step::KolmogorovForm;

/// A change of variables `(R, phi) -> (r, theta)` evaluated pointwise.
pub trait PhaseMap {
    fn dim(&self) -> usize;
    fn apply(&self, big_r: &[f64], phi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

impl PhaseMap for ComposedMap {
    fn dim(&self) -> usize {
        ComposedMap::dim(self)
    }

    fn apply(&self, big_r: &[f64], phi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        ComposedMap::apply(self, big_r, phi)
    }
}

/// The original Hamiltonian as a single series, evaluated by direct
/// summation.
#[derive(Clone, Debug)]
pub struct PointHamiltonian {
    series: FourierTaylorSeries,
}

impl PointHamiltonian {
    pub fn new(form: &KolmogorovForm) -> Result<Self> {
        Ok(Self {
            series: form.full_series()?,
        })
    }

    pub fn dim(&self) -> usize {
        self.series.dim()
    }

    pub fn value(&self, r: &[f64], theta: &[f64]) -> Result<f64> {
        self.series.evaluate_real(r, theta)
    }

    /// `(dH/dr, dH/dtheta)`.
    pub fn gradient(&self, r: &[f64], theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.series.evaluate_with_gradient(r, theta)?;
        Ok((p.d_r, p.d_theta))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyResidual {
    /// `max |d(H o psi)/dR (0, phi) - omega|` over the grid.
    pub freq_err: f64,
    /// Oscillation of `H o psi (0, phi)` over the grid.
    pub angle_dep_err: f64,
}

/// Angles of a uniform grid with `per_axis` points on each axis.
fn angle_grid(dim: usize, per_axis: usize) -> Vec<Vec<f64>> {
    let total = per_axis.pow(dim as u32);
    (0..total)
        .map(|mut idx| {
            (0..dim)
                .map(|_| {
                    let i = idx % per_axis;
                    idx /= per_axis;
                    2.0 * PI * i as f64 / per_axis as f64
                })
                .collect()
        })
        .collect()
}

/// Checks `H o psi = const + omega.R + O(R^2)` on a grid of `per_axis^d`
/// angles. `step` is the finite-difference step in `R`; one Richardson
/// extrapolation removes the leading error of the central difference.
pub fn conjugacy_residual(
    hamiltonian: &PointHamiltonian,
    map: &dyn PhaseMap,
    omega: &[f64],
    per_axis: usize,
    step: f64,
) -> Result<ConjugacyResidual> {
    let d = hamiltonian.dim();
    if map.dim() != d || omega.len() != d {
        return Err(KamError::DimensionMismatch {
            expected: d,
            found: map.dim().min(omega.len()),
        });
    }
    if per_axis == 0 || !(step > 0.0) {
        return Err(KamError::InvalidArgument(
            "grid size and step must be positive".into(),
        ));
    }
    let composed = |big_r: &[f64], phi: &[f64]| -> Result<f64> {
        let (r, theta) = map.apply(big_r, phi)?;
        hamiltonian.value(&r, &theta)
    };
    let zero = vec![0.0; d];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut freq_err: f64 = 0.0;
    for phi in angle_grid(d, per_axis) {
        let base = composed(&zero, &phi)?;
        lo = lo.min(base);
        hi = hi.max(base);
        for j in 0..d {
            let central = |h: f64| -> Result<f64> {
                let mut plus = zero.clone();
                let mut minus = zero.clone();
                plus[j] = h;
                minus[j] = -h;
                Ok((composed(&plus, &phi)? - composed(&minus, &phi)?) / (2.0 * h))
            };
            let derivative = (4.0 * central(0.5 * step)? - central(step)?) / 3.0;
            freq_err = freq_err.max((derivative - omega[j]).abs());
        }
    }
    Ok(ConjugacyResidual {
        freq_err,
        angle_dep_err: hi - lo,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowOptions {
    pub horizon: f64,
    pub dt: f64,
    /// Measure the distance to the torus every `stride` steps.
    pub stride: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            horizon: 100.0,
            dt: 1e-3,
            stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub max_distance: f64,
    /// Least-squares slope of the torus angle along the trajectory.
    pub rotation: Vec<f64>,
    /// `max_j |rotation_j - omega_j| / |omega|_inf`.
    pub rotation_error: f64,
    pub samples: usize,
}

fn wrap(x: f64) -> f64 {
    x - 2.0 * PI * (x / (2.0 * PI)).round()
}

/// Residual `psi(0, phi) - z` with wrapped angle differences.
fn torus_residual(
    map: &dyn PhaseMap,
    phi: &[f64],
    r: &[f64],
    theta: &[f64],
) -> Result<DVector<f64>> {
    let d = phi.len();
    let (tr, tt) = map.apply(&vec![0.0; d], phi)?;
    Ok(DVector::from_iterator(
        2 * d,
        (0..d)
            .map(|j| tr[j] - r[j])
            .chain((0..d).map(|j| wrap(tt[j] - theta[j]))),
    ))
}

/// Gauss-Newton for the torus angle nearest to `(r, theta)`; returns the
/// angle and the distance.
fn nearest_angle(
    map: &dyn PhaseMap,
    seed: &[f64],
    r: &[f64],
    theta: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let d = seed.len();
    let h = 1e-7;
    let mut phi = seed.to_vec();
    let mut res = torus_residual(map, &phi, r, theta)?;
    for _ in 0..30 {
        let mut jac = DMatrix::zeros(2 * d, d);
        for j in 0..d {
            let mut plus = phi.clone();
            let mut minus = phi.clone();
            plus[j] += h;
            minus[j] -= h;
            let col = (torus_residual(map, &plus, r, theta)?
                - torus_residual(map, &minus, r, theta)?)
                / (2.0 * h);
            jac.set_column(j, &col);
        }
        let normal = jac.transpose() * &jac;
        let rhs = jac.transpose() * &res;
        let update = normal.lu().solve(&rhs).ok_or_else(|| {
            KamError::InvalidArgument("torus parameterization is degenerate".into())
        })?;
        for j in 0..d {
            phi[j] -= update[j];
        }
        res = torus_residual(map, &phi, r, theta)?;
        if update.amax() < 1e-14 {
            break;
        }
    }
    Ok((phi, res.norm()))
}

/// Integrates Hamilton's equations from `psi(0, theta0)` with RK4 and
/// tracks the distance to the torus `{psi(0, phi)}`. The nearest angle is
/// sought from the linear-flow seed `theta0 + omega t`.
pub fn flow_invariance(
    hamiltonian: &PointHamiltonian,
    map: &dyn PhaseMap,
    omega: &[f64],
    theta0: &[f64],
    options: &FlowOptions,
) -> Result<FlowReport> {
    let d = hamiltonian.dim();
    if map.dim() != d || omega.len() != d || theta0.len() != d {
        return Err(KamError::DimensionMismatch {
            expected: d,
            found: map.dim().min(omega.len()).min(theta0.len()),
        });
    }
    if !(options.dt > 0.0) || !(options.horizon >= 0.0) || options.stride == 0 {
        return Err(KamError::InvalidArgument(
            "flow needs dt > 0, horizon >= 0 and stride >= 1".into(),
        ));
    }
    let field = |state: &[f64]| -> Result<Vec<f64>> {
        let (gr, gt) = hamiltonian.gradient(&state[..d], &state[d..])?;
        Ok(gt.iter().map(|x| -x).chain(gr).collect())
    };
    let (r0, t0) = map.apply(&vec![0.0; d], theta0)?;
    let mut state: Vec<f64> = r0.into_iter().chain(t0).collect();
    let steps = (options.horizon / options.dt).round() as usize;
    let mut times = vec![0.0];
    let mut angles = vec![theta0.to_vec()];
    let mut max_distance: f64 = 0.0;
    for n in 1..=steps {
        let k1 = field(&state)?;
        let k2 = field(&axpy(&state, 0.5 * options.dt, &k1))?;
        let k3 = field(&axpy(&state, 0.5 * options.dt, &k2))?;
        let k4 = field(&axpy(&state, options.dt, &k3))?;
        for i in 0..2 * d {
            state[i] += options.dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let t = n as f64 * options.dt;
        if state.iter().any(|x| !x.is_finite()) {
            return Err(KamError::IntegratorBlowUp { time: t });
        }
        if n % options.stride == 0 || n == steps {
            let seed: Vec<f64> = (0..d).map(|j| theta0[j] + omega[j] * t).collect();
            let (phi, dist) = nearest_angle(map, &seed, &state[..d], &state[d..])?;
            max_distance = max_distance.max(dist);
            times.push(t);
            angles.push(phi);
        }
    }
    let rotation: Vec<f64> = (0..d)
        .map(|j| fit_slope(&times, &angles.iter().map(|a| a[j]).collect::<Vec<_>>()))
        .collect();
    let scale = omega.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    let rotation_error = if times.len() < 2 {
        0.0
    } else {
        rotation
            .iter()
            .zip(omega)
            .map(|(a, w)| (a - w).abs())
            .fold(0.0, f64::max)
            / scale
    };
    Ok(FlowReport {
        max_distance,
        rotation,
        rotation_error,
        samples: times.len(),
    })
}

fn axpy(x: &[f64], a: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(x, y)| x + a * y).collect()
}

fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Largest entry of `J^T Omega J - Omega` over `samples` random points of
/// the real domain `|R| <= rho`, with `J` from central differences.
pub fn symplectic_check(
    map: &dyn PhaseMap,
    domain: &AnalyticityDomain,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let d = map.dim();
    let n = 2 * d;
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut omega = DMatrix::zeros(n, n);
    for i in 0..d {
        omega[(i, d + i)] = 1.0;
        omega[(d + i, i)] = -1.0;
    }
    let eval = |z: &[f64]| -> Result<Vec<f64>> {
        let (r, t) = map.apply(&z[..d], &z[d..])?;
        Ok(r.into_iter().chain(t).collect())
    };
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let z: Vec<f64> = (0..n)
            .map(|i| {
                if i < d {
                    rng.gen_range(-domain.rho..=domain.rho)
                } else {
                    rng.gen_range(0.0..2.0 * PI)
                }
            })
            .collect();
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut plus = z.clone();
            let mut minus = z.clone();
            plus[j] += h;
            minus[j] -= h;
            let (fp, fm) = (eval(&plus)?, eval(&minus)?);
            for i in 0..n {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let defect = jac.transpose() * &omega * &jac - &omega;
        worst = worst.max(defect.amax());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Translation(Vec<f64>, Vec<f64>);

    impl PhaseMap for Translation {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn apply(&self, r: &[f64], t: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((axpy(r, 1.0, &self.0), axpy(t, 1.0, &self.1)))
        }
    }

    #[test]
    fn translations_are_symplectic() {
        let dom = AnalyticityDomain::new(0.3, 0.3).unwrap();
        let id = Translation(vec![0.0; 2], vec![0.0; 2]);
        assert!(symplectic_check(&id, &dom, 20, 1).unwrap() < 1e-9);
        let shift = Translation(vec![0.1, -0.2], vec![1.0, 2.0]);
        assert!(symplectic_check(&shift, &dom, 20, 2).unwrap() < 1e-9);
    }

    #[test]
    fn grid_covers_torus() {
        let g = angle_grid(2, 4);
        assert_eq!(g.len(), 16);
        assert_eq!(g[5], vec![PI / 2.0, PI / 2.0]);
        assert!((wrap(2.0 * PI + 0.1) - 0.1).abs() < 1e-15);
        assert!((fit_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]) - 2.0).abs() < 1e-15);
    }
}
