//! One linearized Kolmogorov step.
//!
//! A Hamiltonian in the form
//! `H = m + omega.r + r.S(theta).r / 2 + eps h(r, theta) + g(r, theta)`, with
//! `g = O(r^3)`, is conjugated by the symplectic map generated by
//! `A(theta, R) = u(theta) + alpha.theta + (theta + v(theta)).R`, i.e.
//!
//! ```text
//! phi = theta + v(theta),   r = R + du(theta) + alpha + dv(theta)^T R,
//! ```
//!
//! where `u`, `alpha`, `v` cancel the angle dependence of the constant and
//! linear parts to first order in `eps`. The new Hamiltonian is again in
//! Kolmogorov form with a perturbation of size `O(eps^2)`.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cohomology::{self, MEAN_TOLERANCE};
use crate::diophantine::FrequencyVector;
use crate::error::{KamError, Result};
use crate::matrix::{operator_norm, AngleMatrix};
use crate::series::{AnalyticityDomain, FourierTaylorSeries, SeriesShape, Term};

use num_complex::Complex64;

/// Neumann and fixed-point iterations stop once a correction drops below this.
pub const NEUMANN_TOLERANCE: f64 = 1e-15;
pub const INVERSE_TOLERANCE: f64 = 1e-13;
const MAX_SERIES_ITERATIONS: usize = 200;

/// `H = m + omega.r + r.S(theta).r / 2 + eps h + g` on a domain `A_{rho,Delta}`.
#[derive(Clone, Debug, PartialEq)]
pub struct KolmogorovForm {
    energy_offset: f64,
    omega: FrequencyVector,
    quadratic: AngleMatrix,
    epsilon: f64,
    h: FourierTaylorSeries,
    g: FourierTaylorSeries,
    domain: AnalyticityDomain,
}

impl KolmogorovForm {
    /// Validates and packages the pieces.
    ///
    /// `quadratic` must be symmetric, `g` must start at degree 3 in the
    /// actions and `h` must have majorant at most 1 on `domain`.
    pub fn new(
        energy_offset: f64,
        omega: FrequencyVector,
        quadratic: AngleMatrix,
        epsilon: f64,
        h: FourierTaylorSeries,
        g: FourierTaylorSeries,
        domain: AnalyticityDomain,
    ) -> Result<Self> {
        let d = omega.dim();
        for (what, found) in [("S", quadratic.dim()), ("h", h.dim()), ("g", g.dim())] {
            if found != d {
                debug!("dimension mismatch in {what}");
                return Err(KamError::DimensionMismatch { expected: d, found });
            }
        }
        if !energy_offset.is_finite() {
            return Err(KamError::InvalidArgument(
                "energy offset must be finite".into(),
            ));
        }
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(KamError::InvalidArgument(format!(
                "epsilon must be finite and >= 0, got {epsilon}"
            )));
        }
        if h.taylor_degree() < 2 {
            return Err(KamError::InvalidArgument(
                "taylor degree must be at least 2".into(),
            ));
        }
        let asym = quadratic.symmetry_defect()?;
        if asym > 1e-12 * quadratic.max_abs().max(1.0) {
            return Err(KamError::InvalidArgument(format!(
                "S is not symmetric (defect {asym:e})"
            )));
        }
        if !g.degree_range(0, 2).is_zero() {
            return Err(KamError::InvalidArgument(
                "g must only contain terms of degree >= 3 in the actions".into(),
            ));
        }
        let h_norm = h.majorant(&domain)?;
        if h_norm > 1.0 + 1e-12 {
            return Err(KamError::InvalidArgument(format!(
                "h must have majorant <= 1, found {h_norm}"
            )));
        }
        Ok(Self {
            energy_offset,
            omega,
            quadratic,
            epsilon,
            h,
            g,
            domain,
        })
    }

    /// Builds the form of `f0(r) + eps f1(r, theta)`.
    ///
    /// `f0` must not depend on the angles and its gradient at `r = 0` must
    /// be `omega`. The perturbation is normalized so that `h` has unit
    /// majorant; the form's `eps` is then `eps * |f1|`.
    pub fn from_near_integrable(
        f0: &FourierTaylorSeries,
        f1: &FourierTaylorSeries,
        epsilon: f64,
        omega: FrequencyVector,
        domain: AnalyticityDomain,
    ) -> Result<Self> {
        let d = omega.dim();
        if f0.dim() != d || f1.dim() != d {
            return Err(KamError::DimensionMismatch {
                expected: d,
                found: f0.dim().min(f1.dim()),
            });
        }
        if f0.terms().any(|t| t.k.iter().any(|&k| k != 0)) {
            return Err(KamError::InvalidArgument(
                "f0 must not depend on the angles".into(),
            ));
        }
        let shape = SeriesShape::new(
            d,
            f0.fourier_cutoff().max(f1.fourier_cutoff()),
            f0.taylor_degree().max(f1.taylor_degree()),
        )?;
        let zero_m = vec![0u32; d];
        for (i, w) in omega.omega().iter().enumerate() {
            let grad = f0.coeff(&vec![0; d], &unit(d, i, 1)).re;
            if (grad - w).abs() > 1e-12 * w.abs().max(1.0) {
                return Err(KamError::InvalidArgument(format!(
                    "omega[{i}] = {w} does not match df0/dr_{i}(0) = {grad}"
                )));
            }
        }
        let mut hessian = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let mut m = zero_m.clone();
                m[i] += 1;
                m[j] += 1;
                let c = f0.coeff(&vec![0; d], &m).re;
                hessian[(i, j)] = if i == j { 2.0 * c } else { c };
            }
        }
        let quadratic = AngleMatrix::from_constant(shape, &hessian);
        let g = f0.degree_range(3, u32::MAX).retruncate(shape)?.0;
        let size = f1.majorant(&domain)?;
        let (h, eps) = if size == 0.0 || epsilon == 0.0 {
            (FourierTaylorSeries::zero(shape), 0.0)
        } else {
            (f1.scale(1.0 / size).retruncate(shape)?.0, epsilon * size)
        };
        Self::new(f0.mean_value().re, omega, quadratic, eps, h, g, domain)
    }

    pub fn energy_offset(&self) -> f64 {
        self.energy_offset
    }

    pub fn omega(&self) -> &FrequencyVector {
        &self.omega
    }

    pub fn quadratic(&self) -> &AngleMatrix {
        &self.quadratic
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn h(&self) -> &FourierTaylorSeries {
        &self.h
    }

    pub fn g(&self) -> &FourierTaylorSeries {
        &self.g
    }

    pub fn domain(&self) -> AnalyticityDomain {
        self.domain
    }

    pub fn dim(&self) -> usize {
        self.omega.dim()
    }

    pub fn shape(&self) -> SeriesShape {
        self.h.shape()
    }

    /// The whole Hamiltonian as a single series.
    pub fn full_series(&self) -> Result<FourierTaylorSeries> {
        self.integrable_part()?
            .add(&self.h.scale(self.epsilon))?
            .add(&self.g)
    }

    /// `m + omega.r + r.S(theta).r / 2`.
    pub fn integrable_part(&self) -> Result<FourierTaylorSeries> {
        let d = self.dim();
        let shape = self.shape();
        let mut total = FourierTaylorSeries::constant(shape, self.energy_offset);
        for (i, w) in self.omega.omega().iter().enumerate() {
            total = total.add(&FourierTaylorSeries::action(shape, i)?.scale(*w))?;
        }
        for i in 0..d {
            for j in 0..d {
                let mut m = vec![0u32; d];
                m[i] += 1;
                m[j] += 1;
                let mono = monomial(shape, &m)?;
                total = total.add(&self.quadratic.get(i, j).multiply(&mono)?.scale(0.5))?;
            }
        }
        Ok(total)
    }

    /// Pointwise value at a real point, summed piece by piece.
    pub fn evaluate(&self, r: &[f64], theta: &[f64]) -> Result<f64> {
        let d = self.dim();
        if r.len() != d || theta.len() != d {
            return Err(KamError::DimensionMismatch {
                expected: d,
                found: r.len().min(theta.len()),
            });
        }
        let s = self.quadratic.evaluate(theta)?;
        let rv = DVector::from_column_slice(r);
        let linear: f64 = self.omega.omega().iter().zip(r).map(|(w, x)| w * x).sum();
        let quad = 0.5 * rv.dot(&(&s * &rv));
        Ok(self.energy_offset
            + linear
            + quad
            + self.epsilon * self.h.evaluate_real(r, theta)?
            + self.g.evaluate_real(r, theta)?)
    }

    /// Copy with a different domain (same coefficients).
    pub fn with_domain(&self, domain: AnalyticityDomain) -> Result<Self> {
        Self::new(
            self.energy_offset,
            self.omega.clone(),
            self.quadratic.clone(),
            self.epsilon,
            self.h.clone(),
            self.g.clone(),
            domain,
        )
    }
}

fn unit(d: usize, axis: usize, power: u32) -> Vec<u32> {
    let mut m = vec![0; d];
    m[axis] = power;
    m
}

/// `r^m` as a series.
pub fn monomial(shape: SeriesShape, m: &[u32]) -> Result<FourierTaylorSeries> {
    FourierTaylorSeries::from_terms(
        shape,
        [Term {
            k: vec![0; shape.dim],
            m: m.to_vec(),
            coeff: Complex64::new(1.0, 0.0),
        }],
    )
}

/// The reference twist `S_hat`, its inverse and the size bookkeeping of the
/// quadratic scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwistData {
    pub s_hat: DMatrix<f64>,
    pub s_tilde: DMatrix<f64>,
    /// Matrices within `beta` of `S_hat` are invertible with inverse within
    /// 1 of `S_tilde`.
    pub beta: f64,
    /// Majorant of `S - S_hat` on the form's domain.
    pub eta: f64,
    /// `|m| + |S| + |g| + |S_hat| + |S_tilde|`.
    pub gamma: f64,
}

impl TwistData {
    /// Uses the angular mean of `S` as the reference twist.
    pub fn for_form(form: &KolmogorovForm) -> Result<Self> {
        Self::new(form.quadratic.average(), form)
    }

    pub fn new(s_hat: DMatrix<f64>, form: &KolmogorovForm) -> Result<Self> {
        let d = form.dim();
        if s_hat.nrows() != d || s_hat.ncols() != d {
            return Err(KamError::DimensionMismatch {
                expected: d,
                found: s_hat.nrows(),
            });
        }
        if s_hat.iter().any(|x| !x.is_finite()) {
            return Err(KamError::SingularTwist(
                "reference twist has non-finite entries".into(),
            ));
        }
        let scale = operator_norm(&s_hat).max(f64::MIN_POSITIVE);
        if operator_norm(&(&s_hat - s_hat.transpose())) > 1e-12 * scale {
            return Err(KamError::SingularTwist(
                "reference twist is not symmetric".into(),
            ));
        }
        let s_tilde = s_hat.clone().try_inverse().ok_or_else(|| {
            KamError::SingularTwist(format!("reference twist {s_hat:?} is not invertible"))
        })?;
        let residual = operator_norm(&(&s_hat * &s_tilde - DMatrix::identity(d, d)));
        if !(residual <= 1e-12) {
            return Err(KamError::SingularTwist(format!(
                "reference twist is numerically singular (|S S^-1 - I| = {residual:e})"
            )));
        }
        let inv_norm = operator_norm(&s_tilde);
        let beta = 1.0 / (inv_norm * (1.0 + inv_norm));
        let mut twist = Self {
            s_hat,
            s_tilde,
            beta,
            eta: 0.0,
            gamma: 0.0,
        };
        twist.measure(form)?;
        Ok(twist)
    }

    /// Same reference twist, sizes re-measured on `form`.
    pub fn update(&self, form: &KolmogorovForm) -> Result<Self> {
        let mut twist = self.clone();
        twist.measure(form)?;
        Ok(twist)
    }

    fn measure(&mut self, form: &KolmogorovForm) -> Result<()> {
        let shape = form.quadratic.get(0, 0).shape();
        let deviation = form
            .quadratic
            .sub(&AngleMatrix::from_constant(shape, &self.s_hat))?;
        self.eta = deviation.majorant(&form.domain)?;
        self.gamma = form.energy_offset.abs()
            + form.quadratic.majorant(&form.domain)?
            + form.g.majorant(&form.domain)?
            + operator_norm(&self.s_hat)
            + operator_norm(&self.s_tilde);
        Ok(())
    }
}

/// Low-order Taylor data of the perturbation at `r = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Jets {
    /// `h(0, theta)`
    pub a: FourierTaylorSeries,
    /// `dh/dr(0, theta)`
    pub b: Vec<FourierTaylorSeries>,
    /// `d^2 h/dr^2(0, theta)`
    pub c: AngleMatrix,
}

/// Reads the jets off the stored Taylor coefficients.
pub fn extract_jets(form: &KolmogorovForm) -> Result<Jets> {
    let d = form.dim();
    let h = &form.h;
    let a = h.taylor_coefficient(&vec![0; d])?;
    let b = (0..d)
        .map(|i| h.taylor_coefficient(&unit(d, i, 1)))
        .collect::<Result<Vec<_>>>()?;
    let mut c = AngleMatrix::zero(h.shape());
    for i in 0..d {
        for j in 0..d {
            let mut m = vec![0; d];
            m[i] += 1;
            m[j] += 1;
            let coeff = h.taylor_coefficient(&m)?;
            c.set(i, j, if i == j { coeff.scale(2.0) } else { coeff });
        }
    }
    Ok(Jets { a, b, c })
}

/// The generating data `(u, v, alpha)` and its angle derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSolution {
    pub u: FourierTaylorSeries,
    pub v: Vec<FourierTaylorSeries>,
    pub alpha: Vec<f64>,
    /// `du/dtheta_i`
    pub du: Vec<FourierTaylorSeries>,
    /// Transposed Jacobian: entry `(i, j)` is `dv_j/dtheta_i`.
    pub dv_t: AngleMatrix,
}

/// Majorants of the defects in the three generator equations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorResiduals {
    pub u_equation: f64,
    pub v_equation: f64,
    pub alpha_equation: f64,
}

impl GeneratorSolution {
    pub fn is_zero(&self) -> bool {
        self.u.is_zero()
            && self.v.iter().all(FourierTaylorSeries::is_zero)
            && self.alpha.iter().all(|&a| a == 0.0)
    }

    /// `du + alpha`, the action shift at `R = 0`.
    pub fn base_shift(&self) -> Vec<FourierTaylorSeries> {
        self.du
            .iter()
            .zip(&self.alpha)
            .map(|(d, a)| d.add_constant(*a))
            .collect()
    }

    /// `Delta R = du + alpha + dv^T R` as series in `(R, theta)`.
    pub fn action_shift(&self, shape: SeriesShape) -> Result<Vec<FourierTaylorSeries>> {
        let d = self.alpha.len();
        let actions = (0..d)
            .map(|j| FourierTaylorSeries::action(shape, j))
            .collect::<Result<Vec<_>>>()?;
        let linear = self.dv_t.mul_vec(&actions)?;
        self.base_shift()
            .iter()
            .zip(linear)
            .map(|(b, l)| b.add(&l))
            .collect()
    }

    pub fn residuals(
        &self,
        form: &KolmogorovForm,
        domain: &AnalyticityDomain,
    ) -> Result<GeneratorResiduals> {
        let d = form.dim();
        let eps = form.epsilon;
        let w = form.omega.omega();
        let jets = extract_jets(form)?;
        let u_defect = self
            .u
            .lie_derivative(w)?
            .add(&jets.a.oscillating_part().scale(eps))?;
        let s_shift = form.quadratic.mul_vec(&self.base_shift())?;
        let mut v_eq: f64 = 0.0;
        for i in 0..d {
            let defect = self.v[i]
                .lie_derivative(w)?
                .add(&s_shift[i])?
                .add(&jets.b[i].scale(eps))?;
            v_eq = v_eq.max(defect.majorant(domain)?);
        }
        let s_du = form.quadratic.mul_vec(&self.du)?;
        let avg = form.quadratic.average();
        let alpha = DVector::from_column_slice(&self.alpha);
        let lhs = &avg * &alpha;
        let mut alpha_eq: f64 = 0.0;
        for i in 0..d {
            let rhs = -(s_du[i].mean_value().re + eps * jets.b[i].mean_value().re);
            alpha_eq = alpha_eq.max((lhs[i] - rhs).abs());
        }
        Ok(GeneratorResiduals {
            u_equation: u_defect.majorant(domain)?,
            v_equation: v_eq,
            alpha_equation: alpha_eq,
        })
    }
}

/// Solves the three generator equations in the order `u`, `alpha`, `v`:
///
/// ```text
/// L u = -eps (a - <a>)
/// <S> alpha = -<S du + eps b>
/// L v = -S (du + alpha) - eps b
/// ```
pub fn solve_generator(form: &KolmogorovForm, twist: &TwistData) -> Result<GeneratorSolution> {
    let d = form.dim();
    let eps = form.epsilon;
    let shape = form.shape();
    if eps == 0.0 {
        return Ok(GeneratorSolution {
            u: FourierTaylorSeries::zero(shape),
            v: vec![FourierTaylorSeries::zero(shape); d],
            alpha: vec![0.0; d],
            du: vec![FourierTaylorSeries::zero(shape); d],
            dv_t: AngleMatrix::zero(shape),
        });
    }
    let jets = extract_jets(form)?;
    let u = cohomology::solve(&jets.a.oscillating_part().scale(-eps), &form.omega)?;
    let du = (0..d)
        .map(|i| u.partial_theta(i))
        .collect::<Result<Vec<_>>>()?;

    let s_avg = form.quadratic.average();
    let gap = operator_norm(&(&s_avg - &twist.s_hat));
    if !(gap < twist.beta) {
        return Err(KamError::SingularTwist(format!(
            "mean of S is {gap:e} away from the reference twist (radius {:e})",
            twist.beta
        )));
    }
    let s_du = form.quadratic.mul_vec(&du)?;
    let rhs = DVector::from_fn(d, |i, _| {
        -(s_du[i].mean_value().re + eps * jets.b[i].mean_value().re)
    });
    let alpha = s_avg
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| KamError::SingularTwist("mean of S is not invertible".into()))?;
    let alpha: Vec<f64> = alpha.iter().copied().collect();

    let shift: Vec<FourierTaylorSeries> = du
        .iter()
        .zip(&alpha)
        .map(|(s, a)| s.add_constant(*a))
        .collect();
    let s_shift = form.quadratic.mul_vec(&shift)?;
    let mut v = Vec::with_capacity(d);
    for i in 0..d {
        let rhs = s_shift[i].add(&jets.b[i].scale(eps))?.neg();
        let mean = rhs.mean_value().norm();
        if mean > MEAN_TOLERANCE * eps.max(1.0) {
            return Err(KamError::NonZeroMean { magnitude: mean });
        }
        v.push(cohomology::solve(&rhs.oscillating_part(), &form.omega)?);
    }
    let mut dv_t = AngleMatrix::zero(shape);
    for i in 0..d {
        for (j, vj) in v.iter().enumerate() {
            dv_t.set(i, j, vj.partial_theta(i)?);
        }
    }
    Ok(GeneratorSolution {
        u,
        v,
        alpha,
        du,
        dv_t,
    })
}

/// Sizes of a step map on its domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapDeviation {
    /// `|phi - Id|`: majorant of `v` and of `R - r`.
    pub forward: f64,
    /// `|phi^{-1} - Id|`: majorant of `w` and of `r - R` in the new variables.
    pub inverse: f64,
}

/// The symplectic step map `(r, theta) -> (R, phi)` with its inverse data.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMap {
    generator: GeneratorSolution,
    /// `(I + dv^T)^{-1}` as a Neumann series.
    inverse_factor: AngleMatrix,
    /// `theta = phi + w(phi)` inverts `phi = theta + v(theta)`.
    w: Vec<FourierTaylorSeries>,
    domain: AnalyticityDomain,
    deviation: MapDeviation,
    neumann_terms: usize,
    inverse_iterations: usize,
}

/// Packages the map generated by `gen` on `domain`.
pub fn build_map(gen: &GeneratorSolution, domain: AnalyticityDomain) -> Result<StepMap> {
    let d = gen.alpha.len();
    let shape = gen.u.shape();
    let dv_norm = gen
        .dv_t
        .majorant(&domain)?
        .max(gen.dv_t.transpose().majorant(&domain)?);
    if !(dv_norm < 1.0) {
        return Err(KamError::NonContraction { dv_norm });
    }
    let identity = AngleMatrix::identity(shape);
    let minus = gen.dv_t.scale(-1.0);
    let mut term = identity.clone();
    let mut factor = identity.clone();
    let mut neumann_terms = 0;
    if !gen.dv_t.entries().iter().all(FourierTaylorSeries::is_zero) {
        loop {
            term = term.mul(&minus)?;
            factor = factor.add(&term)?;
            neumann_terms += 1;
            if term.majorant(&domain)? < NEUMANN_TOLERANCE {
                break;
            }
            if neumann_terms >= MAX_SERIES_ITERATIONS {
                return Err(KamError::NonContraction { dv_norm });
            }
        }
    }

    let mut w: Vec<FourierTaylorSeries> = gen.v.iter().map(FourierTaylorSeries::neg).collect();
    let mut inverse_iterations = 0;
    if gen.v.iter().any(|vi| !vi.is_zero()) {
        loop {
            let next = gen
                .v
                .iter()
                .map(|vi| vi.compose_angle(&w).map(|c| c.neg()))
                .collect::<Result<Vec<_>>>()?;
            inverse_iterations += 1;
            let mut change: f64 = 0.0;
            for (a, b) in next.iter().zip(&w) {
                change = change.max(a.sub(b)?.majorant(&domain)?);
            }
            w = next;
            if change < INVERSE_TOLERANCE {
                break;
            }
            if inverse_iterations >= MAX_SERIES_ITERATIONS {
                return Err(KamError::NonContraction { dv_norm });
            }
        }
    }

    let actions = (0..d)
        .map(|j| FourierTaylorSeries::action(shape, j))
        .collect::<Result<Vec<_>>>()?;
    let mut forward: f64 = 0.0;
    let mut inverse: f64 = 0.0;
    for j in 0..d {
        forward = forward.max(gen.v[j].majorant(&domain)?);
        inverse = inverse.max(w[j].majorant(&domain)?);
    }
    let base = gen.base_shift();
    let moved: Vec<FourierTaylorSeries> = actions
        .iter()
        .zip(&base)
        .map(|(r, b)| r.sub(b))
        .collect::<Result<_>>()?;
    let new_actions = factor.mul_vec(&moved)?;
    for (nr, r) in new_actions.iter().zip(&actions) {
        forward = forward.max(nr.sub(r)?.majorant(&domain)?);
    }
    for shift in gen.action_shift(shape)? {
        inverse = inverse.max(shift.compose_angle(&w)?.majorant(&domain)?);
    }
    Ok(StepMap {
        generator: gen.clone(),
        inverse_factor: factor,
        w,
        domain,
        deviation: MapDeviation { forward, inverse },
        neumann_terms,
        inverse_iterations,
    })
}

impl StepMap {
    pub fn generator(&self) -> &GeneratorSolution {
        &self.generator
    }

    pub fn inverse_factor(&self) -> &AngleMatrix {
        &self.inverse_factor
    }

    pub fn angle_inverse(&self) -> &[FourierTaylorSeries] {
        &self.w
    }

    pub fn domain(&self) -> AnalyticityDomain {
        self.domain
    }

    pub fn deviation(&self) -> MapDeviation {
        self.deviation
    }

    pub fn neumann_terms(&self) -> usize {
        self.neumann_terms
    }

    pub fn inverse_iterations(&self) -> usize {
        self.inverse_iterations
    }

    fn dim(&self) -> usize {
        self.generator.alpha.len()
    }

    /// `(du(theta), dv(theta)^T)` at a real angle.
    fn jets_at(&self, theta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.dim();
        let zero = vec![0.0; d];
        let du = self
            .generator
            .u
            .evaluate_with_gradient(&zero, theta)?
            .d_theta;
        let mut dv_t = DMatrix::zeros(d, d);
        for j in 0..d {
            let grad = self.generator.v[j]
                .evaluate_with_gradient(&zero, theta)?
                .d_theta;
            for i in 0..d {
                dv_t[(i, j)] = grad[i];
            }
        }
        Ok((DVector::from_vec(du), dv_t))
    }

    /// `(R, phi)` from `(r, theta)` by pointwise linear algebra.
    pub fn forward(&self, r: &[f64], theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.dim();
        let (du, dv_t) = self.jets_at(theta)?;
        let alpha = DVector::from_column_slice(&self.generator.alpha);
        let rhs = DVector::from_column_slice(r) - alpha - du;
        let lhs = DMatrix::identity(d, d) + dv_t;
        let big_r = lhs
            .lu()
            .solve(&rhs)
            .ok_or(KamError::NonContraction { dv_norm: f64::NAN })?;
        let zero = vec![0.0; d];
        let phi = (0..d)
            .map(|j| Ok(theta[j] + self.generator.v[j].evaluate_real(&zero, theta)?))
            .collect::<Result<Vec<_>>>()?;
        Ok((big_r.iter().copied().collect(), phi))
    }

    /// Angle `theta` with `theta + v(theta) = phi`, by Newton iteration.
    pub fn invert_angle(&self, phi: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let zero = vec![0.0; d];
        let mut theta: Vec<f64> = (0..d)
            .map(|j| Ok(phi[j] - self.generator.v[j].evaluate_real(&zero, phi)?))
            .collect::<Result<_>>()?;
        for _ in 0..50 {
            let mut residual = DVector::zeros(d);
            let mut jac = DMatrix::identity(d, d);
            for j in 0..d {
                let p = self.generator.v[j].evaluate_with_gradient(&zero, &theta)?;
                residual[j] = theta[j] + p.value - phi[j];
                for i in 0..d {
                    jac[(j, i)] += p.d_theta[i];
                }
            }
            let step = jac
                .lu()
                .solve(&residual)
                .ok_or(KamError::NonContraction { dv_norm: f64::NAN })?;
            for j in 0..d {
                theta[j] -= step[j];
            }
            if step.amax() < 1e-15 * (1.0 + phi.iter().fold(0.0f64, |a, x| a.max(x.abs()))) {
                return Ok(theta);
            }
        }
        Ok(theta)
    }

    /// `(r, theta)` from `(R, phi)`.
    pub fn inverse(&self, big_r: &[f64], phi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let theta = self.invert_angle(phi)?;
        let (du, dv_t) = self.jets_at(&theta)?;
        let rv = DVector::from_column_slice(big_r);
        let alpha = DVector::from_column_slice(&self.generator.alpha);
        let r = &rv + du + alpha + dv_t * &rv;
        Ok((r.iter().copied().collect(), theta))
    }
}

/// What a pullback measured along the way.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PullbackDiagnostics {
    /// l1 mass dropped by the Fourier truncation.
    pub truncation_tail: f64,
    /// `eps_new / eps^2`; zero when `eps = 0`.
    pub quadratic_ratio: f64,
}

/// Result of a pullback: the new form on the shrunk domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Pullback {
    pub form: KolmogorovForm,
    pub diagnostics: PullbackDiagnostics,
}

/// Expresses `H o phi^{-1}` in Kolmogorov form on `A_{rho - delta, Delta - delta}`.
///
/// `H(R + Delta R, theta)` is computed exactly in the actions (the shift is
/// affine in `R`), re-expressed in the new angle through `w`, and split by
/// action degree: degree 0 and 1 beyond `m_new + omega.R` form the new
/// perturbation, degree 2 the new `S`, degree 3 and up the new `g`.
pub fn pullback(form: &KolmogorovForm, map: &StepMap, delta: f64) -> Result<Pullback> {
    let d = form.dim();
    let new_domain = form.domain.shrink(delta)?;
    let (substituted, tail_sub) = shifted_hamiltonian(form, map.generator())?;
    let shape = substituted.shape();
    let (composed, tail_comp) = substituted.compose_angle_with_tail(map.angle_inverse())?;
    let composed = composed.symmetrize();
    let truncation_tail = tail_sub + tail_comp;

    let energy = composed.mean_value().re;
    let mut remainder = composed.degree_range(0, 1).add_constant(-energy);
    for (j, w) in form.omega.omega().iter().enumerate() {
        remainder = remainder.sub(&FourierTaylorSeries::action(shape, j)?.scale(*w))?;
    }
    let mut quadratic = AngleMatrix::zero(shape);
    for i in 0..d {
        for j in i..d {
            let mut m = vec![0u32; d];
            m[i] += 1;
            m[j] += 1;
            let coeff = composed.taylor_coefficient(&m)?;
            if i == j {
                quadratic.set(i, i, coeff.scale(2.0));
            } else {
                quadratic.set(i, j, coeff.clone());
                quadratic.set(j, i, coeff);
            }
        }
    }
    let g = composed.degree_range(3, u32::MAX);
    let epsilon = if remainder.is_zero() {
        0.0
    } else {
        remainder.majorant(&new_domain)?
    };
    let h = if epsilon == 0.0 {
        FourierTaylorSeries::zero(shape)
    } else {
        remainder.scale(1.0 / epsilon)
    };
    let eps2 = form.epsilon * form.epsilon;
    // Tails at the rounding level of an O(1) Hamiltonian are not worth a warning.
    if eps2 > 0.0 && truncation_tail > (1e-10 * eps2).max(f64::EPSILON) {
        warn!("pullback truncation discarded {truncation_tail:e} (eps^2 = {eps2:e})");
    }
    let quadratic_ratio = if eps2 > 0.0 { epsilon / eps2 } else { 0.0 };
    let new_form = KolmogorovForm::new(
        energy,
        form.omega.clone(),
        quadratic,
        epsilon,
        h,
        g,
        new_domain,
    )?;
    Ok(Pullback {
        form: new_form,
        diagnostics: PullbackDiagnostics {
            truncation_tail,
            quadratic_ratio,
        },
    })
}

/// `H(R + Delta R, theta)`, exact in the actions.
///
/// The unshifted part `m + omega.R + R.S.R / 2` is kept out of the
/// collocation grids; only the `O(eps)` corrections are sampled, so
/// rounding noise scales with the perturbation and not with `H`.
fn shifted_hamiltonian(
    form: &KolmogorovForm,
    gen: &GeneratorSolution,
) -> Result<(FourierTaylorSeries, f64)> {
    let d = form.dim();
    let shape = form.shape();
    let actions = (0..d)
        .map(|j| FourierTaylorSeries::action(shape, j))
        .collect::<Result<Vec<_>>>()?;
    if gen.is_zero() {
        return Ok((form.full_series()?, 0.0));
    }
    let mut total = form.integrable_part()?;
    let shift = gen.action_shift(shape)?;
    let moved = shift
        .iter()
        .zip(&actions)
        .map(|(s, r)| s.add(r))
        .collect::<Result<Vec<_>>>()?;
    let mut tail = 0.0;
    let (eh, t) = form
        .h
        .scale(form.epsilon)
        .substitute_actions_with_tail(&moved)?;
    tail += t;
    let (g, t) = form.g.substitute_actions_with_tail(&moved)?;
    tail += t;
    total = total.add(&eh)?.add(&g)?;
    let s_shift = form.quadratic.mul_vec(&shift)?;
    for j in 0..d {
        let (cross, t1) = actions[j]
            .linear_combination(1.0, &shift[j], 0.5)?
            .multiply_with_tail(&s_shift[j])?;
        tail += t1;
        total = total
            .add(&cross)?
            .add(&shift[j].scale(form.omega.omega()[j]))?;
    }
    Ok((total, tail))
}

/// Everything produced by one full step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub generator_residuals: GeneratorResiduals,
    pub map: StepMap,
    pub pullback: Pullback,
    /// Majorant of `Delta R` on the shrunk domain.
    pub shift_norm: f64,
    /// Majorant of `dv` on the shrunk domain.
    pub dv_norm: f64,
}

/// Solve, build, check and pull back with analyticity loss `delta`.
///
/// The action shift must stay below `delta / 2` on the shrunk domain so
/// that `R + Delta R` remains inside the domain of the current form.
pub fn kolmogorov_step(
    form: &KolmogorovForm,
    twist: &TwistData,
    delta: f64,
) -> Result<StepOutcome> {
    let domain = form.domain;
    if !(delta > 0.0 && delta < domain.rho.min(domain.delta_strip)) {
        return Err(KamError::InvalidArgument(format!(
            "loss delta = {delta} must lie in (0, min(rho, Delta)) = (0, {})",
            domain.rho.min(domain.delta_strip)
        )));
    }
    let shrunk = domain.shrink(delta)?;
    let gen = solve_generator(form, twist)?;
    let generator_residuals = gen.residuals(form, &shrunk)?;
    let dv_norm = gen
        .dv_t
        .majorant(&shrunk)?
        .max(gen.dv_t.transpose().majorant(&shrunk)?);
    let mut shift_norm: f64 = 0.0;
    for s in gen.action_shift(form.shape())? {
        shift_norm = shift_norm.max(s.majorant(&shrunk)?);
    }
    let limit = 0.5 * delta;
    if shift_norm > limit {
        return Err(KamError::ShiftTooLarge {
            shift: shift_norm,
            limit,
        });
    }
    let map = build_map(
        &gen,
        AnalyticityDomain::new(domain.rho, domain.delta_strip - delta)?,
    )?;
    let pullback = pullback(form, &map, delta)?;
    Ok(StepOutcome {
        generator_residuals,
        map,
        pullback,
        shift_norm,
        dv_norm,
    })
}
