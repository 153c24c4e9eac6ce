//! Truncated Fourier–Taylor series in `d` actions and `d` angles.
//!
//! A series is the finite sum `sum c_{k,m} r^m exp(i k.theta)` with
//! `|k|_inf <= K` and `|m|_1 <= M`. Coefficients are stored sparsely and
//! anything below `DROP_RELATIVE` times the largest coefficient is dropped.
//!
//! Strip norms are majorized by the weighted coefficient sum
//! `sum |c_{k,m}| rho^{|m|} exp(Delta |k|_1)`; the Fourier index enters
//! through its l1 norm, which bounds the sup norm on `A_{rho,Delta}` for
//! every choice of norm on the index lattice.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::grid::{smooth_size, total_degree, AngleGrid, Exponent, Mode, MonomialBasis};

/// Largest supported number of degrees of freedom.
pub const MAX_DIM: usize = 4;

/// Coefficients below this fraction of the largest one are not stored.
pub const DROP_RELATIVE: f64 = 1e-16;

/// Mass above the cutoff (relative to the majorant) that triggers an
/// aliasing warning in angle composition.
pub const ALIASING_TOLERANCE: f64 = 1e-12;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Dimension and truncation orders of a series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeriesShape {
    pub dim: usize,
    pub fourier_cutoff: u32,
    pub taylor_degree: u32,
}

impl SeriesShape {
    pub fn new(dim: usize, fourier_cutoff: u32, taylor_degree: u32) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(KamError::UnsupportedDimension(dim));
        }
        Ok(Self {
            dim,
            fourier_cutoff,
            taylor_degree,
        })
    }

    fn join(self, other: Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(KamError::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        Ok(Self {
            dim: self.dim,
            fourier_cutoff: self.fourier_cutoff.max(other.fourier_cutoff),
            taylor_degree: self.taylor_degree.max(other.taylor_degree),
        })
    }
}

/// The complex domain `|r| <= rho, |Im theta| <= delta_strip`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticityDomain {
    pub rho: f64,
    pub delta_strip: f64,
}

impl AnalyticityDomain {
    pub fn new(rho: f64, delta_strip: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) || !(delta_strip > 0.0 && delta_strip.is_finite()) {
            return Err(KamError::InvalidArgument(format!(
                "analyticity domain needs rho > 0 and delta > 0, got ({rho}, {delta_strip})"
            )));
        }
        Ok(Self { rho, delta_strip })
    }

    /// `A_{rho - by, delta - by}`.
    pub fn shrink(&self, by: f64) -> Result<Self> {
        Self::new(self.rho - by, self.delta_strip - by)
    }

    /// Real-angle, zero-width variant used for plain coefficient sums.
    pub fn with_strip(&self, delta_strip: f64) -> Self {
        Self {
            rho: self.rho,
            delta_strip,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub(crate) struct TermKey {
    pub(crate) m: Exponent,
    pub(crate) k: Mode,
}

impl TermKey {
    fn new(dim: usize, k: &[i32], m: &[u32]) -> Result<Self> {
        if k.len() != dim {
            return Err(KamError::DimensionMismatch {
                expected: dim,
                found: k.len(),
            });
        }
        if m.len() != dim {
            return Err(KamError::DimensionMismatch {
                expected: dim,
                found: m.len(),
            });
        }
        let mut key = TermKey {
            m: [0; MAX_DIM],
            k: [0; MAX_DIM],
        };
        for a in 0..dim {
            key.k[a] = k[a];
            key.m[a] = u16::try_from(m[a])
                .map_err(|_| KamError::InvalidArgument("action exponent too large".into()))?;
        }
        Ok(key)
    }

    fn negated(&self) -> Self {
        let mut k = self.k;
        k.iter_mut().for_each(|ka| *ka = -*ka);
        TermKey { m: self.m, k }
    }

    fn fourier_sup(&self) -> u32 {
        self.k.iter().map(|ka| ka.unsigned_abs()).max().unwrap_or(0)
    }

    fn fourier_l1(&self) -> u32 {
        self.k.iter().map(|ka| ka.unsigned_abs()).sum()
    }
}

/// One stored coefficient, in owned form.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub k: Vec<i32>,
    pub m: Vec<u32>,
    pub coeff: Complex64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FourierTaylorSeries {
    shape: SeriesShape,
    terms: BTreeMap<TermKey, Complex64>,
}

impl FourierTaylorSeries {
    pub fn zero(shape: SeriesShape) -> Self {
        Self {
            shape,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(shape: SeriesShape, value: f64) -> Self {
        let mut s = Self::zero(shape);
        s.add_raw(
            TermKey {
                m: [0; MAX_DIM],
                k: [0; MAX_DIM],
            },
            Complex64::new(value, 0.0),
        );
        s
    }

    /// The action coordinate `r_j`.
    pub fn action(shape: SeriesShape, axis: usize) -> Result<Self> {
        check_axis(axis, shape.dim)?;
        if shape.taylor_degree == 0 {
            return Err(KamError::InvalidArgument(
                "taylor degree 0 cannot hold an action".into(),
            ));
        }
        let mut key = TermKey {
            m: [0; MAX_DIM],
            k: [0; MAX_DIM],
        };
        key.m[axis] = 1;
        let mut s = Self::zero(shape);
        s.add_raw(key, Complex64::new(1.0, 0.0));
        Ok(s)
    }

    /// `coeff * exp(i k.theta)`.
    pub fn mode(shape: SeriesShape, k: &[i32], coeff: Complex64) -> Result<Self> {
        let mut s = Self::zero(shape);
        s.add_term(k, &vec![0; shape.dim], coeff)?;
        Ok(s)
    }

    /// `amplitude * cos(k.theta)`.
    pub fn cosine(shape: SeriesShape, k: &[i32], amplitude: f64) -> Result<Self> {
        let neg: Vec<i32> = k.iter().map(|x| -x).collect();
        let mut s = Self::mode(shape, k, Complex64::new(0.5 * amplitude, 0.0))?;
        s.add_term(
            &neg,
            &vec![0; shape.dim],
            Complex64::new(0.5 * amplitude, 0.0),
        )?;
        Ok(s)
    }

    /// `amplitude * sin(k.theta)`.
    pub fn sine(shape: SeriesShape, k: &[i32], amplitude: f64) -> Result<Self> {
        let neg: Vec<i32> = k.iter().map(|x| -x).collect();
        let mut s = Self::mode(shape, k, Complex64::new(0.0, -0.5 * amplitude))?;
        s.add_term(
            &neg,
            &vec![0; shape.dim],
            Complex64::new(0.0, 0.5 * amplitude),
        )?;
        Ok(s)
    }

    pub fn from_terms(shape: SeriesShape, terms: impl IntoIterator<Item = Term>) -> Result<Self> {
        let mut s = Self::zero(shape);
        for t in terms {
            s.add_term(&t.k, &t.m, t.coeff)?;
        }
        s.prune();
        Ok(s)
    }

    /// Adds `coeff` to the `(k, m)` coefficient.
    pub fn add_term(&mut self, k: &[i32], m: &[u32], coeff: Complex64) -> Result<()> {
        let key = TermKey::new(self.shape.dim, k, m)?;
        if key.fourier_sup() > self.shape.fourier_cutoff
            || total_degree(&key.m) > self.shape.taylor_degree
        {
            return Err(KamError::OutsideTruncation {
                k: k.to_vec(),
                m: m.to_vec(),
                fourier_cutoff: self.shape.fourier_cutoff,
                taylor_degree: self.shape.taylor_degree,
            });
        }
        self.add_raw(key, coeff);
        Ok(())
    }

    fn add_raw(&mut self, key: TermKey, coeff: Complex64) {
        if coeff == ZERO {
            return;
        }
        let slot = self.terms.entry(key).or_insert(ZERO);
        *slot += coeff;
        if *slot == ZERO {
            self.terms.remove(&key);
        }
    }

    fn from_map(shape: SeriesShape, terms: BTreeMap<TermKey, Complex64>) -> Self {
        let mut s = Self { shape, terms };
        s.prune();
        s
    }

    /// Drops coefficients below the relative threshold.
    pub fn prune(&mut self) {
        let largest = self.terms.values().map(|c| c.norm()).fold(0.0, f64::max);
        let floor = DROP_RELATIVE * largest;
        self.terms.retain(|_, c| c.norm() > floor);
    }

    pub fn shape(&self) -> SeriesShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.dim
    }

    pub fn fourier_cutoff(&self) -> u32 {
        self.shape.fourier_cutoff
    }

    pub fn taylor_degree(&self) -> u32 {
        self.shape.taylor_degree
    }

    /// Number of stored coefficients.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Largest `|k|_inf` actually present.
    pub fn effective_cutoff(&self) -> u32 {
        self.terms
            .keys()
            .map(TermKey::fourier_sup)
            .max()
            .unwrap_or(0)
    }

    /// Largest `|m|_1` actually present.
    pub fn effective_degree(&self) -> u32 {
        self.terms
            .keys()
            .map(|key| total_degree(&key.m))
            .max()
            .unwrap_or(0)
    }

    pub fn coeff(&self, k: &[i32], m: &[u32]) -> Complex64 {
        match TermKey::new(self.shape.dim, k, m) {
            Ok(key) => self.terms.get(&key).copied().unwrap_or(ZERO),
            Err(_) => ZERO,
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = Term> + '_ {
        let d = self.shape.dim;
        self.terms.iter().map(move |(key, c)| Term {
            k: key.k[..d].to_vec(),
            m: key.m[..d].iter().map(|&e| e as u32).collect(),
            coeff: *c,
        })
    }

    /// Largest coefficient modulus.
    pub fn max_abs(&self) -> f64 {
        self.terms.values().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// True when no coefficient depends on the actions.
    pub fn is_angle_only(&self) -> bool {
        self.terms.keys().all(|key| total_degree(&key.m) == 0)
    }

    fn map_coeffs(&self, f: impl Fn(&TermKey, Complex64) -> Complex64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|(key, c)| (*key, f(key, *c)))
            .filter(|(_, c)| *c != ZERO)
            .collect();
        Self::from_map(self.shape, terms)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map_coeffs(|_, c| c * factor)
    }

    pub fn scale_complex(&self, factor: Complex64) -> Self {
        self.map_coeffs(|_, c| c * factor)
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.linear_combination(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.linear_combination(1.0, other, -1.0)
    }

    /// `a * self + b * other`.
    pub fn linear_combination(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        let shape = self.shape.join(other.shape)?;
        let mut terms: BTreeMap<TermKey, Complex64> = BTreeMap::new();
        for (key, c) in &self.terms {
            *terms.entry(*key).or_insert(ZERO) += c * a;
        }
        for (key, c) in &other.terms {
            *terms.entry(*key).or_insert(ZERO) += c * b;
        }
        terms.retain(|_, c| *c != ZERO);
        Ok(Self::from_map(shape, terms))
    }

    pub fn add_constant(&self, value: f64) -> Self {
        let mut out = self.clone();
        out.add_raw(
            TermKey {
                m: [0; MAX_DIM],
                k: [0; MAX_DIM],
            },
            Complex64::new(value, 0.0),
        );
        out.prune();
        out
    }

    /// Same coefficients under a different truncation; terms outside it are
    /// dropped and their l1 mass is returned.
    pub fn retruncate(&self, shape: SeriesShape) -> Result<(Self, f64)> {
        if shape.dim != self.shape.dim {
            return Err(KamError::DimensionMismatch {
                expected: self.shape.dim,
                found: shape.dim,
            });
        }
        let mut dropped = 0.0;
        let mut terms = BTreeMap::new();
        for (key, c) in &self.terms {
            if key.fourier_sup() <= shape.fourier_cutoff
                && total_degree(&key.m) <= shape.taylor_degree
            {
                terms.insert(*key, *c);
            } else {
                dropped += c.norm();
            }
        }
        Ok((Self::from_map(shape, terms), dropped))
    }

    /// Product truncated to the larger of the two truncations.
    pub fn multiply(&self, other: &Self) -> Result<Self> {
        Ok(self.multiply_with_tail(other)?.0)
    }

    /// Product plus the l1 mass discarded by the truncation.
    pub fn multiply_with_tail(&self, other: &Self) -> Result<(Self, f64)> {
        let shape = self.shape.join(other.shape)?;
        if self.is_zero() || other.is_zero() {
            return Ok((Self::zero(shape), 0.0));
        }
        if self.len() * other.len() <= 40_000 {
            Ok(self.multiply_direct(other, shape))
        } else {
            Ok(self.multiply_collocation(other, shape))
        }
    }

    pub(crate) fn multiply_direct(&self, other: &Self, shape: SeriesShape) -> (Self, f64) {
        let mut kept: BTreeMap<TermKey, Complex64> = BTreeMap::new();
        let mut tail: BTreeMap<TermKey, Complex64> = BTreeMap::new();
        for (ka, ca) in &self.terms {
            for (kb, cb) in &other.terms {
                let mut key = TermKey {
                    m: [0; MAX_DIM],
                    k: [0; MAX_DIM],
                };
                for a in 0..MAX_DIM {
                    key.m[a] = ka.m[a] + kb.m[a];
                    key.k[a] = ka.k[a] + kb.k[a];
                }
                let target = if total_degree(&key.m) <= shape.taylor_degree
                    && key.fourier_sup() <= shape.fourier_cutoff
                {
                    &mut kept
                } else {
                    &mut tail
                };
                *target.entry(key).or_insert(ZERO) += ca * cb;
            }
        }
        kept.retain(|_, c| *c != ZERO);
        let tail_mass = tail.values().map(|c| c.norm()).sum();
        (Self::from_map(shape, kept), tail_mass)
    }

    pub(crate) fn multiply_collocation(&self, other: &Self, shape: SeriesShape) -> (Self, f64) {
        let d = shape.dim;
        let band = (self.effective_cutoff() + other.effective_cutoff()) as usize;
        let grid = AngleGrid::new(d, smooth_size(2 * band + 1));
        let basis = MonomialBasis::new(d, shape.taylor_degree);
        let a = self.sample_by_monomial(&grid, &basis);
        let b = other.sample_by_monomial(&grid, &basis);
        let mut out: Vec<Option<Vec<Complex64>>> = vec![None; basis.len()];
        let mut tail = 0.0;
        for &(i, j, s) in &basis.products {
            if let (Some(va), Some(vb)) = (&a[i], &b[j]) {
                let acc = out[s].get_or_insert_with(|| vec![ZERO; grid.len()]);
                for ((o, x), y) in acc.iter_mut().zip(va).zip(vb) {
                    *o += x * y;
                }
            }
        }
        // products landing above the degree cutoff are tail mass too
        for (i, va) in a.iter().enumerate() {
            for (j, vb) in b.iter().enumerate() {
                if let (Some(va), Some(vb)) = (va, vb) {
                    if total_degree(&basis.list[i]) + total_degree(&basis.list[j])
                        > shape.taylor_degree
                    {
                        let vals: Vec<Complex64> = va.iter().zip(vb).map(|(x, y)| x * y).collect();
                        let (kept, t) = grid.analyze(vals, u32::MAX);
                        tail += t + kept.iter().map(|(_, c)| c.norm()).sum::<f64>();
                    }
                }
            }
        }
        let mut terms = BTreeMap::new();
        for (s, vals) in out.into_iter().enumerate() {
            if let Some(vals) = vals {
                let (kept, t) = grid.analyze(vals, shape.fourier_cutoff);
                tail += t;
                for (k, c) in kept {
                    if c != ZERO {
                        terms.insert(
                            TermKey {
                                m: basis.list[s],
                                k,
                            },
                            c,
                        );
                    }
                }
            }
        }
        (Self::from_map(shape, terms), tail)
    }

    /// Grid samples of each action-monomial coefficient function.
    fn sample_by_monomial(
        &self,
        grid: &AngleGrid,
        basis: &MonomialBasis,
    ) -> Vec<Option<Vec<Complex64>>> {
        let mut groups: BTreeMap<usize, Vec<(&Mode, Complex64)>> = BTreeMap::new();
        for (key, c) in &self.terms {
            if let Some(idx) = basis.index(&key.m) {
                groups.entry(idx).or_default().push((&key.k, *c));
            }
        }
        let mut out = vec![None; basis.len()];
        for (idx, modes) in groups {
            out[idx] = Some(grid.synthesize(modes));
        }
        out
    }

    /// `d/dtheta_axis`: `c_{k,m} -> i k_axis c_{k,m}`.
    pub fn partial_theta(&self, axis: usize) -> Result<Self> {
        check_axis(axis, self.shape.dim)?;
        Ok(self.map_coeffs(|key, c| c * Complex64::new(0.0, key.k[axis] as f64)))
    }

    /// `d/dr_axis`.
    pub fn partial_r(&self, axis: usize) -> Result<Self> {
        check_axis(axis, self.shape.dim)?;
        let mut terms = BTreeMap::new();
        for (key, c) in &self.terms {
            let e = key.m[axis];
            if e == 0 {
                continue;
            }
            let mut lowered = *key;
            lowered.m[axis] -= 1;
            terms.insert(lowered, c * e as f64);
        }
        Ok(Self::from_map(self.shape, terms))
    }

    /// `L_omega f = sum_i omega_i df/dtheta_i`.
    pub fn lie_derivative(&self, omega: &[f64]) -> Result<Self> {
        if omega.len() != self.shape.dim {
            return Err(KamError::DimensionMismatch {
                expected: self.shape.dim,
                found: omega.len(),
            });
        }
        Ok(self.map_coeffs(|key, c| {
            let dot: f64 = omega
                .iter()
                .zip(key.k.iter())
                .map(|(w, &k)| w * k as f64)
                .sum();
            c * Complex64::new(0.0, dot)
        }))
    }

    /// The `k = 0` slice: angular mean of every action monomial.
    pub fn average(&self) -> Self {
        let terms = self
            .terms
            .iter()
            .filter(|(key, _)| key.k == [0; MAX_DIM])
            .map(|(k, c)| (*k, *c))
            .collect();
        Self::from_map(self.shape, terms)
    }

    /// `self - average(self)`.
    pub fn oscillating_part(&self) -> Self {
        let terms = self
            .terms
            .iter()
            .filter(|(key, _)| key.k != [0; MAX_DIM])
            .map(|(k, c)| (*k, *c))
            .collect();
        Self::from_map(self.shape, terms)
    }

    /// Mean of the angle-only part, i.e. the `(k, m) = (0, 0)` coefficient.
    pub fn mean_value(&self) -> Complex64 {
        self.terms
            .get(&TermKey {
                m: [0; MAX_DIM],
                k: [0; MAX_DIM],
            })
            .copied()
            .unwrap_or(ZERO)
    }

    /// Angle function multiplying `r^m` (as an angle-only series).
    pub fn taylor_coefficient(&self, m: &[u32]) -> Result<Self> {
        let probe = TermKey::new(self.shape.dim, &vec![0; self.shape.dim], m)?;
        let terms = self
            .terms
            .iter()
            .filter(|(key, _)| key.m == probe.m)
            .map(|(key, c)| {
                (
                    TermKey {
                        m: [0; MAX_DIM],
                        k: key.k,
                    },
                    *c,
                )
            })
            .collect();
        Ok(Self::from_map(self.shape, terms))
    }

    /// Terms whose total action degree lies in `lo..=hi`.
    pub fn degree_range(&self, lo: u32, hi: u32) -> Self {
        let terms = self
            .terms
            .iter()
            .filter(|(key, _)| (lo..=hi).contains(&total_degree(&key.m)))
            .map(|(k, c)| (*k, *c))
            .collect();
        Self::from_map(self.shape, terms)
    }

    /// `sum |c_{k,m}| rho^{|m|} exp(Delta |k|_1)`, an upper bound for the sup
    /// norm on the domain.
    pub fn majorant(&self, domain: &AnalyticityDomain) -> Result<f64> {
        let value = self.majorant_unchecked(domain);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(KamError::Overflow)
        }
    }

    pub(crate) fn majorant_unchecked(&self, domain: &AnalyticityDomain) -> f64 {
        self.terms
            .iter()
            .map(|(key, c)| {
                c.norm()
                    * domain.rho.powi(total_degree(&key.m) as i32)
                    * (domain.delta_strip * key.fourier_l1() as f64).exp()
            })
            .fold(0.0, |acc, x| acc + x)
    }

    /// Direct summation at a complex point.
    pub fn evaluate(&self, r: &[Complex64], theta: &[Complex64]) -> Result<Complex64> {
        let d = self.shape.dim;
        if r.len() != d || theta.len() != d {
            return Err(KamError::DimensionMismatch {
                expected: d,
                found: r.len().min(theta.len()),
            });
        }
        let tables = PointTables::new(self, r, theta);
        Ok(self
            .terms
            .iter()
            .map(|(key, c)| c * tables.basis(key))
            .sum())
    }

    /// Real part of the value at a real point.
    pub fn evaluate_real(&self, r: &[f64], theta: &[f64]) -> Result<f64> {
        let rc: Vec<Complex64> = r.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let tc: Vec<Complex64> = theta.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        Ok(self.evaluate(&rc, &tc)?.re)
    }

    /// Value together with its action and angle gradients at a real point
    /// (real parts).
    pub fn evaluate_with_gradient(&self, r: &[f64], theta: &[f64]) -> Result<PointValue> {
        let d = self.shape.dim;
        if r.len() != d || theta.len() != d {
            return Err(KamError::DimensionMismatch {
                expected: d,
                found: r.len().min(theta.len()),
            });
        }
        let rc: Vec<Complex64> = r.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let tc: Vec<Complex64> = theta.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let tables = PointTables::new(self, &rc, &tc);
        let mut value = ZERO;
        let mut d_r = vec![ZERO; d];
        let mut d_theta = vec![ZERO; d];
        for (key, c) in &self.terms {
            let b = c * tables.basis(key);
            value += b;
            for a in 0..d {
                d_theta[a] += b * Complex64::new(0.0, key.k[a] as f64);
                if key.m[a] > 0 {
                    let mut lowered = key.m;
                    lowered[a] -= 1;
                    d_r[a] += c * key.m[a] as f64 * tables.monomial(&lowered) * tables.wave(&key.k);
                }
            }
        }
        Ok(PointValue {
            value: value.re,
            d_r: d_r.iter().map(|z| z.re).collect(),
            d_theta: d_theta.iter().map(|z| z.re).collect(),
        })
    }

    /// Largest `|c_{-k,m} - conj(c_{k,m})|`; zero for real-valued series.
    pub fn conjugate_symmetry_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (key, c) in &self.terms {
            let partner = self.terms.get(&key.negated()).copied().unwrap_or(ZERO);
            worst = worst.max((partner - c.conj()).norm());
        }
        worst
    }

    /// Projection onto real-valued series: `c_k <- (c_k + conj(c_{-k})) / 2`.
    pub fn symmetrize(&self) -> Self {
        let mut terms = BTreeMap::new();
        for (key, c) in &self.terms {
            let partner = self.terms.get(&key.negated()).copied().unwrap_or(ZERO);
            terms.insert(*key, 0.5 * (c + partner.conj()));
            terms
                .entry(key.negated())
                .or_insert(0.5 * (partner + c.conj()));
        }
        terms.retain(|_, c| *c != ZERO);
        Self::from_map(self.shape, terms)
    }

    /// `theta -> f(r, theta + v(theta))` for an angle-only displacement `v`.
    pub fn compose_angle(&self, v: &[Self]) -> Result<Self> {
        Ok(self.compose_angle_with_tail(v)?.0)
    }

    /// Angle composition by collocation on a uniform grid of
    /// `next_pow2(2(2K+1))` points per axis, followed by discrete Fourier
    /// re-expansion. Returns the l1 mass the grid resolves above the cutoff.
    pub fn compose_angle_with_tail(&self, v: &[Self]) -> Result<(Self, f64)> {
        let d = self.shape.dim;
        if v.len() != d {
            return Err(KamError::DimensionMismatch {
                expected: d,
                found: v.len(),
            });
        }
        for vi in v {
            if vi.dim() != d {
                return Err(KamError::DimensionMismatch {
                    expected: d,
                    found: vi.dim(),
                });
            }
            if !vi.is_angle_only() {
                return Err(KamError::InvalidArgument(
                    "angle displacement must not depend on actions".into(),
                ));
            }
        }
        if v.iter().all(Self::is_zero) || self.effective_cutoff() == 0 {
            return Ok((self.clone(), 0.0));
        }
        let cutoff = self.shape.fourier_cutoff;
        let v_band = v.iter().map(Self::effective_cutoff).max().unwrap_or(0);
        let n = (2 * (2 * cutoff as usize + 1))
            .next_power_of_two()
            .max(smooth_size(2 * v_band as usize + 2));
        let grid = AngleGrid::new(d, n);
        let v_samples: Vec<Vec<Complex64>> = v
            .iter()
            .map(|vi| grid.synthesize(vi.terms.iter().map(|(key, c)| (&key.k, *c))))
            .collect();

        // angle-independent terms are invariant under angle shifts; keeping
        // them off the grid keeps transform noise relative to the oscillating part
        let mut terms = BTreeMap::new();
        let mut groups: BTreeMap<Exponent, Vec<(Mode, Complex64)>> = BTreeMap::new();
        for (key, c) in &self.terms {
            if key.k == [0; MAX_DIM] {
                terms.insert(*key, *c);
            } else {
                groups.entry(key.m).or_default().push((key.k, *c));
            }
        }
        let kmax = self.effective_cutoff() as i32;
        let width = (2 * kmax + 1) as usize;
        let mut values: Vec<Vec<Complex64>> = vec![vec![ZERO; grid.len()]; groups.len()];
        let mut waves = vec![ZERO; d * width];
        for j in 0..grid.len() {
            let base = grid.point(j);
            for a in 0..d {
                let x = Complex64::new(base[a], 0.0) + v_samples[a][j];
                let step = (Complex64::i() * x).exp();
                let back = (-Complex64::i() * x).exp();
                let row = &mut waves[a * width..(a + 1) * width];
                row[kmax as usize] = Complex64::new(1.0, 0.0);
                for p in 1..=kmax as usize {
                    row[kmax as usize + p] = row[kmax as usize + p - 1] * step;
                    row[kmax as usize - p] = row[kmax as usize - p + 1] * back;
                }
            }
            for (g, modes) in groups.values().enumerate() {
                let mut acc = ZERO;
                for (k, c) in modes {
                    let mut e = *c;
                    for a in 0..d {
                        e *= waves[a * width + (k[a] + kmax) as usize];
                    }
                    acc += e;
                }
                values[g][j] = acc;
            }
        }
        let mut tail = 0.0;
        for (m, vals) in groups.keys().zip(values) {
            let (kept, t) = grid.analyze(vals, cutoff);
            tail += t;
            for (k, c) in kept {
                if c != ZERO {
                    *terms.entry(TermKey { m: *m, k }).or_insert(ZERO) += c;
                }
            }
        }
        let out = Self::from_map(self.shape, terms);
        let scale = out.max_abs().max(f64::MIN_POSITIVE);
        if tail > ALIASING_TOLERANCE * scale * out.len().max(1) as f64 {
            log::warn!("angle composition discarded {tail:e} of mass above cutoff {cutoff}");
        }
        Ok((out, tail))
    }

    /// `f(r(R, theta), theta)`: replaces every action by the given series in
    /// the new actions `R` and truncates to the action degree of `self`.
    pub fn substitute_actions(&self, actions: &[Self]) -> Result<Self> {
        Ok(self.substitute_actions_with_tail(actions)?.0)
    }

    pub fn substitute_actions_with_tail(&self, actions: &[Self]) -> Result<(Self, f64)> {
        let d = self.shape.dim;
        if actions.len() != d {
            return Err(KamError::DimensionMismatch {
                expected: d,
                found: actions.len(),
            });
        }
        let mut shape = self.shape;
        for a in actions {
            shape = shape.join(a.shape)?;
        }
        shape.taylor_degree = self.shape.taylor_degree;
        if self.is_zero() {
            return Ok((Self::zero(shape), 0.0));
        }
        let degree = shape.taylor_degree;
        let basis = MonomialBasis::new(d, degree);
        let action_band = actions
            .iter()
            .map(Self::effective_cutoff)
            .max()
            .unwrap_or(0) as usize;
        let band = self.effective_cutoff() as usize + degree as usize * action_band;
        // retained modes are alias-free once n > band + K
        let synth_band = (self.effective_cutoff() as usize).max(action_band);
        let n = smooth_size((band + shape.fourier_cutoff as usize + 1).max(2 * synth_band + 2));
        let grid = AngleGrid::new(d, n);
        let f_samples = self.sample_by_monomial(&grid, &basis);
        let action_samples: Vec<Vec<Option<Vec<Complex64>>>> = actions
            .iter()
            .map(|a| a.sample_by_monomial(&grid, &basis))
            .collect();

        let nb = basis.len();
        let mut out: Vec<Vec<Complex64>> = vec![vec![ZERO; grid.len()]; nb];
        let mut powers: Vec<Vec<Vec<Complex64>>> =
            vec![vec![vec![ZERO; nb]; degree as usize + 1]; d];
        let mut prod = vec![ZERO; nb];
        let mut scratch = vec![ZERO; nb];
        for j in 0..grid.len() {
            for a in 0..d {
                let p0 = &mut powers[a][0];
                p0.iter_mut().for_each(|x| *x = ZERO);
                p0[0] = Complex64::new(1.0, 0.0);
                let mut base = vec![ZERO; nb];
                for (idx, s) in action_samples[a].iter().enumerate() {
                    if let Some(s) = s {
                        base[idx] = s[j];
                    }
                }
                for p in 1..=degree as usize {
                    let (lo, hi) = powers[a].split_at_mut(p);
                    basis.multiply_into(&lo[p - 1], &base, &mut hi[0]);
                }
            }
            for (idx, fs) in f_samples.iter().enumerate() {
                let Some(fs) = fs else { continue };
                let fv = fs[j];
                if fv == ZERO {
                    continue;
                }
                let m = basis.list[idx];
                prod.iter_mut().for_each(|x| *x = ZERO);
                prod[0] = Complex64::new(1.0, 0.0);
                for a in 0..d {
                    if m[a] == 0 {
                        continue;
                    }
                    basis.multiply_into(&prod, &powers[a][m[a] as usize], &mut scratch);
                    std::mem::swap(&mut prod, &mut scratch);
                }
                for (o, p) in out.iter_mut().zip(&prod) {
                    o[j] += fv * p;
                }
            }
        }
        let mut terms = BTreeMap::new();
        let mut tail = 0.0;
        for (idx, vals) in out.into_iter().enumerate() {
            if vals.iter().all(|v| *v == ZERO) {
                continue;
            }
            let (kept, t) = grid.analyze(vals, shape.fourier_cutoff);
            tail += t;
            for (k, c) in kept {
                if c != ZERO {
                    terms.insert(
                        TermKey {
                            m: basis.list[idx],
                            k,
                        },
                        c,
                    );
                }
            }
        }
        Ok((Self::from_map(shape, terms), tail))
    }
}

/// Value and gradients of a series at a real point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointValue {
    pub value: f64,
    pub d_r: Vec<f64>,
    pub d_theta: Vec<f64>,
}

/// Cached powers `r_a^p` and waves `exp(i k_a theta_a)` for one point.
struct PointTables {
    kmax: i32,
    degree: usize,
    powers: Vec<Vec<Complex64>>,
    waves: Vec<Vec<Complex64>>,
}

impl PointTables {
    fn new(series: &FourierTaylorSeries, r: &[Complex64], theta: &[Complex64]) -> Self {
        let kmax = series.effective_cutoff() as i32;
        let degree = series.effective_degree() as usize;
        let powers = r
            .iter()
            .map(|&x| {
                let mut p = vec![Complex64::new(1.0, 0.0); degree + 1];
                for e in 1..=degree {
                    p[e] = p[e - 1] * x;
                }
                p
            })
            .collect();
        let waves = theta
            .iter()
            .map(|&t| {
                (-kmax..=kmax)
                    .map(|k| (Complex64::i() * t * k as f64).exp())
                    .collect()
            })
            .collect();
        Self {
            kmax,
            degree,
            powers,
            waves,
        }
    }

    fn monomial(&self, m: &Exponent) -> Complex64 {
        let mut out = Complex64::new(1.0, 0.0);
        for (a, p) in self.powers.iter().enumerate() {
            debug_assert!((m[a] as usize) <= self.degree);
            out *= p[m[a] as usize];
        }
        out
    }

    fn wave(&self, k: &Mode) -> Complex64 {
        let mut out = Complex64::new(1.0, 0.0);
        for (a, w) in self.waves.iter().enumerate() {
            out *= w[(k[a] + self.kmax) as usize];
        }
        out
    }

    fn basis(&self, key: &TermKey) -> Complex64 {
        self.monomial(&key.m) * self.wave(&key.k)
    }
}

fn check_axis(axis: usize, dim: usize) -> Result<()> {
    if axis >= dim {
        Err(KamError::AxisOutOfRange { axis, dim })
    } else {
        Ok(())
    }
}

/// On-disk JSON layout of a series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesDocument {
    pub dim: usize,
    pub fourier_cutoff: u32,
    pub taylor_degree: u32,
    pub terms: Vec<TermDocument>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermDocument {
    pub k: Vec<i32>,
    pub m: Vec<u32>,
    pub re: f64,
    pub im: f64,
}

impl From<&FourierTaylorSeries> for SeriesDocument {
    fn from(s: &FourierTaylorSeries) -> Self {
        Self {
            dim: s.shape.dim,
            fourier_cutoff: s.shape.fourier_cutoff,
            taylor_degree: s.shape.taylor_degree,
            terms: s
                .terms()
                .map(|t| TermDocument {
                    k: t.k,
                    m: t.m,
                    re: t.coeff.re,
                    im: t.coeff.im,
                })
                .collect(),
        }
    }
}

impl TryFrom<SeriesDocument> for FourierTaylorSeries {
    type Error = KamError;

    fn try_from(doc: SeriesDocument) -> Result<Self> {
        let shape = SeriesShape::new(doc.dim, doc.fourier_cutoff, doc.taylor_degree)?;
        let mut s = Self::zero(shape);
        for t in doc.terms {
            if !(t.re.is_finite() && t.im.is_finite()) {
                return Err(KamError::InvalidArgument(format!(
                    "non-finite coefficient at k={:?}, m={:?}",
                    t.k, t.m
                )));
            }
            s.add_term(&t.k, &t.m, Complex64::new(t.re, t.im))?;
        }
        s.prune();
        Ok(s)
    }
}

impl Serialize for FourierTaylorSeries {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        SeriesDocument::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FourierTaylorSeries {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let doc = SeriesDocument::deserialize(deserializer)?;
        FourierTaylorSeries::try_from(doc).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(d: usize, k: u32, m: u32) -> SeriesShape {
        SeriesShape::new(d, k, m).unwrap()
    }

    fn close(a: &FourierTaylorSeries, b: &FourierTaylorSeries, tol: f64) -> bool {
        a.sub(b).unwrap().max_abs() <= tol
    }

    #[test]
    fn multiplication_examples() {
        let s = shape(1, 1, 2);
        let g = FourierTaylorSeries::action(s, 0)
            .unwrap()
            .add(&FourierTaylorSeries::cosine(s, &[1], 1.0).unwrap())
            .unwrap();
        assert_eq!(
            FourierTaylorSeries::constant(s, 1.0).multiply(&g).unwrap(),
            g
        );

        let up = FourierTaylorSeries::mode(s, &[1], Complex64::new(1.0, 0.0)).unwrap();
        let down = FourierTaylorSeries::mode(s, &[-1], Complex64::new(1.0, 0.0)).unwrap();
        assert_eq!(
            up.multiply(&down).unwrap(),
            FourierTaylorSeries::constant(s, 1.0)
        );

        let r = FourierTaylorSeries::action(s, 0).unwrap();
        let prod = r.multiply(&g).unwrap();
        assert_eq!(prod.len(), 3);
        assert_eq!(prod.coeff(&[0], &[2]), Complex64::new(1.0, 0.0));
        assert_eq!(prod.coeff(&[1], &[1]), Complex64::new(0.5, 0.0));
        assert_eq!(prod.coeff(&[-1], &[1]), Complex64::new(0.5, 0.0));
    }

    #[test]
    fn derivative_examples() {
        let s = shape(2, 3, 3);
        let c = FourierTaylorSeries::cosine(s, &[1, 0], 1.0).unwrap();
        let minus_sin = FourierTaylorSeries::sine(s, &[1, 0], -1.0).unwrap();
        assert!(close(&c.partial_theta(0).unwrap(), &minus_sin, 0.0));
        assert!(FourierTaylorSeries::constant(s, 4.0)
            .partial_theta(1)
            .unwrap()
            .is_zero());
        let r1 = FourierTaylorSeries::action(s, 0).unwrap();
        let r2 = FourierTaylorSeries::action(s, 1).unwrap();
        let f = r1
            .multiply(&FourierTaylorSeries::sine(s, &[2, 0], 1.0).unwrap())
            .unwrap();
        let expected = r1
            .multiply(&FourierTaylorSeries::cosine(s, &[2, 0], 2.0).unwrap())
            .unwrap();
        assert!(close(&f.partial_theta(0).unwrap(), &expected, 1e-15));

        assert!(close(
            &r1.multiply(&r1).unwrap().partial_r(0).unwrap(),
            &r1.scale(2.0),
            0.0
        ));
        assert!(FourierTaylorSeries::constant(s, 1.0)
            .partial_r(0)
            .unwrap()
            .is_zero());
        let f = r1.multiply(&r2).unwrap().multiply(&c).unwrap();
        assert!(close(
            &f.partial_r(1).unwrap(),
            &r1.multiply(&c).unwrap(),
            1e-16
        ));
        assert!(c.partial_theta(2).is_err());
    }

    #[test]
    fn majorant_examples() {
        let s = shape(1, 2, 2);
        let c = FourierTaylorSeries::cosine(s, &[1], 1.0).unwrap();
        let flat = AnalyticityDomain {
            rho: 1.0,
            delta_strip: 0.0,
        };
        assert_eq!(FourierTaylorSeries::zero(s).majorant(&flat).unwrap(), 0.0);
        assert!((c.majorant(&flat).unwrap() - 1.0).abs() < 1e-15);
        let wide = AnalyticityDomain::new(1.0, 2f64.ln()).unwrap();
        assert!((c.majorant(&wide).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn evaluation_examples() {
        let s = shape(2, 2, 2);
        let z = |x: f64, y: f64| Complex64::new(x, y);
        let one = FourierTaylorSeries::constant(s, 1.0);
        assert_eq!(
            one.evaluate(&[z(0.3, 1.0), z(2.0, 0.0)], &[z(1.0, 0.5), z(0.0, 0.0)])
                .unwrap(),
            z(1.0, 0.0)
        );
        let r1 = FourierTaylorSeries::action(s, 0).unwrap();
        assert_eq!(r1.evaluate_real(&[2.0, 5.0], &[0.1, 0.2]).unwrap(), 2.0);
        let c = FourierTaylorSeries::cosine(s, &[1, 0], 1.0).unwrap();
        let delta = 0.7;
        let v = c
            .evaluate(&[z(0.0, 0.0); 2], &[z(0.0, delta), z(0.0, 0.0)])
            .unwrap();
        assert!((v - z(delta.cosh(), 0.0)).norm() < 1e-15);
    }

    #[test]
    fn average_examples() {
        let s = shape(2, 2, 2);
        let c = FourierTaylorSeries::cosine(s, &[1, 0], 1.0).unwrap();
        assert!(c.average().is_zero());
        assert_eq!(
            c.add_constant(3.0).average(),
            FourierTaylorSeries::constant(s, 3.0)
        );
        let r1 = FourierTaylorSeries::action(s, 0).unwrap();
        let r1sq = r1.multiply(&r1).unwrap();
        let f = r1sq
            .add(
                &r1.multiply(&FourierTaylorSeries::sine(s, &[0, 1], 1.0).unwrap())
                    .unwrap(),
            )
            .unwrap();
        assert_eq!(f.average(), r1sq);
    }

    #[test]
    fn composition_examples() {
        let s = shape(1, 8, 0);
        let f = FourierTaylorSeries::mode(s, &[1], Complex64::new(1.0, 0.0)).unwrap();
        assert_eq!(f.compose_angle(&[FourierTaylorSeries::zero(s)]).unwrap(), f);
        let shifted = f
            .compose_angle(&[FourierTaylorSeries::constant(s, 0.4)])
            .unwrap();
        assert!((shifted.coeff(&[1], &[0]) - Complex64::from_polar(1.0, 0.4)).norm() < 1e-15);

        let s = shape(1, 16, 0);
        let c = FourierTaylorSeries::cosine(s, &[1], 1.0).unwrap();
        let v = FourierTaylorSeries::sine(s, &[1], 0.1).unwrap();
        let composed = c.compose_angle(&[v]).unwrap();
        for i in 0..64 {
            let t = 2.0 * std::f64::consts::PI * i as f64 / 64.0;
            let oracle = (t + 0.1 * t.sin()).cos();
            assert!((composed.evaluate_real(&[0.0], &[t]).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn direct_and_grid_products_agree() {
        let s = shape(2, 6, 3);
        let r1 = FourierTaylorSeries::action(s, 0).unwrap();
        let r2 = FourierTaylorSeries::action(s, 1).unwrap();
        let a = r1
            .multiply(&FourierTaylorSeries::cosine(s, &[1, 2], 0.7).unwrap())
            .unwrap()
            .add(&FourierTaylorSeries::sine(s, &[3, -1], 0.2).unwrap())
            .unwrap();
        let b = r2
            .multiply(&r1)
            .unwrap()
            .multiply(&FourierTaylorSeries::cosine(s, &[2, 2], 0.5).unwrap())
            .unwrap()
            .add(&FourierTaylorSeries::cosine(s, &[4, 0], 1.3).unwrap())
            .unwrap();
        let (direct, tail_d) = a.multiply_direct(&b, s);
        let (grid, tail_g) = a.multiply_collocation(&b, s);
        assert!(close(&direct, &grid, 1e-14));
        assert!((tail_d - tail_g).abs() < 1e-13);
    }

    #[test]
    fn json_round_trip() {
        let s = shape(2, 3, 2);
        let f = FourierTaylorSeries::action(s, 1)
            .unwrap()
            .multiply(&FourierTaylorSeries::cosine(s, &[1, -3], 0.123_456_789).unwrap())
            .unwrap();
        let text = serde_json::to_string(&f).unwrap();
        assert!(text.contains("\"fourier_cutoff\":3"));
        let back: FourierTaylorSeries = serde_json::from_str(&text).unwrap();
        assert_eq!(back, f);
    }
}
