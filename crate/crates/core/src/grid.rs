//! Uniform angle grids, multi-dimensional FFTs and action-monomial tables.
//!
//! These are the collocation workhorses behind series products, action
//! substitution and angle composition. Nothing here is public API.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::series::MAX_DIM;

pub(crate) type Exponent = [u16; MAX_DIM];
pub(crate) type Mode = [i32; MAX_DIM];

/// Smallest even 5-smooth integer `>= min`.
pub(crate) fn smooth_size(min: usize) -> usize {
    let mut n = min.max(2);
    loop {
        if n.is_multiple_of(2) {
            let mut r = n;
            for p in [2, 3, 5] {
                while r.is_multiple_of(p) {
                    r /= p;
                }
            }
            if r == 1 {
                return n;
            }
        }
        n += 1;
    }
}

pub(crate) struct AngleGrid {
    dim: usize,
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl AngleGrid {
    pub(crate) fn new(dim: usize, n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            dim,
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Angles of the flat grid index `flat` (axis 0 varies fastest).
    pub(crate) fn point(&self, mut flat: usize) -> [f64; MAX_DIM] {
        let mut theta = [0.0; MAX_DIM];
        let h = 2.0 * PI / self.n as f64;
        for t in theta.iter_mut().take(self.dim) {
            *t = (flat % self.n) as f64 * h;
            flat /= self.n;
        }
        theta
    }

    fn flat_index(&self, k: &Mode) -> usize {
        let n = self.n as i64;
        let mut flat = 0usize;
        let mut stride = 1usize;
        for &ka in k.iter().take(self.dim) {
            let wrapped = (ka as i64).rem_euclid(n) as usize;
            flat += wrapped * stride;
            stride *= self.n;
        }
        flat
    }

    fn mode_of(&self, mut flat: usize) -> Option<Mode> {
        let mut k = [0i32; MAX_DIM];
        for ka in k.iter_mut().take(self.dim) {
            let i = flat % self.n;
            flat /= self.n;
            if 2 * i == self.n {
                return None;
            }
            *ka = if 2 * i < self.n {
                i as i32
            } else {
                i as i32 - self.n as i32
            };
        }
        Some(k)
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let fft = if inverse {
            &self.inverse
        } else {
            &self.forward
        };
        let mut line = vec![Complex64::new(0.0, 0.0); self.n];
        let mut stride = 1usize;
        for _ in 0..self.dim {
            let block = stride * self.n;
            for base in (0..data.len()).step_by(block) {
                for offset in 0..stride {
                    for (i, slot) in line.iter_mut().enumerate() {
                        *slot = data[base + offset + i * stride];
                    }
                    fft.process(&mut line);
                    for (i, value) in line.iter().enumerate() {
                        data[base + offset + i * stride] = *value;
                    }
                }
            }
            stride = block;
        }
    }

    /// Grid values of `sum_k c_k exp(i k.theta)`.
    pub(crate) fn synthesize<'a>(
        &self,
        modes: impl IntoIterator<Item = (&'a Mode, Complex64)>,
    ) -> Vec<Complex64> {
        let mut data = vec![Complex64::new(0.0, 0.0); self.len()];
        for (k, c) in modes {
            debug_assert!(k
                .iter()
                .all(|&ka| 2 * (ka.unsigned_abs() as usize) < self.n));
            data[self.flat_index(k)] += c;
        }
        self.transform(&mut data, true);
        data
    }

    /// Fourier coefficients with `|k|_inf <= cutoff`, plus the l1 mass of
    /// everything the grid resolves above the cutoff.
    pub(crate) fn analyze(
        &self,
        mut values: Vec<Complex64>,
        cutoff: u32,
    ) -> (Vec<(Mode, Complex64)>, f64) {
        self.transform(&mut values, false);
        let scale = 1.0 / self.len() as f64;
        let mut kept = Vec::new();
        let mut tail = 0.0;
        for (flat, v) in values.into_iter().enumerate() {
            let c = v * scale;
            match self.mode_of(flat) {
                Some(k) if k.iter().all(|ka| ka.unsigned_abs() <= cutoff) => kept.push((k, c)),
                _ => tail += c.norm(),
            }
        }
        (kept, tail)
    }
}

/// Action monomials of total degree `<= degree` in `dim` variables, with a
/// truncated product table.
pub(crate) struct MonomialBasis {
    pub(crate) list: Vec<Exponent>,
    lookup: HashMap<Exponent, usize>,
    pub(crate) products: Vec<(usize, usize, usize)>,
}

pub(crate) fn total_degree(m: &Exponent) -> u32 {
    m.iter().map(|&e| e as u32).sum()
}

impl MonomialBasis {
    pub(crate) fn new(dim: usize, degree: u32) -> Self {
        let mut list = Vec::new();
        let mut current = [0u16; MAX_DIM];
        fn recurse(
            axis: usize,
            dim: usize,
            left: u32,
            current: &mut Exponent,
            list: &mut Vec<Exponent>,
        ) {
            if axis == dim {
                list.push(*current);
                return;
            }
            for e in 0..=left {
                current[axis] = e as u16;
                recurse(axis + 1, dim, left - e, current, list);
            }
            current[axis] = 0;
        }
        recurse(0, dim, degree, &mut current, &mut list);
        list.sort_by_key(|m| (total_degree(m), std::cmp::Reverse(*m)));
        let lookup: HashMap<Exponent, usize> =
            list.iter().enumerate().map(|(i, m)| (*m, i)).collect();
        let mut products = Vec::new();
        for (i, a) in list.iter().enumerate() {
            for (j, b) in list.iter().enumerate() {
                if total_degree(a) + total_degree(b) > degree {
                    continue;
                }
                let mut s = [0u16; MAX_DIM];
                for ax in 0..MAX_DIM {
                    s[ax] = a[ax] + b[ax];
                }
                products.push((i, j, lookup[&s]));
            }
        }
        Self {
            list,
            lookup,
            products,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.list.len()
    }

    pub(crate) fn index(&self, m: &Exponent) -> Option<usize> {
        self.lookup.get(m).copied()
    }

    /// `out = a * b` truncated to the basis degree.
    pub(crate) fn multiply_into(&self, a: &[Complex64], b: &[Complex64], out: &mut [Complex64]) {
        out.iter_mut().for_each(|o| *o = Complex64::new(0.0, 0.0));
        for &(i, j, s) in &self.products {
            out[s] += a[i] * b[j];
        }
    }
}
