//! Square matrices whose entries are angle-only series.

use nalgebra::{DMatrix, DVector};

use crate::error::{KamError, Result};
use crate::series::{AnalyticityDomain, FourierTaylorSeries, SeriesShape};

/// A `d x d` matrix of series in the angles, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleMatrix {
    dim: usize,
    entries: Vec<FourierTaylorSeries>,
}

impl AngleMatrix {
    pub fn zero(shape: SeriesShape) -> Self {
        let d = shape.dim;
        Self {
            dim: d,
            entries: vec![FourierTaylorSeries::zero(shape); d * d],
        }
    }

    pub fn identity(shape: SeriesShape) -> Self {
        Self::from_constant(shape, &DMatrix::identity(shape.dim, shape.dim))
    }

    pub fn from_constant(shape: SeriesShape, matrix: &DMatrix<f64>) -> Self {
        let d = shape.dim;
        let entries = (0..d * d)
            .map(|idx| {
                let value = matrix[(idx / d, idx % d)];
                if value == 0.0 {
                    FourierTaylorSeries::zero(shape)
                } else {
                    FourierTaylorSeries::constant(shape, value)
                }
            })
            .collect();
        Self { dim: d, entries }
    }

    /// Builds a matrix from row-major entries; every entry must be angle-only.
    pub fn from_entries(dim: usize, entries: Vec<FourierTaylorSeries>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(KamError::DimensionMismatch {
                expected: dim * dim,
                found: entries.len(),
            });
        }
        for e in &entries {
            if e.dim() != dim {
                return Err(KamError::DimensionMismatch {
                    expected: dim,
                    found: e.dim(),
                });
            }
            if !e.is_angle_only() {
                return Err(KamError::InvalidArgument(
                    "matrix entries must not depend on actions".into(),
                ));
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> &FourierTaylorSeries {
        &self.entries[i * self.dim + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: FourierTaylorSeries) {
        self.entries[i * self.dim + j] = value;
    }

    pub fn entries(&self) -> &[FourierTaylorSeries] {
        &self.entries
    }

    fn zip_with(
        &self,
        other: &Self,
        f: impl Fn(&FourierTaylorSeries, &FourierTaylorSeries) -> Result<FourierTaylorSeries>,
    ) -> Result<Self> {
        if self.dim != other.dim {
            return Err(KamError::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| f(a, b))
            .collect::<Result<_>>()?;
        Ok(Self {
            dim: self.dim,
            entries,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a.add(b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a.sub(b))
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.iter().map(|e| e.scale(factor)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let d = self.dim;
        let entries = (0..d * d)
            .map(|idx| self.get(idx % d, idx / d).clone())
            .collect();
        Self { dim: d, entries }
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(KamError::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        let d = self.dim;
        let mut entries = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                let mut acc = FourierTaylorSeries::zero(self.get(i, j).shape());
                for l in 0..d {
                    acc = acc.add(&self.get(i, l).multiply(other.get(l, j))?)?;
                }
                entries.push(acc);
            }
        }
        Ok(Self { dim: d, entries })
    }

    /// Matrix times a vector of series (which may depend on the actions).
    pub fn mul_vec(&self, x: &[FourierTaylorSeries]) -> Result<Vec<FourierTaylorSeries>> {
        if x.len() != self.dim {
            return Err(KamError::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        (0..self.dim)
            .map(|i| {
                let mut acc = FourierTaylorSeries::zero(self.get(i, 0).shape());
                for (j, xj) in x.iter().enumerate() {
                    acc = acc.add(&self.get(i, j).multiply(xj)?)?;
                }
                Ok(acc)
            })
            .collect()
    }

    /// Angular mean of every entry (real parts).
    pub fn average(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j).mean_value().re)
    }

    /// Largest row sum of entry majorants; bounds the induced sup norm.
    pub fn majorant(&self, domain: &AnalyticityDomain) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            let mut row = 0.0;
            for j in 0..self.dim {
                row += self.get(i, j).majorant(domain)?;
            }
            worst = worst.max(row);
        }
        Ok(worst)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .map(FourierTaylorSeries::max_abs)
            .fold(0.0, f64::max)
    }

    /// Largest coefficient difference between `S_ij` and `S_ji`.
    pub fn symmetry_defect(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                worst = worst.max(self.get(i, j).sub(self.get(j, i))?.max_abs());
            }
        }
        Ok(worst)
    }

    /// `(S + S^T) / 2` with real-valued entries.
    pub fn symmetrize(&self) -> Result<Self> {
        let d = self.dim;
        let mut out = self.clone();
        for i in 0..d {
            out.set(i, i, self.get(i, i).symmetrize());
            for j in (i + 1)..d {
                let mean = self
                    .get(i, j)
                    .linear_combination(0.5, self.get(j, i), 0.5)?
                    .symmetrize();
                out.set(i, j, mean.clone());
                out.set(j, i, mean);
            }
        }
        Ok(out)
    }

    pub fn compose_angle(&self, v: &[FourierTaylorSeries]) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|e| e.compose_angle(v))
            .collect::<Result<_>>()?;
        Ok(Self {
            dim: self.dim,
            entries,
        })
    }

    /// Real value at a real angle.
    pub fn evaluate(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let zero = vec![0.0; self.dim];
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                out[(i, j)] = self.get(i, j).evaluate_real(&zero, theta)?;
            }
        }
        Ok(out)
    }
}

/// Infinity-operator norm (largest absolute row sum).
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}
