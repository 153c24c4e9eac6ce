//! Finite-depth Diophantine analysis of frequency vectors.
//!
//! A certificate records the empirical constant
//! `c = min_{0 < |k|_inf <= K} |omega.k| |k|_inf^tau` for a scan depth `K`.
//! It says nothing about `|k|_inf > K`; true Diophantine membership cannot
//! be decided in floating point.

use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::series::MAX_DIM;

/// Divisors `|omega.k|` below this fraction of `|omega|_inf` count as exact
/// resonances.
pub const RESONANCE_FLOOR: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiophantineCertificate {
    pub c: f64,
    pub tau: f64,
    pub scan_depth: u32,
}

/// The frequency `omega` and, optionally, a verified certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyVector {
    omega: Vec<f64>,
    certificate: Option<DiophantineCertificate>,
}

/// Worst small divisor found by a scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resonance {
    pub k_star: Vec<i32>,
    pub c_hat: f64,
}

impl FrequencyVector {
    /// An uncertified frequency.
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        validate_omega(&omega)?;
        Ok(Self {
            omega,
            certificate: None,
        })
    }

    /// Attaches a certificate after re-checking it by a full scan.
    pub fn with_certificate(omega: Vec<f64>, certificate: DiophantineCertificate) -> Result<Self> {
        let scan = worst_resonance(&omega, certificate.tau, certificate.scan_depth)?;
        if scan.c_hat < certificate.c * (1.0 - 1e-12) {
            return Err(KamError::InvalidArgument(format!(
                "certificate c = {} fails at k = {:?} (c_hat = {})",
                certificate.c, scan.k_star, scan.c_hat
            )));
        }
        Ok(Self {
            omega,
            certificate: Some(certificate),
        })
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn certificate(&self) -> Option<&DiophantineCertificate> {
        self.certificate.as_ref()
    }

    pub fn sup_norm(&self) -> f64 {
        self.omega.iter().fold(0.0, |acc, w| acc.max(w.abs()))
    }

    pub fn dot(&self, k: &[i32]) -> f64 {
        self.omega.iter().zip(k).map(|(w, &ki)| w * ki as f64).sum()
    }
}

fn validate_omega(omega: &[f64]) -> Result<()> {
    if omega.is_empty() || omega.len() > MAX_DIM {
        return Err(KamError::UnsupportedDimension(omega.len()));
    }
    if omega.iter().any(|w| !w.is_finite()) {
        return Err(KamError::InvalidArgument(
            "frequency has non-finite entries".into(),
        ));
    }
    if omega.iter().all(|&w| w == 0.0) {
        return Err(KamError::InvalidArgument(
            "frequency must be non-zero".into(),
        ));
    }
    Ok(())
}

/// Default Diophantine exponent `tau = d`.
pub fn default_tau(dim: usize) -> f64 {
    dim as f64
}

/// Exhaustive scan of `|omega.k| |k|_inf^tau` over `0 < |k|_inf <= kmax`.
///
/// `k` and `-k` give the same divisor, so only representatives whose first
/// non-zero entry is positive are visited; ties go to the lexicographically
/// smallest representative. Exact resonances report `c_hat = 0`.
pub fn worst_resonance(omega: &[f64], tau: f64, kmax: u32) -> Result<Resonance> {
    validate_omega(omega)?;
    if kmax == 0 {
        return Err(KamError::InvalidArgument(
            "scan depth must be at least 1".into(),
        ));
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(KamError::InvalidArgument(format!(
            "tau must be finite and non-negative, got {tau}"
        )));
    }
    let d = omega.len();
    let floor = RESONANCE_FLOOR * omega.iter().fold(0.0f64, |acc, w| acc.max(w.abs()));
    let kmax = kmax as i32;
    let mut k = vec![-kmax; d];
    let mut best: Option<(f64, Vec<i32>)> = None;
    loop {
        if let Some(first) = k.iter().find(|&&x| x != 0) {
            if *first > 0 {
                let divisor: f64 = omega
                    .iter()
                    .zip(&k)
                    .map(|(w, &ki)| w * ki as f64)
                    .sum::<f64>()
                    .abs();
                let sup = k.iter().map(|x| x.abs()).max().unwrap_or(0) as f64;
                let value = if divisor <= floor {
                    0.0
                } else {
                    divisor * sup.powf(tau)
                };
                if best.as_ref().is_none_or(|(b, _)| value < *b) {
                    best = Some((value, k.clone()));
                }
            }
        }
        // lexicographic odometer, last axis fastest
        let mut axis = d;
        loop {
            if axis == 0 {
                let (c_hat, k_star) = best.expect("scan visits k = e_1");
                return Ok(Resonance { k_star, c_hat });
            }
            axis -= 1;
            if k[axis] < kmax {
                k[axis] += 1;
                break;
            }
            k[axis] = -kmax;
        }
    }
}

/// Scans to depth `kmax` and packages the result as a certificate.
pub fn certify(omega: &[f64], tau: f64, kmax: u32) -> Result<FrequencyVector> {
    let d = omega.len();
    // tau = d - 1 is admitted: badly approximable vectors such as (1, golden)
    // satisfy the condition there, and every estimate downstream only needs
    // the divisor series to converge.
    if d > 0 && tau < d as f64 - 1.0 {
        return Err(KamError::InvalidArgument(format!(
            "tau = {tau} must be at least d - 1 = {}",
            d - 1
        )));
    }
    let scan = worst_resonance(omega, tau, kmax)?;
    if scan.c_hat == 0.0 {
        let divisor = omega
            .iter()
            .zip(&scan.k_star)
            .map(|(w, &k)| w * k as f64)
            .sum::<f64>()
            .abs();
        return Err(KamError::Resonance {
            k: scan.k_star,
            divisor,
        });
    }
    Ok(FrequencyVector {
        omega: omega.to_vec(),
        certificate: Some(DiophantineCertificate {
            c: scan.c_hat,
            tau,
            scan_depth: kmax,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOLDEN: f64 = 1.618_033_988_749_895;

    #[test]
    fn equal_frequencies_are_resonant_at_one_minus_one() {
        let r = worst_resonance(&[1.0, 1.0], 1.5, 5).unwrap();
        assert_eq!(r.c_hat, 0.0);
        assert_eq!(r.k_star, vec![1, -1]);
    }

    #[test]
    fn one_dimensional_minimum_at_k_one() {
        let r = worst_resonance(&[1.0], 0.5, 100).unwrap();
        assert_eq!(r.k_star, vec![1]);
        assert_eq!(r.c_hat, 1.0);
        let f = certify(&[2.0], 0.5, 100).unwrap();
        assert_eq!(f.certificate().unwrap().c, 2.0);
    }

    #[test]
    fn certify_rejects_resonance_and_small_tau() {
        match certify(&[1.0, 1.0], 2.0, 10) {
            Err(KamError::Resonance { k, .. }) => assert_eq!(k, vec![1, -1]),
            other => panic!("expected resonance, got {other:?}"),
        }
        assert!(certify(&[1.0, GOLDEN], 0.5, 10).is_err());
        assert!(certify(&[1.0, GOLDEN], 1.0, 10).is_ok());
        assert!(worst_resonance(&[0.0, 0.0], 1.0, 3).is_err());
        assert!(worst_resonance(&[1.0], 1.0, 0).is_err());
    }

    #[test]
    fn certificate_is_rechecked() {
        let f = certify(&[1.0, GOLDEN], 1.0, 30).unwrap();
        let cert = f.certificate().unwrap().clone();
        assert!(FrequencyVector::with_certificate(vec![1.0, GOLDEN], cert.clone()).is_ok());
        let inflated = DiophantineCertificate {
            c: cert.c * 2.0,
            ..cert
        };
        assert!(FrequencyVector::with_certificate(vec![1.0, GOLDEN], inflated).is_err());
    }
}
