//! Built-in Hamiltonians.
//!
//! * `pendulum` (d = 1): `f0 = omega r + s r^2 / 2`, `f1 = cos theta`.
//! * `golden2d` (d = 2): `f0 = omega.r + s |r|^2 / 2`,
//!   `f1 = cos(theta_1 + theta_2)`.
//!
//! `s` is the `twist` parameter of the preset (1 by default).

use kam_core::step::monomial;
use kam_core::{FourierTaylorSeries, SeriesShape};

use crate::CliError;

pub const PRESETS: [&str; 2] = ["pendulum", "golden2d"];

pub fn preset_dim(name: &str) -> Option<usize> {
    match name {
        "pendulum" => Some(1),
        "golden2d" => Some(2),
        _ => None,
    }
}

/// `(f0, f1)` for a preset with the given frequency and truncation.
pub fn build(
    name: &str,
    omega: &[f64],
    twist: f64,
    shape: SeriesShape,
) -> Result<(FourierTaylorSeries, FourierTaylorSeries), CliError> {
    let dim = preset_dim(name).ok_or_else(|| CliError::Config {
        field: "hamiltonian.preset.name".into(),
        message: format!("unknown preset `{name}` (known: {})", PRESETS.join(", ")),
    })?;
    if omega.len() != dim {
        return Err(CliError::Config {
            field: "omega".into(),
            message: format!(
                "preset `{name}` needs {dim} frequencies, got {}",
                omega.len()
            ),
        });
    }
    if !(twist.is_finite() && twist != 0.0) {
        return Err(CliError::Config {
            field: "hamiltonian.preset.twist".into(),
            message: format!("twist must be finite and non-zero, got {twist}"),
        });
    }
    let mut f0 = FourierTaylorSeries::zero(shape);
    for (i, w) in omega.iter().enumerate() {
        let mut m = vec![0; dim];
        m[i] = 1;
        f0 = f0.add(&monomial(shape, &m)?.scale(*w))?;
        m[i] = 2;
        f0 = f0.add(&monomial(shape, &m)?.scale(0.5 * twist))?;
    }
    let k = vec![1; dim];
    let f1 = FourierTaylorSeries::cosine(shape, &k, 1.0)?;
    Ok((f0, f1))
}
