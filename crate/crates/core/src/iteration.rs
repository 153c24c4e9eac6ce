//! The outer quadratic scheme.
//!
//! Step `n` uses the analyticity loss `delta_{n+1} = delta / 3^{n+1}` with
//! `delta = min(rho_0, Delta_0, 1)`, so the domains shrink to at most half
//! their initial size. Before every step the two hypotheses of the scheme
//! are checked:
//!
//! * size: `gamma_n <= 2 gamma_0`, `eta_n <= eta_0` with `eta_n < beta`,
//!   and the current domain lies between half and all of the initial one;
//! * smallness: `delta_{n+1} <= min(rho_0/3, Delta_0/3, 1)` and
//!   `eps_n < delta_{n+1}^nu / C` with `nu = 2 (d + tau + 2)`.
//!
//! The conjugating map is accumulated on the fixed domain
//! `V = A_{3 rho_0/8, 3 Delta_0/8}`.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::series::{AnalyticityDomain, FourierTaylorSeries, SeriesShape};
use crate::step::{kolmogorov_step, GeneratorResiduals, KolmogorovForm, StepMap, TwistData};

/// Step constant `C` calibrated on the reference pendulum run (about ten
/// times the largest measured `eps_{n+1} delta_{n+1}^{2 nu} / eps_n^2`).
pub const DEFAULT_STEP_CONSTANT: f64 = 1e-7;
/// Constant in `sum |psi_n - psi_{n-1}| <= C_map eps_0`, calibrated the same
/// way from the measured map increments.
pub const DEFAULT_MAP_CONSTANT: f64 = 10.0;
pub const DEFAULT_MAX_STEPS: usize = 10;
/// Default stopping tolerance relative to `gamma_0`.
pub const DEFAULT_RELATIVE_STOP: f64 = 1e-13;

/// User-tunable parts of the schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleOptions {
    pub step_constant: f64,
    pub map_constant: f64,
    pub max_steps: usize,
    /// Absolute tolerance on `eps_n`; defaults to `1e-13 gamma_0`.
    pub stop_tol: Option<f64>,
    /// Bound on `|S - S_hat|`; defaults to `beta`.
    pub eta0: Option<f64>,
    /// Record wall-clock time per step; off by default so that output is
    /// reproducible.
    pub timing: bool,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            step_constant: DEFAULT_STEP_CONSTANT,
            map_constant: DEFAULT_MAP_CONSTANT,
            max_steps: DEFAULT_MAX_STEPS,
            stop_tol: None,
            eta0: None,
            timing: false,
        }
    }
}

/// Losses, domains and thresholds of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSchedule {
    pub dim: usize,
    pub tau: f64,
    pub rho0: f64,
    pub strip0: f64,
    /// `delta = min(rho_0, Delta_0, 1)`
    pub delta_base: f64,
    /// `nu = 2 (d + tau + 2)`
    pub nu: f64,
    pub step_constant: f64,
    pub map_constant: f64,
    /// Admissible `eps_0` from the bounding lemma.
    pub kappa: f64,
    pub max_steps: usize,
    pub stop_tol: f64,
    pub gamma0: f64,
    pub eta0: f64,
    pub beta: f64,
    pub timing: bool,
}

impl IterationSchedule {
    pub fn new(
        form: &KolmogorovForm,
        twist: &TwistData,
        options: &ScheduleOptions,
    ) -> Result<Self> {
        let cert = form
            .omega()
            .certificate()
            .ok_or(KamError::InsufficientCertificate {
                depth: 0,
                needed: form.shape().fourier_cutoff,
            })?;
        for (name, value) in [
            ("step", options.step_constant),
            ("map", options.map_constant),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(KamError::InvalidArgument(format!(
                    "{name} constant must be positive, got {value}"
                )));
            }
        }
        let dim = form.dim();
        let domain = form.domain();
        let delta_base = domain.rho.min(domain.delta_strip).min(1.0);
        let nu = 2.0 * (dim as f64 + cert.tau + 2.0);
        let gamma0 = twist.gamma;
        let eta0 = options.eta0.unwrap_or(twist.beta);
        if !(eta0 > 0.0 && eta0 <= twist.beta) {
            return Err(KamError::InvalidArgument(format!(
                "eta0 = {eta0} must lie in (0, beta = {}]",
                twist.beta
            )));
        }
        let stop_tol = options.stop_tol.unwrap_or(DEFAULT_RELATIVE_STOP * gamma0);
        if !(stop_tol > 0.0) {
            return Err(KamError::InvalidArgument(format!(
                "stop tolerance must be positive, got {stop_tol}"
            )));
        }
        let mut schedule = Self {
            dim,
            tau: cert.tau,
            rho0: domain.rho,
            strip0: domain.delta_strip,
            delta_base,
            nu,
            step_constant: options.step_constant,
            map_constant: options.map_constant,
            kappa: 0.0,
            max_steps: options.max_steps,
            stop_tol,
            gamma0,
            eta0,
            beta: twist.beta,
            timing: options.timing,
        };
        let k = schedule.lemma_constants();
        schedule.kappa = kappa_threshold(k[0], k[1], k[2], k[3], k[4], k[5]);
        schedule.check_domain_chain()?;
        Ok(schedule)
    }

    /// `(C1, C2, C3, C4, c1, c2)` for the bounding lemma, from
    /// `sup_n x^{2^n} (C delta^{-2nu})^n 3^{nu (n+1)^2} < delta^nu / C` and
    /// `sum_n x^{2^n} (C delta^{-2nu})^{n+1} 3^{nu (n+1)^2} < min(eta_0, gamma_0) delta^{-nu}`.
    pub fn lemma_constants(&self) -> [f64; 6] {
        let c = self.step_constant;
        let d = self.delta_base;
        let three_nu = 3f64.powf(self.nu);
        let growth = c * d.powf(-2.0 * self.nu) * three_nu * three_nu;
        let c1 = d.powf(self.nu) / (c * three_nu);
        let c2 =
            self.eta0.min(self.gamma0) * d.powf(-self.nu) / (c * d.powf(-2.0 * self.nu) * three_nu);
        [growth, three_nu, growth, three_nu, c1, c2]
    }

    /// `delta_n = delta / 3^n`.
    pub fn loss(&self, n: usize) -> f64 {
        self.delta_base / 3f64.powi(n as i32)
    }

    /// `A_{rho_n, Delta_n}` after `n` losses.
    pub fn domain(&self, n: usize) -> AnalyticityDomain {
        let spent = 0.5 * self.delta_base * (1.0 - 3f64.powi(-(n as i32)));
        AnalyticityDomain {
            rho: self.rho0 - spent,
            delta_strip: self.strip0 - spent,
        }
    }

    pub fn verification_domain(&self) -> AnalyticityDomain {
        AnalyticityDomain {
            rho: 3.0 * self.rho0 / 8.0,
            delta_strip: 3.0 * self.strip0 / 8.0,
        }
    }

    /// Largest `eps_n` admitted before step `n + 1`.
    pub fn smallness_threshold(&self, n: usize) -> f64 {
        self.loss(n + 1).powf(self.nu) / self.step_constant
    }

    /// Every `A_{rho_n, Delta_n}` stays within half of the initial domain and
    /// contains `V`.
    pub fn check_domain_chain(&self) -> Result<()> {
        let limit = self.domain(usize::BITS as usize);
        let v = self.verification_domain();
        if limit.rho < 0.5 * self.rho0 * (1.0 - 1e-12)
            || limit.delta_strip < 0.5 * self.strip0 * (1.0 - 1e-12)
        {
            return Err(KamError::DomainShortfall(format!(
                "limit domain ({}, {}) is below half of ({}, {})",
                limit.rho, limit.delta_strip, self.rho0, self.strip0
            )));
        }
        if v.rho >= limit.rho || v.delta_strip >= limit.delta_strip {
            return Err(KamError::DomainShortfall(
                "verification domain is not inside the limit domain".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of the hypothesis checks before a step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub h1_ok: bool,
    pub h2_ok: bool,
    pub details: Vec<String>,
}

/// Checks both hypotheses for `form` (the `n`-th iterate) before step `n + 1`.
pub fn check_hypotheses(
    form: &KolmogorovForm,
    twist: &TwistData,
    schedule: &IterationSchedule,
    n: usize,
) -> HypothesisCheck {
    let mut details = Vec::new();
    let rel = 1e-12;
    let domain = form.domain();
    let mut h1_ok = true;
    if twist.gamma > 2.0 * schedule.gamma0 {
        h1_ok = false;
        details.push(format!(
            "gamma = {:e} exceeds 2 gamma_0 = {:e}",
            twist.gamma,
            2.0 * schedule.gamma0
        ));
    }
    if twist.eta > schedule.eta0 {
        h1_ok = false;
        details.push(format!(
            "eta = {:e} exceeds eta_0 = {:e}",
            twist.eta, schedule.eta0
        ));
    }
    if !(twist.eta < schedule.beta) {
        h1_ok = false;
        details.push(format!(
            "eta = {:e} is not below beta = {:e}",
            twist.eta, schedule.beta
        ));
    }
    if domain.rho < 0.5 * schedule.rho0 * (1.0 - rel) || domain.rho > schedule.rho0 * (1.0 + rel) {
        h1_ok = false;
        details.push(format!("rho = {} outside [rho_0/2, rho_0]", domain.rho));
    }
    if domain.delta_strip <= 0.5 * schedule.strip0
        || domain.delta_strip > schedule.strip0 * (1.0 + rel)
    {
        h1_ok = false;
        details.push(format!(
            "Delta = {} outside (Delta_0/2, Delta_0]",
            domain.delta_strip
        ));
    }
    let mut h2_ok = true;
    let loss = schedule.loss(n + 1);
    let upper = (schedule.rho0 / 3.0).min(schedule.strip0 / 3.0).min(1.0);
    if !(loss > 0.0 && loss <= upper * (1.0 + rel)) {
        h2_ok = false;
        details.push(format!("loss {loss} outside (0, {upper}]"));
    }
    let threshold = schedule.smallness_threshold(n);
    if form.epsilon() > 0.0 && !(form.epsilon() < threshold) {
        h2_ok = false;
        details.push(format!(
            "eps = {:e} is not below delta^nu / C = {:e}",
            form.epsilon(),
            threshold
        ));
    }
    HypothesisCheck {
        h1_ok,
        h2_ok,
        details,
    }
}

/// Threshold `kappa` of the bounding lemma.
///
/// `kappa_1 = exp(min(-2 ln C2, -ln C1, ln c1) / ln 2)` makes
/// `sup_n x^{2^n} C1^n C2^{n^2} < c1`, and the same expression with
/// `2 C4, 2 C3, c2` makes `sum_n x^{2^n} C3^n C4^{n^2} < c2`. The proof
/// works with `0 < x < 1`, so the result is capped at 1.
pub fn kappa_threshold(
    c1_big: f64,
    c2_big: f64,
    c3_big: f64,
    c4_big: f64,
    c1: f64,
    c2: f64,
) -> f64 {
    let ln2 = std::f64::consts::LN_2;
    let k1 = ((-2.0 * c2_big.ln()).min(-c1_big.ln()).min(c1.ln()) / ln2).exp();
    let k2 = ((-2.0 * (2.0 * c4_big).ln())
        .min(-(2.0 * c3_big).ln())
        .min(c2.ln())
        / ln2)
        .exp();
    k1.min(k2).min(1.0)
}

/// `sup_{n <= n_max} x^{2^n} a^n b^{n^2}`, evaluated in log space.
pub fn lemma_sup(x: f64, a: f64, b: f64, n_max: u32) -> f64 {
    (0..=n_max)
        .map(|n| lemma_log_term(x, a, b, n))
        .fold(f64::NEG_INFINITY, f64::max)
        .exp()
}

/// `sum_{n <= n_max} x^{2^n} a^n b^{n^2}`.
pub fn lemma_sum(x: f64, a: f64, b: f64, n_max: u32) -> f64 {
    (0..=n_max).map(|n| lemma_log_term(x, a, b, n).exp()).sum()
}

fn lemma_log_term(x: f64, a: f64, b: f64, n: u32) -> f64 {
    let n = n as f64;
    2f64.powf(n) * x.ln() + n * a.ln() + n * n * b.ln()
}

/// The conjugating map `psi(R, phi) = (R + A(R, phi), phi + B(phi))` from
/// the current variables back to the original ones, stored on `V`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedMap {
    domain: AnalyticityDomain,
    outer: AnalyticityDomain,
    action: Vec<FourierTaylorSeries>,
    angle: Vec<FourierTaylorSeries>,
    increments: Vec<f64>,
    steps: Vec<StepMap>,
}

/// Serializable form of a composed map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapDocument {
    pub domain: AnalyticityDomain,
    pub outer: AnalyticityDomain,
    pub action: Vec<FourierTaylorSeries>,
    pub angle: Vec<FourierTaylorSeries>,
    pub increments: Vec<f64>,
}

impl ComposedMap {
    /// `psi = Id` on `domain`; `outer` is the domain of the original
    /// Hamiltonian.
    pub fn identity(
        shape: SeriesShape,
        domain: AnalyticityDomain,
        outer: AnalyticityDomain,
    ) -> Self {
        let zero = FourierTaylorSeries::zero(shape);
        Self {
            domain,
            outer,
            action: vec![zero.clone(); shape.dim],
            angle: vec![zero; shape.dim],
            increments: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn from_document(doc: MapDocument) -> Result<Self> {
        let d = doc.action.len();
        if doc.angle.len() != d {
            return Err(KamError::DimensionMismatch {
                expected: d,
                found: doc.angle.len(),
            });
        }
        if doc.angle.iter().any(|b| !b.is_angle_only()) {
            return Err(KamError::InvalidArgument(
                "angle part of a map must not depend on actions".into(),
            ));
        }
        Ok(Self {
            domain: doc.domain,
            outer: doc.outer,
            action: doc.action,
            angle: doc.angle,
            increments: doc.increments,
            steps: Vec::new(),
        })
    }

    pub fn to_document(&self) -> MapDocument {
        MapDocument {
            domain: self.domain,
            outer: self.outer,
            action: self.action.clone(),
            angle: self.angle.clone(),
            increments: self.increments.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.action.len()
    }

    pub fn domain(&self) -> AnalyticityDomain {
        self.domain
    }

    pub fn action_part(&self) -> &[FourierTaylorSeries] {
        &self.action
    }

    pub fn angle_part(&self) -> &[FourierTaylorSeries] {
        &self.angle
    }

    /// `|psi_n - psi_{n-1}|` on `V`, one entry per composed step.
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn steps(&self) -> &[StepMap] {
        &self.steps
    }

    /// `|psi - Id|` on `V`.
    pub fn deviation(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for s in self.action.iter().chain(&self.angle) {
            worst = worst.max(s.majorant(&self.domain)?);
        }
        Ok(worst)
    }

    /// Majorant of `d psi - I` on `V` (largest row sum).
    pub fn jacobian_deviation(&self) -> Result<f64> {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            let mut row_a = 0.0;
            let mut row_b = 0.0;
            for j in 0..d {
                row_a += self.action[i].partial_r(j)?.majorant(&self.domain)?;
                row_a += self.action[i].partial_theta(j)?.majorant(&self.domain)?;
                row_b += self.angle[i].partial_theta(j)?.majorant(&self.domain)?;
            }
            worst = worst.max(row_a).max(row_b);
        }
        Ok(worst)
    }

    /// `psi o step^{-1}`: the new variables of `step` become the current ones.
    pub fn compose_step(&self, step: &StepMap) -> Result<Self> {
        let d = self.dim();
        let gen = step.generator();
        let mut out = self.clone();
        if gen.is_zero() {
            out.increments.push(0.0);
            out.steps.push(step.clone());
            return Ok(out);
        }
        let shape = gen.u.shape();
        let w = step.angle_inverse();
        let shift = gen.action_shift(shape)?;
        let moved = shift
            .iter()
            .enumerate()
            .map(|(j, s)| s.add(&FourierTaylorSeries::action(shape, j)?))
            .collect::<Result<Vec<_>>>()?;
        let mut increment: f64 = 0.0;
        for j in 0..d {
            let b = w[j].add(&self.angle[j].compose_angle(w)?)?;
            let a = shift[j]
                .add(&self.action[j].substitute_actions(&moved)?)?
                .compose_angle(w)?;
            increment = increment.max(b.sub(&self.angle[j])?.majorant(&self.domain)?);
            increment = increment.max(a.sub(&self.action[j])?.majorant(&self.domain)?);
            out.angle[j] = b;
            out.action[j] = a;
        }
        let mut angle_dev: f64 = 0.0;
        let mut action_dev: f64 = 0.0;
        for j in 0..d {
            angle_dev = angle_dev.max(out.angle[j].majorant(&self.domain)?);
            action_dev = action_dev.max(out.action[j].majorant(&self.domain)?);
        }
        if angle_dev + self.domain.delta_strip > 0.5 * self.outer.delta_strip
            || action_dev + self.domain.rho > 0.5 * self.outer.rho
        {
            return Err(KamError::DomainShortfall(format!(
                "composed map moves V by ({action_dev:e}, {angle_dev:e}), beyond half of the initial domain"
            )));
        }
        out.increments.push(increment);
        out.steps.push(step.clone());
        Ok(out)
    }

    /// `psi(R, phi)` from the stored series.
    pub fn apply(&self, big_r: &[f64], phi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.dim();
        let zero = vec![0.0; d];
        let mut r = Vec::with_capacity(d);
        let mut theta = Vec::with_capacity(d);
        for j in 0..d {
            r.push(big_r[j] + self.action[j].evaluate_real(big_r, phi)?);
            theta.push(phi[j] + self.angle[j].evaluate_real(&zero, phi)?);
        }
        Ok((r, theta))
    }

    /// `psi(R, phi)` by applying the inverse of every stored step map
    /// pointwise, newest first. Independent of the composed series.
    pub fn apply_pointwise(&self, big_r: &[f64], phi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut point = (big_r.to_vec(), phi.to_vec());
        for step in self.steps.iter().rev() {
            point = step.inverse(&point.0, &point.1)?;
        }
        Ok(point)
    }
}

/// Bookkeeping for one iterate `H_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub n: usize,
    pub delta_n: f64,
    pub rho_n: f64,
    pub strip_n: f64,
    pub epsilon: f64,
    /// `|phi_n - Id|` of the step that produced this iterate (0 for `n = 0`).
    pub epsilon_hat: f64,
    pub epsilon_hat_inverse: f64,
    pub gamma: f64,
    pub eta: f64,
    pub h1_ok: bool,
    pub h2_ok: bool,
    pub smallness_threshold: f64,
    /// `eps_n delta_n^{2 nu} / eps_{n-1}^2`.
    pub step_ratio: Option<f64>,
    pub map_increment: f64,
    pub shift_norm: f64,
    pub dv_norm: f64,
    pub truncation_tail: f64,
    pub residuals: Option<GeneratorResiduals>,
    pub wall_time_ms: f64,
}

/// Why a run stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxSteps,
    HypothesisFailed { n: usize, reasons: Vec<String> },
    Failed { kind: String, message: String },
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub records: Vec<IterationRecord>,
    pub final_form: KolmogorovForm,
    pub map: ComposedMap,
    pub termination: Termination,
    pub error: Option<KamError>,
}

impl RunOutcome {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    /// `sum |psi_n - psi_{n-1}|` on `V`.
    pub fn total_increment(&self) -> f64 {
        self.map.increments().iter().sum()
    }

    /// Whether the accumulated map increments stay below `C_map eps_0`.
    pub fn map_bound_holds(&self, schedule: &IterationSchedule) -> bool {
        self.total_increment() <= schedule.map_constant * self.records[0].epsilon
    }

    /// Number of Kolmogorov steps taken.
    pub fn steps(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    /// Least-squares slope of `log eps_{n+1}` against `log eps_n`.
    pub fn fitted_slope(&self) -> Option<f64> {
        let eps: Vec<f64> = self.records.iter().map(|r| r.epsilon).collect();
        quadratic_slope(&eps)
    }
}

/// Slope of the log-log fit over consecutive positive pairs; `None` with
/// fewer than two pairs.
pub fn quadratic_slope(eps: &[f64]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = eps
        .windows(2)
        .filter(|w| w[0] > 0.0 && w[1] > 0.0)
        .map(|w| (w[0].ln(), w[1].ln()))
        .collect();
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

/// Iterates Kolmogorov steps until `eps_n < stop_tol`, a hypothesis fails,
/// an error occurs or `max_steps` is reached. Records are kept in every case.
pub fn run(
    initial: &KolmogorovForm,
    twist: &TwistData,
    schedule: &IterationSchedule,
) -> RunOutcome {
    if initial.epsilon() >= schedule.kappa {
        warn!(
            "eps_0 = {:e} is not below the bounding-lemma threshold {:e}; convergence is not guaranteed",
            initial.epsilon(),
            schedule.kappa
        );
    }
    let outer = initial.domain();
    let mut map = ComposedMap::identity(initial.shape(), schedule.verification_domain(), outer);
    let mut form = initial.clone();
    let mut twist = twist.clone();
    let first = check_hypotheses(&form, &twist, schedule, 0);
    let mut records = vec![IterationRecord {
        n: 0,
        delta_n: schedule.loss(0),
        rho_n: outer.rho,
        strip_n: outer.delta_strip,
        epsilon: form.epsilon(),
        epsilon_hat: 0.0,
        epsilon_hat_inverse: 0.0,
        gamma: twist.gamma,
        eta: twist.eta,
        h1_ok: first.h1_ok,
        h2_ok: first.h2_ok,
        smallness_threshold: schedule.smallness_threshold(0),
        step_ratio: None,
        map_increment: 0.0,
        shift_norm: 0.0,
        dv_norm: 0.0,
        truncation_tail: 0.0,
        residuals: None,
        wall_time_ms: 0.0,
    }];
    let mut check = first;
    let mut n = 0;
    let termination = loop {
        if form.epsilon() < schedule.stop_tol {
            break Termination::Converged;
        }
        if n >= schedule.max_steps {
            break Termination::MaxSteps;
        }
        if !(check.h1_ok && check.h2_ok) {
            break Termination::HypothesisFailed {
                n,
                reasons: check.details.clone(),
            };
        }
        let started = Instant::now();
        let loss = schedule.loss(n + 1);
        let attempt = kolmogorov_step(&form, &twist, loss).and_then(|out| {
            let composed = map.compose_step(&out.map)?;
            let new_twist = twist.update(&out.pullback.form)?;
            Ok((out, composed, new_twist))
        });
        let (out, composed, new_twist) = match attempt {
            Ok(v) => v,
            Err(e) => {
                let termination = Termination::Failed {
                    kind: e.kind().into(),
                    message: e.to_string(),
                };
                return RunOutcome {
                    records,
                    final_form: form,
                    map,
                    termination,
                    error: Some(e),
                };
            }
        };
        let elapsed = if schedule.timing {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        let previous_eps = form.epsilon();
        form = out.pullback.form.clone();
        twist = new_twist;
        map = composed;
        n += 1;
        check = check_hypotheses(&form, &twist, schedule, n);
        let deviation = out.map.deviation();
        let record = IterationRecord {
            n,
            delta_n: loss,
            rho_n: form.domain().rho,
            strip_n: form.domain().delta_strip,
            epsilon: form.epsilon(),
            epsilon_hat: deviation.forward,
            epsilon_hat_inverse: deviation.inverse,
            gamma: twist.gamma,
            eta: twist.eta,
            h1_ok: check.h1_ok,
            h2_ok: check.h2_ok,
            smallness_threshold: schedule.smallness_threshold(n),
            step_ratio: (previous_eps > 0.0).then(|| {
                form.epsilon() * loss.powf(2.0 * schedule.nu) / (previous_eps * previous_eps)
            }),
            map_increment: *map.increments().last().unwrap_or(&0.0),
            shift_norm: out.shift_norm,
            dv_norm: out.dv_norm,
            truncation_tail: out.pullback.diagnostics.truncation_tail,
            residuals: Some(out.generator_residuals),
            wall_time_ms: elapsed,
        };
        info!(
            "step {n}: eps = {:e}, eps_hat = {:e}",
            record.epsilon, record.epsilon_hat
        );
        records.push(record);
    };
    RunOutcome {
        records,
        final_form: form,
        map,
        termination,
        error: None,
    }
}
