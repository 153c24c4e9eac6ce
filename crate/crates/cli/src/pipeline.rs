//! Certify, iterate, verify and report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use kam_core::diophantine::{certify, default_tau, DiophantineCertificate};
use kam_core::iteration::{
    run, ComposedMap, IterationRecord, IterationSchedule, MapDocument, RunOutcome, Termination,
};
use kam_core::step::{KolmogorovForm, TwistData};
use kam_core::verify::{conjugacy_residual, flow_invariance, symplectic_check, PointHamiltonian};
use kam_core::{AnalyticityDomain, FourierTaylorSeries, SeriesShape};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{HamiltonianSpec, RunConfig, Thresholds, Truncation};
use crate::{presets, CliError};

pub const REPORT_FILE: &str = "report.json";
pub const CSV_FILE: &str = "iterations.csv";
pub const RESIDUALS_FILE: &str = "residuals.csv";
pub const MAP_FILE: &str = "map.json";
pub const PLOT_FILE: &str = "convergence.gp";

/// Everything needed to start the iteration.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub form: KolmogorovForm,
    pub twist: TwistData,
    pub schedule: IterationSchedule,
}

fn shape_for(config: &RunConfig) -> Result<SeriesShape, CliError> {
    let d = config.dim();
    let t = match (&config.hamiltonian, config.truncation) {
        (_, Some(t)) => t,
        (HamiltonianSpec::Preset { .. }, None) => Truncation::default(),
        (HamiltonianSpec::Series { f0, f1 }, None) => Truncation {
            fourier: f0.fourier_cutoff().max(f1.fourier_cutoff()),
            taylor: f0.taylor_degree().max(f1.taylor_degree()).max(2),
        },
    };
    Ok(SeriesShape::new(d, t.fourier, t.taylor)?)
}

/// Builds the initial form, twist data and schedule.
pub fn prepare(config: &RunConfig) -> Result<Prepared, CliError> {
    config.validate()?;
    let d = config.dim();
    let shape = shape_for(config)?;
    let tau = config.tau.unwrap_or_else(|| default_tau(d));
    let kmax = config.kmax.unwrap_or(shape.fourier_cutoff);
    let omega = certify(&config.omega, tau, kmax)?;
    let (f0, f1) = match &config.hamiltonian {
        HamiltonianSpec::Preset { name, twist } => {
            presets::build(name, &config.omega, *twist, shape)?
        }
        HamiltonianSpec::Series { f0, f1 } => (f0.retruncate(shape)?.0, f1.retruncate(shape)?.0),
    };
    let domain = AnalyticityDomain::new(config.domain.rho, config.domain.delta)?;
    let form = KolmogorovForm::from_near_integrable(&f0, &f1, config.epsilon, omega, domain)?;
    let twist = TwistData::for_form(&form)?;
    let schedule = IterationSchedule::new(&form, &twist, &config.schedule)?;
    Ok(Prepared {
        form,
        twist,
        schedule,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub freq_err: f64,
    pub angle_dep_err: f64,
    pub flow_dist: f64,
    pub rotation_err: f64,
    pub sympl_defect: f64,
    pub passed: bool,
}

/// Runs the pointwise oracles for a map against the original Hamiltonian.
pub fn verify_map(
    config: &RunConfig,
    form: &KolmogorovForm,
    map: &ComposedMap,
) -> Result<Verification, CliError> {
    let v = &config.verify;
    let d = form.dim();
    let hamiltonian = PointHamiltonian::new(form)?;
    let omega = form.omega().omega().to_vec();
    let grid = if v.grid > 0 {
        v.grid
    } else if d == 1 {
        64
    } else {
        16
    };
    let conj = conjugacy_residual(
        &hamiltonian,
        map,
        &omega,
        grid,
        v.fd_step * form.domain().rho,
    )?;
    let theta0 = v.theta0.clone().unwrap_or_else(|| vec![0.3; d]);
    let flow = flow_invariance(&hamiltonian, map, &omega, &theta0, &v.flow)?;
    let sympl = symplectic_check(map, &map.domain(), v.symplectic_samples, config.seed)?;
    let t: &Thresholds = &v.thresholds;
    let passed = conj.freq_err < t.freq_err
        && conj.angle_dep_err < t.angle_dep_err
        && flow.max_distance < t.flow_dist
        && flow.rotation_error < t.rotation_err
        && sympl < t.sympl_defect;
    Ok(Verification {
        freq_err: conj.freq_err,
        angle_dep_err: conj.angle_dep_err,
        flow_dist: flow.max_distance,
        rotation_err: flow.rotation_error,
        sympl_defect: sympl,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub deviation: f64,
    pub jacobian_deviation: f64,
    pub injective: bool,
    pub total_increment: f64,
    pub bound: f64,
    pub bound_holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub converged: bool,
    pub passed: bool,
    pub termination: Termination,
    pub steps: usize,
    pub epsilon0: f64,
    pub final_epsilon: f64,
    pub fitted_exponent: Option<f64>,
    pub step_ratios: Vec<f64>,
    pub kappa: f64,
    pub above_kappa: bool,
    pub certificate: DiophantineCertificate,
    pub schedule: IterationSchedule,
    pub map: MapSummary,
    pub verification: Option<Verification>,
    pub thresholds: Thresholds,
    pub records: Vec<IterationRecord>,
    pub config: RunConfig,
    pub map_file: String,
}

/// Result of a full pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub report: Report,
    pub outcome: RunOutcome,
    pub initial: KolmogorovForm,
}

impl PipelineOutcome {
    /// 0 when converged and verified, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.report.passed {
            0
        } else {
            1
        }
    }
}

/// Iterates and, for converged runs, verifies. Nothing is written to disk.
pub fn execute(config: &RunConfig, with_verification: bool) -> Result<PipelineOutcome, CliError> {
    let prepared = prepare(config)?;
    let outcome = run(&prepared.form, &prepared.twist, &prepared.schedule);
    info!(
        "run finished: {:?} after {} steps",
        outcome.termination,
        outcome.steps()
    );
    let converged = outcome.converged();
    let verification = if converged && with_verification {
        Some(verify_map(config, &prepared.form, &outcome.map)?)
    } else {
        None
    };
    let jacobian_deviation = outcome.map.jacobian_deviation()?;
    let epsilon0 = prepared.form.epsilon();
    let map = MapSummary {
        deviation: outcome.map.deviation()?,
        jacobian_deviation,
        injective: jacobian_deviation < 0.5,
        total_increment: outcome.total_increment(),
        bound: prepared.schedule.map_constant * epsilon0,
        bound_holds: outcome.map_bound_holds(&prepared.schedule),
    };
    let passed = converged
        && verification
            .as_ref()
            .map_or(!with_verification, |v| v.passed);
    let report = Report {
        converged,
        passed,
        termination: outcome.termination.clone(),
        steps: outcome.steps(),
        epsilon0,
        final_epsilon: outcome.final_form.epsilon(),
        fitted_exponent: outcome.fitted_slope(),
        step_ratios: outcome
            .records
            .iter()
            .filter_map(|r| r.step_ratio)
            .collect(),
        kappa: prepared.schedule.kappa,
        above_kappa: epsilon0 >= prepared.schedule.kappa,
        certificate: prepared
            .form
            .omega()
            .certificate()
            .cloned()
            .expect("certified above"),
        schedule: prepared.schedule.clone(),
        map,
        verification,
        thresholds: config.verify.thresholds,
        records: outcome.records.clone(),
        config: config.clone(),
        map_file: MAP_FILE.into(),
    };
    Ok(PipelineOutcome {
        report,
        outcome,
        initial: prepared.form,
    })
}

/// `n,delta_n,eps_n,eps_hat_n,gamma_n,eta_n,ms`
pub fn iterations_csv(records: &[IterationRecord]) -> String {
    let mut out = String::from("n,delta_n,eps_n,eps_hat_n,gamma_n,eta_n,ms\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{}",
            r.n,
            r.delta_n,
            r.epsilon,
            r.epsilon_hat,
            r.gamma,
            r.eta,
            r.wall_time_ms.round() as u64
        );
    }
    out
}

fn residuals_csv(records: &[IterationRecord]) -> String {
    let mut out =
        String::from("n,u_equation,v_equation,alpha_equation,truncation_tail,step_ratio\n");
    for r in records.iter().skip(1) {
        let res = r.residuals.unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.n,
            res.u_equation,
            res.v_equation,
            res.alpha_equation,
            r.truncation_tail,
            r.step_ratio.unwrap_or(0.0)
        );
    }
    out
}

const PLOT_SCRIPT: &str = "set datafile separator ','
set key autotitle columnhead
set logscale y
set xlabel 'n'
set multiplot layout 1,2
plot 'iterations.csv' using 1:3 with linespoints title 'eps_n', '' using 1:4 with linespoints title 'eps_hat_n'
plot 'residuals.csv' using 1:2 with linespoints, '' using 1:3 with linespoints, '' using 1:5 with linespoints
unset multiplot
";

fn write(path: PathBuf, contents: &str) -> Result<(), CliError> {
    std::fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}

/// Writes the report, CSV files, plot script and map into `dir`.
pub fn write_outputs(dir: &Path, outcome: &PipelineOutcome) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write(
        dir.join(REPORT_FILE),
        &serde_json::to_string_pretty(&outcome.report)?,
    )?;
    write(dir.join(CSV_FILE), &iterations_csv(&outcome.report.records))?;
    write(
        dir.join(RESIDUALS_FILE),
        &residuals_csv(&outcome.report.records),
    )?;
    write(dir.join(PLOT_FILE), PLOT_SCRIPT)?;
    write(
        dir.join(MAP_FILE),
        &serde_json::to_string(&outcome.outcome.map.to_document())?,
    )?;
    Ok(())
}

/// Re-runs the oracles on a saved run: the Hamiltonian is rebuilt from the
/// stored configuration and the map is read from the map file next to the
/// report.
pub fn verify_saved(report_path: &Path) -> Result<Verification, CliError> {
    let read = |path: &Path| {
        std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    let report: Report = serde_json::from_str(&read(report_path)?)?;
    let map_path = report_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&report.map_file);
    let doc: MapDocument = serde_json::from_str(&read(&map_path)?)?;
    let map = ComposedMap::from_document(doc)?;
    let prepared = prepare(&report.config)?;
    verify_map(&report.config, &prepared.form, &map)
}

/// One line of a parameter sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub epsilon_form: f64,
    pub converged: bool,
    pub steps: usize,
    pub final_epsilon: f64,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub kappa: f64,
    /// Largest swept `eps_0` below which every run converged.
    pub boundary: Option<f64>,
    pub points: Vec<SweepPoint>,
}

fn sweep_point(config: &RunConfig, epsilon: f64) -> SweepPoint {
    let mut c = config.clone();
    c.epsilon = epsilon;
    match prepare(&c) {
        Err(e) => SweepPoint {
            epsilon,
            epsilon_form: f64::NAN,
            converged: false,
            steps: 0,
            final_epsilon: f64::NAN,
            status: e.kind().into(),
        },
        Ok(p) => {
            let out = run(&p.form, &p.twist, &p.schedule);
            let status = match &out.termination {
                Termination::Converged => "converged".to_string(),
                Termination::MaxSteps => "max_steps".to_string(),
                Termination::HypothesisFailed { .. } => "hypothesis_failed".to_string(),
                Termination::Failed { kind, .. } => kind.clone(),
            };
            SweepPoint {
                epsilon,
                epsilon_form: p.form.epsilon(),
                converged: out.converged(),
                steps: out.steps(),
                final_epsilon: out.final_form.epsilon(),
                status,
            }
        }
    }
}

/// Runs `config` at every `eps_0` in `epsilons` (sorted ascending), in
/// parallel on scoped threads.
pub fn sweep(config: &RunConfig, epsilons: &[f64]) -> Result<SweepSummary, CliError> {
    let mut eps: Vec<f64> = epsilons.to_vec();
    eps.sort_by(f64::total_cmp);
    let kappa = prepare(config)?.schedule.kappa;
    let points: Vec<SweepPoint> = std::thread::scope(|scope| {
        let handles: Vec<_> = eps
            .iter()
            .map(|&e| scope.spawn(move || sweep_point(config, e)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let boundary = points
        .iter()
        .take_while(|p| p.converged)
        .last()
        .map(|p| p.epsilon);
    Ok(SweepSummary {
        kappa,
        boundary,
        points,
    })
}

pub fn sweep_csv(summary: &SweepSummary) -> String {
    let mut out = String::from("eps0,eps_form,converged,steps,final_eps,status\n");
    for p in &summary.points {
        let _ = writeln!(
            out,
            "{:e},{:e},{},{},{:e},{}",
            p.epsilon, p.epsilon_form, p.converged, p.steps, p.final_epsilon, p.status
        );
    }
    out
}

/// Random zero-mean series solved and re-differentiated; returns the
/// largest `|L f - g| / |g|` in the majorant norm.
pub fn cohomology_selftest(seed: u64, count: usize) -> Result<(usize, f64), CliError> {
    use kam_core::cohomology::solve;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let golden = 0.5 * (1.0 + 5f64.sqrt());
    let domain = AnalyticityDomain::new(1.0, 0.5)?;
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let (omega, dim) = if i % 2 == 0 {
            (vec![1.0], 1)
        } else {
            (vec![1.0, golden], 2)
        };
        let cutoff = 1 + (i as u32 * 7) % 16;
        let shape = SeriesShape::new(dim, cutoff, 0)?;
        let w = certify(&omega, default_tau(dim), cutoff)?;
        let g: FourierTaylorSeries = random_series(&mut rng, shape)?;
        let f = solve(&g, &w)?;
        let residual = f.lie_derivative(&omega)?.sub(&g)?.majorant(&domain)?;
        worst = worst.max(residual / g.majorant(&domain)?);
    }
    Ok((count, worst))
}

/// Real zero-mean series with cosine and sine modes of random amplitude.
pub fn random_series(
    rng: &mut impl rand::Rng,
    shape: SeriesShape,
) -> kam_core::Result<FourierTaylorSeries> {
    let d = shape.dim;
    let k_max = shape.fourier_cutoff as i32;
    let mut g = FourierTaylorSeries::zero(shape);
    for _ in 0..(4 * shape.fourier_cutoff) {
        let k: Vec<i32> = (0..d).map(|_| rng.gen_range(-k_max..=k_max)).collect();
        if k.iter().all(|&x| x == 0) {
            continue;
        }
        let a = rng.gen_range(-1.0..1.0);
        let term = if rng.gen_bool(0.5) {
            FourierTaylorSeries::cosine(shape, &k, a)?
        } else {
            FourierTaylorSeries::sine(shape, &k, a)?
        };
        g = g.add(&term)?;
    }
    Ok(g)
}
