//! The stochastic ADMM iteration loop.
//!
//! Each iteration samples a minibatch of scans, then updates the blocks in
//! fixed order: measurement splits `u`, probe `omega` (blind mode only),
//! gradient splits `v`, object `z`, and finally the multipliers. Minibatch
//! semantics freeze `u_j` and `Lambda_j` for scans outside the batch, while
//! the gradient-split multiplier always advances.
//!
//! Step sizes follow a piecewise-constant schedule that drops by 10x at the
//! halfway and three-quarter marks of the run, scaled by `sqrt(b)`.

use std::time::Instant;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::estimators::{
    compute_a_b, exact_omega_solve, exact_z_solve, omega_pie_estimator, omega_sgd_estimator,
    z_pie_estimator, z_sgd_estimator, CoverageIndex, EstimatorError, Iterates,
};
use crate::grid::{extract_window, fft2_unitary, forward_diff, ComplexField, GradientPair};
use crate::metrics::{kkt_residuals, mag_phase_ssim, KktResiduals};
use crate::prox::{prox_agm, prox_ipm, regularizer_value, v_update, FidelityKind, RegularizerKind};
use crate::simulate::{MeasurementSet, ScanSet};

#[derive(Error, Debug)]
pub enum SolverError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite state detected at epoch {epoch}, iteration {iter}")]
    NumericalAbort {
        epoch: usize,
        iter: usize,
        last_good: Box<SolverState>,
        metrics: MetricsHistory,
    },
    #[error("conjugate gradient stalled at epoch {epoch} (relative residual {rel_residual:e})")]
    CgDidNotConverge {
        epoch: usize,
        iter: usize,
        rel_residual: f64,
        last_good: Box<SolverState>,
        metrics: MetricsHistory,
    },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// Which gradient surrogate drives the probe and object updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorKind {
    Sgd,
    Pie,
    /// Deterministic full-batch baseline: both subproblems solved exactly.
    Exact,
}

/// Initialization policy for the measurement splits and their multipliers;
/// both start equal either way.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitU {
    /// `u = Lambda = 0`.
    Zero,
    /// `u = Lambda = F(omega .* window_j(z))`.
    ForwardSpectrum,
}

/// Piecewise-constant step sizes over three phases with breakpoints at 1/2
/// and 3/4 of the total epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub delta_z: [f64; 3],
    pub delta_omega: [f64; 3],
}

impl StepSchedule {
    /// Default schedule pattern: object steps `{2 sqrt(b), sqrt(b)/5, sqrt(b)/50}`,
    /// probe steps `{sqrt(b) 1e-3, sqrt(b) 1e-4, sqrt(b) 1e-5}`.
    pub fn table_defaults(batch_size: usize) -> Self {
        let sb = (batch_size as f64).sqrt();
        Self {
            delta_z: [2.0 * sb, sb / 5.0, sb / 50.0],
            delta_omega: [sb * 1e-3, sb * 1e-4, sb * 1e-5],
        }
    }

    /// Phase index for a 1-based epoch out of `total`.
    pub fn phase(epoch: usize, total: usize) -> usize {
        if 2 * epoch <= total {
            0
        } else if 4 * epoch <= 3 * total {
            1
        } else {
            2
        }
    }

    pub fn delta_z_at(&self, epoch: usize, total: usize) -> f64 {
        self.delta_z[Self::phase(epoch, total)]
    }

    pub fn delta_omega_at(&self, epoch: usize, total: usize) -> f64 {
        self.delta_omega[Self::phase(epoch, total)]
    }

    pub fn validate(&self) -> Result<(), String> {
        for v in self.delta_z.iter().chain(self.delta_omega.iter()) {
            if !(*v > 0.0) {
                return Err(format!("step sizes must be positive, got {v}"));
            }
        }
        if self.delta_z[0] < self.delta_z[1]
            || self.delta_z[1] < self.delta_z[2]
            || self.delta_omega[0] < self.delta_omega[1]
            || self.delta_omega[1] < self.delta_omega[2]
        {
            return Err("step sizes must be nonincreasing across phases".into());
        }
        Ok(())
    }
}

/// Everything the iteration loop needs to know besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub fidelity: FidelityKind,
    pub reg: RegularizerKind,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub gamma_omega: f64,
    pub gamma_z: f64,
    pub estimator: EstimatorKind,
    pub blind: bool,
    pub epochs: usize,
    pub schedule: StepSchedule,
    pub seed: u64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Scale of the constant initial object plane (`zeta` for Poisson runs).
    pub init_scale: f64,
    pub init_u: InitU,
    /// Compute full KKT residuals every this many epochs (plus the first and
    /// last); they cost a full-batch pass.
    pub kkt_every: usize,
    /// Alignment search radius for the per-epoch quality metrics.
    pub search_radius: usize,
    /// When false, the wall_seconds metric column is written as zero so that
    /// metric files are byte-reproducible.
    pub record_timing: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            fidelity: FidelityKind::Agm,
            reg: RegularizerKind::Aitv { alpha: 0.8 },
            lambda: 1.0,
            beta1: 0.25,
            beta2: 0.25,
            batch_size: 5,
            gamma_omega: 0.025,
            gamma_z: 0.1,
            estimator: EstimatorKind::Pie,
            blind: false,
            epochs: 200,
            schedule: StepSchedule::table_defaults(5),
            seed: 0,
            cg_tol: 1e-8,
            cg_max_iter: 500,
            init_scale: 1.0,
            init_u: InitU::Zero,
            kkt_every: 10,
            search_radius: 5,
            record_timing: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, n_scans: usize) -> Result<(), SolverError> {
        let err = |msg: String| Err(SolverError::Config(msg));
        if self.batch_size == 0 || self.batch_size > n_scans {
            return err(format!(
                "batch size {} must be in [1, {n_scans}]",
                self.batch_size
            ));
        }
        if !(self.beta1 > 0.0) || !(self.beta2 > 0.0) {
            return err("penalty parameters must be positive".into());
        }
        if self.lambda < 0.0 {
            return err("regularization weight must be nonnegative".into());
        }
        if let RegularizerKind::Aitv { alpha } = self.reg {
            if !(0.0..=1.0).contains(&alpha) {
                return err(format!("alpha {alpha} must be in [0, 1]"));
            }
        }
        for (name, g) in [("gamma_omega", self.gamma_omega), ("gamma_z", self.gamma_z)] {
            if !(0.0..=1.0).contains(&g) {
                return err(format!("{name} {g} must be in [0, 1]"));
            }
        }
        if !(self.cg_tol > 0.0) || self.cg_max_iter == 0 {
            return err("CG tolerance and iteration budget must be positive".into());
        }
        if !(self.init_scale > 0.0) {
            return err("initial object scale must be positive".into());
        }
        self.schedule.validate().map_err(SolverError::Config)
    }
}

/// The full ADMM state: primal blocks, multipliers, counters, and the RNG.
#[derive(Clone, Debug)]
pub struct SolverState {
    /// Measurement splits, one length-`m^2` vector per scan.
    pub u: Vec<Vec<Complex64>>,
    pub omega: ComplexField,
    pub v: GradientPair,
    pub z: ComplexField,
    /// Measurement multipliers, matching `u`.
    pub lambda: Vec<Vec<Complex64>>,
    pub y: GradientPair,
    /// Completed iterations.
    pub iter: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl SolverState {
    pub fn iterates(&self) -> Iterates<'_> {
        Iterates {
            omega: &self.omega,
            z: &self.z,
            u: &self.u,
            lambda: &self.lambda,
            v: &self.v,
            y: &self.y,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.omega.is_finite()
            && self.z.is_finite()
            && self.v.is_finite()
            && self.y.is_finite()
            && self
                .u
                .iter()
                .chain(self.lambda.iter())
                .all(|vec| vec.iter().all(|c| c.re.is_finite() && c.im.is_finite()))
    }
}

/// One row of per-epoch metrics.
#[derive(Clone, Debug)]
pub struct MetricRow {
    pub epoch: usize,
    pub iter: usize,
    pub fidelity: f64,
    pub lagrangian: f64,
    pub mag_ssim: Option<f64>,
    pub phase_ssim: Option<f64>,
    pub kkt: Option<KktResiduals>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct MetricsHistory {
    pub rows: Vec<MetricRow>,
}

impl MetricsHistory {
    pub const CSV_HEADER: &'static str =
        "epoch,iter,fidelity,lagrangian,mag_ssim,phase_ssim,kkt_u,kkt_v,kkt_omega,kkt_z,wall_seconds";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&Self::row_csv(row));
            out.push('\n');
        }
        out
    }

    pub fn row_csv(row: &MetricRow) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let (ku, kv, ko, kz) = match &row.kkt {
            Some(k) => (
                format!("{:e}", k.r_u),
                format!("{:e}", k.r_v),
                format!("{:e}", k.r_omega),
                format!("{:e}", k.r_z),
            ),
            None => Default::default(),
        };
        format!(
            "{},{},{:e},{:e},{},{},{},{},{},{},{:e}",
            row.epoch,
            row.iter,
            row.fidelity,
            row.lagrangian,
            opt(row.mag_ssim),
            opt(row.phase_ssim),
            ku,
            kv,
            ko,
            kz,
            row.wall_seconds
        )
    }
}

/// Uniform sample of `b` distinct indices from `0..n`, ascending.
pub fn sample_batch(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Result<Vec<usize>, SolverError> {
    if b == 0 || b > n {
        return Err(SolverError::Config(format!(
            "batch size {b} must be in [1, {n}]"
        )));
    }
    let mut idx = rand::seq::index::sample(rng, n, b).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// `F(omega .* window_j(z))` for one scan.
pub fn forward_spectrum(
    omega: &ComplexField,
    z: &ComplexField,
    offset: (usize, usize),
) -> ComplexField {
    let m = omega.height();
    let mut window = extract_window(z, offset, m).expect("offset validated by ScanSet");
    for (w, o) in window.data_mut().iter_mut().zip(omega.data()) {
        *w *= o;
    }
    fft2_unitary(&window)
}

/// Initial state: constant complex object plane `(scale/sqrt(2))(1 + i)`
/// unless an explicit `z0` is supplied, splits and multipliers per the
/// configured policy, and `v = y = grad(z0)`.
pub fn init_state(
    config: &SolverConfig,
    scans: &ScanSet,
    measurements: &MeasurementSet,
    omega0: ComplexField,
    z0: Option<ComplexField>,
) -> Result<SolverState, SolverError> {
    config.validate(scans.n_scans())?;
    check_dims(scans, measurements, &omega0)?;
    let (h, w) = (scans.object_height(), scans.object_width());
    let z = match z0 {
        Some(z) => {
            if z.height() != h || z.width() != w {
                return Err(SolverError::DimMismatch(format!(
                    "initial object is {}x{}, scans expect {h}x{w}",
                    z.height(),
                    z.width()
                )));
            }
            z
        }
        None => {
            let value = Complex64::new(1.0, 1.0) * (config.init_scale / 2.0f64.sqrt());
            ComplexField::constant(h, w, value)
        }
    };
    let m = scans.probe_size();
    let n = scans.n_scans();
    let (u, lambda) = match config.init_u {
        InitU::Zero => {
            let zeros = vec![vec![Complex64::new(0.0, 0.0); m * m]; n];
            (zeros.clone(), zeros)
        }
        InitU::ForwardSpectrum => {
            let spectra: Vec<Vec<Complex64>> = scans
                .offsets()
                .iter()
                .map(|&off| forward_spectrum(&omega0, &z, off).data().to_vec())
                .collect();
            (spectra.clone(), spectra)
        }
    };
    let g = forward_diff(&z);
    Ok(SolverState {
        u,
        omega: omega0,
        v: g.clone(),
        z,
        lambda,
        y: g,
        iter: 0,
        epoch: 0,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    })
}

fn check_dims(
    scans: &ScanSet,
    measurements: &MeasurementSet,
    omega: &ComplexField,
) -> Result<(), SolverError> {
    if measurements.n_scans() != scans.n_scans() {
        return Err(SolverError::DimMismatch(format!(
            "{} measurements for {} scans",
            measurements.n_scans(),
            scans.n_scans()
        )));
    }
    if measurements.m() != scans.probe_size() {
        return Err(SolverError::DimMismatch(format!(
            "measurement window {} vs scan window {}",
            measurements.m(),
            scans.probe_size()
        )));
    }
    if omega.height() != scans.probe_size() || omega.width() != scans.probe_size() {
        return Err(SolverError::DimMismatch(format!(
            "probe is {}x{}, scans expect {}x{}",
            omega.height(),
            omega.width(),
            scans.probe_size(),
            scans.probe_size()
        )));
    }
    Ok(())
}

/// Measurement splits for the sampled scans move to their fidelity prox at
/// `F(omega .* window_j(z)) - Lambda_j / beta1`; all others keep their bits.
pub fn u_update(
    state: &mut SolverState,
    batch: &[usize],
    scans: &ScanSet,
    measurements: &MeasurementSet,
    fidelity: FidelityKind,
    beta1: f64,
) {
    for &j in batch {
        let spectrum = forward_spectrum(&state.omega, &state.z, scans.offset(j));
        let w: Vec<Complex64> = spectrum
            .data()
            .iter()
            .zip(&state.lambda[j])
            .map(|(s, l)| s - l / beta1)
            .collect();
        state.u[j] = match fidelity {
            FidelityKind::Agm => prox_agm(&w, measurements.scan(j), beta1),
            FidelityKind::Ipm => prox_ipm(&w, measurements.scan(j), beta1),
        };
    }
}

/// Probe update (blind mode): a stochastic gradient step, or the exact
/// normal-equation solve for the deterministic baseline.
pub fn omega_update(
    state: &mut SolverState,
    batch: &[usize],
    scans: &ScanSet,
    config: &SolverConfig,
    delta_omega: f64,
) -> Result<(), SolverError> {
    match config.estimator {
        EstimatorKind::Sgd => {
            let est = omega_sgd_estimator(&state.iterates(), scans, batch, config.beta1)?;
            state
                .omega
                .add_scaled(&est, Complex64::new(-delta_omega, 0.0));
        }
        EstimatorKind::Pie => {
            let est = omega_pie_estimator(
                &state.iterates(),
                scans,
                batch,
                config.beta1,
                config.gamma_omega,
            )?;
            state
                .omega
                .add_scaled(&est, Complex64::new(-delta_omega, 0.0));
        }
        EstimatorKind::Exact => {
            state.omega = exact_omega_solve(&state.iterates(), scans, config.beta1)?;
        }
    }
    Ok(())
}

/// Object update: a stochastic gradient step on the sampled coverage, or the
/// exact conjugate-gradient solve.
pub fn z_update(
    state: &mut SolverState,
    batch: &[usize],
    scans: &ScanSet,
    coverage: &CoverageIndex,
    config: &SolverConfig,
    delta_z: f64,
) -> Result<Option<f64>, SolverError> {
    match config.estimator {
        EstimatorKind::Sgd => {
            let est = {
                let it = state.iterates();
                let resid = compute_a_b(&it, scans, batch, config.beta1, config.beta2);
                z_sgd_estimator(&resid, scans, coverage, batch)
            };
            state.z.add_scaled(&est, Complex64::new(-delta_z, 0.0));
            Ok(None)
        }
        EstimatorKind::Pie => {
            let est = {
                let it = state.iterates();
                let resid = compute_a_b(&it, scans, batch, config.beta1, config.beta2);
                z_pie_estimator(&resid, &it, scans, coverage, batch, config.gamma_z)?
            };
            state.z.add_scaled(&est, Complex64::new(-delta_z, 0.0));
            Ok(None)
        }
        EstimatorKind::Exact => {
            let (z_new, report) = exact_z_solve(
                &state.iterates(),
                scans,
                config.beta1,
                config.beta2,
                config.cg_tol,
                config.cg_max_iter,
            );
            state.z = z_new;
            if report.converged {
                Ok(None)
            } else {
                Ok(Some(report.rel_residual))
            }
        }
    }
}

/// Multiplier ascent: `Lambda_j` for sampled scans only, `y` always.
pub fn multiplier_update(
    state: &mut SolverState,
    batch: &[usize],
    scans: &ScanSet,
    beta1: f64,
    beta2: f64,
) {
    for &j in batch {
        let spectrum = forward_spectrum(&state.omega, &state.z, scans.offset(j));
        for ((l, &u), s) in state.lambda[j]
            .iter_mut()
            .zip(&state.u[j])
            .zip(spectrum.data())
        {
            *l += beta1 * (u - s);
        }
    }
    let g = forward_diff(&state.z);
    state
        .y
        .gx
        .add_scaled(&state.v.gx, Complex64::new(beta2, 0.0));
    state.y.gx.add_scaled(&g.gx, Complex64::new(-beta2, 0.0));
    state
        .y
        .gy
        .add_scaled(&state.v.gy, Complex64::new(beta2, 0.0));
    state.y.gy.add_scaled(&g.gy, Complex64::new(-beta2, 0.0));
}

/// Data-fidelity objective at the current `(omega, z)`: the chosen metric
/// between the forward intensities and the measurements, summed over scans.
pub fn fidelity_eval(
    omega: &ComplexField,
    z: &ComplexField,
    scans: &ScanSet,
    measurements: &MeasurementSet,
    fidelity: FidelityKind,
) -> f64 {
    let mut acc = 0.0;
    for (j, &off) in scans.offsets().iter().enumerate() {
        let spectrum = forward_spectrum(omega, z, off);
        let d = measurements.scan(j);
        match fidelity {
            FidelityKind::Agm => {
                for (s, &dv) in spectrum.data().iter().zip(d) {
                    let diff = s.norm() - dv.sqrt();
                    acc += 0.5 * diff * diff;
                }
            }
            FidelityKind::Ipm => {
                for (s, &dv) in spectrum.data().iter().zip(d) {
                    let g = s.norm_sqr();
                    acc += 0.5 * g;
                    if dv > 0.0 {
                        if g <= 0.0 {
                            return f64::INFINITY;
                        }
                        acc -= 0.5 * dv * g.ln();
                    }
                }
            }
        }
    }
    acc
}

/// The augmented Lagrangian at the current state: fidelity at the splits,
/// regularizer, multiplier couplings, and quadratic penalties.
///
/// Returns `+inf` when the Poisson metric hits a zero split where the
/// measurement is positive.
pub fn lagrangian_eval(
    state: &SolverState,
    config: &SolverConfig,
    scans: &ScanSet,
    measurements: &MeasurementSet,
) -> f64 {
    let mut acc = 0.0;
    for j in 0..scans.n_scans() {
        let d = measurements.scan(j);
        match config.fidelity {
            FidelityKind::Agm => {
                for (u, &dv) in state.u[j].iter().zip(d) {
                    let diff = u.norm() - dv.sqrt();
                    acc += 0.5 * diff * diff;
                }
            }
            FidelityKind::Ipm => {
                for (u, &dv) in state.u[j].iter().zip(d) {
                    let g = u.norm_sqr();
                    acc += 0.5 * g;
                    if dv > 0.0 {
                        if g <= 0.0 {
                            return f64::INFINITY;
                        }
                        acc -= 0.5 * dv * g.ln();
                    }
                }
            }
        }
        let spectrum = forward_spectrum(&state.omega, &state.z, scans.offset(j));
        for ((u, l), s) in state.u[j].iter().zip(&state.lambda[j]).zip(spectrum.data()) {
            let r = u - s;
            acc += (l * r.conj()).re;
            acc += 0.5 * config.beta1 * r.norm_sqr();
        }
    }

    acc += config.lambda * regularizer_value(&state.v, config.reg);

    let g = forward_diff(&state.z);
    for ((v, y), gz) in state
        .v
        .gx
        .data()
        .iter()
        .zip(state.y.gx.data())
        .zip(g.gx.data())
        .chain(
            state
                .v
                .gy
                .data()
                .iter()
                .zip(state.y.gy.data())
                .zip(g.gy.data()),
        )
    {
        let r = v - gz;
        acc += (y * r.conj()).re;
        acc += 0.5 * config.beta2 * r.norm_sqr();
    }
    acc
}

/// Output of a completed run.
#[derive(Debug)]
pub struct RunOutput {
    pub omega: ComplexField,
    pub z: ComplexField,
    pub metrics: MetricsHistory,
    pub state: SolverState,
}

/// Run the iteration loop from `state` until `config.epochs` are complete.
pub fn run(
    config: &SolverConfig,
    scans: &ScanSet,
    measurements: &MeasurementSet,
    state: SolverState,
    ground_truth: Option<&ComplexField>,
) -> Result<RunOutput, SolverError> {
    run_with_observer(config, scans, measurements, state, ground_truth, |_, _| {})
}

/// [`run`] with a per-epoch observer that sees the state after metrics are
/// recorded; the hook is how the CLI writes checkpoints at a cadence.
pub fn run_with_observer(
    config: &SolverConfig,
    scans: &ScanSet,
    measurements: &MeasurementSet,
    mut state: SolverState,
    ground_truth: Option<&ComplexField>,
    mut observer: impl FnMut(&SolverState, &MetricRow),
) -> Result<RunOutput, SolverError> {
    config.validate(scans.n_scans())?;
    check_dims(scans, measurements, &state.omega)?;
    if state.z.height() != scans.object_height() || state.z.width() != scans.object_width() {
        return Err(SolverError::DimMismatch(
            "object state does not match scan grid".into(),
        ));
    }
    if let Some(gt) = ground_truth {
        if !gt.same_dims(&state.z) {
            return Err(SolverError::DimMismatch(
                "ground truth does not match object grid".into(),
            ));
        }
    }

    let n = scans.n_scans();
    let coverage = CoverageIndex::build(scans);
    let iters_per_epoch = n.div_ceil(config.batch_size);
    let start = Instant::now();
    let mut metrics = MetricsHistory::default();
    let mut last_good = state.clone();

    for epoch in state.epoch..config.epochs {
        let epoch_1b = epoch + 1;
        let delta_z = config.schedule.delta_z_at(epoch_1b, config.epochs);
        let delta_omega = config.schedule.delta_omega_at(epoch_1b, config.epochs);

        for _ in 0..iters_per_epoch {
            let batch = sample_batch(&mut state.rng, n, config.batch_size)?;

            u_update(
                &mut state,
                &batch,
                scans,
                measurements,
                config.fidelity,
                config.beta1,
            );
            if config.blind {
                omega_update(&mut state, &batch, scans, config, delta_omega)?;
            }
            state.v = v_update(&state.z, &state.y, config.beta2, config.lambda, config.reg);
            let cg_stall = z_update(&mut state, &batch, scans, &coverage, config, delta_z)?;
            if let Some(rel_residual) = cg_stall {
                return Err(SolverError::CgDidNotConverge {
                    epoch: epoch_1b,
                    iter: state.iter,
                    rel_residual,
                    last_good: Box::new(last_good),
                    metrics,
                });
            }
            multiplier_update(&mut state, &batch, scans, config.beta1, config.beta2);
            state.iter += 1;

            if !state.is_finite() {
                return Err(SolverError::NumericalAbort {
                    epoch: epoch_1b,
                    iter: state.iter,
                    last_good: Box::new(last_good),
                    metrics,
                });
            }
        }
        state.epoch = epoch_1b;

        let row = epoch_metrics(
            &state,
            config,
            scans,
            measurements,
            ground_truth,
            &start,
            epoch_1b,
        );
        observer(&state, &row);
        metrics.rows.push(row);
        last_good = state.clone();
    }

    Ok(RunOutput {
        omega: state.omega.clone(),
        z: state.z.clone(),
        metrics,
        state,
    })
}

fn epoch_metrics(
    state: &SolverState,
    config: &SolverConfig,
    scans: &ScanSet,
    measurements: &MeasurementSet,
    ground_truth: Option<&ComplexField>,
    start: &Instant,
    epoch_1b: usize,
) -> MetricRow {
    let fidelity = fidelity_eval(&state.omega, &state.z, scans, measurements, config.fidelity);
    let lagrangian = lagrangian_eval(state, config, scans, measurements);
    let (mag_ssim, phase_ssim) = match ground_truth {
        Some(gt) => match mag_phase_ssim(&state.z, gt, config.search_radius) {
            Ok((m, p)) => (Some(m), Some(p)),
            Err(_) => (None, None),
        },
        None => (None, None),
    };
    let want_kkt = epoch_1b == 1
        || epoch_1b == config.epochs
        || (config.kkt_every > 0 && epoch_1b.is_multiple_of(config.kkt_every));
    let kkt = if want_kkt {
        Some(kkt_residuals(state, config, scans, measurements))
    } else {
        None
    };
    MetricRow {
        epoch: epoch_1b,
        iter: state.iter,
        fidelity,
        lagrangian,
        mag_ssim,
        phase_ssim,
        kkt,
        wall_seconds: if config.record_timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        },
    }
}
