//! Command-line orchestration: experiment synthesis, reconstruction,
//! evaluation, and the end-to-end pipeline.
//!
//! Runs are declared in flat `key=value` config files with `#` comments.
//! Unknown keys are hard errors; a misspelled hyperparameter silently
//! falling back to a default is the classic reproducibility failure. Every
//! run directory receives a provenance record (config echo, effective seed,
//! format versions) sufficient to re-execute the run bit-identically.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::grid::ComplexField;
use crate::io::{
    read_checkpoint, read_cim, read_pme, read_scan_text, write_checkpoint, write_cim,
    write_field_previews, write_pgm, write_pme, write_scan_text, IoError,
};
use crate::prox::{FidelityKind, RegularizerKind};
use crate::simulate::{
    compose_object, corrupt, load_ground_truth, make_probe, make_raster_scan,
    make_synthetic_rasters, perturb_probe, NoiseSpec, ProbeKind, SimError,
};
use crate::solver::{
    run_with_observer, EstimatorKind, InitU, SolverConfig, SolverError, StepSchedule,
};

pub const FORMAT_VERSIONS: &str = "CIM1 PME1 CKP1 scans-text-v1 metrics-csv-v1";

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or missing input path. Exit code 2.
    Config(String),
    /// Malformed data file. Exit code 3.
    Format(String),
    /// Numerical abort (non-finite state or estimator breakdown). Exit code 4.
    Numerical(String),
    /// Conjugate gradient failed to converge. Exit code 5.
    CgStall(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Format(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::CgStall(_) => 5,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Format(m)
            | CliError::Numerical(m)
            | CliError::CgStall(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match &e {
            IoError::File { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Format(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeShape {
    Flat,
    Disk,
    Gaussian,
}

/// Everything a run needs, parsed from one flat config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // Experiment geometry.
    pub n: usize,
    pub m: usize,
    pub grid_k: usize,
    // Probe synthesis.
    pub probe_shape: ProbeShape,
    pub probe_radius: Option<f64>,
    pub probe_sigma: Option<f64>,
    pub probe_curvature: f64,
    // Ground-truth composition ranges.
    pub mag_lo: f64,
    pub mag_hi: f64,
    pub phase_lo: f64,
    pub phase_hi: f64,
    pub truth_mag_pgm: Option<String>,
    pub truth_phase_pgm: Option<String>,
    // Noise.
    pub noise: String,
    pub snr_db: f64,
    pub zeta: f64,
    // Solver.
    pub fidelity: FidelityKind,
    pub reg_kind: String,
    pub alpha: f64,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub gamma_omega: f64,
    pub gamma_z: f64,
    pub estimator: EstimatorKind,
    pub blind: bool,
    pub epochs: usize,
    pub seed: u64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub init_u: InitU,
    pub delta_z: Option<[f64; 3]>,
    pub delta_omega: Option<[f64; 3]>,
    pub kkt_every: usize,
    pub search_radius: usize,
    pub record_timing: bool,
    pub checkpoint_every: usize,
    pub probe_perturb_eps: f64,
    // Input paths for reconstruct/evaluate.
    pub measurements_path: Option<String>,
    pub scans_path: Option<String>,
    pub probe_path: Option<String>,
    pub truth_path: Option<String>,
    pub recon_path: Option<String>,
    pub resume_from: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: 64,
            m: 32,
            grid_k: 5,
            probe_shape: ProbeShape::Disk,
            probe_radius: None,
            probe_sigma: None,
            probe_curvature: 0.0,
            mag_lo: 0.3,
            mag_hi: 1.0,
            phase_lo: -std::f64::consts::FRAC_PI_2,
            phase_hi: std::f64::consts::FRAC_PI_2,
            truth_mag_pgm: None,
            truth_phase_pgm: None,
            noise: "gaussian".into(),
            snr_db: 40.0,
            zeta: 0.01,
            fidelity: FidelityKind::Agm,
            reg_kind: "aitv".into(),
            alpha: 0.8,
            lambda: 0.5,
            beta1: 0.25,
            beta2: 0.25,
            batch_size: 5,
            gamma_omega: 0.025,
            gamma_z: 0.1,
            estimator: EstimatorKind::Pie,
            blind: false,
            epochs: 200,
            seed: 0,
            cg_tol: 1e-8,
            cg_max_iter: 500,
            init_u: InitU::Zero,
            delta_z: None,
            delta_omega: None,
            kkt_every: 10,
            search_radius: 5,
            record_timing: true,
            checkpoint_every: 0,
            probe_perturb_eps: 0.05,
            measurements_path: None,
            scans_path: None,
            probe_path: None,
            truth_path: None,
            recon_path: None,
            resume_from: None,
        }
    }
}

macro_rules! parse_num {
    ($value:expr, $key:expr, $ty:ty) => {
        $value
            .parse::<$ty>()
            .map_err(|_| CliError::Config(format!("key '{}': cannot parse '{}'", $key, $value)))?
    };
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!(
                    "line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "n" => self.n = parse_num!(value, key, usize),
            "m" => self.m = parse_num!(value, key, usize),
            "grid_k" => self.grid_k = parse_num!(value, key, usize),
            "probe_kind" => {
                self.probe_shape = match value {
                    "flat" => ProbeShape::Flat,
                    "disk" => ProbeShape::Disk,
                    "gaussian" => ProbeShape::Gaussian,
                    _ => {
                        return Err(CliError::Config(format!(
                            "probe_kind must be flat|disk|gaussian, got '{value}'"
                        )))
                    }
                }
            }
            "probe_radius" => self.probe_radius = Some(parse_num!(value, key, f64)),
            "probe_sigma" => self.probe_sigma = Some(parse_num!(value, key, f64)),
            "probe_curvature" => self.probe_curvature = parse_num!(value, key, f64),
            "mag_lo" => self.mag_lo = parse_num!(value, key, f64),
            "mag_hi" => self.mag_hi = parse_num!(value, key, f64),
            "phase_lo" => self.phase_lo = parse_num!(value, key, f64),
            "phase_hi" => self.phase_hi = parse_num!(value, key, f64),
            "truth_mag_pgm" => self.truth_mag_pgm = Some(value.to_string()),
            "truth_phase_pgm" => self.truth_phase_pgm = Some(value.to_string()),
            "noise" => match value {
                "none" | "gaussian" | "poisson" => self.noise = value.to_string(),
                _ => {
                    return Err(CliError::Config(format!(
                        "noise must be none|gaussian|poisson, got '{value}'"
                    )))
                }
            },
            "snr_db" => self.snr_db = parse_num!(value, key, f64),
            "zeta" => self.zeta = parse_num!(value, key, f64),
            "fidelity" => {
                self.fidelity = match value {
                    "agm" => FidelityKind::Agm,
                    "ipm" => FidelityKind::Ipm,
                    _ => {
                        return Err(CliError::Config(format!(
                            "fidelity must be agm|ipm, got '{value}'"
                        )))
                    }
                }
            }
            "reg" => match value {
                "aitv" | "isotv" | "none" => self.reg_kind = value.to_string(),
                _ => {
                    return Err(CliError::Config(format!(
                        "reg must be aitv|isotv|none, got '{value}'"
                    )))
                }
            },
            "alpha" => self.alpha = parse_num!(value, key, f64),
            "lambda" => self.lambda = parse_num!(value, key, f64),
            "beta1" => self.beta1 = parse_num!(value, key, f64),
            "beta2" => self.beta2 = parse_num!(value, key, f64),
            "batch_size" => self.batch_size = parse_num!(value, key, usize),
            "gamma_omega" => self.gamma_omega = parse_num!(value, key, f64),
            "gamma_z" => self.gamma_z = parse_num!(value, key, f64),
            "estimator" => {
                self.estimator = match value {
                    "sgd" => EstimatorKind::Sgd,
                    "pie" => EstimatorKind::Pie,
                    "exact" => EstimatorKind::Exact,
                    _ => {
                        return Err(CliError::Config(format!(
                            "estimator must be sgd|pie|exact, got '{value}'"
                        )))
                    }
                }
            }
            "blind" => self.blind = parse_bool(key, value)?,
            "epochs" => self.epochs = parse_num!(value, key, usize),
            "seed" => self.seed = parse_num!(value, key, u64),
            "cg_tol" => self.cg_tol = parse_num!(value, key, f64),
            "cg_max_iter" => self.cg_max_iter = parse_num!(value, key, usize),
            "init_u" => {
                self.init_u = match value {
                    "zero" => InitU::Zero,
                    "forward" => InitU::ForwardSpectrum,
                    _ => {
                        return Err(CliError::Config(format!(
                            "init_u must be zero|forward, got '{value}'"
                        )))
                    }
                }
            }
            "delta_z1" | "delta_z2" | "delta_z3" => {
                let slot = key.as_bytes()[7] as usize - b'1' as usize;
                let mut arr = self.delta_z.unwrap_or([0.0; 3]);
                arr[slot] = parse_num!(value, key, f64);
                self.delta_z = Some(arr);
            }
            "delta_omega1" | "delta_omega2" | "delta_omega3" => {
                let slot = key.as_bytes()[11] as usize - b'1' as usize;
                let mut arr = self.delta_omega.unwrap_or([0.0; 3]);
                arr[slot] = parse_num!(value, key, f64);
                self.delta_omega = Some(arr);
            }
            "kkt_every" => self.kkt_every = parse_num!(value, key, usize),
            "search_radius" => self.search_radius = parse_num!(value, key, usize),
            "record_timing" => self.record_timing = parse_bool(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num!(value, key, usize),
            "probe_perturb_eps" => self.probe_perturb_eps = parse_num!(value, key, f64),
            "measurements_path" => self.measurements_path = Some(value.to_string()),
            "scans_path" => self.scans_path = Some(value.to_string()),
            "probe_path" => self.probe_path = Some(value.to_string()),
            "truth_path" => self.truth_path = Some(value.to_string()),
            "recon_path" => self.recon_path = Some(value.to_string()),
            "resume_from" => self.resume_from = Some(value.to_string()),
            _ => return Err(CliError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical serialization: fixed key order, optional keys only when
    /// set. Parsing this text reproduces the config exactly.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("n", self.n.to_string());
        kv("m", self.m.to_string());
        kv("grid_k", self.grid_k.to_string());
        kv(
            "probe_kind",
            match self.probe_shape {
                ProbeShape::Flat => "flat",
                ProbeShape::Disk => "disk",
                ProbeShape::Gaussian => "gaussian",
            }
            .to_string(),
        );
        if let Some(r) = self.probe_radius {
            kv("probe_radius", format!("{r:?}"));
        }
        if let Some(sg) = self.probe_sigma {
            kv("probe_sigma", format!("{sg:?}"));
        }
        kv("probe_curvature", format!("{:?}", self.probe_curvature));
        kv("mag_lo", format!("{:?}", self.mag_lo));
        kv("mag_hi", format!("{:?}", self.mag_hi));
        kv("phase_lo", format!("{:?}", self.phase_lo));
        kv("phase_hi", format!("{:?}", self.phase_hi));
        if let Some(p) = &self.truth_mag_pgm {
            kv("truth_mag_pgm", p.clone());
        }
        if let Some(p) = &self.truth_phase_pgm {
            kv("truth_phase_pgm", p.clone());
        }
        kv("noise", self.noise.clone());
        kv("snr_db", format!("{:?}", self.snr_db));
        kv("zeta", format!("{:?}", self.zeta));
        kv(
            "fidelity",
            match self.fidelity {
                FidelityKind::Agm => "agm",
                FidelityKind::Ipm => "ipm",
            }
            .to_string(),
        );
        kv("reg", self.reg_kind.clone());
        kv("alpha", format!("{:?}", self.alpha));
        kv("lambda", format!("{:?}", self.lambda));
        kv("beta1", format!("{:?}", self.beta1));
        kv("beta2", format!("{:?}", self.beta2));
        kv("batch_size", self.batch_size.to_string());
        kv("gamma_omega", format!("{:?}", self.gamma_omega));
        kv("gamma_z", format!("{:?}", self.gamma_z));
        kv(
            "estimator",
            match self.estimator {
                EstimatorKind::Sgd => "sgd",
                EstimatorKind::Pie => "pie",
                EstimatorKind::Exact => "exact",
            }
            .to_string(),
        );
        kv("blind", self.blind.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("cg_tol", format!("{:?}", self.cg_tol));
        kv("cg_max_iter", self.cg_max_iter.to_string());
        kv(
            "init_u",
            match self.init_u {
                InitU::Zero => "zero",
                InitU::ForwardSpectrum => "forward",
            }
            .to_string(),
        );
        if let Some(d) = self.delta_z {
            kv("delta_z1", format!("{:?}", d[0]));
            kv("delta_z2", format!("{:?}", d[1]));
            kv("delta_z3", format!("{:?}", d[2]));
        }
        if let Some(d) = self.delta_omega {
            kv("delta_omega1", format!("{:?}", d[0]));
            kv("delta_omega2", format!("{:?}", d[1]));
            kv("delta_omega3", format!("{:?}", d[2]));
        }
        kv("kkt_every", self.kkt_every.to_string());
        kv("search_radius", self.search_radius.to_string());
        kv("record_timing", self.record_timing.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("probe_perturb_eps", format!("{:?}", self.probe_perturb_eps));
        if let Some(p) = &self.measurements_path {
            kv("measurements_path", p.clone());
        }
        if let Some(p) = &self.scans_path {
            kv("scans_path", p.clone());
        }
        if let Some(p) = &self.probe_path {
            kv("probe_path", p.clone());
        }
        if let Some(p) = &self.truth_path {
            kv("truth_path", p.clone());
        }
        if let Some(p) = &self.recon_path {
            kv("recon_path", p.clone());
        }
        if let Some(p) = &self.resume_from {
            kv("resume_from", p.clone());
        }
        s
    }

    /// SHA-256 of the canonical serialization; checkpoints refuse to resume
    /// under a different hash. `resume_from` is bootstrap metadata, not run
    /// identity, so it is cleared before hashing.
    pub fn hash(&self) -> [u8; 32] {
        let mut identity = self.clone();
        identity.resume_from = None;
        let digest = Sha256::digest(identity.serialize().as_bytes());
        digest.into()
    }

    pub fn regularizer(&self) -> RegularizerKind {
        match self.reg_kind.as_str() {
            "isotv" => RegularizerKind::IsoTv,
            "none" => RegularizerKind::None,
            _ => RegularizerKind::Aitv { alpha: self.alpha },
        }
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        match self.noise.as_str() {
            "gaussian" => NoiseSpec::Gaussian {
                snr_db: self.snr_db,
            },
            "poisson" => NoiseSpec::Poisson { zeta: self.zeta },
            _ => NoiseSpec::None,
        }
    }

    pub fn probe_kind(&self) -> ProbeKind {
        match self.probe_shape {
            ProbeShape::Flat => ProbeKind::Flat,
            ProbeShape::Disk => ProbeKind::Disk {
                radius: self.probe_radius.unwrap_or(self.m as f64 / 2.0),
                curvature: self.probe_curvature,
            },
            ProbeShape::Gaussian => ProbeKind::Gaussian {
                sigma: self.probe_sigma.unwrap_or(self.m as f64 / 4.0),
                curvature: self.probe_curvature,
            },
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        let schedule = StepSchedule {
            delta_z: self
                .delta_z
                .unwrap_or(StepSchedule::table_defaults(self.batch_size).delta_z),
            delta_omega: self
                .delta_omega
                .unwrap_or(StepSchedule::table_defaults(self.batch_size).delta_omega),
        };
        SolverConfig {
            fidelity: self.fidelity,
            reg: self.regularizer(),
            lambda: self.lambda,
            beta1: self.beta1,
            beta2: self.beta2,
            batch_size: self.batch_size,
            gamma_omega: self.gamma_omega,
            gamma_z: self.gamma_z,
            estimator: self.estimator,
            blind: self.blind,
            epochs: self.epochs,
            schedule,
            seed: self.seed,
            cg_tol: self.cg_tol,
            cg_max_iter: self.cg_max_iter,
            init_scale: if self.fidelity == FidelityKind::Ipm {
                self.zeta
            } else {
                1.0
            },
            init_u: self.init_u,
            kkt_every: self.kkt_every,
            search_radius: self.search_radius,
            record_timing: self.record_timing,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CliError::Config(format!(
            "key '{key}': expected true|false, got '{value}'"
        ))),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create output directory: {e}")))
}

fn write_provenance(dir: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    let text = format!(
        "command: {command}\nformat_versions: {FORMAT_VERSIONS}\nseed: {}\nconfig:\n{}",
        cfg.seed,
        cfg.serialize()
    );
    std::fs::write(dir.join("provenance.txt"), text)
        .map_err(|e| CliError::Format(format!("cannot write provenance: {e}")))
}

/// Load ground truth from the configured PGM pair, or synthesize the default
/// composite when no files are given.
pub fn ground_truth(cfg: &RunConfig) -> Result<ComplexField, CliError> {
    match (&cfg.truth_mag_pgm, &cfg.truth_phase_pgm) {
        (Some(mp), Some(pp)) => load_ground_truth(
            Path::new(mp),
            Path::new(pp),
            (cfg.mag_lo, cfg.mag_hi),
            (cfg.phase_lo, cfg.phase_hi),
        )
        .map_err(|e| CliError::Config(e.to_string())),
        (None, None) => {
            let (mag, phase) = make_synthetic_rasters(cfg.n, cfg.n);
            compose_object(
                &mag,
                &phase,
                cfg.n,
                cfg.n,
                (cfg.mag_lo, cfg.mag_hi),
                (cfg.phase_lo, cfg.phase_hi),
            )
            .map_err(|e| CliError::Config(e.to_string()))
        }
        _ => Err(CliError::Config(
            "truth_mag_pgm and truth_phase_pgm must be given together".into(),
        )),
    }
}

/// Synthesize an experiment: measurements, scan set, ground truth, probe,
/// preview rasters, and a provenance record.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<(), CliError> {
    ensure_dir(out)?;
    let truth = ground_truth(cfg)?;
    if truth.height() != cfg.n || truth.width() != cfg.n {
        return Err(CliError::Config(format!(
            "ground truth is {}x{}, config n is {}",
            truth.height(),
            truth.width(),
            cfg.n
        )));
    }
    let scans = make_raster_scan(cfg.n, cfg.m, cfg.grid_k)?;
    let probe = make_probe(cfg.probe_kind(), cfg.m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let measurements = corrupt(&truth, &probe, &scans, cfg.noise_spec(), &mut rng)?;

    write_pme(&out.join("measurements.pme"), &measurements)?;
    write_scan_text(&out.join("scans.txt"), &scans)?;
    write_cim(&out.join("truth.cim"), &truth)?;
    write_cim(&out.join("probe.cim"), &probe)?;
    let (mag8, phase8) = crate::simulate::split_object(
        &truth,
        (cfg.mag_lo, cfg.mag_hi),
        (cfg.phase_lo, cfg.phase_hi),
    );
    write_pgm(&out.join("truth_mag.pgm"), cfg.n, cfg.n, &mag8)?;
    write_pgm(&out.join("truth_phase.pgm"), cfg.n, cfg.n, &phase8)?;
    write_provenance(out, "simulate", cfg)?;

    if !quiet {
        println!(
            "simulate: {} scans of {}x{} windows over a {}x{} object -> {}",
            scans.n_scans(),
            cfg.m,
            cfg.m,
            cfg.n,
            cfg.n,
            out.display()
        );
    }
    Ok(())
}

fn required<'a>(opt: &'a Option<String>, key: &str) -> Result<&'a str, CliError> {
    opt.as_deref()
        .ok_or_else(|| CliError::Config(format!("config key '{key}' is required")))
}

/// Reconstruct from measurement and scan files; writes the final object,
/// probe (blind mode), metrics CSV, and checkpoints at the configured
/// cadence.
pub fn cmd_reconstruct(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<(), CliError> {
    ensure_dir(out)?;
    let solver_cfg = cfg.solver_config();
    let hash = cfg.hash();

    let measurements = read_pme(Path::new(required(
        &cfg.measurements_path,
        "measurements_path",
    )?))?;
    let scans = read_scan_text(
        Path::new(required(&cfg.scans_path, "scans_path")?),
        cfg.n,
        cfg.n,
    )?;
    let probe = read_cim(Path::new(required(&cfg.probe_path, "probe_path")?))?;
    let truth = match &cfg.truth_path {
        Some(p) => Some(read_cim(Path::new(p))?),
        None => None,
    };

    let omega0 = if cfg.blind {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1); // separate stream from the solver's batch sampling
        perturb_probe(&probe, cfg.probe_perturb_eps, &mut rng)
    } else {
        probe
    };

    let state = match &cfg.resume_from {
        Some(p) => read_checkpoint(Path::new(p), &hash)?,
        None => crate::solver::init_state(&solver_cfg, &scans, &measurements, omega0, None)
            .map_err(map_solver_error)?,
    };

    let ckpt_err: RefCell<Option<IoError>> = RefCell::new(None);
    let result = run_with_observer(
        &solver_cfg,
        &scans,
        &measurements,
        state,
        truth.as_ref(),
        |st, row| {
            if cfg.checkpoint_every > 0
                && row.epoch % cfg.checkpoint_every == 0
                && ckpt_err.borrow().is_none()
            {
                let path = out.join(format!("ckpt_epoch{:05}.ckp", row.epoch));
                if let Err(e) = write_checkpoint(&path, &hash, st) {
                    *ckpt_err.borrow_mut() = Some(e);
                }
            }
        },
    );
    if let Some(e) = ckpt_err.into_inner() {
        return Err(e.into());
    }

    let output = match result {
        Ok(o) => o,
        Err(e) => {
            // Abort paths still leave the last good state and partial
            // metrics on disk for diagnosis.
            match &e {
                SolverError::NumericalAbort {
                    last_good, metrics, ..
                }
                | SolverError::CgDidNotConverge {
                    last_good, metrics, ..
                } => {
                    let _ = write_checkpoint(&out.join("abort.ckp"), &hash, last_good);
                    let _ = std::fs::write(out.join("metrics.csv"), metrics.to_csv());
                }
                _ => {}
            }
            return Err(map_solver_error(e));
        }
    };

    write_cim(&out.join("recon_z.cim"), &output.z)?;
    if cfg.blind {
        write_cim(&out.join("recon_omega.cim"), &output.omega)?;
    }
    std::fs::write(out.join("metrics.csv"), output.metrics.to_csv())
        .map_err(|e| CliError::Format(format!("cannot write metrics: {e}")))?;
    write_field_previews(
        &out.join("recon_mag.pgm"),
        &out.join("recon_phase.pgm"),
        &output.z,
    )?;
    write_checkpoint(&out.join("final.ckp"), &hash, &output.state)?;
    write_provenance(out, "reconstruct", cfg)?;

    if !quiet {
        let last = output.metrics.rows.last();
        println!(
            "reconstruct: {} epochs, final fidelity {} -> {}",
            output.state.epoch,
            last.map(|r| format!("{:e}", r.fidelity))
                .unwrap_or_default(),
            out.display()
        );
    }
    Ok(())
}

fn map_solver_error(e: SolverError) -> CliError {
    match e {
        SolverError::Config(m) => CliError::Config(m),
        SolverError::DimMismatch(m) => CliError::Format(m),
        SolverError::CgDidNotConverge { .. } => CliError::CgStall(e.to_string()),
        SolverError::NumericalAbort { .. } | SolverError::Estimator(_) => {
            CliError::Numerical(e.to_string())
        }
    }
}

/// Evaluate a reconstruction against ground truth; prints and writes the
/// alignment and SSIM report.
pub fn cmd_evaluate(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<(), CliError> {
    ensure_dir(out)?;
    let recon = read_cim(Path::new(required(&cfg.recon_path, "recon_path")?))?;
    let truth = read_cim(Path::new(required(&cfg.truth_path, "truth_path")?))?;
    let report = evaluate_report(&recon, &truth, cfg.search_radius)?;
    std::fs::write(out.join("report.txt"), &report)
        .map_err(|e| CliError::Format(format!("cannot write report: {e}")))?;
    if !quiet {
        print!("{report}");
    }
    Ok(())
}

pub fn evaluate_report(
    recon: &ComplexField,
    truth: &ComplexField,
    search_radius: usize,
) -> Result<String, CliError> {
    let alignment = crate::metrics::align(recon, truth, search_radius)
        .map_err(|e| CliError::Format(e.to_string()))?;
    let (mag_ssim, phase_ssim) = crate::metrics::mag_phase_ssim(recon, truth, search_radius)
        .map_err(|e| CliError::Format(e.to_string()))?;
    Ok(format!(
        "zeta_re: {:?}\nzeta_im: {:?}\nt_row: {}\nt_col: {}\nmag_ssim: {:?}\nphase_ssim: {:?}\nresidual: {:?}\n",
        alignment.zeta.re,
        alignment.zeta.im,
        alignment.shift.0,
        alignment.shift.1,
        mag_ssim,
        phase_ssim,
        alignment.residual
    ))
}

/// simulate -> reconstruct -> evaluate in one run directory.
pub fn cmd_pipeline(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<(), CliError> {
    cmd_simulate(cfg, out, quiet)?;
    let mut rcfg = cfg.clone();
    rcfg.measurements_path = Some(out.join("measurements.pme").display().to_string());
    rcfg.scans_path = Some(out.join("scans.txt").display().to_string());
    rcfg.probe_path = Some(out.join("probe.cim").display().to_string());
    rcfg.truth_path = Some(out.join("truth.cim").display().to_string());
    cmd_reconstruct(&rcfg, out, quiet)?;
    let mut ecfg = rcfg;
    ecfg.recon_path = Some(out.join("recon_z.cim").display().to_string());
    cmd_evaluate(&ecfg, out, quiet)
}
