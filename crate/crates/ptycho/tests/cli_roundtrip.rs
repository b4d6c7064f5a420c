//! End-to-end command tests: file formats on disk, resume semantics,
//! determinism of simulated data, and process exit codes.

use std::path::Path;
use std::process::Command;

use ptycho::cli::{cmd_evaluate, cmd_pipeline, cmd_reconstruct, cmd_simulate, RunConfig};
use ptycho::grid::ComplexField;
use ptycho::io::{read_checkpoint, read_cim, read_pme, read_scan_text, write_cim};
use ptycho::simulate::forward_measure;
use tempfile::tempdir;

/// Small, fast instance for command-level tests.
fn quick_config() -> RunConfig {
    RunConfig::parse(
        "n=32\nm=16\ngrid_k=3\nepochs=20\nlambda=0.3\nbatch_size=3\nestimator=sgd\n\
         record_timing=false\nseed=11\nkkt_every=10\n",
    )
    .unwrap()
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn wire_reconstruct_paths(cfg: &mut RunConfig, dir: &Path) {
    cfg.measurements_path = Some(path_str(&dir.join("measurements.pme")));
    cfg.scans_path = Some(path_str(&dir.join("scans.txt")));
    cfg.probe_path = Some(path_str(&dir.join("probe.cim")));
    cfg.truth_path = Some(path_str(&dir.join("truth.cim")));
}

#[test]
fn simulate_writes_expected_files_and_sizes() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("sim");
    // Default desk config: 25 measurement blocks of 1024 floats.
    let cfg = RunConfig::parse("record_timing=false\n").unwrap();
    cmd_simulate(&cfg, &out, true).unwrap();

    let pme = std::fs::metadata(out.join("measurements.pme")).unwrap();
    assert_eq!(pme.len(), 12 + 25 * 1024 * 8);
    let meas = read_pme(&out.join("measurements.pme")).unwrap();
    assert_eq!(meas.n_scans(), 25);
    assert_eq!(meas.m(), 32);

    let scans = read_scan_text(&out.join("scans.txt"), 64, 64).unwrap();
    assert_eq!(scans.n_scans(), 25);
    let truth = read_cim(&out.join("truth.cim")).unwrap();
    assert_eq!((truth.height(), truth.width()), (64, 64));
    let probe = read_cim(&out.join("probe.cim")).unwrap();
    assert_eq!((probe.height(), probe.width()), (32, 32));
    assert!(out.join("provenance.txt").exists());
    assert!(out.join("truth_mag.pgm").exists());
    assert!(out.join("truth_phase.pgm").exists());
}

#[test]
fn simulate_same_seed_is_byte_identical() {
    let dir = tempdir().unwrap();
    let cfg = quick_config();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_simulate(&cfg, &a, true).unwrap();
    cmd_simulate(&cfg, &b, true).unwrap();
    let bytes_a = std::fs::read(a.join("measurements.pme")).unwrap();
    let bytes_b = std::fs::read(b.join("measurements.pme")).unwrap();
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn simulate_noise_none_matches_forward_model_bits() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("sim");
    let mut cfg = quick_config();
    cfg.noise = "none".into();
    cmd_simulate(&cfg, &out, true).unwrap();
    let meas = read_pme(&out.join("measurements.pme")).unwrap();
    let truth = read_cim(&out.join("truth.cim")).unwrap();
    let probe = read_cim(&out.join("probe.cim")).unwrap();
    let scans = read_scan_text(&out.join("scans.txt"), cfg.n, cfg.n).unwrap();
    let expect = forward_measure(&truth, &probe, &scans).unwrap();
    assert_eq!(meas, expect);
}

#[test]
fn reconstruct_zero_epochs_returns_documented_initialization() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = quick_config();
    cfg.epochs = 0;
    cmd_simulate(&cfg, &out, true).unwrap();
    wire_reconstruct_paths(&mut cfg, &out);
    cmd_reconstruct(&cfg, &out, true).unwrap();
    let z = read_cim(&out.join("recon_z.cim")).unwrap();
    let expect = num_complex::Complex64::new(1.0, 1.0) / 2.0f64.sqrt();
    for v in z.data() {
        assert!((v - expect).norm() <= 1e-15);
    }
}

#[test]
fn nonblind_reconstruct_keeps_probe_unchanged() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = quick_config();
    cfg.epochs = 5;
    cmd_simulate(&cfg, &out, true).unwrap();
    wire_reconstruct_paths(&mut cfg, &out);
    cmd_reconstruct(&cfg, &out, true).unwrap();
    // Non-blind mode writes no probe output and the final state's probe is
    // bit-identical to the input file.
    assert!(!out.join("recon_omega.cim").exists());
    let state = read_checkpoint(&out.join("final.ckp"), &cfg.hash()).unwrap();
    let probe = read_cim(&out.join("probe.cim")).unwrap();
    assert_eq!(state.omega, probe);
}

#[test]
fn blind_reconstruct_updates_probe() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = quick_config();
    cfg.blind = true;
    cfg.epochs = 5;
    cmd_simulate(&cfg, &out, true).unwrap();
    wire_reconstruct_paths(&mut cfg, &out);
    cmd_reconstruct(&cfg, &out, true).unwrap();
    let omega = read_cim(&out.join("recon_omega.cim")).unwrap();
    let probe = read_cim(&out.join("probe.cim")).unwrap();
    assert!(omega.same_dims(&probe));
    let mut diff = omega.clone();
    diff.add_scaled(&probe, num_complex::Complex64::new(-1.0, 0.0));
    assert!(diff.norm() > 0.0);
}

#[test]
fn resume_reproduces_uninterrupted_metrics_tail() {
    let dir = tempdir().unwrap();
    let mut cfg = quick_config();
    cfg.epochs = 10;
    cfg.checkpoint_every = 5;

    let sim = dir.path().join("sim");
    cmd_simulate(&cfg, &sim, true).unwrap();
    wire_reconstruct_paths(&mut cfg, &sim);

    let full = dir.path().join("full");
    cmd_reconstruct(&cfg, &full, true).unwrap();
    let full_csv = std::fs::read_to_string(full.join("metrics.csv")).unwrap();

    let mut resumed_cfg = cfg.clone();
    resumed_cfg.resume_from = Some(path_str(&full.join("ckpt_epoch00005.ckp")));
    let resumed = dir.path().join("resumed");
    cmd_reconstruct(&resumed_cfg, &resumed, true).unwrap();
    let resumed_csv = std::fs::read_to_string(resumed.join("metrics.csv")).unwrap();

    // Rows for epochs 6..10 must match the uninterrupted run byte for byte.
    let full_tail: Vec<&str> = full_csv.lines().skip(6).collect();
    let resumed_rows: Vec<&str> = resumed_csv.lines().skip(1).collect();
    assert_eq!(resumed_rows.len(), 5);
    assert_eq!(full_tail, resumed_rows);

    // Final objects agree bitwise too.
    let za = read_cim(&full.join("recon_z.cim")).unwrap();
    let zb = read_cim(&resumed.join("recon_z.cim")).unwrap();
    assert_eq!(za, zb);
}

#[test]
fn evaluate_self_is_perfect_and_shift_is_recovered() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("eval");
    std::fs::create_dir_all(&out).unwrap();

    // Build a structured field and a circularly shifted copy.
    let (mag, phase) = ptycho::simulate::make_synthetic_rasters(24, 24);
    let truth =
        ptycho::simulate::compose_object(&mag, &phase, 24, 24, (0.3, 1.0), (-1.2, 1.2)).unwrap();
    let mut shifted = ComplexField::zeros(24, 24);
    for r in 0..24 {
        for c in 0..24 {
            shifted.set(r, c, truth.at((r + 2) % 24, (c + 3) % 24));
        }
    }
    write_cim(&out.join("truth.cim"), &truth).unwrap();
    write_cim(&out.join("recon.cim"), &shifted).unwrap();

    let mut cfg = quick_config();
    cfg.truth_path = Some(path_str(&out.join("truth.cim")));
    cfg.recon_path = Some(path_str(&out.join("truth.cim")));
    cmd_evaluate(&cfg, &out, true).unwrap();
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("mag_ssim: 1.0") || report.contains("mag_ssim: 0.99999"));
    assert!(report.contains("t_row: 0\nt_col: 0\n") || report.contains("t_row: 0"));

    cfg.recon_path = Some(path_str(&out.join("recon.cim")));
    cmd_evaluate(&cfg, &out, true).unwrap();
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("t_row: -2"), "report: {report}");
    assert!(report.contains("t_col: -3"), "report: {report}");

    // Evaluation has no RNG: repeated runs produce identical reports.
    cmd_evaluate(&cfg, &out, true).unwrap();
    let report2 = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert_eq!(report, report2);
}

#[test]
fn pipeline_produces_quality_reconstruction() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("pipe");
    let mut cfg = quick_config();
    cfg.epochs = 60;
    cmd_pipeline(&cfg, &out, true).unwrap();
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    let get = |key: &str| -> f64 {
        report
            .lines()
            .find(|l| l.starts_with(key))
            .and_then(|l| l.split_once(": ").map(|p| p.1))
            .and_then(|v| v.parse().ok())
            .unwrap_or(f64::NAN)
    };
    assert!(get("mag_ssim") > 0.5, "report: {report}");
    assert!(get("phase_ssim") > 0.5, "report: {report}");
}

#[test]
fn malformed_inputs_are_rejected_before_solving() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    let mut cfg = quick_config();
    // Garbage measurement file with a huge declared length but no payload.
    let mut bytes = b"PME1".to_vec();
    bytes.extend_from_slice(&u32::MAX.to_le_bytes());
    bytes.extend_from_slice(&1024u32.to_le_bytes());
    std::fs::write(out.join("measurements.pme"), bytes).unwrap();
    cfg.measurements_path = Some(path_str(&out.join("measurements.pme")));
    cfg.scans_path = Some(path_str(&out.join("scans.txt")));
    cfg.probe_path = Some(path_str(&out.join("probe.cim")));
    let err = cmd_reconstruct(&cfg, &out, true).unwrap_err();
    assert_eq!(err.exit_code(), 3, "got {err:?}");
}

#[test]
fn numerical_abort_exits_4_and_leaves_checkpoint() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = quick_config();
    cfg.epochs = 30;
    // Absurd object step: the iterates blow up to non-finite values.
    cfg.delta_z = Some([1e160, 1e160, 1e160]);
    cmd_simulate(&cfg, &out, true).unwrap();
    wire_reconstruct_paths(&mut cfg, &out);
    let err = cmd_reconstruct(&cfg, &out, true).unwrap_err();
    assert_eq!(err.exit_code(), 4, "got {err:?}");
    // The last good state is preserved for diagnosis.
    assert!(out.join("abort.ckp").exists());
    let state = read_checkpoint(&out.join("abort.ckp"), &cfg.hash()).unwrap();
    assert!(state.is_finite());
}

#[test]
fn cg_stall_exits_5() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = quick_config();
    cfg.estimator = ptycho::solver::EstimatorKind::Exact;
    cfg.batch_size = 9;
    cfg.epochs = 3;
    cfg.cg_tol = 1e-14;
    cfg.cg_max_iter = 1;
    cmd_simulate(&cfg, &out, true).unwrap();
    wire_reconstruct_paths(&mut cfg, &out);
    let err = cmd_reconstruct(&cfg, &out, true).unwrap_err();
    assert_eq!(err.exit_code(), 5, "got {err:?}");
}

#[test]
fn binary_exit_codes_match_interface() {
    let exe = env!("CARGO_BIN_EXE_ptycho");
    let dir = tempdir().unwrap();

    // Unknown config key: exit code 2.
    let cfg_path = dir.path().join("bad.cfg");
    std::fs::write(&cfg_path, "not_a_real_key=1\n").unwrap();
    let status = Command::new(exe)
        .args(["simulate", "--config"])
        .arg(&cfg_path)
        .args(["--out"])
        .arg(dir.path().join("o1"))
        .arg("--quiet")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // Corrupt binary input: exit code 3.
    let cfg_path = dir.path().join("recon.cfg");
    let meas_path = dir.path().join("m.pme");
    std::fs::write(&meas_path, b"XXXXjunk").unwrap();
    std::fs::write(
        &cfg_path,
        format!(
            "n=32\nm=16\ngrid_k=3\nmeasurements_path={}\nscans_path={}\nprobe_path={}\n",
            meas_path.display(),
            meas_path.display(),
            meas_path.display()
        ),
    )
    .unwrap();
    let status = Command::new(exe)
        .args(["reconstruct", "--config"])
        .arg(&cfg_path)
        .args(["--out"])
        .arg(dir.path().join("o2"))
        .arg("--quiet")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    // A clean tiny pipeline exits 0.
    let cfg_path = dir.path().join("ok.cfg");
    std::fs::write(
        &cfg_path,
        "n=32\nm=16\ngrid_k=3\nepochs=3\nbatch_size=3\nrecord_timing=false\n",
    )
    .unwrap();
    let status = Command::new(exe)
        .args(["pipeline", "--config"])
        .arg(&cfg_path)
        .args(["--out"])
        .arg(dir.path().join("o3"))
        .arg("--quiet")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    // Seed override changes the measurement bytes.
    let out_a = dir.path().join("s1");
    let out_b = dir.path().join("s2");
    for (out, seed) in [(&out_a, "5"), (&out_b, "6")] {
        let status = Command::new(exe)
            .args(["simulate", "--config"])
            .arg(&cfg_path)
            .args(["--seed", seed, "--quiet", "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    let a = std::fs::read(out_a.join("measurements.pme")).unwrap();
    let b = std::fs::read(out_b.join("measurements.pme")).unwrap();
    assert_ne!(a, b);
}
