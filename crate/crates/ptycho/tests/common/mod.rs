//! Shared test oracles and instance builders. Everything here is written
//! straight from definitions, independent of the library's computational
//! paths, so the tests compare two routes to the same quantity.

#![allow(dead_code)]

use num_complex::Complex64;
use ptycho::grid::{forward_diff, ComplexField};
use ptycho::simulate::{
    compose_object, corrupt, make_probe, make_raster_scan, make_synthetic_rasters, NoiseSpec,
    ProbeKind, ScanSet,
};
use ptycho::solver::{init_state, run, RunOutput, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn random_field(h: usize, w: usize, seed: u64) -> ComplexField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w)
        .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    ComplexField::new(h, w, data).unwrap()
}

/// Golden-section minimizer of a unimodal function on [lo, hi].
pub fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..iters {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// The objective the l1-minus-alpha-l2 prox minimizes.
pub fn aitv_prox_objective(x: &[Complex64], x_prime: &[Complex64], kappa: f64, alpha: f64) -> f64 {
    let l1: f64 = x.iter().map(|v| v.norm()).sum();
    let l2: f64 = x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let quad: f64 = x.iter().zip(x_prime).map(|(a, b)| (a - b).norm_sqr()).sum();
    kappa * (l1 - alpha * l2) + 0.5 * quad
}

/// Radial form of the objective at phases aligned with `a = |x'|`.
fn radial_objective(r1: f64, r2: f64, a1: f64, a2: f64, kappa: f64, alpha: f64) -> f64 {
    kappa * (r1 + r2 - alpha * (r1 * r1 + r2 * r2).sqrt())
        + 0.5 * ((r1 - a1).powi(2) + (r2 - a2).powi(2))
}

/// Brute-force minimizer for the length-2 complex prox objective.
///
/// For fixed magnitudes the quadratic term is minimized by aligning each
/// coordinate's phase with the input's, and the penalty depends only on
/// magnitudes, so the search runs over the two radii: a 96x96 grid followed
/// by alternating golden-section polish per radius.
pub fn prox_oracle_radial(x_prime: &[Complex64; 2], kappa: f64, alpha: f64) -> [Complex64; 2] {
    let a1 = x_prime[0].norm();
    let a2 = x_prime[1].norm();
    let rmax = a1.max(a2) + alpha * kappa + 0.5;
    let steps = 64;
    let mut best = (f64::INFINITY, 0.0f64, 0.0f64);
    for i in 0..=steps {
        let r1 = rmax * i as f64 / steps as f64;
        for j in 0..=steps {
            let r2 = rmax * j as f64 / steps as f64;
            let val = radial_objective(r1, r2, a1, a2, kappa, alpha);
            if val < best.0 {
                best = (val, r1, r2);
            }
        }
    }
    let cell = rmax / steps as f64;
    let (mut r1, mut r2) = (best.1, best.2);
    for _ in 0..4 {
        r1 = golden_min(
            |r| radial_objective(r, r2, a1, a2, kappa, alpha),
            (r1 - cell).max(0.0),
            r1 + cell,
            60,
        );
        r2 = golden_min(
            |r| radial_objective(r1, r, a1, a2, kappa, alpha),
            (r2 - cell).max(0.0),
            r2 + cell,
            60,
        );
    }
    // The polish refines within the grid's basin; keep whichever candidate
    // scored lower in case the alternation drifted.
    let polished = radial_objective(r1, r2, a1, a2, kappa, alpha);
    let (r1, r2) = if polished <= best.0 {
        (r1, r2)
    } else {
        (best.1, best.2)
    };
    let sign = |v: Complex64| {
        if v.norm() == 0.0 {
            c(1.0, 0.0)
        } else {
            v / v.norm()
        }
    };
    [sign(x_prime[0]) * r1, sign(x_prime[1]) * r2]
}

/// Literal polar search: per coordinate, 128 phases x 400 radii, alternating
/// between the coordinates. No radial reduction; the phase grid must
/// rediscover alignment on its own.
pub fn prox_oracle_polar(x_prime: &[Complex64; 2], kappa: f64, alpha: f64) -> [Complex64; 2] {
    let rmax = x_prime[0].norm().max(x_prime[1].norm()) + alpha * kappa + 0.5;
    let mut x = [c(0.0, 0.0), c(0.0, 0.0)];
    for _ in 0..3 {
        for coord in 0..2 {
            let mut best = (f64::INFINITY, x[coord]);
            for p in 0..128 {
                let theta = 2.0 * std::f64::consts::PI * p as f64 / 128.0;
                let dir = Complex64::from_polar(1.0, theta);
                for ri in 0..=400 {
                    let r = rmax * ri as f64 / 400.0;
                    let mut cand = x;
                    cand[coord] = dir * r;
                    let val = aitv_prox_objective(&cand, x_prime, kappa, alpha);
                    if val < best.0 {
                        best = (val, cand[coord]);
                    }
                }
            }
            x[coord] = best.1;
        }
    }
    x
}

/// Dense complex linear solve by Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<Complex64>>, mut b: Vec<Complex64>) -> Vec<Complex64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].norm().total_cmp(&a[j][col].norm()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let diag = a[col][col];
        assert!(diag.norm() > 1e-14, "singular system");
        for row in (col + 1)..n {
            let factor = a[row][col] / diag;
            for k in col..n {
                let upper = a[col][k];
                a[row][k] -= factor * upper;
            }
            let bc = b[col];
            b[row] -= factor * bc;
        }
    }
    let mut x = vec![c(0.0, 0.0); n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    x
}

/// The desk-scale acceptance instance: 64x64 synthetic complex object with
/// magnitude in [0.3, 1] and phase in [-pi/2, pi/2], 32x32 flat-disk probe,
/// 25 scans at stride 8, Gaussian noise at SNR 40.
pub struct DeskInstance {
    pub truth: ComplexField,
    pub probe: ComplexField,
    pub scans: ScanSet,
}

pub fn desk_instance() -> DeskInstance {
    let n = 64;
    let (mag, phase) = make_synthetic_rasters(n, n);
    let truth = compose_object(
        &mag,
        &phase,
        n,
        n,
        (0.3, 1.0),
        (-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2),
    )
    .unwrap();
    let probe = make_probe(
        ProbeKind::Disk {
            radius: 16.0,
            curvature: 0.0,
        },
        32,
    )
    .unwrap();
    let scans = make_raster_scan(n, 32, 5).unwrap();
    DeskInstance {
        truth,
        probe,
        scans,
    }
}

/// Run the desk instance with the given regularization weight/kind and seed.
pub fn desk_run(
    inst: &DeskInstance,
    lambda: f64,
    reg: ptycho::prox::RegularizerKind,
    seed: u64,
) -> RunOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meas = corrupt(
        &inst.truth,
        &inst.probe,
        &inst.scans,
        NoiseSpec::Gaussian { snr_db: 40.0 },
        &mut rng,
    )
    .unwrap();
    let config = desk_config(lambda, reg, seed);
    let state = init_state(&config, &inst.scans, &meas, inst.probe.clone(), None).unwrap();
    run(&config, &inst.scans, &meas, state, Some(&inst.truth)).unwrap()
}

pub fn desk_config(lambda: f64, reg: ptycho::prox::RegularizerKind, seed: u64) -> SolverConfig {
    SolverConfig {
        lambda,
        reg,
        batch_size: 5,
        epochs: 200,
        estimator: ptycho::solver::EstimatorKind::Sgd,
        blind: false,
        seed,
        record_timing: false,
        kkt_every: 10,
        schedule: ptycho::solver::StepSchedule::table_defaults(5),
        ..SolverConfig::default()
    }
}

/// 20-epoch moving average of the per-epoch fidelity values.
pub fn smoothed(fids: &[f64], window: usize) -> Vec<f64> {
    (window - 1..fids.len())
        .map(|e| fids[e + 1 - window..=e].iter().sum::<f64>() / window as f64)
        .collect()
}

pub fn gradient_pair_from(z: &ComplexField) -> ptycho::grid::GradientPair {
    forward_diff(z)
}
