//! Gradient machinery for the probe and object blocks: full gradients,
//! minibatch SGD estimators, illumination-weighted (PIE-style) estimators,
//! coverage bookkeeping, and the exact deterministic subproblem solvers.
//!
//! Scan matrices never materialize. A window's action is extract/embed, the
//! probe acts as an elementwise multiply, and the per-pixel illumination
//! weight `||P_j e_i||_1` is a single probe lookup: the probe pixel that
//! window `j` maps onto object pixel `i`.

use num_complex::Complex64;
use thiserror::Error;

use crate::grid::{
    accumulate_window, divergence_adjoint, extract_window, forward_diff, ifft2_unitary, inner,
    ComplexField, GradientPair,
};
use crate::simulate::ScanSet;

/// Relative threshold under which a denominator counts as a true zero rather
/// than float noise.
const ZERO_GUARD: f64 = 1e-12;

#[derive(Error, Debug, PartialEq)]
pub enum EstimatorError {
    #[error("batch must be nonempty")]
    EmptyBatch,
    #[error("zero illumination at probe pixel {pixel} of scan {scan} with gamma = 0")]
    ZeroIllumination { scan: usize, pixel: usize },
    #[error("zero probe weight at probe pixel {pixel} with gamma = 0")]
    ZeroProbeWeight { pixel: usize },
    #[error("probe normal equations are singular at probe pixel {pixel}: no scan illuminates it")]
    SingularProbeSystem { pixel: usize },
}

/// Borrowed view of the ADMM iterates the estimators read.
#[derive(Clone, Copy)]
pub struct Iterates<'a> {
    pub omega: &'a ComplexField,
    pub z: &'a ComplexField,
    pub u: &'a [Vec<Complex64>],
    pub lambda: &'a [Vec<Complex64>],
    pub v: &'a GradientPair,
    pub y: &'a GradientPair,
}

/// Per-pixel lists of the scans whose window covers each object pixel, and
/// their counts. Built once per scan set.
#[derive(Clone, Debug)]
pub struct CoverageIndex {
    object_height: usize,
    object_width: usize,
    lists: Vec<Vec<u32>>,
}

impl CoverageIndex {
    pub fn build(scans: &ScanSet) -> Self {
        let (h, w) = (scans.object_height(), scans.object_width());
        let m = scans.probe_size();
        let mut lists = vec![Vec::new(); h * w];
        for (j, &(r, c)) in scans.offsets().iter().enumerate() {
            for dr in 0..m {
                let base = (r + dr) * w + c;
                for dc in 0..m {
                    lists[base + dc].push(j as u32);
                }
            }
        }
        Self {
            object_height: h,
            object_width: w,
            lists,
        }
    }

    /// Scan indices whose window contains pixel `i`.
    pub fn scans_covering(&self, i: usize) -> &[u32] {
        &self.lists[i]
    }

    /// `|N_i|`.
    pub fn count(&self, i: usize) -> usize {
        self.lists[i].len()
    }

    pub fn object_height(&self) -> usize {
        self.object_height
    }

    pub fn object_width(&self) -> usize {
        self.object_width
    }
}

/// Window view `S_j z` and the bracket `F^{-1}(u_j + Lambda_j / beta1) - omega .* S_j z`
/// shared by the probe gradient and the object residual.
fn window_and_bracket(
    omega: &ComplexField,
    z: &ComplexField,
    u_j: &[Complex64],
    lambda_j: &[Complex64],
    offset: (usize, usize),
    beta1: f64,
) -> (ComplexField, ComplexField) {
    let m = omega.height();
    let window = extract_window(z, offset, m).expect("offset validated by ScanSet");
    let mut spectrum = ComplexField::zeros(m, m);
    for ((s, &u), &l) in spectrum.data_mut().iter_mut().zip(u_j).zip(lambda_j) {
        *s = u + l / beta1;
    }
    let mut bracket = ifft2_unitary(&spectrum);
    for ((b, w), o) in bracket
        .data_mut()
        .iter_mut()
        .zip(window.data())
        .zip(omega.data())
    {
        *b -= o * w;
    }
    (window, bracket)
}

/// Probe-block gradient of one scan's quadratic coupling term:
/// `-beta1 (S_j z)^* .* [F^{-1}(u_j + Lambda_j/beta1) - omega .* S_j z]`.
pub fn grad_g_j(
    omega: &ComplexField,
    z: &ComplexField,
    u_j: &[Complex64],
    lambda_j: &[Complex64],
    offset: (usize, usize),
    beta1: f64,
) -> ComplexField {
    let (window, bracket) = window_and_bracket(omega, z, u_j, lambda_j, offset, beta1);
    let m = omega.height();
    let mut out = ComplexField::zeros(m, m);
    for ((o, w), b) in out
        .data_mut()
        .iter_mut()
        .zip(window.data())
        .zip(bracket.data())
    {
        *o = -beta1 * w.conj() * b;
    }
    out
}

/// Minibatch SGD estimator for the probe gradient: the batch average of
/// [`grad_g_j`]. With a full batch this equals `(1/N)` times the full
/// gradient.
pub fn omega_sgd_estimator(
    it: &Iterates,
    scans: &ScanSet,
    batch: &[usize],
    beta1: f64,
) -> Result<ComplexField, EstimatorError> {
    if batch.is_empty() {
        return Err(EstimatorError::EmptyBatch);
    }
    let m = it.omega.height();
    let mut acc = ComplexField::zeros(m, m);
    for &j in batch {
        let g = grad_g_j(
            it.omega,
            it.z,
            &it.u[j],
            &it.lambda[j],
            scans.offset(j),
            beta1,
        );
        acc.add_scaled(&g, Complex64::new(1.0, 0.0));
    }
    acc.scale(Complex64::new(1.0 / batch.len() as f64, 0.0));
    Ok(acc)
}

/// Spatially varying illumination weights for the probe update:
/// `1 / ((1 - gamma) |S_j z|^2 + gamma ||S_j z||_inf^2)`, elementwise.
pub fn illumination_phi(
    z: &ComplexField,
    offset: (usize, usize),
    m: usize,
    gamma_omega: f64,
    scan_idx: usize,
) -> Result<Vec<f64>, EstimatorError> {
    let window = extract_window(z, offset, m).expect("offset validated by ScanSet");
    let max_sq = window
        .data()
        .iter()
        .map(|v| v.norm_sqr())
        .fold(0.0f64, f64::max);
    let mut phi = Vec::with_capacity(m * m);
    for (k, v) in window.data().iter().enumerate() {
        let denom = (1.0 - gamma_omega) * v.norm_sqr() + gamma_omega * max_sq;
        if denom <= ZERO_GUARD * max_sq {
            return Err(EstimatorError::ZeroIllumination {
                scan: scan_idx,
                pixel: k,
            });
        }
        phi.push(1.0 / denom);
    }
    Ok(phi)
}

/// Illumination-weighted probe estimator: [`omega_sgd_estimator`] with each
/// scan's contribution reweighted elementwise by its illumination strength.
pub fn omega_pie_estimator(
    it: &Iterates,
    scans: &ScanSet,
    batch: &[usize],
    beta1: f64,
    gamma_omega: f64,
) -> Result<ComplexField, EstimatorError> {
    if batch.is_empty() {
        return Err(EstimatorError::EmptyBatch);
    }
    let m = it.omega.height();
    let mut acc = ComplexField::zeros(m, m);
    for &j in batch {
        let offset = scans.offset(j);
        let phi = illumination_phi(it.z, offset, m, gamma_omega, j)?;
        let (window, bracket) =
            window_and_bracket(it.omega, it.z, &it.u[j], &it.lambda[j], offset, beta1);
        for (((a, p), w), b) in acc
            .data_mut()
            .iter_mut()
            .zip(phi.iter())
            .zip(window.data())
            .zip(bracket.data())
        {
            *a += -beta1 * p * w.conj() * b;
        }
    }
    acc.scale(Complex64::new(1.0 / batch.len() as f64, 0.0));
    Ok(acc)
}

/// Object-block residual pieces for a batch. Each `A_j` lives on the object
/// grid and is zero outside window `j`; `B` collects the gradient-split
/// coupling and is shared across scans.
#[derive(Clone, Debug)]
pub struct BatchResiduals {
    /// `(scan index, embedded A_j)` pairs in batch order.
    pub a: Vec<(usize, ComplexField)>,
    /// `B = -beta2 * grad^T(v + y/beta2 - grad z)`.
    pub b: ComplexField,
}

/// Assemble `A_j` for every scan in the batch and the shared `B` vector.
pub fn compute_a_b(
    it: &Iterates,
    scans: &ScanSet,
    batch: &[usize],
    beta1: f64,
    beta2: f64,
) -> BatchResiduals {
    let (h, w) = (it.z.height(), it.z.width());
    let m = it.omega.height();
    let mut a = Vec::with_capacity(batch.len());
    for &j in batch {
        let offset = scans.offset(j);
        let (_, bracket) =
            window_and_bracket(it.omega, it.z, &it.u[j], &it.lambda[j], offset, beta1);
        let mut local = ComplexField::zeros(m, m);
        for ((l, o), b) in local
            .data_mut()
            .iter_mut()
            .zip(it.omega.data())
            .zip(bracket.data())
        {
            *l = -beta1 * o.conj() * b;
        }
        let mut embedded = ComplexField::zeros(h, w);
        accumulate_window(&mut embedded, &local, offset);
        a.push((j, embedded));
    }

    // B = -beta2 * grad^T(v + y/beta2 - grad z); the Laplacian term folds in.
    let g = forward_diff(it.z);
    let mut resid = it.v.clone();
    resid.add_scaled(it.y, Complex64::new(1.0 / beta2, 0.0));
    resid.add_scaled(&g, Complex64::new(-1.0, 0.0));
    let mut b = divergence_adjoint(&resid);
    b.scale(Complex64::new(-beta2, 0.0));

    BatchResiduals { a, b }
}

/// Per-batch scan membership counts `|n_i^t|` over the object grid.
fn batch_counts(scans: &ScanSet, batch: &[usize]) -> Vec<u32> {
    let (h, w) = (scans.object_height(), scans.object_width());
    let m = scans.probe_size();
    let mut counts = vec![0u32; h * w];
    for &j in batch {
        let (r, c) = scans.offset(j);
        for dr in 0..m {
            let base = (r + dr) * w + c;
            for dc in 0..m {
                counts[base + dc] += 1;
            }
        }
    }
    counts
}

/// Minibatch object-gradient estimator, per pixel:
/// the batch mean of `(A_j)_i` plus `B_i / |N_i|` where the batch covers
/// pixel `i`, and exactly zero where it does not.
pub fn z_sgd_estimator(
    resid: &BatchResiduals,
    scans: &ScanSet,
    coverage: &CoverageIndex,
    batch: &[usize],
) -> ComplexField {
    let (h, w) = (scans.object_height(), scans.object_width());
    let mut acc = ComplexField::zeros(h, w);
    for (_, a_j) in &resid.a {
        acc.add_scaled(a_j, Complex64::new(1.0, 0.0));
    }
    let counts = batch_counts(scans, batch);
    let mut out = ComplexField::zeros(h, w);
    for i in 0..h * w {
        if counts[i] > 0 {
            let n_i = coverage.count(i) as f64;
            out.data_mut()[i] = acc.data()[i] / counts[i] as f64 + resid.b.data()[i] / n_i;
        }
    }
    out
}

/// Probe-illumination step factor for one (pixel, scan) pair:
/// `1 / ((1 - gamma) |omega_k|^2 + gamma ||omega||_inf^2)` where `k` is the
/// probe coordinate that window `j` maps onto the pixel.
pub fn psi_factor(
    omega: &ComplexField,
    offset: (usize, usize),
    pixel: (usize, usize),
    gamma_z: f64,
) -> Result<f64, EstimatorError> {
    let m = omega.height();
    let (pr, pc) = (pixel.0 - offset.0, pixel.1 - offset.1);
    debug_assert!(pr < m && pc < m, "pixel must lie inside the window");
    let max_sq = omega
        .data()
        .iter()
        .map(|v| v.norm_sqr())
        .fold(0.0f64, f64::max);
    let wk = omega.at(pr, pc).norm_sqr();
    let denom = (1.0 - gamma_z) * wk + gamma_z * max_sq;
    if denom <= ZERO_GUARD * max_sq {
        return Err(EstimatorError::ZeroProbeWeight { pixel: pr * m + pc });
    }
    Ok(1.0 / denom)
}

/// Illumination-weighted object estimator: like [`z_sgd_estimator`] but each
/// scan's per-pixel summand is scaled by its step factor. Equals the SGD
/// estimator when the probe has unit modulus everywhere.
pub fn z_pie_estimator(
    resid: &BatchResiduals,
    it: &Iterates,
    scans: &ScanSet,
    coverage: &CoverageIndex,
    batch: &[usize],
    gamma_z: f64,
) -> Result<ComplexField, EstimatorError> {
    let (h, w) = (scans.object_height(), scans.object_width());
    let m = scans.probe_size();
    let max_sq = it
        .omega
        .data()
        .iter()
        .map(|v| v.norm_sqr())
        .fold(0.0f64, f64::max);
    let counts = batch_counts(scans, batch);
    let mut acc = ComplexField::zeros(h, w);

    for (j, a_j) in &resid.a {
        let (r, c) = scans.offset(*j);
        for dr in 0..m {
            for dc in 0..m {
                let i = (r + dr) * w + (c + dc);
                let wk = it.omega.at(dr, dc).norm_sqr();
                let denom = (1.0 - gamma_z) * wk + gamma_z * max_sq;
                if denom <= ZERO_GUARD * max_sq {
                    return Err(EstimatorError::ZeroProbeWeight { pixel: dr * m + dc });
                }
                let psi = 1.0 / denom;
                let n_i = coverage.count(i) as f64;
                acc.data_mut()[i] += (a_j.data()[i] + resid.b.data()[i] / n_i) * psi;
            }
        }
    }

    let mut out = ComplexField::zeros(h, w);
    for i in 0..h * w {
        if counts[i] > 0 {
            out.data_mut()[i] = acc.data()[i] / counts[i] as f64;
        }
    }
    Ok(out)
}

/// Full probe gradient `sum_j grad_g_j` over every scan.
pub fn grad_omega_full(it: &Iterates, scans: &ScanSet, beta1: f64) -> ComplexField {
    let m = it.omega.height();
    let mut acc = ComplexField::zeros(m, m);
    for j in 0..scans.n_scans() {
        let g = grad_g_j(
            it.omega,
            it.z,
            &it.u[j],
            &it.lambda[j],
            scans.offset(j),
            beta1,
        );
        acc.add_scaled(&g, Complex64::new(1.0, 0.0));
    }
    acc
}

/// Full object gradient `sum_j A_j + B` over every scan.
pub fn grad_z_full(it: &Iterates, scans: &ScanSet, beta1: f64, beta2: f64) -> ComplexField {
    let all: Vec<usize> = (0..scans.n_scans()).collect();
    let resid = compute_a_b(it, scans, &all, beta1, beta2);
    let mut acc = resid.b;
    for (_, a_j) in &resid.a {
        acc.add_scaled(a_j, Complex64::new(1.0, 0.0));
    }
    acc
}

/// Exact probe solve: the elementwise normal-equation minimizer
/// `omega_k = sum_j (S_j z)_k^* F^{-1}(u_j + Lambda_j/beta1)_k / sum_j |(S_j z)_k|^2`.
pub fn exact_omega_solve(
    it: &Iterates,
    scans: &ScanSet,
    beta1: f64,
) -> Result<ComplexField, EstimatorError> {
    let m = it.omega.height();
    let mut num = vec![Complex64::new(0.0, 0.0); m * m];
    let mut den = vec![0.0f64; m * m];
    for j in 0..scans.n_scans() {
        let offset = scans.offset(j);
        let window = extract_window(it.z, offset, m).expect("offset validated");
        let mut spectrum = ComplexField::zeros(m, m);
        for ((s, &u), &l) in spectrum
            .data_mut()
            .iter_mut()
            .zip(&it.u[j])
            .zip(&it.lambda[j])
        {
            *s = u + l / beta1;
        }
        let target = ifft2_unitary(&spectrum);
        for k in 0..m * m {
            num[k] += window.data()[k].conj() * target.data()[k];
            den[k] += window.data()[k].norm_sqr();
        }
    }
    let max_den = den.iter().cloned().fold(0.0f64, f64::max);
    let mut out = ComplexField::zeros(m, m);
    for k in 0..m * m {
        if den[k] <= ZERO_GUARD * max_den {
            return Err(EstimatorError::SingularProbeSystem { pixel: k });
        }
        out.data_mut()[k] = num[k] / den[k];
    }
    Ok(out)
}

/// Conjugate-gradient convergence report for the exact object solve.
#[derive(Clone, Copy, Debug)]
pub struct CgReport {
    pub converged: bool,
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Exact object solve via matrix-free conjugate gradient on the Hermitian
/// positive definite system
/// `(beta1 sum_j P_j^* P_j - beta2 Laplacian) z = rhs`.
///
/// The scan-sum operator is a precomputed per-pixel real weight; the
/// Laplacian applies through the difference operators. Warm-starts from the
/// current object iterate. If `max_iter` is exhausted the best iterate seen
/// is returned, flagged as non-converged.
pub fn exact_z_solve(
    it: &Iterates,
    scans: &ScanSet,
    beta1: f64,
    beta2: f64,
    tol: f64,
    max_iter: usize,
) -> (ComplexField, CgReport) {
    let (h, w) = (it.z.height(), it.z.width());
    let m = it.omega.height();

    // Per-pixel weight sum_{j in N_i} |omega at the probe coordinate|^2.
    let mut weight = ComplexField::zeros(h, w);
    let mut omega_sq = ComplexField::zeros(m, m);
    for (o, v) in omega_sq.data_mut().iter_mut().zip(it.omega.data()) {
        *o = Complex64::new(v.norm_sqr(), 0.0);
    }
    for &off in scans.offsets() {
        accumulate_window(&mut weight, &omega_sq, off);
    }

    // rhs = beta1 sum_j P_j^* F^{-1}(u_j + Lambda_j/beta1) + beta2 grad^T(v + y/beta2).
    let mut rhs = ComplexField::zeros(h, w);
    for j in 0..scans.n_scans() {
        let offset = scans.offset(j);
        let mut spectrum = ComplexField::zeros(m, m);
        for ((s, &u), &l) in spectrum
            .data_mut()
            .iter_mut()
            .zip(&it.u[j])
            .zip(&it.lambda[j])
        {
            *s = u + l / beta1;
        }
        let mut target = ifft2_unitary(&spectrum);
        for (t, o) in target.data_mut().iter_mut().zip(it.omega.data()) {
            *t = beta1 * o.conj() * *t;
        }
        accumulate_window(&mut rhs, &target, offset);
    }
    let mut vy = it.v.clone();
    vy.add_scaled(it.y, Complex64::new(1.0 / beta2, 0.0));
    rhs.add_scaled(&divergence_adjoint(&vy), Complex64::new(beta2, 0.0));

    let apply = |x: &ComplexField| -> ComplexField {
        let mut out = divergence_adjoint(&forward_diff(x));
        out.scale(Complex64::new(beta2, 0.0));
        for ((o, xv), wv) in out.data_mut().iter_mut().zip(x.data()).zip(weight.data()) {
            *o += beta1 * wv.re * xv;
        }
        out
    };

    let rhs_norm = rhs.norm();
    if rhs_norm == 0.0 {
        return (
            ComplexField::zeros(h, w),
            CgReport {
                converged: true,
                iterations: 0,
                rel_residual: 0.0,
            },
        );
    }

    let mut x = it.z.clone();
    let mut r = rhs.clone();
    r.add_scaled(&apply(&x), Complex64::new(-1.0, 0.0));
    let mut p = r.clone();
    let mut rs: f64 = r.data().iter().map(|v| v.norm_sqr()).sum();

    let mut best = x.clone();
    let mut best_res = rs.sqrt();
    let mut iterations = 0;

    for _ in 0..max_iter {
        if rs.sqrt() <= tol * rhs_norm {
            break;
        }
        iterations += 1;
        let ap = apply(&p);
        let pap = inner(ap.data(), p.data()).re;
        if pap <= 0.0 {
            break; // numerically lost positive definiteness
        }
        let alpha = rs / pap;
        x.add_scaled(&p, Complex64::new(alpha, 0.0));
        r.add_scaled(&ap, Complex64::new(-alpha, 0.0));
        let rs_new: f64 = r.data().iter().map(|v| v.norm_sqr()).sum();
        if rs_new.sqrt() < best_res {
            best_res = rs_new.sqrt();
            best = x.clone();
        }
        let beta = rs_new / rs;
        rs = rs_new;
        let mut p_new = r.clone();
        p_new.add_scaled(&p, Complex64::new(beta, 0.0));
        p = p_new;
    }

    let rel = best_res / rhs_norm;
    let converged = rel <= tol || rs.sqrt() <= tol * rhs_norm;
    let out = if rs.sqrt() <= best_res { x } else { best };
    (
        out,
        CgReport {
            converged,
            iterations,
            rel_residual: rel.min(rs.sqrt() / rhs_norm),
        },
    )
}
