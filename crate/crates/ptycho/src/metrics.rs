//! Reconstruction quality and stationarity diagnostics.
//!
//! Phase retrieval recovers the object only up to a global complex scale and
//! a translation, so evaluation first aligns the reconstruction against the
//! ground truth: an exhaustive search over circular shifts in a small window,
//! with the optimal scale per shift in closed form. Magnitude and phase are
//! then scored separately with a windowed SSIM.

use num_complex::Complex64;
use thiserror::Error;

use crate::estimators::{grad_omega_full, grad_z_full};
use crate::grid::{forward_diff, inner, ComplexField};
use crate::simulate::{MeasurementSet, ScanSet};
use crate::solver::{forward_spectrum, SolverConfig, SolverState};

#[derive(Error, Debug, PartialEq)]
pub enum MetricsError {
    #[error("fields are {0}x{1} and {2}x{3}; dimensions must match")]
    DimMismatch(usize, usize, usize, usize),
    #[error("reconstruction has zero norm; alignment scale is undefined")]
    ZeroNorm,
    #[error("SSIM needs rasters at least 11x11, got {0}x{1}")]
    TooSmall(usize, usize),
}

/// Result of the scale-and-translation alignment.
#[derive(Clone, Debug)]
pub struct AlignmentResult {
    /// Optimal complex scale applied to the shifted reconstruction.
    pub zeta: Complex64,
    /// Optimal circular shift `(rows, cols)`.
    pub shift: (isize, isize),
    /// `zeta * shifted reconstruction`.
    pub aligned: ComplexField,
    /// Squared alignment residual at the optimum.
    pub residual: f64,
}

fn circular_shift(z: &ComplexField, shift: (isize, isize)) -> ComplexField {
    let (h, w) = (z.height() as isize, z.width() as isize);
    let mut out = ComplexField::zeros(z.height(), z.width());
    for r in 0..h {
        for c in 0..w {
            let sr = (r + shift.0).rem_euclid(h) as usize;
            let sc = (c + shift.1).rem_euclid(w) as usize;
            out.set(r as usize, c as usize, z.at(sr, sc));
        }
    }
    out
}

/// Align `recon` to `truth` over circular shifts within `+-search_radius`
/// per axis, with the least-squares complex scale per shift. Ties break
/// toward the lexicographically smallest shift.
pub fn align(
    recon: &ComplexField,
    truth: &ComplexField,
    search_radius: usize,
) -> Result<AlignmentResult, MetricsError> {
    if !recon.same_dims(truth) {
        return Err(MetricsError::DimMismatch(
            recon.height(),
            recon.width(),
            truth.height(),
            truth.width(),
        ));
    }
    let norm_sq: f64 = recon.data().iter().map(|v| v.norm_sqr()).sum();
    if norm_sq == 0.0 {
        return Err(MetricsError::ZeroNorm);
    }
    let truth_sq: f64 = truth.data().iter().map(|v| v.norm_sqr()).sum();
    let radius = search_radius as isize;

    let mut best: Option<(f64, (isize, isize), Complex64)> = None;
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            let shifted = circular_shift(recon, (dr, dc));
            // zeta(t) = <truth, shifted> / ||recon||^2; circular shifts
            // preserve the norm.
            let cross = inner(truth.data(), shifted.data());
            let zeta = cross / norm_sq;
            let residual = truth_sq - cross.norm_sqr() / norm_sq;
            if best.is_none_or(|(r, _, _)| residual < r) {
                best = Some((residual, (dr, dc), zeta));
            }
        }
    }
    let (_, shift, zeta) = best.expect("search window is nonempty");
    let mut aligned = circular_shift(recon, shift);
    aligned.scale(zeta);
    let mut residual = 0.0;
    for (a, g) in aligned.data().iter().zip(truth.data()) {
        residual += (a - g).norm_sqr();
    }
    Ok(AlignmentResult {
        zeta,
        shift,
        aligned,
        residual,
    })
}

fn gaussian_kernel_11() -> [f64; 11] {
    let sigma = 1.5f64;
    let mut k = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-mode convolution with the 11-tap Gaussian, producing a
/// `(h-10) x (w-10)` grid of window means.
fn window_means(a: &[f64], h: usize, w: usize, kernel: &[f64; 11]) -> Vec<f64> {
    let wo = w - 10;
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * a[r * w + c + k];
            }
            rows[r * wo + c] = acc;
        }
    }
    let ho = h - 10;
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * rows[(r + k) * wo + c];
            }
            out[r * wo + c] = acc;
        }
    }
    out
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), stabilizers
/// `K1 = 0.01`, `K2 = 0.03`, and an explicit dynamic range.
pub fn ssim_with_range(
    a: &[f64],
    b: &[f64],
    height: usize,
    width: usize,
    range: f64,
) -> Result<f64, MetricsError> {
    if a.len() != height * width || b.len() != height * width {
        return Err(MetricsError::DimMismatch(height, width, a.len(), b.len()));
    }
    if height < 11 || width < 11 {
        return Err(MetricsError::TooSmall(height, width));
    }
    // A flat reference has zero range; fall back to a unit range so the
    // stabilizing constants stay positive.
    let l = if range > 0.0 { range } else { 1.0 };
    let c1 = (0.01 * l) * (0.01 * l);
    let c2 = (0.03 * l) * (0.03 * l);

    let kernel = gaussian_kernel_11();
    let sq = |x: &[f64]| -> Vec<f64> { x.iter().map(|v| v * v).collect() };
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();

    let mu_a = window_means(a, height, width, &kernel);
    let mu_b = window_means(b, height, width, &kernel);
    let m_aa = window_means(&sq(a), height, width, &kernel);
    let m_bb = window_means(&sq(b), height, width, &kernel);
    let m_ab = window_means(&ab, height, width, &kernel);

    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        acc +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(acc / mu_a.len() as f64)
}

/// [`ssim_with_range`] with the dynamic range taken from the reference `b`.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64, MetricsError> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in b {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    ssim_with_range(a, b, height, width, hi - lo)
}

/// Principal-value phase in `(-pi, pi]`.
fn principal_phase(v: Complex64) -> f64 {
    let p = v.arg();
    if p == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        p
    }
}

/// Align, then score magnitude and phase rasters separately against the
/// ground truth.
pub fn mag_phase_ssim(
    recon: &ComplexField,
    truth: &ComplexField,
    search_radius: usize,
) -> Result<(f64, f64), MetricsError> {
    let aligned = align(recon, truth, search_radius)?.aligned;
    let (h, w) = (truth.height(), truth.width());
    let mag_a: Vec<f64> = aligned.data().iter().map(|v| v.norm()).collect();
    let mag_b: Vec<f64> = truth.data().iter().map(|v| v.norm()).collect();
    let ph_a: Vec<f64> = aligned.data().iter().map(|&v| principal_phase(v)).collect();
    let ph_b: Vec<f64> = truth.data().iter().map(|&v| principal_phase(v)).collect();
    Ok((ssim(&mag_a, &mag_b, h, w)?, ssim(&ph_a, &ph_b, h, w)?))
}

/// Full-batch stationarity and feasibility residuals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktResiduals {
    /// Worst per-scan measurement-split feasibility `max_j ||u_j - F(omega .* S_j z)||`.
    pub r_u: f64,
    /// Gradient-split feasibility `||v - grad z||`.
    pub r_v: f64,
    /// Probe stationarity `||grad_omega L||`.
    pub r_omega: f64,
    /// Object stationarity `||grad_z L||`.
    pub r_z: f64,
}

/// Compute the four KKT residuals with a deterministic full-batch pass.
pub fn kkt_residuals(
    state: &SolverState,
    config: &SolverConfig,
    scans: &ScanSet,
    measurements: &MeasurementSet,
) -> KktResiduals {
    debug_assert_eq!(measurements.n_scans(), scans.n_scans());
    let mut r_u = 0.0f64;
    for (j, &off) in scans.offsets().iter().enumerate() {
        let spectrum = forward_spectrum(&state.omega, &state.z, off);
        let mut acc = 0.0;
        for (u, s) in state.u[j].iter().zip(spectrum.data()) {
            acc += (u - s).norm_sqr();
        }
        r_u = r_u.max(acc.sqrt());
    }

    let g = forward_diff(&state.z);
    let mut r_v = 0.0;
    for (v, gz) in state
        .v
        .gx
        .data()
        .iter()
        .zip(g.gx.data())
        .chain(state.v.gy.data().iter().zip(g.gy.data()))
    {
        r_v += (v - gz).norm_sqr();
    }
    let r_v = r_v.sqrt();

    let it = state.iterates();
    let r_omega = grad_omega_full(&it, scans, config.beta1).norm();
    let r_z = grad_z_full(&it, scans, config.beta1, config.beta2).norm();

    KktResiduals {
        r_u,
        r_v,
        r_omega,
        r_z,
    }
}
