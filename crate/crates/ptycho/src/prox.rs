//! Closed-form proximal operators for the measurement and gradient blocks.
//!
//! The measurement block uses one of two magnitude proxes, depending on the
//! noise model the fidelity targets:
//!
//! * AGM (amplitude Gaussian metric, `0.5 * ||sqrt(g) - sqrt(f)||^2`)
//! * IPM (intensity Poisson metric, `0.5 * <g - f .* log g, 1>`)
//!
//! The gradient block uses the complex `l1 - alpha*l2` prox applied per pixel
//! to length-2 gradient vectors, or isotropic group shrinkage for the
//! isotropic-TV baseline.
//!
//! Convention: `sign(0) = 1`. The zero input is the one place the complex
//! sign is ambiguous, and a unimodular choice makes the magnitude proxes
//! return their true minimizer magnitude instead of collapsing to zero.

use num_complex::Complex64;

use crate::grid::{forward_diff, ComplexField, GradientPair};

/// Data-fidelity metric selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FidelityKind {
    /// Amplitude Gaussian metric, for Gaussian-corrupted amplitudes.
    Agm,
    /// Intensity Poisson metric, for Poisson-corrupted intensities.
    Ipm,
}

/// Gradient-domain regularizer selector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegularizerKind {
    /// Weighted difference of anisotropic and isotropic TV with weight
    /// `alpha` in [0, 1].
    Aitv { alpha: f64 },
    /// Isotropic TV baseline.
    IsoTv,
    /// No regularization (the split variable tracks the gradient verbatim).
    None,
}

/// Unit-modulus phase of `z`, with `sign(0) = 1`.
#[inline]
pub fn csign(z: Complex64) -> Complex64 {
    let n = z.norm();
    if n == 0.0 {
        Complex64::new(1.0, 0.0)
    } else {
        z / n
    }
}

/// Prox of `(1/beta1) * 0.5 * || |u| - sqrt(d) ||^2` at `w`, entrywise:
/// `u_i = (sqrt(d_i) + beta1 |w_i|) / (1 + beta1) * sign(w_i)`.
pub fn prox_agm(w: &[Complex64], d: &[f64], beta1: f64) -> Vec<Complex64> {
    debug_assert_eq!(w.len(), d.len());
    debug_assert!(beta1 > 0.0);
    w.iter()
        .zip(d.iter())
        .map(|(&wi, &di)| {
            let r = (di.sqrt() + beta1 * wi.norm()) / (1.0 + beta1);
            csign(wi) * r
        })
        .collect()
}

/// Prox of `(1/beta1) * 0.5 * <|u|^2 - d .* log |u|^2, 1>` at `w`, entrywise:
/// `|u_i| = (beta1 |w_i| + sqrt((beta1 |w_i|)^2 + 4 (1+beta1) d_i)) / (2 (1+beta1))`.
pub fn prox_ipm(w: &[Complex64], d: &[f64], beta1: f64) -> Vec<Complex64> {
    debug_assert_eq!(w.len(), d.len());
    debug_assert!(beta1 > 0.0);
    w.iter()
        .zip(d.iter())
        .map(|(&wi, &di)| {
            let a = beta1 * wi.norm();
            // Intensities below 1e-300 are treated as exact zeros so the
            // discriminant does not pick up sqrt underflow noise.
            let r = if di < 1e-300 {
                a / (1.0 + beta1)
            } else {
                (a + (a * a + 4.0 * (1.0 + beta1) * di).sqrt()) / (2.0 * (1.0 + beta1))
            };
            csign(wi) * r
        })
        .collect()
}

/// Prox of `kappa * (||x||_1 - alpha ||x||_2)` at `x_prime`, for complex
/// vectors of any length.
///
/// Three cases on `||x_prime||_inf`:
/// 1. above `kappa`: soft-threshold then radially dilate by `alpha * kappa`;
/// 2. in `((1-alpha) kappa, kappa]`: a 1-sparse vector at the smallest
///    max-modulus index;
/// 3. at or below `(1-alpha) kappa`: zero.
pub fn prox_l1_minus_al2(x_prime: &[Complex64], kappa: f64, alpha: f64) -> Vec<Complex64> {
    debug_assert!(kappa > 0.0);
    debug_assert!((0.0..=1.0).contains(&alpha));
    let max_mod = x_prime.iter().map(|v| v.norm()).fold(0.0f64, f64::max);

    if max_mod > kappa {
        let xi: Vec<Complex64> = x_prime
            .iter()
            .map(|&v| csign(v) * (v.norm() - kappa).max(0.0))
            .collect();
        let xi_norm = xi.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let factor = (xi_norm + alpha * kappa) / xi_norm;
        xi.into_iter().map(|v| v * factor).collect()
    } else if max_mod > (1.0 - alpha) * kappa {
        // Smallest argmax index wins; determinism matters for reproducibility.
        let idx = x_prime
            .iter()
            .position(|v| v.norm() == max_mod)
            .expect("nonempty input");
        let mut out = vec![Complex64::new(0.0, 0.0); x_prime.len()];
        out[idx] = csign(x_prime[idx]) * (max_mod + (alpha - 1.0) * kappa);
        out
    } else {
        vec![Complex64::new(0.0, 0.0); x_prime.len()]
    }
}

/// Prox of `kappa * ||x||_2`: group shrinkage `max(1 - kappa/||x||, 0) * x`.
pub fn prox_group_l2(x_prime: &[Complex64], kappa: f64) -> Vec<Complex64> {
    debug_assert!(kappa > 0.0);
    let n = x_prime.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    if n <= kappa {
        vec![Complex64::new(0.0, 0.0); x_prime.len()]
    } else {
        let factor = 1.0 - kappa / n;
        x_prime.iter().map(|&v| v * factor).collect()
    }
}

/// Split-variable update: per-pixel prox of the chosen regularizer applied to
/// `grad(z) - y / beta2`, with per-pixel gradient vectors of length 2.
pub fn v_update(
    z: &ComplexField,
    y: &GradientPair,
    beta2: f64,
    lambda: f64,
    reg: RegularizerKind,
) -> GradientPair {
    debug_assert!(beta2 > 0.0);
    debug_assert!(lambda >= 0.0);
    let g = forward_diff(z);
    let mut vx = ComplexField::zeros(z.height(), z.width());
    let mut vy = ComplexField::zeros(z.height(), z.width());
    let inv_b2 = 1.0 / beta2;
    let kappa = lambda * inv_b2;

    for i in 0..z.len() {
        let tx = g.gx.data()[i] - y.gx.data()[i] * inv_b2;
        let ty = g.gy.data()[i] - y.gy.data()[i] * inv_b2;
        let (ox, oy) = if lambda == 0.0 {
            (tx, ty)
        } else {
            match reg {
                RegularizerKind::None => (tx, ty),
                RegularizerKind::Aitv { alpha } => {
                    let out = prox_l1_minus_al2(&[tx, ty], kappa, alpha);
                    (out[0], out[1])
                }
                RegularizerKind::IsoTv => {
                    let out = prox_group_l2(&[tx, ty], kappa);
                    (out[0], out[1])
                }
            }
        };
        vx.data_mut()[i] = ox;
        vy.data_mut()[i] = oy;
    }
    GradientPair { gx: vx, gy: vy }
}

/// Regularizer value at a gradient-space point: `||v||_1 - alpha ||v||_{2,1}`
/// for AITV, `||v||_{2,1}` for isotropic TV, zero for none.
pub fn regularizer_value(v: &GradientPair, reg: RegularizerKind) -> f64 {
    match reg {
        RegularizerKind::None => 0.0,
        RegularizerKind::Aitv { alpha } => {
            let mut acc = 0.0;
            for (a, b) in v.gx.data().iter().zip(v.gy.data()) {
                acc += a.norm() + b.norm() - alpha * (a.norm_sqr() + b.norm_sqr()).sqrt();
            }
            acc
        }
        RegularizerKind::IsoTv => {
            let mut acc = 0.0;
            for (a, b) in v.gx.data().iter().zip(v.gy.data()) {
                acc += (a.norm_sqr() + b.norm_sqr()).sqrt();
            }
            acc
        }
    }
}
