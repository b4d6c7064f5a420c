//! Synthetic ptychography experiments: ground-truth objects, probes, raster
//! scan grids, clean Fourier-intensity measurements, and calibrated noise.
//!
//! The forward model per scan is `d_j = |F(omega .* window_j(z))|^2` with a
//! unitary 2D DFT. Gaussian corruption perturbs amplitudes at a noise level
//! derived from a target SNR; Poisson corruption draws photon counts from the
//! intensities of a brightness-scaled object.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use thiserror::Error;

use crate::grid::{extract_window, fft2_unitary, ComplexField, GridError};

#[derive(Error, Debug)]
pub enum SimError {
    #[error("probe parameter must be positive, got {0}")]
    NonPositiveParam(f64),
    #[error("probe size {m} exceeds object size {n}")]
    ProbeTooLarge { m: usize, n: usize },
    #[error("raster grid needs at least 2 positions per axis, got {0}")]
    GridTooSmall(usize),
    #[error("scan coverage violation: stride {stride} exceeds probe size {m}")]
    StrideGap { stride: usize, m: usize },
    #[error("scan coverage violation: {uncovered} pixels are never scanned")]
    CoverageViolation { uncovered: usize },
    #[error("scan offset ({0}, {1}) out of bounds")]
    OffsetOutOfBounds(usize, usize),
    #[error("measurements are identically zero; SNR is undefined")]
    ZeroMeasurements,
    #[error("raster dimensions {0}x{1} do not match {2}x{3}")]
    RasterDimMismatch(usize, usize, usize, usize),
    #[error("phase range [{0}, {1}] must lie within (-pi, pi]")]
    BadPhaseRange(f64, f64),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("failed to read raster: {0}")]
    Io(String),
}

/// The scan geometry: probe size, window origins, and per-pixel coverage
/// counts over the object grid. Every object pixel must be scanned at least
/// once; construction fails otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanSet {
    object_height: usize,
    object_width: usize,
    m: usize,
    offsets: Vec<(usize, usize)>,
    coverage: Vec<u32>,
}

impl ScanSet {
    pub fn new(
        object_height: usize,
        object_width: usize,
        m: usize,
        offsets: Vec<(usize, usize)>,
    ) -> Result<Self, SimError> {
        if m > object_height || m > object_width {
            return Err(SimError::ProbeTooLarge {
                m,
                n: object_height.min(object_width),
            });
        }
        for &(r, c) in &offsets {
            if r + m > object_height || c + m > object_width {
                return Err(SimError::OffsetOutOfBounds(r, c));
            }
        }
        let mut coverage = vec![0u32; object_height * object_width];
        for &(r, c) in &offsets {
            for dr in 0..m {
                let base = (r + dr) * object_width + c;
                for dc in 0..m {
                    coverage[base + dc] += 1;
                }
            }
        }
        let uncovered = coverage.iter().filter(|&&c| c == 0).count();
        if uncovered > 0 {
            return Err(SimError::CoverageViolation { uncovered });
        }
        Ok(Self {
            object_height,
            object_width,
            m,
            offsets,
            coverage,
        })
    }

    pub fn object_height(&self) -> usize {
        self.object_height
    }

    pub fn object_width(&self) -> usize {
        self.object_width
    }

    /// Probe (window) side length.
    pub fn probe_size(&self) -> usize {
        self.m
    }

    pub fn n_scans(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[(usize, usize)] {
        &self.offsets
    }

    pub fn offset(&self, j: usize) -> (usize, usize) {
        self.offsets[j]
    }

    /// Per-pixel count of windows containing each object pixel.
    pub fn coverage(&self) -> &[u32] {
        &self.coverage
    }
}

/// The phaseless measurements: one nonnegative intensity vector of length
/// `m^2` per scan.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    m: usize,
    d: Vec<Vec<f64>>,
}

impl MeasurementSet {
    pub fn new(m: usize, d: Vec<Vec<f64>>) -> Result<Self, SimError> {
        for dj in &d {
            if dj.len() != m * m {
                return Err(SimError::RasterDimMismatch(m, m, dj.len(), 1));
            }
            if dj.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(SimError::Io("negative or non-finite intensity".into()));
            }
        }
        Ok(Self { m, d })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_scans(&self) -> usize {
        self.d.len()
    }

    pub fn scan(&self, j: usize) -> &[f64] {
        &self.d[j]
    }

    pub fn scans(&self) -> &[Vec<f64>] {
        &self.d
    }

    pub fn total_intensity(&self) -> f64 {
        self.d.iter().map(|dj| dj.iter().sum::<f64>()).sum()
    }
}

/// Measurement corruption model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSpec {
    None,
    /// Additive Gaussian noise on amplitudes at the given target SNR (dB).
    Gaussian {
        snr_db: f64,
    },
    /// Poisson photon counting on the intensities of `zeta * z`; smaller
    /// `zeta` means stronger noise.
    Poisson {
        zeta: f64,
    },
}

/// Probe synthesis recipes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProbeKind {
    /// All ones.
    Flat,
    /// Unit modulus inside `radius` (pixels from center), zero outside,
    /// with optional quadratic phase `exp(i * curvature * rho^2)`.
    Disk { radius: f64, curvature: f64 },
    /// Amplitude `exp(-rho^2 / (2 sigma^2))` with optional quadratic phase.
    Gaussian { sigma: f64, curvature: f64 },
}

pub fn make_probe(kind: ProbeKind, m: usize) -> Result<ComplexField, SimError> {
    match kind {
        ProbeKind::Disk { radius, .. } if radius <= 0.0 => {
            return Err(SimError::NonPositiveParam(radius))
        }
        ProbeKind::Gaussian { sigma, .. } if sigma <= 0.0 => {
            return Err(SimError::NonPositiveParam(sigma))
        }
        _ => {}
    }
    let center = (m as f64 - 1.0) / 2.0;
    let mut out = ComplexField::zeros(m, m);
    for r in 0..m {
        for c in 0..m {
            let dy = r as f64 - center;
            let dx = c as f64 - center;
            let rho_sq = dx * dx + dy * dy;
            let value = match kind {
                ProbeKind::Flat => Complex64::new(1.0, 0.0),
                ProbeKind::Disk { radius, curvature } => {
                    if rho_sq.sqrt() <= radius {
                        Complex64::from_polar(1.0, curvature * rho_sq)
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                }
                ProbeKind::Gaussian { sigma, curvature } => {
                    let amp = (-rho_sq / (2.0 * sigma * sigma)).exp();
                    Complex64::from_polar(amp, curvature * rho_sq)
                }
            };
            out.set(r, c, value);
        }
    }
    Ok(out)
}

/// Square raster scan: `grid_k x grid_k` window origins with stride
/// `floor((n - m) / (grid_k - 1))` starting at (0, 0); the last row/column is
/// shifted so the final window ends exactly at `n - m`.
///
/// `n == m` degenerates to the single full-frame scan at (0, 0).
pub fn make_raster_scan(n: usize, m: usize, grid_k: usize) -> Result<ScanSet, SimError> {
    if m > n {
        return Err(SimError::ProbeTooLarge { m, n });
    }
    if m == n {
        return ScanSet::new(n, n, m, vec![(0, 0)]);
    }
    if grid_k < 2 {
        return Err(SimError::GridTooSmall(grid_k));
    }
    let span = n - m;
    let stride = span / (grid_k - 1);
    if stride > m {
        return Err(SimError::StrideGap { stride, m });
    }
    let mut positions = Vec::with_capacity(grid_k);
    for i in 0..grid_k {
        let p = if i == grid_k - 1 { span } else { i * stride };
        if positions.last() != Some(&p) {
            positions.push(p);
        }
    }
    let mut offsets = Vec::with_capacity(positions.len() * positions.len());
    for &r in &positions {
        for &c in &positions {
            offsets.push((r, c));
        }
    }
    ScanSet::new(n, n, m, offsets)
}

/// Clean intensities `d_j = |F(omega .* window_j(z))|^2` for every scan.
pub fn forward_measure(
    z: &ComplexField,
    omega: &ComplexField,
    scans: &ScanSet,
) -> Result<MeasurementSet, SimError> {
    let m = scans.probe_size();
    if omega.height() != m || omega.width() != m {
        return Err(SimError::RasterDimMismatch(
            omega.height(),
            omega.width(),
            m,
            m,
        ));
    }
    let mut d = Vec::with_capacity(scans.n_scans());
    for &off in scans.offsets() {
        let mut window = extract_window(z, off, m)?;
        for (w, o) in window.data_mut().iter_mut().zip(omega.data()) {
            *w *= o;
        }
        let spectrum = fft2_unitary(&window);
        d.push(spectrum.data().iter().map(|v| v.norm_sqr()).collect());
    }
    Ok(MeasurementSet { m, d })
}

/// Amplitude noise level `s` matching a target SNR in dB:
/// `s = sqrt(10^(-SNR/10) * total_intensity / (N m^2))`.
pub fn gaussian_noise_sigma(clean: &MeasurementSet, snr_db: f64) -> Result<f64, SimError> {
    let total = clean.total_intensity();
    if total <= 0.0 {
        return Err(SimError::ZeroMeasurements);
    }
    let denom = (clean.n_scans() * clean.m() * clean.m()) as f64;
    Ok((10f64.powf(-snr_db / 10.0) * total / denom).sqrt())
}

/// Poisson draw that falls back to a moment-matched Gaussian above 1e7 to
/// dodge instability at extreme means.
pub fn sample_poisson<R: Rng>(lambda: f64, rng: &mut R) -> f64 {
    if lambda <= 0.0 {
        0.0
    } else if lambda > 1e7 {
        let g: f64 = StandardNormal.sample(rng);
        (lambda + lambda.sqrt() * g).round().max(0.0)
    } else {
        Poisson::new(lambda)
            .expect("positive finite mean")
            .sample(rng)
    }
}

/// Noise-corrupted measurements of `(z, omega, scans)` under `spec`.
///
/// Gaussian: `d_j = (|F(P_j z)| + N(0, s^2 I))^2` with `s` calibrated from
/// the clean intensities. Poisson: `d_j = Poisson(|F(P_j (zeta z))|^2)`.
pub fn corrupt<R: Rng>(
    z: &ComplexField,
    omega: &ComplexField,
    scans: &ScanSet,
    spec: NoiseSpec,
    rng: &mut R,
) -> Result<MeasurementSet, SimError> {
    match spec {
        NoiseSpec::None => forward_measure(z, omega, scans),
        NoiseSpec::Gaussian { snr_db } => {
            // +inf is the documented no-noise limit (s = 0); NaN and -inf
            // are rejected.
            if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
                return Err(SimError::NonPositiveParam(snr_db));
            }
            let clean = forward_measure(z, omega, scans)?;
            let s = gaussian_noise_sigma(&clean, snr_db)?;
            if s == 0.0 {
                return Ok(clean);
            }
            let d = clean
                .d
                .iter()
                .map(|dj| {
                    dj.iter()
                        .map(|&v| {
                            let g: f64 = StandardNormal.sample(rng);
                            let amp = v.sqrt() + s * g;
                            amp * amp
                        })
                        .collect()
                })
                .collect();
            Ok(MeasurementSet { m: clean.m, d })
        }
        NoiseSpec::Poisson { zeta } => {
            if !(zeta > 0.0) || !zeta.is_finite() {
                return Err(SimError::NonPositiveParam(zeta));
            }
            let mut scaled = z.clone();
            scaled.scale(Complex64::new(zeta, 0.0));
            let clean = forward_measure(&scaled, omega, scans)?;
            let d = clean
                .d
                .iter()
                .map(|dj| dj.iter().map(|&v| sample_poisson(v, rng)).collect())
                .collect();
            Ok(MeasurementSet { m: clean.m, d })
        }
    }
}

/// Realized SNR of noisy measurements against the clean ones:
/// `-10 log10(sum ||sqrt(d_noisy) - sqrt(d_clean)||^2 / sum ||sqrt(d_clean)||^2)`.
///
/// Identical inputs report `+inf`.
pub fn measure_snr(noisy: &MeasurementSet, clean: &MeasurementSet) -> Result<f64, SimError> {
    let denom = clean.total_intensity();
    if denom <= 0.0 {
        return Err(SimError::ZeroMeasurements);
    }
    let mut num = 0.0;
    for (nj, cj) in noisy.d.iter().zip(clean.d.iter()) {
        for (&nv, &cv) in nj.iter().zip(cj.iter()) {
            let diff = nv.sqrt() - cv.sqrt();
            num += diff * diff;
        }
    }
    Ok(-10.0 * (num / denom).log10())
}

/// Complex object from two 8-bit rasters: `z_i = mag_i * exp(i * phase_i)`
/// after affine mapping of the byte values into the given ranges.
pub fn compose_object(
    mag: &[u8],
    phase: &[u8],
    height: usize,
    width: usize,
    mag_range: (f64, f64),
    phase_range: (f64, f64),
) -> Result<ComplexField, SimError> {
    if mag.len() != height * width || phase.len() != height * width {
        return Err(SimError::RasterDimMismatch(
            height,
            width,
            mag.len(),
            phase.len(),
        ));
    }
    if phase_range.0 <= -std::f64::consts::PI || phase_range.1 > std::f64::consts::PI {
        return Err(SimError::BadPhaseRange(phase_range.0, phase_range.1));
    }
    let map = |v: u8, (lo, hi): (f64, f64)| lo + (v as f64 / 255.0) * (hi - lo);
    let data = mag
        .iter()
        .zip(phase.iter())
        .map(|(&mv, &pv)| Complex64::from_polar(map(mv, mag_range), map(pv, phase_range)))
        .collect();
    Ok(ComplexField::new(height, width, data)?)
}

/// Ground truth from a pair of 8-bit PGM rasters on disk; see
/// [`compose_object`] for the mapping.
pub fn load_ground_truth(
    mag_path: &std::path::Path,
    phase_path: &std::path::Path,
    mag_range: (f64, f64),
    phase_range: (f64, f64),
) -> Result<ComplexField, SimError> {
    let (mw, mh, mag) = crate::io::read_pgm(mag_path).map_err(|e| SimError::Io(e.to_string()))?;
    let (pw, ph, phase) =
        crate::io::read_pgm(phase_path).map_err(|e| SimError::Io(e.to_string()))?;
    if (mw, mh) != (pw, ph) {
        return Err(SimError::RasterDimMismatch(mh, mw, ph, pw));
    }
    compose_object(&mag, &phase, mh, mw, mag_range, phase_range)
}

/// Inverse of [`compose_object`]: quantize magnitude and phase back to 8-bit
/// rasters under the same affine ranges.
pub fn split_object(
    z: &ComplexField,
    mag_range: (f64, f64),
    phase_range: (f64, f64),
) -> (Vec<u8>, Vec<u8>) {
    let quant = |v: f64, (lo, hi): (f64, f64)| -> u8 {
        if hi <= lo {
            return 0;
        }
        (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8
    };
    let mag = z
        .data()
        .iter()
        .map(|v| quant(v.norm(), mag_range))
        .collect();
    let phase = z
        .data()
        .iter()
        .map(|v| quant(v.arg(), phase_range))
        .collect();
    (mag, phase)
}

/// Deterministic piecewise-constant test rasters (magnitude, phase) with
/// sharp edges in the interior and calm corners. Returned as 8-bit images to
/// share the composition path with file-based ground truth.
pub fn make_synthetic_rasters(height: usize, width: usize) -> (Vec<u8>, Vec<u8>) {
    let h = height as f64;
    let w = width as f64;
    let min_dim = h.min(w);
    let mut mag = vec![0u8; height * width];
    let mut phase = vec![0u8; height * width];
    for r in 0..height {
        for c in 0..width {
            let y = r as f64;
            let x = c as f64;
            let idx = r * width + c;

            let mut mv: f64 = 0.35;
            let d1 = ((y - 0.38 * h).powi(2) + (x - 0.36 * w).powi(2)).sqrt();
            if d1 <= 0.17 * min_dim {
                mv = 0.95;
            }
            if y >= 0.58 * h && y < 0.82 * h && x >= 0.22 * w && x < 0.56 * w {
                mv = 0.72;
            }
            if y >= 0.12 * h && y < 0.22 * h && x >= 0.52 * w && x < 0.88 * w {
                mv = 0.55;
            }
            mag[idx] = (mv * 255.0).round() as u8;

            let mut pv: f64 = 0.5;
            let d2 = ((y - 0.64 * h).powi(2) + (x - 0.68 * w).powi(2)).sqrt();
            if d2 <= 0.19 * min_dim {
                pv = 0.88;
            }
            if y >= 0.14 * h && y < 0.40 * h && x >= 0.56 * w && x < 0.86 * w {
                pv = 0.18;
            }
            if (y / h - x / w).abs() < 0.055 && y > 0.3 * h {
                pv = 0.68;
            }
            phase[idx] = (pv * 255.0).round() as u8;
        }
    }
    (mag, phase)
}

/// Blind-mode probe initialization: the ground truth plus a complex Gaussian
/// perturbation of relative scale `eps * ||omega||_inf`.
pub fn perturb_probe<R: Rng>(omega: &ComplexField, eps: f64, rng: &mut R) -> ComplexField {
    let max_mod = omega.data().iter().map(|v| v.norm()).fold(0.0f64, f64::max);
    let scale = eps * max_mod;
    let mut out = omega.clone();
    for v in out.data_mut().iter_mut() {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *v += Complex64::new(scale * re, scale * im);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_field(h: usize, w: usize, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w)
            .map(|_| c(rng.gen_range(0.2..1.0), rng.gen_range(-0.5..0.5)))
            .collect();
        ComplexField::new(h, w, data).unwrap()
    }

    #[test]
    fn flat_probe_is_all_ones() {
        let p = make_probe(ProbeKind::Flat, 4).unwrap();
        assert_eq!(p.data().len(), 16);
        assert!(p.data().iter().all(|v| *v == c(1.0, 0.0)));
    }

    #[test]
    fn disk_probe_interior_count_near_area() {
        let m = 64;
        let p = make_probe(
            ProbeKind::Disk {
                radius: 32.0,
                curvature: 0.0,
            },
            m,
        )
        .unwrap();
        let count = p.data().iter().filter(|v| v.norm() > 0.5).count() as f64;
        let area = std::f64::consts::PI * 32.0 * 32.0;
        assert!(
            (count - area).abs() / area < 0.05,
            "count {count} area {area}"
        );
    }

    #[test]
    fn wide_gaussian_probe_is_flat() {
        let p = make_probe(
            ProbeKind::Gaussian {
                sigma: 1e6,
                curvature: 0.0,
            },
            8,
        )
        .unwrap();
        assert!(p.data().iter().all(|v| (v.norm() - 1.0).abs() < 1e-6));
    }

    #[test]
    fn probe_rejects_nonpositive_params() {
        assert!(make_probe(
            ProbeKind::Disk {
                radius: 0.0,
                curvature: 0.0
            },
            8
        )
        .is_err());
        assert!(make_probe(
            ProbeKind::Gaussian {
                sigma: -1.0,
                curvature: 0.0
            },
            8
        )
        .is_err());
    }

    #[test]
    fn raster_scan_desk_instance() {
        let scans = make_raster_scan(64, 32, 5).unwrap();
        assert_eq!(scans.n_scans(), 25);
        let rows: Vec<usize> = scans.offsets().iter().map(|o| o.0).collect();
        for expect in [0usize, 8, 16, 24, 32] {
            assert!(rows.contains(&expect));
        }
        assert!(scans.coverage().iter().all(|&v| v >= 1));
    }

    #[test]
    fn raster_scan_paper_scale_geometry() {
        let scans = make_raster_scan(348, 256, 10).unwrap();
        assert_eq!(scans.n_scans(), 100);
        let max_off = scans
            .offsets()
            .iter()
            .map(|&(r, c)| r.max(c))
            .max()
            .unwrap();
        assert_eq!(max_off, 92);
    }

    #[test]
    fn raster_scan_degenerate_full_frame() {
        let scans = make_raster_scan(16, 16, 4).unwrap();
        assert_eq!(scans.offsets(), &[(0, 0)]);
        assert!(scans.coverage().iter().all(|&v| v == 1));
    }

    #[test]
    fn raster_scan_rejects_coverage_gaps() {
        // stride (64-8)/(2-1) = 56 > m = 8
        match make_raster_scan(64, 8, 2) {
            Err(SimError::StrideGap { .. }) => {}
            other => panic!("expected stride gap, got {other:?}"),
        }
    }

    #[test]
    fn scanset_rejects_uncovered_pixels() {
        match ScanSet::new(8, 8, 2, vec![(0, 0), (6, 6)]) {
            Err(SimError::CoverageViolation { .. }) => {}
            other => panic!("expected coverage violation, got {other:?}"),
        }
    }

    #[test]
    fn impulse_measurement_is_flat() {
        let m = 8;
        let scans = make_raster_scan(m, m, 2).unwrap();
        let omega = make_probe(ProbeKind::Flat, m).unwrap();
        let mut z = ComplexField::zeros(m, m);
        z.data_mut()[0] = c(1.0, 0.0);
        let meas = forward_measure(&z, &omega, &scans).unwrap();
        let expect = 1.0 / (m * m) as f64;
        for &v in meas.scan(0) {
            assert!((v - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn measurement_satisfies_parseval() {
        let z = random_field(16, 16, 5);
        let omega = make_probe(
            ProbeKind::Gaussian {
                sigma: 3.0,
                curvature: 0.02,
            },
            8,
        )
        .unwrap();
        let scans = make_raster_scan(16, 8, 3).unwrap();
        let meas = forward_measure(&z, &omega, &scans).unwrap();
        for (j, &off) in scans.offsets().iter().enumerate() {
            let mut win = extract_window(&z, off, 8).unwrap();
            for (w, o) in win.data_mut().iter_mut().zip(omega.data()) {
                *w *= o;
            }
            let exit_energy: f64 = win.data().iter().map(|v| v.norm_sqr()).sum();
            let meas_energy: f64 = meas.scan(j).iter().sum();
            assert!((exit_energy - meas_energy).abs() <= 1e-10 * exit_energy.max(1.0));
        }
    }

    /// Naive O(m^4) route: window, multiply, direct DFT sum, square.
    #[test]
    fn measurement_matches_naive_dft_oracle() {
        let m = 4;
        let z = random_field(4, 4, 77);
        let omega = random_field(4, 4, 78);
        let scans = ScanSet::new(4, 4, 4, vec![(0, 0)]).unwrap();
        let meas = forward_measure(&z, &omega, &scans).unwrap();
        for k in 0..m {
            for l in 0..m {
                let mut acc = c(0.0, 0.0);
                for r in 0..m {
                    for cc in 0..m {
                        let phase = -2.0
                            * std::f64::consts::PI
                            * (k as f64 * r as f64 + l as f64 * cc as f64)
                            / m as f64;
                        acc += omega.at(r, cc) * z.at(r, cc) * Complex64::from_polar(1.0, phase);
                    }
                }
                acc /= m as f64;
                let expect = acc.norm_sqr();
                let got = meas.scan(0)[k * m + l];
                assert!((got - expect).abs() <= 1e-10 * expect.max(1.0));
            }
        }
    }

    #[test]
    fn corrupt_rejects_invalid_noise_parameters() {
        let z = random_field(8, 8, 90);
        let omega = make_probe(ProbeKind::Flat, 4).unwrap();
        let scans = make_raster_scan(8, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for zeta in [0.0, -1.0, f64::NAN] {
            assert!(corrupt(&z, &omega, &scans, NoiseSpec::Poisson { zeta }, &mut rng).is_err());
        }
        assert!(corrupt(
            &z,
            &omega,
            &scans,
            NoiseSpec::Gaussian { snr_db: f64::NAN },
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn corrupt_gaussian_with_zero_noise_level_is_clean() {
        // SNR -> +inf drives s to exactly 0, which must return the clean
        // measurements bit-identically (no sqrt/square round trip).
        let z = random_field(12, 12, 79);
        let omega = make_probe(ProbeKind::Flat, 6).unwrap();
        let scans = make_raster_scan(12, 6, 3).unwrap();
        let clean = forward_measure(&z, &omega, &scans).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy = corrupt(
            &z,
            &omega,
            &scans,
            NoiseSpec::Gaussian {
                snr_db: f64::INFINITY,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(clean, noisy);
    }

    #[test]
    fn poisson_relative_deviation_shrinks_with_brightness() {
        // Total counts scale with zeta^2, so the relative deviation of the
        // summed counts from their mean contracts like 1/zeta.
        let z = random_field(8, 8, 80);
        let omega = make_probe(ProbeKind::Flat, 4).unwrap();
        let scans = make_raster_scan(8, 4, 2).unwrap();
        let mut rel_devs = Vec::new();
        for (zeta, seed) in [(2.0, 81u64), (20.0, 82)] {
            let mut scaled = z.clone();
            scaled.scale(c(zeta, 0.0));
            let clean = forward_measure(&scaled, &omega, &scans).unwrap();
            let expect = clean.total_intensity();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut dev = 0.0;
            let draws = 100;
            for _ in 0..draws {
                let noisy =
                    corrupt(&z, &omega, &scans, NoiseSpec::Poisson { zeta }, &mut rng).unwrap();
                dev += (noisy.total_intensity() - expect).abs() / expect;
            }
            rel_devs.push(dev / draws as f64);
        }
        assert!(
            rel_devs[1] < rel_devs[0] / 2.0,
            "relative deviation should shrink with brightness: {rel_devs:?}"
        );
    }

    #[test]
    fn load_ground_truth_roundtrips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mag_path = dir.path().join("mag.pgm");
        let phase_path = dir.path().join("phase.pgm");
        let ranges = ((0.3, 1.0), (-1.3, 1.3));

        let (mag, phase) = make_synthetic_rasters(20, 20);
        let z = compose_object(&mag, &phase, 20, 20, ranges.0, ranges.1).unwrap();
        let (mag8, phase8) = split_object(&z, ranges.0, ranges.1);
        crate::io::write_pgm(&mag_path, 20, 20, &mag8).unwrap();
        crate::io::write_pgm(&phase_path, 20, 20, &phase8).unwrap();

        let back = load_ground_truth(&mag_path, &phase_path, ranges.0, ranges.1).unwrap();
        for (a, b) in back.data().iter().zip(z.data()) {
            assert!((a - b).norm() <= 1e-9);
        }

        // Mismatched raster dimensions are rejected.
        crate::io::write_pgm(&phase_path, 10, 10, &[0u8; 100]).unwrap();
        assert!(load_ground_truth(&mag_path, &phase_path, ranges.0, ranges.1).is_err());
    }

    #[test]
    fn measurement_is_scale_equivariant() {
        let z = random_field(12, 12, 6);
        let omega = make_probe(ProbeKind::Flat, 6).unwrap();
        let scans = make_raster_scan(12, 6, 3).unwrap();
        let base = forward_measure(&z, &omega, &scans).unwrap();
        let mut scaled = z.clone();
        scaled.scale(c(3.0, 0.0));
        let meas = forward_measure(&scaled, &omega, &scans).unwrap();
        for (a, b) in meas.d.iter().flatten().zip(base.d.iter().flatten()) {
            assert!((a - 9.0 * b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn noise_sigma_hand_case_and_homogeneity() {
        // N = 1, m = 1, intensity 1, SNR = 0: s = 1.
        let meas = MeasurementSet::new(1, vec![vec![1.0]]).unwrap();
        assert!((gaussian_noise_sigma(&meas, 0.0).unwrap() - 1.0).abs() <= 1e-15);

        // SNR -> inf gives s -> 0.
        assert!(gaussian_noise_sigma(&meas, 500.0).unwrap() < 1e-20);

        // Doubling amplitudes (4x intensities) doubles s.
        let meas4 = MeasurementSet::new(1, vec![vec![4.0]]).unwrap();
        let s1 = gaussian_noise_sigma(&meas, 17.0).unwrap();
        let s2 = gaussian_noise_sigma(&meas4, 17.0).unwrap();
        assert!((s2 - 2.0 * s1).abs() <= 1e-12);

        let zero = MeasurementSet::new(1, vec![vec![0.0]]).unwrap();
        assert!(gaussian_noise_sigma(&zero, 10.0).is_err());
    }

    #[test]
    fn corrupt_none_is_bit_identical() {
        let z = random_field(12, 12, 7);
        let omega = make_probe(ProbeKind::Flat, 6).unwrap();
        let scans = make_raster_scan(12, 6, 3).unwrap();
        let clean = forward_measure(&z, &omega, &scans).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noisy = corrupt(&z, &omega, &scans, NoiseSpec::None, &mut rng).unwrap();
        assert_eq!(clean, noisy);
    }

    #[test]
    fn corrupt_gaussian_is_seed_reproducible() {
        let z = random_field(12, 12, 8);
        let omega = make_probe(ProbeKind::Flat, 6).unwrap();
        let scans = make_raster_scan(12, 6, 3).unwrap();
        let spec = NoiseSpec::Gaussian { snr_db: 30.0 };
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let a = corrupt(&z, &omega, &scans, spec, &mut r1).unwrap();
        let b = corrupt(&z, &omega, &scans, spec, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn snr_roundtrip_smoke() {
        let z = random_field(32, 32, 9);
        let omega = make_probe(ProbeKind::Flat, 16).unwrap();
        let scans = make_raster_scan(32, 16, 3).unwrap();
        let clean = forward_measure(&z, &omega, &scans).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noisy = corrupt(
            &z,
            &omega,
            &scans,
            NoiseSpec::Gaussian { snr_db: 30.0 },
            &mut rng,
        )
        .unwrap();
        let snr = measure_snr(&noisy, &clean).unwrap();
        assert!((snr - 30.0).abs() < 1.5, "measured {snr}");
        assert!(measure_snr(&clean, &clean).unwrap().is_infinite());
    }

    #[test]
    fn snr_invariant_under_amplitude_scaling() {
        let clean = MeasurementSet::new(2, vec![vec![1.0, 2.0, 0.5, 3.0]]).unwrap();
        let noisy = MeasurementSet::new(2, vec![vec![1.1, 1.9, 0.55, 3.2]]).unwrap();
        let s1 = measure_snr(&noisy, &clean).unwrap();
        let scale = |m: &MeasurementSet| {
            MeasurementSet::new(
                2,
                m.d.iter()
                    .map(|dj| dj.iter().map(|v| v * 4.0).collect())
                    .collect(),
            )
            .unwrap()
        };
        let s2 = measure_snr(&scale(&noisy), &scale(&clean)).unwrap();
        assert!((s1 - s2).abs() <= 1e-12);
    }

    #[test]
    fn poisson_mean_smoke() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let lambda = 50.0;
        let n = 4000;
        let mean: f64 = (0..n)
            .map(|_| sample_poisson(lambda, &mut rng))
            .sum::<f64>()
            / n as f64;
        let se = (lambda / n as f64).sqrt();
        assert!((mean - lambda).abs() <= 4.0 * se, "mean {mean}");
        assert_eq!(sample_poisson(0.0, &mut rng), 0.0);
    }

    #[test]
    fn compose_object_hand_cases() {
        let ones = compose_object(&[255], &[128], 1, 1, (0.0, 1.0), (0.0, 0.0)).unwrap();
        assert!((ones.data()[0] - c(1.0, 0.0)).norm() <= 1e-12);

        // Constant magnitude 1, phase pi/2 everywhere: the field of i.
        let field = compose_object(
            &[255, 255],
            &[255, 255],
            1,
            2,
            (0.0, 1.0),
            (0.0, std::f64::consts::FRAC_PI_2),
        )
        .unwrap();
        for v in field.data() {
            assert!((v - c(0.0, 1.0)).norm() <= 1e-12);
        }

        assert!(compose_object(&[0; 4], &[0; 2], 2, 2, (0.0, 1.0), (0.0, 1.0)).is_err());
        assert!(compose_object(&[0], &[0], 1, 1, (0.0, 1.0), (-4.0, 1.0)).is_err());
    }

    #[test]
    fn split_compose_roundtrip() {
        let (mag, phase) = make_synthetic_rasters(24, 24);
        let ranges = ((0.3, 1.0), (-1.2, 1.2));
        let z = compose_object(&mag, &phase, 24, 24, ranges.0, ranges.1).unwrap();
        let (mag2, phase2) = split_object(&z, ranges.0, ranges.1);
        assert_eq!(mag, mag2);
        assert_eq!(phase, phase2);
        let z2 = compose_object(&mag2, &phase2, 24, 24, ranges.0, ranges.1).unwrap();
        for (a, b) in z.data().iter().zip(z2.data()) {
            assert!((a - b).norm() <= 1e-9);
        }
    }

    #[test]
    fn perturbed_probe_stays_close() {
        let omega = make_probe(
            ProbeKind::Disk {
                radius: 8.0,
                curvature: 0.0,
            },
            16,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = perturb_probe(&omega, 0.05, &mut rng);
        let mut diff = init.clone();
        diff.add_scaled(&omega, c(-1.0, 0.0));
        assert!(diff.norm() > 0.0);
        assert!(diff.norm() < 0.3 * omega.norm());
    }
}
