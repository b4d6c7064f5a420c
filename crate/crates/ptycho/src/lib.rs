//! Ptychographic phase retrieval: experiment simulation and stochastic ADMM
//! reconstruction with anisotropic-minus-isotropic TV regularization.
//!
//! A localized complex probe scans an object in overlapping windows; each
//! scan records only the Fourier intensities of the exit wave. The solver
//! splits the measurement and gradient couplings with auxiliary variables
//! and alternates closed-form proxes, minibatch gradient steps on the probe
//! and object (or exact solves for the deterministic baseline), and
//! multiplier ascent.
//!
//! Module map:
//! * [`grid`] — complex rasters, periodic differences, unitary FFT, windows.
//! * [`simulate`] — probes, scan grids, measurements, noise models.
//! * [`prox`] — closed-form proximal operators for both couplings.
//! * [`estimators`] — minibatch gradient estimators and exact solves.
//! * [`solver`] — the ADMM loop, schedules, and metrics emission.
//! * [`metrics`] — alignment, SSIM, and KKT residuals.
//! * [`io`] / [`cli`] — file formats and command orchestration.

pub mod cli;
pub mod estimators;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod prox;
pub mod simulate;
pub mod solver;
