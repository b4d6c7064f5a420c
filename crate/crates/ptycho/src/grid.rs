//! Complex raster fields and the linear operators of the measurement model.
//!
//! Images live in row-major (lexicographic) order as flat vectors of
//! `Complex64`. The module provides the periodic forward-difference gradient
//! and its adjoint, a unitary 2D Fourier transform, and window extraction /
//! embedding, which stand in for the binary scan matrices: a scan never
//! materializes as a matrix, only as an `(offset, size)` pair.
//!
//! All inner products follow the convention `<a, b> = sum_i a_i * conj(b_i)`.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

#[derive(Error, Debug, PartialEq)]
pub enum GridError {
    #[error("field dimensions {0}x{1} do not match {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("window {m}x{m} at ({row}, {col}) exceeds field bounds {height}x{width}")]
    WindowOutOfBounds {
        row: usize,
        col: usize,
        m: usize,
        height: usize,
        width: usize,
    },
    #[error("field must be nonempty")]
    Empty,
}

/// A complex-valued `height x width` raster in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexField {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self, GridError> {
        if height == 0 || width == 0 {
            return Err(GridError::Empty);
        }
        if data.len() != height * width {
            return Err(GridError::DimMismatch(height, width, data.len(), 1));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    /// Constant field `c * 1`.
    pub fn constant(height: usize, width: usize, value: Complex64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: Complex64) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Self, scale: Complex64) {
        debug_assert!(self.same_dims(other));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: Complex64) {
        for a in self.data.iter_mut() {
            *a *= factor;
        }
    }
}

/// `<a, b> = sum_i a_i * conj(b_i)`.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y.conj()).sum()
}

pub fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Forward-difference gradient components of a field: `(gx, gy)`.
///
/// Also carries the split variable `v` and its multiplier `y`, which live on
/// the same product space.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPair {
    pub gx: ComplexField,
    pub gy: ComplexField,
}

impl GradientPair {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            gx: ComplexField::zeros(height, width),
            gy: ComplexField::zeros(height, width),
        }
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.gx.same_dims(&other.gx) && self.gy.same_dims(&other.gy)
    }

    pub fn norm(&self) -> f64 {
        (self.gx.data.iter().map(|z| z.norm_sqr()).sum::<f64>()
            + self.gy.data.iter().map(|z| z.norm_sqr()).sum::<f64>())
        .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.gx.is_finite() && self.gy.is_finite()
    }

    /// `self + scale * other` on both components.
    pub fn add_scaled(&mut self, other: &Self, scale: Complex64) {
        self.gx.add_scaled(&other.gx, scale);
        self.gy.add_scaled(&other.gy, scale);
    }
}

/// Periodic forward differences: row-interior entries `z_i - z_{i-1}` with
/// wrap-around at row starts, and the column analog vertically.
pub fn forward_diff(z: &ComplexField) -> GradientPair {
    let (h, w) = (z.height, z.width);
    let mut gx = ComplexField::zeros(h, w);
    let mut gy = ComplexField::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let left = if c == 0 { w - 1 } else { c - 1 };
            let up = if r == 0 { h - 1 } else { r - 1 };
            gx.set(r, c, z.at(r, c) - z.at(r, left));
            gy.set(r, c, z.at(r, c) - z.at(up, c));
        }
    }
    GradientPair { gx, gy }
}

/// The transpose of [`forward_diff`]: `<grad z, p> = <z, divergence_adjoint(p)>`.
pub fn divergence_adjoint(p: &GradientPair) -> ComplexField {
    let (h, w) = (p.gx.height, p.gx.width);
    debug_assert!(p.gx.same_dims(&p.gy));
    let mut out = ComplexField::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let right = if c == w - 1 { 0 } else { c + 1 };
            let down = if r == h - 1 { 0 } else { r + 1 };
            let val = p.gx.at(r, c) - p.gx.at(r, right) + p.gy.at(r, c) - p.gy.at(down, c);
            out.set(r, c, val);
        }
    }
    out
}

/// Laplacian `-grad^T grad`, matching the sign convention of the normal
/// equations for the image block.
pub fn laplacian(z: &ComplexField) -> ComplexField {
    let mut out = divergence_adjoint(&forward_diff(z));
    out.scale(Complex64::new(-1.0, 0.0));
    out
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if forward {
            p.plan_fft_forward(len)
        } else {
            p.plan_fft_inverse(len)
        }
    })
}

fn fft2_impl(x: &ComplexField, forward: bool) -> ComplexField {
    let (h, w) = (x.height, x.width);
    let mut data = x.data.clone();

    let row_fft = plan(w, forward);
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }

    let col_fft = plan(h, forward);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }

    // rustfft leaves both directions unnormalized; 1/sqrt(hw) makes each
    // direction unitary.
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in data.iter_mut() {
        *v *= scale;
    }
    ComplexField {
        height: h,
        width: w,
        data,
    }
}

/// Unitary 2D DFT: `||fft2_unitary(x)|| = ||x||`.
pub fn fft2_unitary(x: &ComplexField) -> ComplexField {
    fft2_impl(x, true)
}

/// Inverse of [`fft2_unitary`].
pub fn ifft2_unitary(x: &ComplexField) -> ComplexField {
    fft2_impl(x, false)
}

/// The `m x m` subblock of `z` starting at `offset = (row, col)`.
///
/// This is the action of a binary scan matrix; windows must lie fully inside
/// the field (scans do not wrap).
pub fn extract_window(
    z: &ComplexField,
    offset: (usize, usize),
    m: usize,
) -> Result<ComplexField, GridError> {
    let (row, col) = offset;
    if row + m > z.height || col + m > z.width || m == 0 {
        return Err(GridError::WindowOutOfBounds {
            row,
            col,
            m,
            height: z.height,
            width: z.width,
        });
    }
    let mut data = Vec::with_capacity(m * m);
    for r in 0..m {
        let start = (row + r) * z.width + col;
        data.extend_from_slice(&z.data[start..start + m]);
    }
    Ok(ComplexField {
        height: m,
        width: m,
        data,
    })
}

/// Adjoint of [`extract_window`]: places `x` at `offset` inside a
/// `dims`-sized zero field. Entries outside the window are exactly zero.
pub fn embed_window(
    x: &ComplexField,
    offset: (usize, usize),
    dims: (usize, usize),
) -> Result<ComplexField, GridError> {
    let (height, width) = dims;
    let m = x.height;
    let (row, col) = offset;
    if x.height != x.width || row + m > height || col + m > width {
        return Err(GridError::WindowOutOfBounds {
            row,
            col,
            m,
            height,
            width,
        });
    }
    let mut out = ComplexField::zeros(height, width);
    accumulate_window(&mut out, x, offset);
    Ok(out)
}

/// Adds `x` into `acc` at `offset` without allocating; the in-place form of
/// [`embed_window`] used by batch gradient assembly.
pub fn accumulate_window(acc: &mut ComplexField, x: &ComplexField, offset: (usize, usize)) {
    let m = x.height;
    let (row, col) = offset;
    debug_assert!(row + m <= acc.height && col + m <= acc.width);
    for r in 0..m {
        let dst = (row + r) * acc.width + col;
        let src = r * m;
        for c in 0..m {
            acc.data[dst + c] += x.data[src + c];
        }
    }
}
