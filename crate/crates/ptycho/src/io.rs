//! On-disk formats.
//!
//! * `CIM1` — complex field: magic, u32 LE height and width, then
//!   height*width little-endian f64 (real, imaginary) pairs, row-major.
//! * `PME1` — measurements: magic, u32 LE scan count and window size, then
//!   `N * m^2` little-endian f64 intensities.
//! * scan text — `"m N"` header line, then one `"row col"` offset per line.
//! * `CKP1` — checkpoint: magic, 32-byte config hash, then the solver state
//!   fields in declaration order with the same numeric encoding as `CIM1`,
//!   and the RNG seed/stream/position.
//! * PGM (P5, 8-bit) — grayscale input rasters and lossy previews.
//!
//! Magic and length validation happen before any allocation sized from file
//! contents is trusted.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{ComplexField, GradientPair};
use crate::simulate::{MeasurementSet, ScanSet};
use crate::solver::SolverState;

#[derive(Error, Debug)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic, expected {expected}")]
    BadMagic {
        path: String,
        expected: &'static str,
    },
    #[error("{path}: truncated at byte {offset}")]
    Truncated { path: String, offset: usize },
    #[error("{path}: {msg} (at byte {offset})")]
    Malformed {
        path: String,
        msg: String,
        offset: usize,
    },
    #[error("{path}: checkpoint was written under a different configuration")]
    ConfigHashMismatch { path: String },
}

struct Reader<'a> {
    path: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a str, bytes: &'a [u8]) -> Self {
        Self {
            path,
            bytes,
            pos: 0,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.bytes.len() {
            return Err(IoError::Truncated {
                path: self.path.to_string(),
                offset: self.pos,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &'static str) -> Result<(), IoError> {
        let got = self.take(4)?;
        if got != expected.as_bytes() {
            return Err(IoError::BadMagic {
                path: self.path.to_string(),
                expected,
            });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128, IoError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn complex_vec(&mut self, len: usize) -> Result<Vec<Complex64>, IoError> {
        // Length sanity before allocating: each entry needs 16 bytes.
        if self.pos + len.saturating_mul(16) > self.bytes.len() {
            return Err(IoError::Truncated {
                path: self.path.to_string(),
                offset: self.pos,
            });
        }
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let re = self.f64()?;
            let im = self.f64()?;
            out.push(Complex64::new(re, im));
        }
        Ok(out)
    }

    fn malformed(&self, msg: impl Into<String>) -> IoError {
        IoError::Malformed {
            path: self.path.to_string(),
            msg: msg.into(),
            offset: self.pos,
        }
    }

    fn done(&self) -> Result<(), IoError> {
        if self.pos != self.bytes.len() {
            return Err(IoError::Malformed {
                path: self.path.to_string(),
                msg: format!("{} trailing bytes", self.bytes.len() - self.pos),
                offset: self.pos,
            });
        }
        Ok(())
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

fn push_complexes(out: &mut Vec<u8>, data: &[Complex64]) {
    for v in data {
        out.extend_from_slice(&v.re.to_le_bytes());
        out.extend_from_slice(&v.im.to_le_bytes());
    }
}

pub fn write_cim(path: &Path, field: &ComplexField) -> Result<(), IoError> {
    let mut out = Vec::with_capacity(12 + field.len() * 16);
    out.extend_from_slice(b"CIM1");
    out.extend_from_slice(&(field.height() as u32).to_le_bytes());
    out.extend_from_slice(&(field.width() as u32).to_le_bytes());
    push_complexes(&mut out, field.data());
    write_bytes(path, &out)
}

pub fn read_cim(path: &Path) -> Result<ComplexField, IoError> {
    let bytes = read_bytes(path)?;
    let path_str = path.display().to_string();
    let mut r = Reader::new(&path_str, &bytes);
    r.magic("CIM1")?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    if h == 0 || w == 0 {
        return Err(r.malformed("zero dimension"));
    }
    let data = r.complex_vec(h * w)?;
    r.done()?;
    if data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(r.malformed("non-finite sample"));
    }
    ComplexField::new(h, w, data).map_err(|e| r.malformed(e.to_string()))
}

pub fn write_pme(path: &Path, meas: &MeasurementSet) -> Result<(), IoError> {
    let m = meas.m();
    let mut out = Vec::with_capacity(12 + meas.n_scans() * m * m * 8);
    out.extend_from_slice(b"PME1");
    out.extend_from_slice(&(meas.n_scans() as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    for d in meas.scans() {
        for &v in d {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

pub fn read_pme(path: &Path) -> Result<MeasurementSet, IoError> {
    let bytes = read_bytes(path)?;
    let path_str = path.display().to_string();
    let mut r = Reader::new(&path_str, &bytes);
    r.magic("PME1")?;
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    if m == 0 {
        return Err(r.malformed("zero window size"));
    }
    if r.pos + n.saturating_mul(m * m).saturating_mul(8) > bytes.len() {
        return Err(IoError::Truncated {
            path: path_str.clone(),
            offset: r.pos,
        });
    }
    let mut d = Vec::with_capacity(n);
    for _ in 0..n {
        let mut scan = Vec::with_capacity(m * m);
        for _ in 0..m * m {
            scan.push(r.f64()?);
        }
        d.push(scan);
    }
    r.done()?;
    MeasurementSet::new(m, d).map_err(|e| r.malformed(e.to_string()))
}

/// Scan offsets in the human-readable text format.
pub fn write_scan_text(path: &Path, scans: &ScanSet) -> Result<(), IoError> {
    let mut out = format!("{} {}\n", scans.probe_size(), scans.n_scans());
    for &(r, c) in scans.offsets() {
        out.push_str(&format!("{r} {c}\n"));
    }
    write_bytes(path, out.as_bytes())
}

/// Parse a scan text file against a known object grid, revalidating bounds
/// and coverage.
pub fn read_scan_text(
    path: &Path,
    object_height: usize,
    object_width: usize,
) -> Result<ScanSet, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })?;
    let path_str = path.display().to_string();
    let malformed = |msg: String| IoError::Malformed {
        path: path_str.clone(),
        msg,
        offset: 0,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| malformed("empty scan file".into()))?;
    let mut parts = header.split_whitespace();
    let m: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| malformed("header must be 'm N'".into()))?;
    let n: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| malformed("header must be 'm N'".into()))?;
    let mut offsets = Vec::with_capacity(n);
    for (lineno, line) in lines {
        let mut parts = line.split_whitespace();
        let r: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| malformed(format!("line {}: expected 'row col'", lineno + 1)))?;
        let c: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| malformed(format!("line {}: expected 'row col'", lineno + 1)))?;
        offsets.push((r, c));
    }
    if offsets.len() != n {
        return Err(malformed(format!(
            "header declares {n} offsets, file has {}",
            offsets.len()
        )));
    }
    ScanSet::new(object_height, object_width, m, offsets).map_err(|e| malformed(e.to_string()))
}

/// 8-bit binary PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), IoError> {
    debug_assert_eq!(data.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    write_bytes(path, &out)
}

/// Read an 8-bit binary PGM (P5), tolerating comments and flexible
/// whitespace in the header.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), IoError> {
    let bytes = read_bytes(path)?;
    let path_str = path.display().to_string();
    let malformed = |msg: &str, offset: usize| IoError::Malformed {
        path: path_str.clone(),
        msg: msg.to_string(),
        offset,
    };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(IoError::BadMagic {
            path: path_str,
            expected: "P5",
        });
    }
    let mut pos = 2;
    let mut tokens = Vec::new();
    while tokens.len() < 3 && pos < bytes.len() {
        match bytes[pos] {
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => pos += 1,
            _ => {
                let start = pos;
                while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                tokens.push(
                    std::str::from_utf8(&bytes[start..pos])
                        .ok()
                        .and_then(|t| t.parse::<usize>().ok())
                        .ok_or_else(|| malformed("bad header token", start))?,
                );
            }
        }
    }
    if tokens.len() < 3 {
        return Err(malformed("incomplete header", pos));
    }
    let (width, height, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval != 255 {
        return Err(malformed("only 8-bit PGM supported", pos));
    }
    pos += 1; // single whitespace after maxval
    if pos + width * height > bytes.len() {
        return Err(IoError::Truncated {
            path: path_str,
            offset: pos,
        });
    }
    Ok((width, height, bytes[pos..pos + width * height].to_vec()))
}

/// Lossy preview rasters: min-max scaled magnitude and principal phase.
pub fn write_field_previews(
    mag_path: &Path,
    phase_path: &Path,
    field: &ComplexField,
) -> Result<(), IoError> {
    let mags: Vec<f64> = field.data().iter().map(|v| v.norm()).collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &mags {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mag_bytes: Vec<u8> = mags
        .iter()
        .map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    let phase_bytes: Vec<u8> = field
        .data()
        .iter()
        .map(|v| {
            let p = v.arg(); // (-pi, pi]
            (((p + std::f64::consts::PI) / (2.0 * std::f64::consts::PI)) * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8
        })
        .collect();
    write_pgm(mag_path, field.width(), field.height(), &mag_bytes)?;
    write_pgm(phase_path, field.width(), field.height(), &phase_bytes)
}

/// Serialize the full solver state plus a hash of the run configuration.
pub fn write_checkpoint(
    path: &Path,
    config_hash: &[u8; 32],
    state: &SolverState,
) -> Result<(), IoError> {
    let n = state.u.len();
    let m = state.omega.height();
    let (h, w) = (state.z.height(), state.z.width());
    let mut out = Vec::new();
    out.extend_from_slice(b"CKP1");
    out.extend_from_slice(config_hash);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for u_j in &state.u {
        push_complexes(&mut out, u_j);
    }
    push_complexes(&mut out, state.omega.data());
    push_complexes(&mut out, state.v.gx.data());
    push_complexes(&mut out, state.v.gy.data());
    push_complexes(&mut out, state.z.data());
    for l_j in &state.lambda {
        push_complexes(&mut out, l_j);
    }
    push_complexes(&mut out, state.y.gx.data());
    push_complexes(&mut out, state.y.gy.data());
    out.extend_from_slice(&(state.iter as u64).to_le_bytes());
    out.extend_from_slice(&(state.epoch as u64).to_le_bytes());
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    write_bytes(path, &out)
}

/// Load a checkpoint, refusing one whose configuration hash differs.
pub fn read_checkpoint(path: &Path, config_hash: &[u8; 32]) -> Result<SolverState, IoError> {
    let bytes = read_bytes(path)?;
    let path_str = path.display().to_string();
    let mut r = Reader::new(&path_str, &bytes);
    r.magic("CKP1")?;
    let stored_hash = r.take(32)?;
    if stored_hash != config_hash {
        return Err(IoError::ConfigHashMismatch { path: path_str });
    }
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    if m == 0 || h == 0 || w == 0 {
        return Err(r.malformed("zero dimension"));
    }
    let mut u = Vec::with_capacity(n);
    for _ in 0..n {
        u.push(r.complex_vec(m * m)?);
    }
    let omega =
        ComplexField::new(m, m, r.complex_vec(m * m)?).map_err(|e| r.malformed(e.to_string()))?;
    let vgx =
        ComplexField::new(h, w, r.complex_vec(h * w)?).map_err(|e| r.malformed(e.to_string()))?;
    let vgy =
        ComplexField::new(h, w, r.complex_vec(h * w)?).map_err(|e| r.malformed(e.to_string()))?;
    let z =
        ComplexField::new(h, w, r.complex_vec(h * w)?).map_err(|e| r.malformed(e.to_string()))?;
    let mut lambda = Vec::with_capacity(n);
    for _ in 0..n {
        lambda.push(r.complex_vec(m * m)?);
    }
    let ygx =
        ComplexField::new(h, w, r.complex_vec(h * w)?).map_err(|e| r.malformed(e.to_string()))?;
    let ygy =
        ComplexField::new(h, w, r.complex_vec(h * w)?).map_err(|e| r.malformed(e.to_string()))?;
    let iter = r.u64()? as usize;
    let epoch = r.u64()? as usize;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    r.done()?;

    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(SolverState {
        u,
        omega,
        v: GradientPair { gx: vgx, gy: vgy },
        z,
        lambda,
        y: GradientPair { gx: ygx, gy: ygy },
        iter,
        epoch,
        rng,
    })
}
