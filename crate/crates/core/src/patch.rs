//! 3D hyperspectral patches, their binary container format, and PSNR.
//!
//! A patch is a `rows × cols × bands` cube stored row-major in
//! `(row, col, band)` order. The container format is little-endian:
//!
//! ```text
//! "DVGPATCH"            8-byte magic
//! u32 version           always 1
//! u32 patch count
//! u32 rows, cols, bands
//! per patch:
//!   i32 label           -1 when unlabeled
//!   rows*cols*bands binary32 values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PATCH_MAGIC: &[u8; 8] = b"DVGPATCH";
pub const PATCH_VERSION: u32 = 1;
/// Bytes before the first patch record.
pub const HEADER_BYTES: usize = 8 + 4 * 5;
/// Default PSNR validity threshold in decibels.
pub const DEFAULT_PSNR_THRESHOLD: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
}

impl Dims {
    pub fn new(rows: usize, cols: usize, bands: usize) -> Self {
        Self { rows, cols, bands }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols * self.bands
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of spatial positions.
    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, band: usize) -> usize {
        (row * self.cols + col) * self.bands + band
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.rows, self.cols, self.bands)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch3D {
    dims: Dims,
    values: Vec<f32>,
    label: Option<u32>,
}

impl Patch3D {
    pub fn new(dims: Dims, values: Vec<f32>, label: Option<u32>) -> Result<Self> {
        if dims.rows == 0 || dims.cols == 0 || dims.bands == 0 {
            return Err(Error::Shape(format!("patch dims must be >= 1, got {dims}")));
        }
        if values.len() != dims.len() {
            return Err(Error::Shape(format!(
                "patch {dims} needs {} values, got {}",
                dims.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite value at cell {i}")));
        }
        Ok(Self {
            dims,
            values,
            label,
        })
    }

    pub fn filled(dims: Dims, value: f32) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()], None)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Mutable access for the in-crate distortion kernels. Callers must keep
    /// every value finite.
    pub(crate) fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn label(&self) -> Option<u32> {
        self.label
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.values[self.dims.index(row, col, band)]
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.values
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f32 {
        self.values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Bit-level equality, used where the contract is "bit-identical".
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.label == other.label
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch3D>,
    pub provenance: String,
}

impl PatchSet {
    pub fn new(patches: Vec<Patch3D>, provenance: impl Into<String>) -> Result<Self> {
        if let Some(first) = patches.first() {
            let dims = first.dims();
            if let Some((i, p)) = patches.iter().enumerate().find(|(_, p)| p.dims() != dims) {
                return Err(Error::Shape(format!(
                    "patch {i} has dims {} but set dims are {dims}",
                    p.dims()
                )));
            }
        }
        Ok(Self {
            patches,
            provenance: provenance.into(),
        })
    }

    pub fn dims(&self) -> Option<Dims> {
        self.patches.first().map(Patch3D::dims)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dims = self
            .dims()
            .ok_or_else(|| Error::Argument("cannot write an empty patch set".into()))?;
        Ok(self.encode(dims))
    }

    /// Like [`PatchSet::to_bytes`], but an empty set is written with `dims` in
    /// its header instead of failing.
    pub fn to_bytes_with_dims(&self, dims: Dims) -> Result<Vec<u8>> {
        match self.dims() {
            Some(d) if d != dims => {
                Err(Error::Shape(format!("set is {d}, header asks for {dims}")))
            }
            _ => Ok(self.encode(dims)),
        }
    }

    fn encode(&self, dims: Dims) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.len() * (4 + dims.len() * 4));
        out.extend_from_slice(PATCH_MAGIC);
        for v in [
            PATCH_VERSION,
            self.len() as u32,
            dims.rows as u32,
            dims.cols as u32,
            dims.bands as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.patches {
            let label = p.label().map_or(-1i32, |l| l as i32);
            out.extend_from_slice(&label.to_le_bytes());
            for v in p.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], provenance: impl Into<String>) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != PATCH_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected \"DVGPATCH\"".into(),
            });
        }
        let version = cur.u32()?;
        if version != PATCH_VERSION {
            return Err(Error::Format {
                offset: 8,
                message: format!("unsupported version {version}"),
            });
        }
        let count = cur.u32()? as usize;
        let (rows, cols, bands) = (
            cur.u32()? as usize,
            cur.u32()? as usize,
            cur.u32()? as usize,
        );
        let dims = Dims::new(rows, cols, bands);
        if dims.is_empty() {
            return Err(Error::Format {
                offset: 16,
                message: format!("zero dimension in {dims}"),
            });
        }
        let expected = HEADER_BYTES as u64 + count as u64 * (4 + dims.len() as u64 * 4);
        if bytes.len() as u64 != expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len() as u64,
            });
        }
        let mut patches = Vec::with_capacity(count);
        for _ in 0..count {
            let offset = cur.pos as u64;
            let label = cur.i32()?;
            let label = match label {
                -1 => None,
                l if l >= 0 => Some(l as u32),
                l => {
                    return Err(Error::Format {
                        offset,
                        message: format!("invalid label {l}"),
                    })
                }
            };
            let raw = cur.take(dims.len() * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let patch = Patch3D::new(dims, values, label).map_err(|e| Error::Format {
                offset,
                message: e.to_string(),
            })?;
            patches.push(patch);
        }
        PatchSet::new(patches, provenance)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("unexpected end of data, wanted {n} bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn i32(&mut self) -> Result<i32> {
        let b = self.take(4)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_patchset(path: impl AsRef<Path>) -> Result<PatchSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    PatchSet::from_bytes(&bytes, path.display().to_string())
}

pub fn write_patchset(set: &PatchSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = set.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Peak signal-to-noise ratio in dB.
///
/// MSE is taken over the whole cube; the peak is the largest absolute value of
/// `original`. Returns `f64::INFINITY` when the patches are identical.
pub fn psnr(original: &Patch3D, distorted: &Patch3D) -> Result<f64> {
    if original.dims() != distorted.dims() {
        return Err(Error::Shape(format!(
            "psnr needs equal dims, got {} and {}",
            original.dims(),
            distorted.dims()
        )));
    }
    let n = original.values().len() as f64;
    let sse: f64 = original
        .values()
        .iter()
        .zip(distorted.values())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let mse = sse / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = original.max_abs() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Inclusive validity gate: `psnr >= threshold`. Identical patches are valid.
pub fn is_valid(original: &Patch3D, distorted: &Patch3D, threshold: f64) -> Result<bool> {
    if !(threshold > 0.0) {
        return Err(Error::Argument(format!(
            "psnr threshold must be > 0, got {threshold}"
        )));
    }
    Ok(psnr(original, distorted)? >= threshold)
}

/// Renders a PSNR value for reports; the infinite sentinel becomes `"inf"`.
pub fn format_psnr(db: f64) -> String {
    if db.is_infinite() && db > 0.0 {
        "inf".to_string()
    } else {
        format!("{db}")
    }
}
