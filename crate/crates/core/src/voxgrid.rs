//! The voxel radiance field: an `R×R×R×4` grid of raw features decoded by
//! fixed activations after trilinear interpolation.
//!
//! Channel 0 holds raw density, decoded as `exp(alpha * v + beta)`.
//! Channels 1..4 hold raw color, decoded by a logistic sigmoid. Voxel
//! features sit at the cell centers of a uniform lattice over the grid
//! bounds; queries outside the lattice clamp to the boundary centers.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, GridFileError, Result};

pub const CHANNELS: usize = 4;

const MAGIC: &[u8; 4] = b"VXGR";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 6 * 8;

/// Axis-aligned world box covered by a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(min[a].is_finite() && max[a].is_finite() && min[a] < max[a]) {
                return Err(Error::invalid(format!(
                    "bounds axis {a}: need finite min < max, got [{}, {}]",
                    min[a], max[a]
                )));
            }
        }
        Ok(Self { min, max })
    }

    /// The `[-1, 1]^3` cube.
    pub fn unit_cube() -> Self {
        Self {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Self::unit_cube()
    }
}

/// Parameters of the density activation `exp(alpha * v + beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivationParams {
    pub alpha: f64,
    pub beta: f64,
    /// Pre-activation minimal density. Its decoded density must be ~0.
    pub d_min: f64,
}

impl ActivationParams {
    pub fn new(alpha: f64, beta: f64, d_min: f64) -> Result<Self> {
        let act = Self { alpha, beta, d_min };
        act.validate()?;
        Ok(act)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.beta.is_finite() && self.d_min.is_finite()) {
            return Err(Error::invalid("activation parameters must be finite"));
        }
        if self.alpha <= 0.0 {
            return Err(Error::invalid("activation alpha must be positive"));
        }
        let floor = (self.alpha * self.d_min + self.beta).exp();
        if floor >= 1e-3 {
            return Err(Error::invalid(format!(
                "exp(alpha*d_min + beta) = {floor:.3e} must be below 1e-3"
            )));
        }
        Ok(())
    }

    /// Density at the minimal raw value.
    pub fn min_density(&self) -> f64 {
        density_from_raw(self.d_min, self)
    }

    /// Raw value whose decoded density is `sigma`.
    pub fn raw_for_density(&self, sigma: f64) -> f64 {
        (sigma.ln() - self.beta) / self.alpha
    }
}

impl Default for ActivationParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            d_min: -10.0,
        }
    }
}

#[inline]
pub fn density_from_raw(v0: f64, act: &ActivationParams) -> f64 {
    (act.alpha * v0 + act.beta).exp()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn color_from_raw(v: [f64; 3]) -> [f64; 3] {
    [sigmoid(v[0]), sigmoid(v[1]), sigmoid(v[2])]
}

/// The eight lattice corners (flat offsets of channel 0) and trilinear
/// weights surrounding a query point.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub offsets: [usize; 8],
    pub weights: [f64; 8],
}

impl Stencil {
    /// Index of the voxel with the largest weight.
    pub fn nearest(&self) -> usize {
        let mut best = 0;
        for k in 1..8 {
            if self.weights[k] > self.weights[best] {
                best = k;
            }
        }
        self.offsets[best] / CHANNELS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    resolution: usize,
    bounds: Bounds,
    data: Vec<f64>,
}

impl VoxelGrid {
    /// A grid with every voxel set to `fill`.
    pub fn filled(resolution: usize, bounds: Bounds, fill: [f64; CHANNELS]) -> Result<Self> {
        check_resolution(resolution)?;
        let data = fill
            .iter()
            .copied()
            .cycle()
            .take(resolution.pow(3) * CHANNELS)
            .collect();
        Self::from_data(resolution, bounds, data)
    }

    /// An empty field: minimal density and the given raw color everywhere.
    pub fn empty(resolution: usize, act: &ActivationParams, raw_color: f64) -> Result<Self> {
        Self::filled(
            resolution,
            Bounds::unit_cube(),
            [act.d_min, raw_color, raw_color, raw_color],
        )
    }

    pub fn from_data(resolution: usize, bounds: Bounds, data: Vec<f64>) -> Result<Self> {
        check_resolution(resolution)?;
        Bounds::new(bounds.min, bounds.max)?;
        let expected = resolution.pow(3) * CHANNELS;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "grid data has {} values, expected {expected} for R={resolution}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("grid value {i} is not finite")));
        }
        Ok(Self {
            resolution,
            bounds,
            data,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Mutable access for optimizers. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.pow(3)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        ((x * self.resolution + y) * self.resolution + z) * CHANNELS + c
    }

    pub fn feature(&self, x: usize, y: usize, z: usize) -> [f64; CHANNELS] {
        let i = self.index(x, y, z, 0);
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    pub fn set_feature(&mut self, x: usize, y: usize, z: usize, f: [f64; CHANNELS]) {
        let i = self.index(x, y, z, 0);
        self.data[i..i + CHANNELS].copy_from_slice(&f);
    }

    pub fn cell_size(&self, axis: usize) -> f64 {
        self.bounds.extent(axis) / self.resolution as f64
    }

    /// World position of voxel center `(x, y, z)`.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let idx = [x, y, z];
        std::array::from_fn(|a| self.bounds.min[a] + (idx[a] as f64 + 0.5) * self.cell_size(a))
    }

    /// Voxel cell containing `p`, if inside the bounds.
    pub fn cell_of(&self, p: [f64; 3]) -> Option<usize> {
        let r = self.resolution;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let u = (p[a] - self.bounds.min[a]) / self.cell_size(a);
            if !(0.0..=r as f64).contains(&u) {
                return None;
            }
            idx[a] = (u.floor() as usize).min(r - 1);
        }
        Some((idx[0] * r + idx[1]) * r + idx[2])
    }

    /// Interpolation stencil for a finite point. Coordinates outside the
    /// lattice of voxel centers clamp to the boundary centers.
    #[inline]
    pub fn stencil(&self, p: [f64; 3]) -> Stencil {
        let r = self.resolution;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let u = (p[a] - self.bounds.min[a]) / self.cell_size(a) - 0.5;
            let u = u.clamp(0.0, (r - 1) as f64);
            let i0 = (u.floor() as usize).min(r - 2);
            base[a] = i0;
            frac[a] = u - i0 as f64;
        }
        let mut offsets = [0usize; 8];
        let mut weights = [0f64; 8];
        for k in 0..8 {
            let (dx, dy, dz) = (k >> 2, (k >> 1) & 1, k & 1);
            offsets[k] = self.index(base[0] + dx, base[1] + dy, base[2] + dz, 0);
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            weights[k] = wx * wy * wz;
        }
        Stencil { offsets, weights }
    }

    #[inline]
    pub fn gather(&self, s: &Stencil) -> [f64; CHANNELS] {
        let mut out = [0.0; CHANNELS];
        for k in 0..8 {
            let o = s.offsets[k];
            let w = s.weights[k];
            for (c, v) in out.iter_mut().enumerate() {
                *v += w * self.data[o + c];
            }
        }
        out
    }

    /// Trilinear interpolation of the raw feature at world point `p`.
    pub fn trilinear_interp(&self, p: [f64; 3]) -> Result<[f64; CHANNELS]> {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("query point {p:?} is not finite")));
        }
        Ok(self.gather(&self.stencil(p)))
    }

    /// Copy with every value rounded through `f32`, i.e. exactly what a
    /// write/read cycle through the grid file format produces.
    pub fn quantized(&self) -> Self {
        Self {
            resolution: self.resolution,
            bounds: self.bounds,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4 + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        out.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
        for v in self.bounds.min.iter().chain(self.bounds.max.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let payload_start = out.len();
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let crc = crc32fast::hash(&out[payload_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GridFileError> {
        if bytes.len() < 4 {
            return Err(GridFileError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(GridFileError::BadMagic { found });
        }
        if bytes.len() < HEADER_LEN {
            return Err(GridFileError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(GridFileError::UnsupportedVersion(version));
        }
        let resolution = u32_at(8) as usize;
        let channels = u32_at(12) as usize;
        if channels != CHANNELS {
            return Err(GridFileError::DimensionMismatch(format!(
                "{channels} channels, expected {CHANNELS}"
            )));
        }
        if resolution < 2 {
            return Err(GridFileError::DimensionMismatch(format!(
                "resolution {resolution} is below 2"
            )));
        }
        let min = [f64_at(16), f64_at(24), f64_at(32)];
        let max = [f64_at(40), f64_at(48), f64_at(56)];
        let bounds = Bounds::new(min, max)
            .map_err(|e| GridFileError::DimensionMismatch(format!("bad bounds: {e}")))?;
        let n = resolution
            .checked_pow(3)
            .and_then(|v| v.checked_mul(CHANNELS))
            .ok_or_else(|| GridFileError::DimensionMismatch(format!("resolution {resolution}")))?;
        let expected = HEADER_LEN + n * 4 + 4;
        if bytes.len() < expected {
            return Err(GridFileError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(GridFileError::DimensionMismatch(format!(
                "{} trailing bytes after payload for R={resolution}",
                bytes.len() - expected
            )));
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + n * 4];
        let stored = u32_at(HEADER_LEN + n * 4);
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(GridFileError::Checksum { stored, computed });
        }
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GridFileError::DimensionMismatch(
                "payload contains non-finite values".into(),
            ));
        }
        Ok(Self {
            resolution,
            bounds,
            data,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, GridFileError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => GridFileError::Missing(path.to_path_buf()),
            _ => GridFileError::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }

    /// Reads a grid and checks it has the expected resolution.
    pub fn read_expecting(path: impl AsRef<Path>, resolution: usize) -> Result<Self, GridFileError> {
        let g = Self::read(path)?;
        if g.resolution != resolution {
            return Err(GridFileError::DimensionMismatch(format!(
                "resolution {}, expected {resolution}",
                g.resolution
            )));
        }
        Ok(g)
    }
}

fn check_resolution(resolution: usize) -> Result<()> {
    if resolution < 2 {
        return Err(Error::invalid(format!(
            "grid resolution must be at least 2, got {resolution}"
        )));
    }
    Ok(())
}
