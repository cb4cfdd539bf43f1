//! Conversions between voxel grids and channel-major network tensors,
//! forward perturbation and dataset normalization.

use serde::{Deserialize, Serialize};

use super::schedule::{ChannelSchedules, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::voxgrid::{Bounds, VoxelGrid, CHANNELS};

/// Reorders a grid's `R³×4` interleaved values into `4×R³` channel planes.
pub fn grid_to_planes(grid: &VoxelGrid) -> Vec<f64> {
    let n = grid.voxel_count();
    let mut out = vec![0.0; n * CHANNELS];
    for (v, f) in grid.data().chunks_exact(CHANNELS).enumerate() {
        for c in 0..CHANNELS {
            out[c * n + v] = f[c];
        }
    }
    out
}

/// Inverse of [`grid_to_planes`].
pub fn planes_to_grid(planes: &[f64], resolution: usize, bounds: Bounds) -> Result<VoxelGrid> {
    let n = resolution * resolution * resolution;
    if planes.len() != n * CHANNELS {
        return Err(Error::shape(format!("{} values for a {resolution}³×4 grid", planes.len())));
    }
    let mut data = vec![0.0; n * CHANNELS];
    for v in 0..n {
        for c in 0..CHANNELS {
            data[v * CHANNELS + c] = planes[c * n + v];
        }
    }
    VoxelGrid::from_data(resolution, bounds, data)
}

/// Stacks channel planes into an `N×4×R×R×R` tensor.
pub fn stack(fields: &[&[f64]], resolution: usize) -> Result<Tensor> {
    let n = resolution * resolution * resolution * CHANNELS;
    let mut data = Vec::with_capacity(fields.len() * n);
    for f in fields {
        if f.len() != n {
            return Err(Error::shape(format!("field of {} values, expected {n}", f.len())));
        }
        data.extend_from_slice(f);
    }
    Tensor::new(vec![fields.len(), CHANNELS, resolution, resolution, resolution], data)
}

fn check_batch(x: &[f64], steps: &[usize], eps: &[f64]) -> Result<usize> {
    if steps.is_empty() || x.len() % (steps.len() * CHANNELS) != 0 {
        return Err(Error::shape(format!("{} values do not split into {} four-channel fields", x.len(), steps.len())));
    }
    if eps.len() != x.len() {
        return Err(Error::shape(format!("noise has {} values, field has {}", eps.len(), x.len())));
    }
    Ok(x.len() / (steps.len() * CHANNELS))
}

fn perturb_with(x: &[f64], steps: &[usize], eps: &[f64], sched_for: impl Fn(usize) -> usize, scheds: &[&NoiseSchedule]) -> Result<Vec<f64>> {
    let s = check_batch(x, steps, eps)?;
    let mut out = vec![0.0; x.len()];
    for (n, &i) in steps.iter().enumerate() {
        for c in 0..CHANNELS {
            let (a, sg) = scheds[sched_for(c)].eval(i)?;
            let o = (n * CHANNELS + c) * s;
            for j in o..o + s {
                out[j] = a * x[j] + sg * eps[j];
            }
        }
    }
    Ok(out)
}

/// `V_i = α_i·V + σ_i·ε`, density channel under the density schedule and
/// color channels under the color schedule. `x` and `eps` are batches of
/// `4×R³` planes with one step index per field.
pub fn perturb(x: &[f64], steps: &[usize], eps: &[f64], scheds: &ChannelSchedules) -> Result<Vec<f64>> {
    perturb_with(x, steps, eps, |c| usize::from(c != 0), &[&scheds.density, &scheds.color])
}

/// As [`perturb`] with a single schedule for all channels.
pub fn perturb_shared(x: &[f64], steps: &[usize], eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    perturb_with(x, steps, eps, |_| 0, &[sched])
}

/// Per-group affine normalization: `(v − mean) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub density_mean: f64,
    pub density_scale: f64,
    pub color_mean: f64,
    pub color_scale: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        Self::identity()
    }
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            density_mean: 0.0,
            density_scale: 1.0,
            color_mean: 0.0,
            color_scale: 1.0,
        }
    }

    /// `(mean, scale)` for channel `c`.
    pub fn channel(&self, c: usize) -> (f64, f64) {
        if c == 0 {
            (self.density_mean, self.density_scale)
        } else {
            (self.color_mean, self.color_scale)
        }
    }

    /// Normalized planes of `grid`.
    pub fn grid_to_normalized(&self, grid: &VoxelGrid) -> Vec<f64> {
        let mut p = grid_to_planes(grid);
        self.normalize_field(&mut p);
        p
    }

    /// Normalizes one field of `4×R³` planes.
    pub fn normalize_field(&self, field: &mut [f64]) {
        let voxels = field.len() / CHANNELS;
        for (c, plane) in field.chunks_mut(voxels).enumerate() {
            let (m, sc) = self.channel(c);
            plane.iter_mut().for_each(|v| *v = (*v - m) / sc);
        }
    }

    pub fn denormalize_field(&self, field: &mut [f64]) {
        let voxels = field.len() / CHANNELS;
        for (c, plane) in field.chunks_mut(voxels).enumerate() {
            let (m, sc) = self.channel(c);
            plane.iter_mut().for_each(|v| *v = *v * sc + m);
        }
    }

    /// Denormalizes one field and packs it as a grid.
    pub fn normalized_to_grid(&self, field: &[f64], resolution: usize, bounds: Bounds) -> Result<VoxelGrid> {
        let mut p = field.to_vec();
        self.denormalize_field(&mut p);
        planes_to_grid(&p, resolution, bounds)
    }
}

/// Dataset statistics per channel group. A group with zero variance keeps
/// scale 1.
pub fn fit_norm_stats(grids: &[VoxelGrid]) -> Result<NormStats> {
    if grids.is_empty() {
        return Err(Error::invalid("normalization needs at least one grid"));
    }
    let r = grids[0].resolution();
    if grids.iter().any(|g| g.resolution() != r) {
        return Err(Error::shape("all grids must share one resolution"));
    }
    let moments = |chans: std::ops::Range<usize>| {
        let mut n = 0usize;
        let mut sum = 0.0;
        for g in grids {
            for f in g.data().chunks_exact(CHANNELS) {
                for c in chans.clone() {
                    sum += f[c];
                    n += 1;
                }
            }
        }
        let mean = sum / n as f64;
        let mut ss = 0.0;
        for g in grids {
            for f in g.data().chunks_exact(CHANNELS) {
                for c in chans.clone() {
                    ss += (f[c] - mean) * (f[c] - mean);
                }
            }
        }
        (mean, (ss / n as f64).sqrt())
    };
    let scale_or_one = |std: f64, group: &str| {
        if std > 1e-12 {
            std
        } else {
            log::warn!("{group} values have zero variance; using scale 1");
            1.0
        }
    };
    let (dm, ds) = moments(0..1);
    let (cm, cs) = moments(1..CHANNELS);
    Ok(NormStats {
        density_mean: dm,
        density_scale: scale_or_one(ds, "density"),
        color_mean: cm,
        color_scale: scale_or_one(cs, "color"),
    })
}

/// Normalized `4×R³` planes of every grid together with the statistics used.
pub fn normalize_dataset(grids: &[VoxelGrid]) -> Result<(Vec<Vec<f64>>, NormStats)> {
    let stats = fit_norm_stats(grids)?;
    Ok((grids.iter().map(|g| stats.grid_to_normalized(g)).collect(), stats))
}
