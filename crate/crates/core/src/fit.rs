//! Stage one: fitting a regularized ReLU-field to posed images.
//!
//! The objective is
//!
//! ```text
//! L = L_photo + lambda_d * L_d + lambda_c * L_c
//! L_d = mean_voxels |V[..,0] - d_min|
//! L_c = mean_entries huber_delta(V[..,1:4] - c_raw)
//! ```
//!
//! `L_d` pulls density toward empty space wherever the images do not need
//! it; `L_c` pulls raw color toward a white target. Both vanish on voxels
//! that already sit at the target.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::camera::{self, Intrinsics};
use crate::error::{Error, Result};
use crate::render::{self, batch_loss_and_grad, QuadratureConfig, RayBatch, View};
use crate::rng::{self, Purpose};
use crate::scenegen::white_raw;
use crate::voxgrid::{ActivationParams, Bounds, VoxelGrid, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub iterations: usize,
    pub rays_per_step: usize,
    pub lr: f64,
    pub lambda_density: f64,
    pub lambda_color: f64,
    pub huber_delta: f64,
    /// Raw-space color target; defaults to `logit(0.99)`.
    pub color_target: f64,
    /// Raw density of every voxel before the first step.
    pub init_density: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            rays_per_step: 4096,
            lr: 0.05,
            lambda_density: 1e-4,
            lambda_color: 1e-4,
            huber_delta: 1.0,
            color_target: white_raw(),
            init_density: -2.0,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.rays_per_step == 0 {
            return Err(Error::invalid("fit needs at least one iteration and one ray per step"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("fit learning rate must be positive"));
        }
        if !(self.lambda_density >= 0.0 && self.lambda_color >= 0.0) {
            return Err(Error::invalid("regularizer weights must be nonnegative"));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::invalid("huber delta must be positive"));
        }
        if !self.color_target.is_finite() || !self.init_density.is_finite() {
            return Err(Error::invalid("color target and initial density must be finite"));
        }
        Ok(())
    }

    pub fn unregularized(self) -> Self {
        Self {
            lambda_density: 0.0,
            lambda_color: 0.0,
            ..self
        }
    }
}

/// Mean L1 distance of raw density to `d_min`, with its subgradient
/// (nonzero only on channel 0).
pub fn density_sparsity_loss(grid: &VoxelGrid, d_min: f64) -> (f64, Vec<f64>) {
    let n = grid.voxel_count() as f64;
    let mut grad = vec![0.0; grid.data().len()];
    let mut loss = 0.0;
    for (v, g) in grid
        .data()
        .chunks_exact(CHANNELS)
        .zip(grad.chunks_exact_mut(CHANNELS))
    {
        let r = v[0] - d_min;
        loss += r.abs();
        g[0] = if r > 0.0 {
            1.0 / n
        } else if r < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    (loss / n, grad)
}

#[inline]
pub fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() < delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

#[inline]
fn huber_grad(r: f64, delta: f64) -> f64 {
    if r.abs() < delta {
        r
    } else {
        delta * r.signum()
    }
}

/// Mean elementwise Huber loss of raw color against `c_raw`, with its
/// gradient (nonzero only on channels 1..4).
pub fn color_constancy_loss(grid: &VoxelGrid, c_raw: f64, delta: f64) -> (f64, Vec<f64>) {
    let n = (grid.voxel_count() * 3) as f64;
    let mut grad = vec![0.0; grid.data().len()];
    let mut loss = 0.0;
    for (v, g) in grid
        .data()
        .chunks_exact(CHANNELS)
        .zip(grad.chunks_exact_mut(CHANNELS))
    {
        for c in 1..CHANNELS {
            let r = v[c] - c_raw;
            loss += huber(r, delta);
            g[c] = huber_grad(r, delta) / n;
        }
    }
    (loss / n, grad)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments for one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} state entries",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    state.step += 1;
    adam_update(params, grads, &mut state.m, &mut state.v, state.step, lr);
    Ok(())
}

/// One Adam update at (1-based) step `t` on caller-owned moment buffers.
/// Slices must have equal lengths.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) {
    debug_assert!(params.len() == grads.len() && m.len() == params.len() && v.len() == params.len());
    let t = t.min(i32::MAX as u64) as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let mi = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        let vi = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        m[i] = mi;
        v[i] = vi;
        params[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
    }
}

/// Loss terms logged per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub photometric: f64,
    pub sparsity: f64,
    pub constancy: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub grid: VoxelGrid,
    pub trace: Vec<LossRecord>,
    /// Mean PSNR over the held-out views, if any were given.
    pub heldout_psnr: Option<f64>,
}

/// Starting point of every fit: a faint uniform fog at `init_density` with
/// white raw color. At `d_min` itself the exponential activation leaves
/// photometric gradients of order `1e-9`, below the sparsity pull.
pub fn initial_grid(resolution: usize, act: &ActivationParams, cfg: &FitConfig) -> Result<VoxelGrid> {
    act.validate()?;
    let c = cfg.color_target;
    VoxelGrid::filled(resolution, Bounds::unit_cube(), [cfg.init_density, c, c, c])
}

/// Fits `init` to the training views with Adam. Every iteration draws
/// `rays_per_step` pixels uniformly (with replacement) from all training
/// views and uses stratified samples along each ray.
pub fn fit_relufield(
    train: &[View],
    heldout: &[View],
    intr: &Intrinsics,
    init: VoxelGrid,
    cfg: &FitConfig,
    quad: &QuadratureConfig,
    act: &ActivationParams,
) -> Result<FitResult> {
    cfg.validate()?;
    quad.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("fitting needs at least one training view"));
    }
    let all = RayBatch::from_views(train, intr, &init)?;
    let mut grid = init;
    let mut adam = AdamState::new(grid.data().len());
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut batch = RayBatch {
        rays: Vec::with_capacity(cfg.rays_per_step),
        targets: Vec::with_capacity(cfg.rays_per_step),
    };
    let step_quad = QuadratureConfig {
        stratified: true,
        ..*quad
    };
    for it in 0..cfg.iterations {
        let mut pick = rng::stream(cfg.seed, Purpose::FitBatch, it as u64);
        batch.rays.clear();
        batch.targets.clear();
        for _ in 0..cfg.rays_per_step {
            let k = pick.random_range(0..all.len());
            batch.rays.push(all.rays[k]);
            batch.targets.push(all.targets[k]);
        }
        let q = QuadratureConfig {
            seed: cfg.seed ^ (it as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..step_quad
        };
        let (photo, grad) = batch_loss_and_grad(&grid, &batch, &q, act, true)?;
        let mut grad = grad.expect("gradient requested");
        let (l_d, g_d) = density_sparsity_loss(&grid, act.d_min);
        let (l_c, g_c) = color_constancy_loss(&grid, cfg.color_target, cfg.huber_delta);
        for (term, value) in [("photometric", photo), ("density sparsity", l_d), ("color constancy", l_c)] {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    iteration: it,
                    term: term.into(),
                });
            }
        }
        let mut total = photo;
        if cfg.lambda_density != 0.0 {
            total += cfg.lambda_density * l_d;
            for (g, d) in grad.iter_mut().zip(&g_d) {
                *g += cfg.lambda_density * d;
            }
        }
        if cfg.lambda_color != 0.0 {
            total += cfg.lambda_color * l_c;
            for (g, c) in grad.iter_mut().zip(&g_c) {
                *g += cfg.lambda_color * c;
            }
        }
        trace.push(LossRecord {
            iteration: it,
            photometric: photo,
            sparsity: l_d,
            constancy: l_c,
            total,
        });
        adam_step(grid.data_mut(), &grad, &mut adam, cfg.lr)?;
        if let Some(i) = grid.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration: it,
                term: format!("grid value {i} after update"),
            });
        }
    }
    let heldout_psnr = mean_psnr(&grid, heldout, intr, quad, act)?;
    Ok(FitResult {
        grid,
        trace,
        heldout_psnr,
    })
}

/// Mean PSNR of renders of `grid` against the given views (8-bit quantized
/// like stored images).
pub fn mean_psnr(
    grid: &VoxelGrid,
    views: &[View],
    intr: &Intrinsics,
    quad: &QuadratureConfig,
    act: &ActivationParams,
) -> Result<Option<f64>> {
    if views.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for v in views {
        let img = render::render_image(grid, &v.pose, intr, quad, act)?.quantized();
        sum += render::psnr(&img, &v.image)?;
    }
    Ok(Some(sum / views.len() as f64))
}

/// Writes a loss trace as CSV: `iteration,photometric,L_d,L_c,total`.
pub fn write_trace_csv(trace: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iteration,photometric,L_d,L_c,total\n");
    for r in trace {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            r.iteration, r.photometric, r.sparsity, r.constancy, r.total
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smoothed(values: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Splits views into (train, held-out): every `every`-th view is held out.
pub fn split_views(views: Vec<View>, every: usize) -> (Vec<View>, Vec<View>) {
    if every == 0 {
        return (views, Vec::new());
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, v) in views.into_iter().enumerate() {
        if i % every == every - 1 {
            held.push(v);
        } else {
            train.push(v);
        }
    }
    if train.is_empty() {
        std::mem::swap(&mut train, &mut held);
    }
    (train, held)
}

/// Voxel mask of "invisible" cells: those whose maximum compositing weight
/// from the given poses stays below `threshold`.
pub fn invisible_mask(
    grid: &VoxelGrid,
    poses: &[camera::CameraPose],
    intr: &Intrinsics,
    quad: &QuadratureConfig,
    act: &ActivationParams,
    threshold: f64,
) -> Result<Vec<bool>> {
    Ok(render::visibility_weights(grid, poses, intr, quad, act)?
        .into_iter()
        .map(|w| w < threshold)
        .collect())
}

/// Mean `|raw density - d_min|` and mean `|raw color - c_raw|` over the
/// voxels selected by `mask`.
pub fn masked_deviation(grid: &VoxelGrid, mask: &[bool], d_min: f64, c_raw: f64) -> (f64, f64) {
    let mut dd = 0.0;
    let mut dc = 0.0;
    let mut n = 0usize;
    for (v, &m) in grid.data().chunks_exact(CHANNELS).zip(mask) {
        if m {
            n += 1;
            dd += (v[0] - d_min).abs();
            dc += (1..CHANNELS).map(|c| (v[c] - c_raw).abs()).sum::<f64>() / 3.0;
        }
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    (dd / n as f64, dc / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxgrid::Bounds;
    use proptest::prelude::*;

    #[test]
    fn sparsity_loss_contract() {
        let act = ActivationParams::default();
        let mut g = VoxelGrid::empty(4, &act, 0.0).unwrap();
        let (l, gr) = density_sparsity_loss(&g, act.d_min);
        assert_eq!(l, 0.0);
        assert!(gr.iter().all(|&v| v == 0.0));
        g.data_mut()[0] = act.d_min + 2.0;
        let (l, gr) = density_sparsity_loss(&g, act.d_min);
        assert!((l - 0.03125).abs() < 1e-15);
        assert_eq!(gr[0], 1.0 / 64.0);
        g.data_mut()[4] = act.d_min - 1.0;
        let (_, gr) = density_sparsity_loss(&g, act.d_min);
        for (i, v) in gr.iter().enumerate() {
            if i % 4 == 0 {
                assert!([-1.0 / 64.0, 0.0, 1.0 / 64.0].contains(v));
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn constancy_loss_branches() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(-2.0, 1.0), 1.5);
        let act = ActivationParams::default();
        let g = VoxelGrid::empty(3, &act, 1.25).unwrap();
        let (l, gr) = color_constancy_loss(&g, 1.25, 1.0);
        assert_eq!(l, 0.0);
        assert!(gr.iter().all(|&v| v == 0.0));
        // one color entry off by 2 delta: mean over R^3 * 3 entries
        let mut g = g;
        g.data_mut()[1] = 1.25 + 2.0;
        let (l, gr) = color_constancy_loss(&g, 1.25, 1.0);
        assert!((l - 1.5 / 81.0).abs() < 1e-15);
        assert!((gr[1] - 1.0 / 81.0).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.3, -7.0, 1e-3];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &g, &mut s, 0.05).unwrap();
        for ((after, before), gi) in p.iter().zip([1.0, -2.0, 0.5]).zip(&g) {
            let step = after - before;
            assert!((step + 0.05 * gi.signum()).abs() < 0.01 * 0.05);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0, 2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        assert!(adam_step(&mut p, &[0.0], &mut s, 0.1).is_err());
    }

    #[test]
    fn adam_second_identical_step_not_larger() {
        // Closed form of the recurrence for a constant gradient g:
        // m_t = (1-b1^t) g, v_t = (1-b2^t) g^2, so both bias-corrected
        // moments equal g and |step_t| = lr*|g|/(|g|+eps) for every t.
        for g in [1e-6, 0.01, 3.0] {
            let mut p = vec![0.0];
            let mut s = AdamState::new(1);
            adam_step(&mut p, &[g], &mut s, 0.1).unwrap();
            let first = p[0].abs();
            let before = p[0];
            adam_step(&mut p, &[g], &mut s, 0.1).unwrap();
            let second = (p[0] - before).abs();
            let oracle = 0.1 * g / (g + ADAM_EPS);
            assert!((first - oracle).abs() < 1e-12);
            assert!(second <= first * 1.01);
        }
    }

    #[test]
    fn smoothing_and_split() {
        assert_eq!(smoothed(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
        let views: Vec<View> = (0..8)
            .map(|i| View {
                pose: camera::CameraPose::look_at([4.0, i as f64, 0.0], [0.0; 3]).unwrap(),
                image: crate::image::Image::filled(1, 1, [0.0; 3]),
            })
            .collect();
        let (t, h) = split_views(views, 4);
        assert_eq!((t.len(), h.len()), (6, 2));
    }

    #[test]
    fn masked_deviation_counts_selected() {
        let g = VoxelGrid::filled(2, Bounds::unit_cube(), [-8.0, 1.0, 2.0, 3.0]).unwrap();
        let mut mask = vec![false; 8];
        mask[3] = true;
        let (d, c) = masked_deviation(&g, &mask, -10.0, 2.0);
        assert_eq!(d, 2.0);
        assert!((c - 2.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn regularizers_are_nonnegative(vals in proptest::collection::vec(-20.0f64..20.0, 2 * 2 * 2 * 4)) {
            let g = VoxelGrid::from_data(2, Bounds::unit_cube(), vals).unwrap();
            prop_assert!(density_sparsity_loss(&g, -10.0).0 >= 0.0);
            prop_assert!(color_constancy_loss(&g, 4.6, 1.0).0 >= 0.0);
        }
    }
}
