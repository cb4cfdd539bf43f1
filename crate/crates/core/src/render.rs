//! Differentiable volume rendering of a [`VoxelGrid`].
//!
//! A ray's `[t_near, t_far]` interval is split into `n` equal segments of
//! length `delta`, with one sample per segment (at the segment midpoint, or
//! uniformly jittered inside it in stratified mode). For sample `i`:
//!
//! ```text
//! sigma_i = exp(alpha * v0(x_i) + beta)        c_i = sigmoid(v[1..4](x_i))
//! T_0 = 1,   T_{i+1} = T_i * exp(-sigma_i * delta)
//! w_i = T_i * (1 - exp(-sigma_i * delta))
//! rgb = sum_i w_i c_i + T_n * background
//! ```
//!
//! The photometric loss is the mean over rays of `|rgb - target|^2`. Its
//! gradient with respect to every raw grid value is computed in closed form
//! by a reverse sweep over the samples of each ray:
//!
//! ```text
//! d rgb / d c_i     = w_i
//! d rgb / d sigma_i = delta * (T_{i+1} c_i - S_{i+1}),
//!     S_{i+1} = sum_{j>i} w_j c_j + T_n * background
//! ```
//!
//! then scattered through the activations and the trilinear stencil.

use rand::Rng as _;
use rayon::prelude::*;

use crate::camera::{self, CameraPose, Intrinsics, Ray};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Purpose};
use crate::voxgrid::{density_from_raw, sigmoid, ActivationParams, Stencil, VoxelGrid, CHANNELS};

/// Rays per unit of parallel work. Gradients are reduced in chunk order, so
/// results do not depend on the thread count.
const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureConfig {
    pub n_samples: usize,
    pub background: [f64; 3],
    pub stratified: bool,
    /// Keys the stratified jitter.
    pub seed: u64,
}

impl QuadratureConfig {
    /// Midpoint sampling with `2R` samples per ray on a white background.
    pub fn for_resolution(resolution: usize) -> Self {
        Self {
            n_samples: 2 * resolution,
            background: [1.0; 3],
            stratified: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::invalid("quadrature needs at least 2 samples per ray"));
        }
        if !self.background.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("background color must be finite"));
        }
        Ok(())
    }
}

/// Compositing result of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySample {
    pub weights: Vec<f64>,
    pub t_end: f64,
    pub rgb: [f64; 3],
}

/// A posed training or evaluation image.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub pose: CameraPose,
    pub image: Image,
}

/// Rays paired with target colors.
#[derive(Debug, Clone, Default)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub targets: Vec<[f64; 3]>,
}

impl RayBatch {
    pub fn from_views(views: &[View], intr: &Intrinsics, grid: &VoxelGrid) -> Result<Self> {
        let mut batch = RayBatch::default();
        for (k, view) in views.iter().enumerate() {
            if view.image.width != intr.width || view.image.height != intr.height {
                return Err(Error::invalid(format!(
                    "view {k}: image is {}x{}, intrinsics expect {}x{}",
                    view.image.width, view.image.height, intr.width, intr.height
                )));
            }
            batch.rays.extend(camera::image_rays(&view.pose, intr, grid.bounds()));
            batch.targets.extend(view.image.pixels());
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Per-sample state of one marched ray, kept for the reverse sweep.
#[derive(Default)]
struct Trace {
    t: Vec<f64>,
    stencils: Vec<Stencil>,
    sigma: Vec<f64>,
    color: Vec<[f64; 3]>,
    /// Transmittance before each sample; `trans[n]` is `T_end`.
    trans: Vec<f64>,
    weights: Vec<f64>,
    delta: f64,
    rgb: [f64; 3],
}

impl Trace {
    fn clear(&mut self) {
        self.t.clear();
        self.stencils.clear();
        self.sigma.clear();
        self.color.clear();
        self.trans.clear();
        self.weights.clear();
    }

    fn t_end(&self) -> f64 {
        *self.trans.last().unwrap_or(&1.0)
    }
}

fn march(
    grid: &VoxelGrid,
    ray: &Ray,
    quad: &QuadratureConfig,
    act: &ActivationParams,
    key: u64,
    tr: &mut Trace,
) {
    tr.clear();
    tr.trans.push(1.0);
    if ray.is_degenerate() {
        tr.delta = 0.0;
        tr.rgb = quad.background;
        return;
    }
    let n = quad.n_samples;
    let delta = (ray.t_far - ray.t_near) / n as f64;
    tr.delta = delta;
    let mut jitter = quad
        .stratified
        .then(|| rng::stream(quad.seed, Purpose::Jitter, key));
    let mut rgb = [0.0; 3];
    let mut trans = 1.0;
    for i in 0..n {
        let u = match jitter.as_mut() {
            Some(r) => r.random::<f64>(),
            None => 0.5,
        };
        let t = ray.t_near + (i as f64 + u) * delta;
        let s = grid.stencil(ray.at(t));
        let v = grid.gather(&s);
        let sigma = density_from_raw(v[0], act);
        let c = [sigmoid(v[1]), sigmoid(v[2]), sigmoid(v[3])];
        let survive = (-sigma * delta).exp();
        let w = trans * (1.0 - survive);
        for k in 0..3 {
            rgb[k] += w * c[k];
        }
        trans *= survive;
        tr.t.push(t);
        tr.stencils.push(s);
        tr.sigma.push(sigma);
        tr.color.push(c);
        tr.weights.push(w);
        tr.trans.push(trans);
    }
    for k in 0..3 {
        rgb[k] += trans * quad.background[k];
    }
    tr.rgb = rgb;
}

/// Adds `d loss / d raw` for one ray, given `d loss / d rgb`, into `grad`.
fn backprop_ray(
    tr: &Trace,
    d_rgb: [f64; 3],
    act: &ActivationParams,
    background: [f64; 3],
    grad: &mut [f64],
) {
    let n = tr.sigma.len();
    if n == 0 {
        return;
    }
    let t_end = tr.t_end();
    let mut suffix = [
        t_end * background[0],
        t_end * background[1],
        t_end * background[2],
    ];
    for i in (0..n).rev() {
        let c = tr.color[i];
        let w = tr.weights[i];
        let t_next = tr.trans[i + 1];
        let mut d_s = 0.0;
        for k in 0..3 {
            d_s += d_rgb[k] * (t_next * c[k] - suffix[k]);
            suffix[k] += w * c[k];
        }
        let d_v0 = d_s * tr.delta * act.alpha * tr.sigma[i];
        let d_v = [
            d_v0,
            d_rgb[0] * w * c[0] * (1.0 - c[0]),
            d_rgb[1] * w * c[1] * (1.0 - c[1]),
            d_rgb[2] * w * c[2] * (1.0 - c[2]),
        ];
        let s = &tr.stencils[i];
        for k in 0..8 {
            let o = s.offsets[k];
            let wk = s.weights[k];
            for ch in 0..CHANNELS {
                grad[o + ch] += wk * d_v[ch];
            }
        }
    }
}

/// Composites one ray (jitter stream 0 in stratified mode).
pub fn render_ray(
    grid: &VoxelGrid,
    ray: &Ray,
    quad: &QuadratureConfig,
    act: &ActivationParams,
) -> RaySample {
    render_ray_keyed(grid, ray, quad, act, 0)
}

/// Composites one ray with stratified jitter drawn from stream `key`.
pub fn render_ray_keyed(
    grid: &VoxelGrid,
    ray: &Ray,
    quad: &QuadratureConfig,
    act: &ActivationParams,
    key: u64,
) -> RaySample {
    let mut tr = Trace::default();
    march(grid, ray, quad, act, key, &mut tr);
    RaySample {
        t_end: tr.t_end(),
        weights: tr.weights,
        rgb: tr.rgb,
    }
}

/// Renders an image. Pixel `k` (row-major) uses jitter stream `k`.
/// Output values are clamped to `[0, 1]`.
pub fn render_image(
    grid: &VoxelGrid,
    pose: &CameraPose,
    intr: &Intrinsics,
    quad: &QuadratureConfig,
    act: &ActivationParams,
) -> Result<Image> {
    quad.validate()?;
    intr.validate()?;
    let rays = camera::image_rays(pose, intr, grid.bounds());
    let mut data = vec![0.0; rays.len() * 3];
    data.par_chunks_mut(3 * intr.width)
        .enumerate()
        .for_each_init(Trace::default, |tr, (row, out)| {
            for px in 0..intr.width {
                let k = row * intr.width + px;
                march(grid, &rays[k], quad, act, k as u64, tr);
                for c in 0..3 {
                    out[px * 3 + c] = tr.rgb[c].clamp(0.0, 1.0);
                }
            }
        });
    Image::new(intr.width, intr.height, data)
}

/// Mean squared composite error over a ray batch and, if requested, its
/// gradient with respect to the raw grid. Ray `k` of the batch uses jitter
/// stream `k`, so loss and gradient see the same sample positions.
pub fn batch_loss_and_grad(
    grid: &VoxelGrid,
    batch: &RayBatch,
    quad: &QuadratureConfig,
    act: &ActivationParams,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    quad.validate()?;
    if batch.rays.len() != batch.targets.len() {
        return Err(Error::shape("ray batch has mismatched target count"));
    }
    if batch.is_empty() {
        return Err(Error::invalid("photometric loss needs at least one ray"));
    }
    let n = batch.len();
    let n_params = grid.data().len();
    let partials: Vec<(f64, Option<Vec<f64>>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut tr = Trace::default();
            let mut grad = with_grad.then(|| vec![0.0; n_params]);
            let mut sum = 0.0;
            for k in chunk * CHUNK..((chunk + 1) * CHUNK).min(n) {
                march(grid, &batch.rays[k], quad, act, k as u64, &mut tr);
                let target = batch.targets[k];
                let r = [
                    tr.rgb[0] - target[0],
                    tr.rgb[1] - target[1],
                    tr.rgb[2] - target[2],
                ];
                sum += r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
                if let Some(g) = grad.as_mut() {
                    let scale = 2.0 / n as f64;
                    backprop_ray(&tr, r.map(|v| v * scale), act, quad.background, g);
                }
            }
            (sum, grad)
        })
        .collect();
    let mut total = 0.0;
    let mut grad = with_grad.then(|| vec![0.0; n_params]);
    for (s, g) in partials {
        total += s;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Ok((total / n as f64, grad))
}

/// Mean over all rays of all views of the squared rgb error.
pub fn photometric_loss(
    grid: &VoxelGrid,
    views: &[View],
    intr: &Intrinsics,
    quad: &QuadratureConfig,
    act: &ActivationParams,
) -> Result<f64> {
    let batch = RayBatch::from_views(views, intr, grid)?;
    Ok(batch_loss_and_grad(grid, &batch, quad, act, false)?.0)
}

/// Gradient of [`photometric_loss`] with respect to every raw grid value,
/// laid out like [`VoxelGrid::data`].
pub fn photometric_grad(
    grid: &VoxelGrid,
    views: &[View],
    intr: &Intrinsics,
    quad: &QuadratureConfig,
    act: &ActivationParams,
) -> Result<Vec<f64>> {
    Ok(photometric_loss_and_grad(grid, views, intr, quad, act)?.1)
}

pub fn photometric_loss_and_grad(
    grid: &VoxelGrid,
    views: &[View],
    intr: &Intrinsics,
    quad: &QuadratureConfig,
    act: &ActivationParams,
) -> Result<(f64, Vec<f64>)> {
    let batch = RayBatch::from_views(views, intr, grid)?;
    let (loss, grad) = batch_loss_and_grad(grid, &batch, quad, act, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`, capped at 99.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(format!(
            "psnr: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub const PSNR_CAP: f64 = 99.0;

/// Per-voxel maximum compositing weight over every ray of every pose.
/// Each sample's weight is credited to the voxel cell containing it.
pub fn visibility_weights(
    grid: &VoxelGrid,
    poses: &[CameraPose],
    intr: &Intrinsics,
    quad: &QuadratureConfig,
    act: &ActivationParams,
) -> Result<Vec<f64>> {
    quad.validate()?;
    if poses.is_empty() {
        return Err(Error::invalid("visibility needs at least one pose"));
    }
    let n_vox = grid.voxel_count();
    let partial: Vec<Vec<f64>> = poses
        .par_iter()
        .map(|pose| {
            let mut vis = vec![0.0f64; n_vox];
            let mut tr = Trace::default();
            for (k, ray) in camera::image_rays(pose, intr, grid.bounds()).iter().enumerate() {
                march(grid, ray, quad, act, k as u64, &mut tr);
                for (i, &w) in tr.weights.iter().enumerate() {
                    if let Some(cell) = grid.cell_of(ray.at(tr.t[i])) {
                        vis[cell] = vis[cell].max(w);
                    }
                }
            }
            vis
        })
        .collect();
    let mut vis = vec![0.0f64; n_vox];
    for p in partial {
        for (a, b) in vis.iter_mut().zip(p) {
            *a = a.max(b);
        }
    }
    Ok(vis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxgrid::{logit, Bounds};

    fn act() -> ActivationParams {
        ActivationParams::default()
    }

    fn x_ray() -> Ray {
        Ray {
            origin: [-3.0, 0.1, -0.2],
            direction: [1.0, 0.0, 0.0],
            t_near: 2.0,
            t_far: 4.0,
        }
    }

    fn constant_medium(r: usize, sigma: f64, c: [f64; 3]) -> VoxelGrid {
        let a = act();
        VoxelGrid::filled(
            r,
            Bounds::unit_cube(),
            [a.raw_for_density(sigma), logit(c[0]), logit(c[1]), logit(c[2])],
        )
        .unwrap()
    }

    #[test]
    fn empty_grid_shows_background() {
        let g = VoxelGrid::empty(8, &act(), 0.0).unwrap();
        let s = render_ray(&g, &x_ray(), &QuadratureConfig::for_resolution(8), &act());
        assert!(s.t_end >= 0.999);
        for c in s.rgb {
            assert!((c - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_medium_matches_closed_form() {
        let c = [0.8, 0.2, 0.2];
        let g = constant_medium(6, 2.0, c);
        let quad = QuadratureConfig {
            n_samples: 1024,
            ..QuadratureConfig::for_resolution(6)
        };
        let s = render_ray(&g, &x_ray(), &quad, &act());
        let tt = (-4f64).exp();
        for k in 0..3 {
            let want = (1.0 - tt) * c[k] + tt;
            assert!((s.rgb[k] - want).abs() < 1e-3, "{} vs {want}", s.rgb[k]);
        }
    }

    #[test]
    fn opaque_slab_shows_its_color() {
        let c = [0.3, 0.6, 0.1];
        let g = constant_medium(4, 1e4, c);
        let quad = QuadratureConfig::for_resolution(4);
        let s = render_ray(&g, &x_ray(), &quad, &act());
        for k in 0..3 {
            assert!((s.rgb[k] - c[k]).abs() < 1e-4);
        }
    }

    #[test]
    fn weights_normalize_and_transmittance_decreases() {
        let data: Vec<f64> = (0..5usize.pow(3) * 4)
            .map(|i| ((i * 37) % 23) as f64 / 4.0 - 3.0)
            .collect();
        let g = VoxelGrid::from_data(5, Bounds::unit_cube(), data).unwrap();
        let quad = QuadratureConfig {
            stratified: true,
            seed: 4,
            ..QuadratureConfig::for_resolution(5)
        };
        let mut tr = Trace::default();
        march(&g, &x_ray(), &quad, &act(), 3, &mut tr);
        let total: f64 = tr.weights.iter().sum::<f64>() + tr.t_end();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(tr.trans.windows(2).all(|w| w[1] <= w[0]));
        assert!(tr.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn degenerate_ray_is_background() {
        let g = constant_medium(4, 5.0, [0.1, 0.1, 0.1]);
        let ray = Ray::clipped([0.0, 5.0, 0.0], [0.0, 1.0, 0.0], g.bounds());
        let s = render_ray(&g, &ray, &QuadratureConfig::for_resolution(4), &act());
        assert_eq!(s.rgb, [1.0; 3]);
        assert_eq!(s.t_end, 1.0);
        assert!(s.weights.is_empty());
    }

    #[test]
    fn psnr_contract() {
        let a = Image::filled(4, 4, [0.5; 3]);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Image::filled(2, 4, [0.0; 3])).is_err());
    }

    #[test]
    fn single_ray_loss_is_squared_residual() {
        let g = VoxelGrid::empty(4, &act(), 0.0).unwrap();
        let quad = QuadratureConfig::for_resolution(4);
        let ray = Ray::clipped([0.0, 5.0, 0.0], [0.0, 1.0, 0.0], g.bounds());
        let batch = RayBatch {
            rays: vec![ray],
            targets: vec![[0.9, 1.0, 1.0]],
        };
        let (loss, _) = batch_loss_and_grad(&g, &batch, &quad, &act(), false).unwrap();
        assert!((loss - 0.01).abs() < 1e-15);
    }

    #[test]
    fn mismatched_images_are_rejected() {
        let g = VoxelGrid::empty(4, &act(), 0.0).unwrap();
        let intr = Intrinsics::new(4, 4, 6.0).unwrap();
        let pose = CameraPose::look_at([0.0, 4.0, 0.0], [0.0; 3]).unwrap();
        let views = vec![View {
            pose,
            image: Image::filled(3, 4, [1.0; 3]),
        }];
        let quad = QuadratureConfig::for_resolution(4);
        assert!(photometric_loss(&g, &views, &intr, &quad, &act()).is_err());
        assert!(photometric_grad(&g, &views, &intr, &quad, &act()).is_err());
    }
}
