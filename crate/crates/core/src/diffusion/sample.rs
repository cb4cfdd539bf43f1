//! Ancestral sampling and observation-guided sampling.

use serde::{Deserialize, Serialize};

use super::data::NormStats;
use super::model::Denoiser;
use super::schedule::ChannelSchedules;
use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::render::{self, QuadratureConfig, View};
use crate::rng::{self, Rng};
use crate::voxgrid::{ActivationParams, Bounds, VoxelGrid, CHANNELS};

fn field_tensor(v: &[f64], r: usize) -> Result<Tensor> {
    Tensor::new(vec![1, CHANNELS, r, r, r], v.to_vec())
}

fn check_field(model: &dyn Denoiser, v: &[f64]) -> Result<usize> {
    let r = model.resolution();
    if v.len() != CHANNELS * r * r * r {
        return Err(Error::shape(format!("field has {} values, denoiser expects 4×{r}³", v.len())));
    }
    Ok(r)
}

/// Draws `V_{i−1}` from `q(V_{i−1} | V_i, x = x̂(V_i, i))`, each channel group
/// under its own schedule. At `i = 1` returns `x̂` exactly. With
/// `deterministic` the posterior mean is returned and no noise is drawn.
pub fn posterior_step(model: &dyn Denoiser, v: &[f64], i: usize, rng: &mut Rng, scheds: &ChannelSchedules, deterministic: bool) -> Result<Vec<f64>> {
    let r = check_field(model, v)?;
    if i == 0 || i > scheds.steps() {
        return Err(Error::invalid(format!("posterior step {i} outside 1..={}", scheds.steps())));
    }
    let xhat = model.denoise(&field_tensor(v, r)?, &[i])?.into_data();
    if i == 1 {
        return Ok(xhat);
    }
    let s = r * r * r;
    let mut out = vec![0.0; v.len()];
    for c in 0..CHANNELS {
        let (cx, cz, var) = scheds.for_channel(c).posterior(i)?;
        let sd = var.sqrt();
        for j in c * s..(c + 1) * s {
            let mean = cx * xhat[j] + cz * v[j];
            out[j] = if deterministic { mean } else { mean + sd * rng::normal(rng) };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Photometric likelihood of the current noisy state.
    Noisy,
    /// Photometric likelihood of the denoised estimate.
    Denoised,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Ascent steps after every posterior step.
    pub k: usize,
    pub step_size: f64,
    pub lambda_noisy: f64,
    pub lambda_denoised: f64,
    pub mode: GuidanceMode,
    /// Backpropagate denoised-mode guidance through the denoiser instead of
    /// passing it straight through.
    pub full_jacobian: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            k: 5,
            step_size: 0.01,
            lambda_noisy: 1.0,
            lambda_denoised: 1.0,
            mode: GuidanceMode::Both,
            full_jacobian: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k > 0 && !(self.step_size > 0.0) {
            return Err(Error::invalid("guidance.step_size must be positive when guidance.k > 0"));
        }
        if !(self.lambda_noisy >= 0.0 && self.lambda_denoised >= 0.0) {
            return Err(Error::invalid("guidance weights must be nonnegative"));
        }
        Ok(())
    }
}

/// A posed image plus everything needed to render the grid it constrains.
#[derive(Debug, Clone)]
pub struct Observation {
    pub view: View,
    pub intrinsics: Intrinsics,
    pub quadrature: QuadratureConfig,
    pub activation: ActivationParams,
    pub bounds: Bounds,
}

/// `∇` of `−L_NeRF` at the denormalized `field`, mapped back to normalized
/// channel planes and scaled by `lambda`.
fn photometric_ascent(field: &[f64], r: usize, obs: &Observation, stats: &NormStats, lambda: f64) -> Result<Vec<f64>> {
    let grid = stats.normalized_to_grid(field, r, obs.bounds)?;
    let g = render::photometric_grad(&grid, std::slice::from_ref(&obs.view), &obs.intrinsics, &obs.quadrature, &obs.activation)?;
    let s = r * r * r;
    let mut out = vec![0.0; field.len()];
    for c in 0..CHANNELS {
        let coef = -lambda * stats.channel(c).1;
        for v in 0..s {
            out[c * s + v] = coef * g[v * CHANNELS + c];
        }
    }
    Ok(out)
}

/// Gradient of the log-likelihood surrogate `−λ·L_NeRF` with respect to the
/// normalized state `v`, under `cfg.mode`. Denoised and combined modes need
/// `model` and the step index at which `v` is denoised.
pub fn guidance_grad(
    v: &[f64],
    obs: &Observation,
    cfg: &GuidanceConfig,
    stats: &NormStats,
    model: Option<&dyn Denoiser>,
    step: Option<usize>,
) -> Result<Vec<f64>> {
    let r = ((v.len() / CHANNELS) as f64).cbrt().round() as usize;
    if CHANNELS * r * r * r != v.len() {
        return Err(Error::shape(format!("{} values is not a cubic 4-channel field", v.len())));
    }
    let noisy = |v: &[f64]| photometric_ascent(v, r, obs, stats, cfg.lambda_noisy);
    let denoised = |v: &[f64]| -> Result<Vec<f64>> {
        let model = model.ok_or_else(|| Error::invalid("denoised guidance needs a denoiser"))?;
        let i = step.ok_or_else(|| Error::invalid("denoised guidance needs a step index"))?;
        let x = field_tensor(v, r)?;
        let xhat = model.denoise(&x, &[i])?;
        let g = photometric_ascent(xhat.data(), r, obs, stats, cfg.lambda_denoised)?;
        if cfg.full_jacobian {
            Ok(model.denoise_vjp(&x, &[i], &g)?.into_data())
        } else {
            Ok(g)
        }
    };
    match cfg.mode {
        GuidanceMode::Noisy => noisy(v),
        GuidanceMode::Denoised => denoised(v),
        GuidanceMode::Both => {
            let mut a = noisy(v)?;
            let b = denoised(v)?;
            a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            Ok(a)
        }
    }
}

/// Guidance applied to the state after one posterior step.
pub struct Guide<'a> {
    pub config: GuidanceConfig,
    pub observation: &'a Observation,
}

/// Runs the reverse chain from `V_T ~ N(0, I)` in normalized space. With a
/// guide, every posterior step is followed by `k` ascent steps
/// `V ← V + step_size·guidance_grad(V)`, denoising at step `max(i−1, 1)`.
/// `on_step` sees the state after each outer step.
#[allow(clippy::too_many_arguments)]
pub fn sample_chain(
    model: &dyn Denoiser,
    scheds: &ChannelSchedules,
    stats: &NormStats,
    rng: &mut Rng,
    deterministic: bool,
    guide: Option<&Guide<'_>>,
    mut on_step: Option<&mut dyn FnMut(usize, &[f64])>,
) -> Result<Vec<f64>> {
    let r = model.resolution();
    if let Some(g) = guide {
        g.config.validate()?;
    }
    let mut v = rng::normal_vec(rng, CHANNELS * r * r * r);
    for i in (1..=scheds.steps()).rev() {
        v = posterior_step(model, &v, i, rng, scheds, deterministic)?;
        if let Some(g) = guide {
            for _ in 0..g.config.k {
                let grad = guidance_grad(&v, g.observation, &g.config, stats, Some(model), Some((i - 1).max(1)))?;
                for (x, d) in v.iter_mut().zip(&grad) {
                    *x += g.config.step_size * d;
                }
            }
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                iteration: i,
                term: "sampler state".into(),
            });
        }
        if let Some(f) = on_step.as_mut() {
            f(i, &v);
        }
    }
    Ok(v)
}

/// Unconditional sample, denormalized into a grid.
pub fn ancestral_sample(model: &dyn Denoiser, scheds: &ChannelSchedules, stats: &NormStats, rng: &mut Rng, bounds: Bounds, deterministic: bool) -> Result<VoxelGrid> {
    let v = sample_chain(model, scheds, stats, rng, deterministic, None, None)?;
    stats.normalized_to_grid(&v, model.resolution(), bounds)
}

/// Observation-guided sample, denormalized into a grid.
pub fn guided_sample(model: &dyn Denoiser, scheds: &ChannelSchedules, stats: &NormStats, guide: &Guide<'_>, rng: &mut Rng, deterministic: bool) -> Result<VoxelGrid> {
    let v = sample_chain(model, scheds, stats, rng, deterministic, Some(guide), None)?;
    stats.normalized_to_grid(&v, model.resolution(), guide.observation.bounds)
}
