use serde::{Deserialize, Serialize};

use super::data::{perturb, NormStats};
use super::model::Denoiser;
use super::schedule::ChannelSchedules;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::voxgrid::CHANNELS;

/// Per-step base weight of each channel group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w_d = w_c = 1`.
    #[default]
    Simple,
    /// `w(i) = clamp(SNR(i−1) − SNR(i), 0, cap)` from each group's schedule.
    Snr,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub weighting: Weighting,
    /// Color entries at voxels whose clean raw density exceeds `tau` get an
    /// extra unit weight. `f64::INFINITY` disables the term.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weighting: Weighting::Simple,
            tau: f64::INFINITY,
        }
    }
}

/// Element weights for a batch of clean normalized fields.
///
/// Density entries of field `n` get `w_d(i_n) / (S·N)` and color entries
/// `(w_c(i_n) + 1(D_raw > τ)) / (3·S·N)`, so the weighted squared error is
/// the batch mean of `w_d·mean(ΔD²) + mean((w_c + 1)·ΔC²)`.
pub fn loss_weights(clean: &[f64], steps: &[usize], scheds: &ChannelSchedules, stats: &NormStats, cfg: &LossConfig) -> Result<Vec<f64>> {
    let n = steps.len();
    if n == 0 || clean.len() % (n * CHANNELS) != 0 {
        return Err(Error::shape("clean batch does not match step count"));
    }
    let s = clean.len() / (n * CHANNELS);
    let mut w = vec![0.0; clean.len()];
    let norm = (s * n) as f64;
    for (k, &i) in steps.iter().enumerate() {
        let (wd, wc) = match cfg.weighting {
            Weighting::Simple => (1.0, 1.0),
            Weighting::Snr => (scheds.density.snr_weight(i)?, scheds.color.snr_weight(i)?),
        };
        let base = k * CHANNELS * s;
        let (dm, dsc) = stats.channel(0);
        for v in 0..s {
            w[base + v] = wd / norm;
            let raw_d = clean[base + v] * dsc + dm;
            let wcv = if raw_d > cfg.tau { wc + 1.0 } else { wc };
            for c in 1..CHANNELS {
                w[base + c * s + v] = wcv / (3.0 * norm);
            }
        }
    }
    Ok(w)
}

/// `Σ_j w_j (pred_j − target_j)²`, accumulated in index order.
pub fn weighted_sse(pred: &[f64], target: &[f64], weights: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .zip(weights)
        .map(|((a, t), w)| w * (a - t) * (a - t))
        .sum()
}

/// Diffusion loss of `model` on a clean batch `N×4×R³` at the given steps
/// and noise.
pub fn diffusion_loss(
    model: &dyn Denoiser,
    clean: &Tensor,
    steps: &[usize],
    eps: &[f64],
    scheds: &ChannelSchedules,
    stats: &NormStats,
    cfg: &LossConfig,
) -> Result<f64> {
    let noisy = perturb(clean.data(), steps, eps, scheds)?;
    let x = Tensor::new(clean.shape().to_vec(), noisy)?;
    let pred = model.denoise(&x, steps)?;
    if !pred.is_finite() {
        return Err(Error::NonFinite {
            iteration: 0,
            term: "denoiser output".into(),
        });
    }
    let w = loss_weights(clean.data(), steps, scheds, stats, cfg)?;
    Ok(weighted_sse(pred.data(), clean.data(), &w))
}
