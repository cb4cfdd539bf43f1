//! Denoiser training with global-norm clipping, linear warmup and Adam.

use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::data::{perturb, stack, NormStats};
use super::loss::{loss_weights, LossConfig, Weighting};
use super::model::UNetDenoiser;
use super::schedule::{ChannelScheduleConfig, ChannelSchedules};
use crate::error::{Error, Result};
use crate::fit::adam_update;
use crate::nn::{Binder, Checkpoint, Graph, ParamStore, Tensor, UNet, UNetConfig};
use crate::rng::{self, Purpose};
use crate::voxgrid::{ActivationParams, Bounds};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub clip_norm: f64,
    pub warmup: usize,
    pub weighting: Weighting,
    /// Boost color weights where the clean raw density exceeds
    /// `visibility_tau`.
    pub visibility: bool,
    pub visibility_tau: f64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            iterations: 5000,
            clip_norm: 500.0,
            warmup: 100,
            weighting: Weighting::Simple,
            visibility: false,
            visibility_tau: ActivationParams::default().d_min + 2.0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::invalid("train.lr, train.batch_size and train.iterations must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("train.clip_norm must be positive"));
        }
        if self.visibility && self.visibility_tau.is_nan() {
            return Err(Error::invalid("train.visibility_tau must be a number"));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weighting: self.weighting,
            tau: if self.visibility { self.visibility_tau } else { f64::INFINITY },
        }
    }

    /// Learning rate at 0-based step `k`.
    pub fn lr_at(&self, k: u64) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((k + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm after clipping.
    pub clipped_norm: f64,
    pub lr: f64,
}

/// A trained (or training) denoiser with everything sampling needs.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserCheckpoint {
    pub unet: UNetConfig,
    pub params: ParamStore,
    pub schedules: ChannelScheduleConfig,
    pub stats: NormStats,
    pub bounds: Bounds,
    pub activation: ActivationParams,
    pub step: u64,
    /// Adam first and second moments, if saved for resuming.
    pub adam: Option<(ParamStore, ParamStore)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    schedules: ChannelScheduleConfig,
    stats: NormStats,
    bounds: Bounds,
    activation: ActivationParams,
}

impl DenoiserCheckpoint {
    pub fn to_container(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.unet.clone(), self.params.clone());
        ck.step = self.step;
        ck.meta = serde_json::to_value(Meta {
            schedules: self.schedules,
            stats: self.stats,
            bounds: self.bounds,
            activation: self.activation,
        })?;
        if let Some((m, v)) = &self.adam {
            ck.groups.insert("adam.m".into(), m.clone());
            ck.groups.insert("adam.v".into(), v.clone());
        }
        Ok(ck)
    }

    pub fn from_container(mut ck: Checkpoint, path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let meta: Meta = serde_json::from_value(ck.meta.clone()).map_err(|e| fail(format!("metadata: {e}")))?;
        let params = ck.groups.remove("params").ok_or_else(|| fail("no parameter group".into()))?;
        let net = UNet::new(ck.config.clone()).map_err(|e| fail(e.to_string()))?;
        net.init(0)?.check_layout(&params).map_err(|e| fail(e.to_string()))?;
        let adam = match (ck.groups.remove("adam.m"), ck.groups.remove("adam.v")) {
            (Some(m), Some(v)) => {
                params.check_layout(&m).map_err(|e| fail(e.to_string()))?;
                params.check_layout(&v).map_err(|e| fail(e.to_string()))?;
                Some((m, v))
            }
            (None, None) => None,
            _ => return Err(fail("incomplete optimizer state".into())),
        };
        Ok(Self {
            unet: ck.config,
            params,
            schedules: meta.schedules,
            stats: meta.stats,
            bounds: meta.bounds,
            activation: meta.activation,
            step: ck.step,
            adam,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(Checkpoint::read(path)?, path)
    }

    pub fn denoiser(&self) -> Result<UNetDenoiser> {
        Ok(UNetDenoiser::new(UNet::new(self.unet.clone())?, self.params.clone()))
    }

    pub fn channel_schedules(&self) -> Result<ChannelSchedules> {
        ChannelSchedules::new(&self.schedules)
    }
}

/// Owns parameters, optimizer state and the normalized training set.
pub struct Trainer {
    net: UNet,
    params: ParamStore,
    m: ParamStore,
    v: ParamStore,
    step: u64,
    cfg: TrainConfig,
    scheds: ChannelSchedules,
    stats: NormStats,
    bounds: Bounds,
    activation: ActivationParams,
    data: Vec<Vec<f64>>,
}

impl Trainer {
    /// `data` holds normalized `4×R³` planes, one entry per training grid.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        net: UNet,
        params: ParamStore,
        data: Vec<Vec<f64>>,
        stats: NormStats,
        scheds: ChannelSchedules,
        bounds: Bounds,
        activation: ActivationParams,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("training needs at least one grid"));
        }
        let r = net.config().resolution;
        if data.iter().any(|d| d.len() != 4 * r * r * r) {
            return Err(Error::shape(format!("training fields must be 4×{r}³")));
        }
        net.init(0)?.check_layout(&params)?;
        Ok(Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            net,
            params,
            step: 0,
            cfg,
            scheds,
            stats,
            bounds,
            activation,
            data,
        })
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(ck: DenoiserCheckpoint, data: Vec<Vec<f64>>, cfg: TrainConfig) -> Result<Self> {
        let (m, v) = ck
            .adam
            .clone()
            .ok_or_else(|| Error::invalid("checkpoint has no optimizer state to resume from"))?;
        let mut t = Self::new(
            UNet::new(ck.unet.clone())?,
            ck.params,
            data,
            ck.stats,
            ChannelSchedules::new(&ck.schedules)?,
            ck.bounds,
            ck.activation,
            cfg,
        )?;
        t.m = m;
        t.v = v;
        t.step = ck.step;
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn checkpoint(&self, with_optimizer: bool) -> DenoiserCheckpoint {
        DenoiserCheckpoint {
            unet: self.net.config().clone(),
            params: self.params.clone(),
            schedules: self.scheds.config(),
            stats: self.stats,
            bounds: self.bounds,
            activation: self.activation,
            step: self.step,
            adam: with_optimizer.then(|| (self.m.clone(), self.v.clone())),
        }
    }

    /// Loss and parameter gradient on the batch drawn for step `k`.
    fn loss_and_grad(&self, k: u64) -> Result<(f64, ParamStore)> {
        let mut r = rng::stream(self.cfg.seed, Purpose::Train, k);
        let n = self.cfg.batch_size;
        let t = self.scheds.steps();
        let picks: Vec<usize> = (0..n).map(|_| r.random_range(0..self.data.len())).collect();
        let steps: Vec<usize> = (0..n).map(|_| r.random_range(1..=t)).collect();
        let fields: Vec<&[f64]> = picks.iter().map(|&p| self.data[p].as_slice()).collect();
        let res = self.net.config().resolution;
        let clean = stack(&fields, res)?;
        let eps = rng::normal_vec(&mut r, clean.numel());
        let noisy = perturb(clean.data(), &steps, &eps, &self.scheds)?;
        let weights = loss_weights(clean.data(), &steps, &self.scheds, &self.stats, &self.cfg.loss_config())?;

        let mut g = Graph::new();
        let x = g.constant(Tensor::new(clean.shape().to_vec(), noisy)?);
        let mut binder = Binder::new(&self.params, true);
        let y = self.net.forward(&mut g, &mut binder, x, &steps)?;
        let loss = g.weighted_sse(y, clean.data(), &weights)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                iteration: k as usize,
                term: "diffusion loss".into(),
            });
        }
        let mut grads = g.backward(loss)?;
        Ok((value, binder.gradients(&mut grads)))
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<TrainRecord> {
        let k = self.step;
        let (loss, mut grads) = self.loss_and_grad(k)?;
        let norm = grads.sq_norm().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                iteration: k as usize,
                term: "gradient norm".into(),
            });
        }
        let scale = if norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };
        if scale < 1.0 {
            for (_, t) in grads.iter_mut() {
                t.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
        let clipped_norm = grads.sq_norm().sqrt();
        let lr = self.cfg.lr_at(k);
        self.step += 1;
        let t = self.step;
        for (((_, p), (_, gr)), ((_, m), (_, v))) in self
            .params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            adam_update(p.data_mut(), gr.data(), m.data_mut(), v.data_mut(), t, lr);
        }
        Ok(TrainRecord {
            step: k,
            loss,
            grad_norm: norm,
            clipped_norm,
            lr,
        })
    }

    /// Steps until `cfg.iterations` total, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, &TrainRecord) -> Result<()>) -> Result<Vec<TrainRecord>> {
        let mut trace = Vec::new();
        while (self.step as usize) < self.cfg.iterations {
            let rec = self.step()?;
            on_step(self, &rec)?;
            trace.push(rec);
        }
        Ok(trace)
    }
}

/// Writes `step,loss,grad_norm,lr` rows.
pub fn write_train_csv(trace: &[TrainRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,loss,grad_norm,lr").expect("write to memory");
    for r in trace {
        writeln!(out, "{},{:e},{:e},{:e}", r.step, r.loss, r.grad_norm, r.lr).expect("write to memory");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_flat() {
        let c = TrainConfig {
            lr: 1.0,
            warmup: 4,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|k| c.lr_at(k)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }
}
