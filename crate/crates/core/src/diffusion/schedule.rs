use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `ᾱ(u) = cos²(((u+s)/(1+s))·π/2) / cos²((s/(1+s))·π/2)`, `u = i/T`.
    #[default]
    Cosine,
    /// `β` linear in the step index, `ᾱ_i = Π_{j≤i} (1 − β_j)`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub kind: ScheduleKind,
    /// Cosine offset `s`.
    pub cosine_s: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Upper clamp on the SNR-difference weight.
    pub snr_cap: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: ScheduleKind::Cosine,
            cosine_s: 0.008,
            beta_start: 1e-4,
            beta_end: 0.02,
            snr_cap: 1e4,
        }
    }
}

impl ScheduleConfig {
    pub fn cosine(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("schedule.steps must be at least 1"));
        }
        if !(self.snr_cap > 0.0) {
            return Err(Error::invalid("schedule.snr_cap must be positive"));
        }
        match self.kind {
            ScheduleKind::Cosine if !(self.cosine_s > 0.0 && self.cosine_s.is_finite()) => {
                Err(Error::invalid("schedule.cosine_s must be positive"))
            }
            ScheduleKind::Linear if !(self.beta_start > 0.0 && self.beta_end < 1.0 && self.beta_start <= self.beta_end) => {
                Err(Error::invalid("linear schedule needs 0 < beta_start <= beta_end < 1"))
            }
            _ => Ok(()),
        }
    }
}

/// Tabulated `ᾱ_i`, `α_i = √ᾱ_i`, `σ_i = √(1 − ᾱ_i)` for `i = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        config.validate()?;
        let t = config.steps;
        let alpha_bar: Vec<f64> = match config.kind {
            ScheduleKind::Cosine => {
                let s = config.cosine_s;
                let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                let f0 = f(0.0);
                (0..=t).map(|i| if i == 0 { 1.0 } else { f(i as f64 / t as f64) / f0 }).collect()
            }
            ScheduleKind::Linear => {
                let (beta_start, beta_end) = (config.beta_start, config.beta_end);
                let mut out = Vec::with_capacity(t + 1);
                let mut acc = 1.0;
                out.push(acc);
                for i in 1..=t {
                    let frac = if t == 1 { 0.0 } else { (i - 1) as f64 / (t - 1) as f64 };
                    acc *= 1.0 - (beta_start + (beta_end - beta_start) * frac);
                    out.push(acc);
                }
                out
            }
        };
        let alpha = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sigma = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self {
            config,
            alpha_bar,
            alpha,
            sigma,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    fn check(&self, i: usize) -> Result<()> {
        if i > self.config.steps {
            return Err(Error::invalid(format!("step {i} outside 0..={}", self.config.steps)));
        }
        Ok(())
    }

    /// `(α_i, σ_i)`.
    pub fn eval(&self, i: usize) -> Result<(f64, f64)> {
        self.check(i)?;
        Ok((self.alpha[i], self.sigma[i]))
    }

    pub fn alpha_bar(&self, i: usize) -> Result<f64> {
        self.check(i)?;
        Ok(self.alpha_bar[i])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `ᾱ_i / (1 − ᾱ_i)`; infinite at `i = 0`.
    pub fn snr(&self, i: usize) -> Result<f64> {
        self.check(i)?;
        let a = self.alpha_bar[i];
        Ok(if a >= 1.0 { f64::INFINITY } else { a / (1.0 - a) })
    }

    /// `clamp(SNR(i−1) − SNR(i), 0, cap)` for `1 ≤ i ≤ T`.
    pub fn snr_weight(&self, i: usize) -> Result<f64> {
        if i == 0 {
            return Err(Error::invalid("snr weight is defined for steps 1..=T"));
        }
        let d = self.snr(i - 1)? - self.snr(i)?;
        Ok(d.clamp(0.0, self.config.snr_cap))
    }

    /// Gaussian posterior `q(z_{i−1} | z_i, x)` as `(coef_x, coef_z, variance)`
    /// so that the mean is `coef_x·x + coef_z·z_i`.
    pub fn posterior(&self, i: usize) -> Result<(f64, f64, f64)> {
        if i == 0 {
            return Err(Error::invalid("posterior is defined for steps 1..=T"));
        }
        self.check(i)?;
        let (ab_t, ab_s) = (self.alpha_bar[i], self.alpha_bar[i - 1]);
        let a2_ts = ab_t / ab_s;
        let denom = 1.0 - ab_t;
        let coef_x = ab_s.sqrt() * (1.0 - a2_ts) / denom;
        let coef_z = a2_ts.sqrt() * (1.0 - ab_s) / denom;
        let var = ((1.0 - ab_s) * (1.0 - a2_ts) / denom).max(0.0);
        Ok((coef_x, coef_z, var))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelScheduleConfig {
    pub density: ScheduleConfig,
    pub color: ScheduleConfig,
}

impl Default for ChannelScheduleConfig {
    fn default() -> Self {
        Self {
            density: ScheduleConfig::default(),
            color: ScheduleConfig::default(),
        }
    }
}

impl ChannelScheduleConfig {
    pub fn shared(cfg: ScheduleConfig) -> Self {
        Self { density: cfg, color: cfg }
    }
}

/// One schedule for the density channel and one for the color channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSchedules {
    pub density: NoiseSchedule,
    pub color: NoiseSchedule,
}

impl ChannelSchedules {
    pub fn new(cfg: &ChannelScheduleConfig) -> Result<Self> {
        if cfg.density.steps != cfg.color.steps {
            return Err(Error::invalid(format!(
                "density and color schedules need equal step counts ({} vs {})",
                cfg.density.steps, cfg.color.steps
            )));
        }
        Ok(Self {
            density: NoiseSchedule::new(cfg.density)?,
            color: NoiseSchedule::new(cfg.color)?,
        })
    }

    pub fn shared(sched: NoiseSchedule) -> Self {
        Self {
            density: sched.clone(),
            color: sched,
        }
    }

    pub fn steps(&self) -> usize {
        self.density.steps()
    }

    pub fn config(&self) -> ChannelScheduleConfig {
        ChannelScheduleConfig {
            density: *self.density.config(),
            color: *self.color.config(),
        }
    }

    /// Schedule governing channel `c` of a 4-channel field.
    pub fn for_channel(&self, c: usize) -> &NoiseSchedule {
        if c == 0 {
            &self.density
        } else {
            &self.color
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = NoiseSchedule::new(ScheduleConfig::cosine(4)).unwrap();
        assert_eq!(s.eval(0).unwrap(), (1.0, 0.0));
        assert!(s.eval(5).is_err());
        assert_eq!(s.snr_weight(1).unwrap(), 1e4);
        assert!(s.snr_weight(0).is_err());
        let (cx, cz, var) = s.posterior(1).unwrap();
        assert_eq!((cx, cz, var), (1.0, 0.0, 0.0));
    }

    #[test]
    fn linear_schedule_is_monotone() {
        let cfg = ScheduleConfig {
            steps: 50,
            kind: ScheduleKind::Linear,
            ..ScheduleConfig::default()
        };
        let s = NoiseSchedule::new(cfg).unwrap();
        for i in 1..=50 {
            assert!(s.snr(i).unwrap() < s.snr(i - 1).unwrap());
        }
    }

    #[test]
    fn config_json_shape() {
        let c: ScheduleConfig = serde_json::from_str(r#"{"steps": 64, "kind": "cosine", "cosine_s": 0.01}"#).unwrap();
        assert_eq!(c.steps, 64);
        assert_eq!((c.kind, c.cosine_s), (ScheduleKind::Cosine, 0.01));
        assert!(serde_json::from_str::<ScheduleConfig>(r#"{"stepz": 64}"#).is_err());
    }
}
