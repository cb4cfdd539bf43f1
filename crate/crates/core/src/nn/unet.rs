//! 3D U-Net denoiser in two variants.
//!
//! The single variant maps a noisy `N×4×R³` field to an estimate of the
//! clean field. The double variant runs a density network on channel 0 and
//! a color network on `concat(color, D̂)`, where `D̂` is the density
//! network's output.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{Binder, Init, Initializer, ParamSource, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Single,
    Double,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Grid resolution the network is built for.
    pub resolution: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    /// Number of 2× downsamplings.
    pub levels: usize,
    pub res_blocks: usize,
    /// Spatial sizes at which self-attention is inserted.
    pub attention_resolutions: Vec<usize>,
    /// Defaults to `4 × width`.
    pub time_dim: Option<usize>,
    pub variant: Variant,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            in_channels: 4,
            out_channels: 4,
            width: 16,
            levels: 2,
            res_blocks: 2,
            attention_resolutions: Vec::new(),
            time_dim: None,
            variant: Variant::Single,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::invalid("unet.levels must be at least 1"));
        }
        if self.width < 4 || self.width % 2 != 0 {
            return Err(Error::invalid(format!("unet.width must be even and at least 4, got {}", self.width)));
        }
        if self.res_blocks < 1 {
            return Err(Error::invalid("unet.res_blocks must be at least 1"));
        }
        let div = 1usize << self.levels;
        if self.resolution < div || self.resolution % div != 0 {
            return Err(Error::invalid(format!(
                "unet.resolution {} is not divisible by 2^levels = {div}",
                self.resolution
            )));
        }
        if self.time_dim() < 4 {
            return Err(Error::invalid("unet.time_dim must be at least 4"));
        }
        if self.in_channels != 4 || self.out_channels != 4 {
            return Err(Error::invalid("unet denoises 4-channel fields: in_channels and out_channels must be 4"));
        }
        Ok(())
    }

    pub fn time_dim(&self) -> usize {
        self.time_dim.unwrap_or(4 * self.width)
    }

    fn channels_at(&self, level: usize) -> usize {
        if level == 0 {
            self.width
        } else {
            2 * self.width
        }
    }
}

/// Raw sinusoidal features of step `i`: `[sin(iω₀), cos(iω₀), sin(iω₁), …]`
/// with `ω_k = 10000^(−k/(dim/2))`.
pub fn sinusoidal_embedding(i: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("embedding dim must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let w = 10000f64.powf(-(k as f64) / half as f64);
        let a = i as f64 * w;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

fn groups_for(c: usize) -> usize {
    let (mut a, mut b) = (c, 8);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Builder state shared by the blocks of one network.
struct Net<'g, 's> {
    g: &'g mut Graph,
    src: &'s mut dyn ParamSource,
    prefix: String,
}

impl Net<'_, '_> {
    fn p(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = format!("{}{name}", self.prefix);
        self.src.param(self.g, &full, shape, init)
    }

    fn conv(&mut self, name: &str, x: Var, cin: usize, cout: usize, k: usize, zero: bool) -> Result<Var> {
        let init = if zero { Init::Zeros } else { Init::FanIn(cin * k * k * k) };
        let w = self.p(&format!("{name}.w"), &[cout, cin, k, k, k], init)?;
        let b = self.p(&format!("{name}.b"), &[cout], Init::Zeros)?;
        self.g.conv3d(x, w, b)
    }

    fn linear(&mut self, name: &str, x: Var, fin: usize, fout: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"), &[fout, fin], Init::FanIn(fin))?;
        let b = self.p(&format!("{name}.b"), &[fout], Init::Zeros)?;
        self.g.linear(x, w, b)
    }

    fn norm(&mut self, name: &str, x: Var, c: usize) -> Result<Var> {
        let gamma = self.p(&format!("{name}.g"), &[c], Init::Ones)?;
        let beta = self.p(&format!("{name}.b"), &[c], Init::Zeros)?;
        self.g.group_norm(x, gamma, beta, groups_for(c))
    }

    fn res_block(&mut self, name: &str, x: Var, cin: usize, cout: usize, temb: Var, tdim: usize) -> Result<Var> {
        let h = self.norm(&format!("{name}.n1"), x, cin)?;
        let h = self.g.silu(h);
        let h = self.conv(&format!("{name}.c1"), h, cin, cout, 3, false)?;
        let t = self.linear(&format!("{name}.t"), temb, tdim, cout)?;
        let h = self.g.add_channel(h, t)?;
        let h = self.norm(&format!("{name}.n2"), h, cout)?;
        let h = self.g.silu(h);
        let h = self.conv(&format!("{name}.c2"), h, cout, cout, 3, false)?;
        let skip = if cin == cout {
            x
        } else {
            self.conv(&format!("{name}.skip"), x, cin, cout, 1, false)?
        };
        self.g.add(h, skip)
    }

    fn attn_block(&mut self, name: &str, x: Var, c: usize) -> Result<Var> {
        let h = self.norm(&format!("{name}.n"), x, c)?;
        let q = self.conv(&format!("{name}.q"), h, c, c, 1, false)?;
        let k = self.conv(&format!("{name}.k"), h, c, c, 1, false)?;
        let v = self.conv(&format!("{name}.v"), h, c, c, 1, false)?;
        let a = self.g.attention(q, k, v)?;
        let a = self.conv(&format!("{name}.proj"), a, c, c, 1, true)?;
        self.g.add(x, a)
    }

    fn time_mlp(&mut self, steps: &[usize], width: usize, tdim: usize) -> Result<Var> {
        let mut raw = Vec::with_capacity(steps.len() * width);
        for &i in steps {
            raw.extend(sinusoidal_embedding(i, width)?);
        }
        let e = self.g.constant(Tensor::from_parts(vec![steps.len(), width], raw));
        let h = self.linear("temb.l1", e, width, tdim)?;
        let h = self.g.silu(h);
        let h = self.linear("temb.l2", h, tdim, tdim)?;
        // Every res block consumes SiLU(temb).
        Ok(self.g.silu(h))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    cfg: UNetConfig,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Draws a fresh parameter set by tracing the network once.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let mut init = Initializer::new(&mut rng);
        let mut g = Graph::new();
        let r = self.cfg.resolution;
        let x = g.constant(Tensor::zeros(&[1, 4, r, r, r]));
        self.forward(&mut g, &mut init, x, &[0])?;
        Ok(init.store)
    }

    fn subnet(&self, g: &mut Graph, src: &mut dyn ParamSource, prefix: &str, x: Var, cin: usize, cout: usize, steps: &[usize]) -> Result<Var> {
        let cfg = &self.cfg;
        let tdim = cfg.time_dim();
        let mut net = Net {
            g,
            src,
            prefix: prefix.to_string(),
        };
        let temb = net.time_mlp(steps, cfg.width, tdim)?;
        let mut h = net.conv("in", x, cin, cfg.width, 3, false)?;
        let mut ch = cfg.width;
        let mut res = cfg.resolution;
        let mut skips = Vec::new();
        for l in 0..cfg.levels {
            let cl = cfg.channels_at(l);
            for b in 0..cfg.res_blocks {
                h = net.res_block(&format!("down{l}.{b}"), h, ch, cl, temb, tdim)?;
                ch = cl;
                if cfg.attention_resolutions.contains(&res) {
                    h = net.attn_block(&format!("down{l}.{b}.attn"), h, ch)?;
                }
                skips.push((h, ch));
            }
            h = net.g.avg_pool2(h)?;
            res /= 2;
        }
        h = net.res_block("mid.0", h, ch, ch, temb, tdim)?;
        if cfg.attention_resolutions.contains(&res) {
            h = net.attn_block("mid.attn", h, ch)?;
        }
        h = net.res_block("mid.1", h, ch, ch, temb, tdim)?;
        for l in (0..cfg.levels).rev() {
            let cl = cfg.channels_at(l);
            h = net.g.upsample2(h)?;
            res *= 2;
            h = net.conv(&format!("up{l}.conv"), h, ch, cl, 3, false)?;
            ch = cl;
            for b in 0..cfg.res_blocks {
                let (s, cs) = skips.pop().expect("one skip per encoder block");
                let cat = net.g.concat(h, s)?;
                h = net.res_block(&format!("up{l}.{b}"), cat, ch + cs, cl, temb, tdim)?;
                if cfg.attention_resolutions.contains(&res) {
                    h = net.attn_block(&format!("up{l}.{b}.attn"), h, ch)?;
                }
            }
        }
        h = net.norm("out.n", h, ch)?;
        h = net.g.silu(h);
        net.conv("out", h, ch, cout, 3, true)
    }

    fn check_input(&self, g: &Graph, x: Var, c: usize, steps: &[usize]) -> Result<()> {
        let r = self.cfg.resolution;
        let s = g.shape(x);
        if s.len() != 5 || s[1] != c || s[2..] != [r, r, r] {
            return Err(Error::shape(format!("unet expects N×{c}×{r}×{r}×{r}, got {s:?}")));
        }
        if steps.len() != s[0] {
            return Err(Error::shape(format!("{} step indices for a batch of {}", steps.len(), s[0])));
        }
        Ok(())
    }

    /// Single-variant U-Net on `x`: N×4×R³ with one step index per sample.
    pub fn forward_single(&self, g: &mut Graph, src: &mut dyn ParamSource, x: Var, steps: &[usize]) -> Result<Var> {
        self.check_input(g, x, 4, steps)?;
        self.subnet(g, src, "", x, 4, 4, steps)
    }

    /// Double-variant U-Net: returns `(D̂, Ĉ)` from `d`: N×1×R³, `c`: N×3×R³.
    pub fn forward_double(&self, g: &mut Graph, src: &mut dyn ParamSource, d: Var, c: Var, steps: &[usize]) -> Result<(Var, Var)> {
        self.check_input(g, d, 1, steps)?;
        self.check_input(g, c, 3, steps)?;
        let d_hat = self.subnet(g, src, "density.", d, 1, 1, steps)?;
        let cin = g.concat(c, d_hat)?;
        let c_hat = self.subnet(g, src, "color.", cin, 4, 3, steps)?;
        Ok((d_hat, c_hat))
    }

    /// Maps N×4×R³ to N×4×R³ under the configured variant.
    pub fn forward(&self, g: &mut Graph, src: &mut dyn ParamSource, x: Var, steps: &[usize]) -> Result<Var> {
        match self.cfg.variant {
            Variant::Single => self.forward_single(g, src, x, steps),
            Variant::Double => {
                self.check_input(g, x, 4, steps)?;
                let d = g.slice_channels(x, 0, 1)?;
                let c = g.slice_channels(x, 1, 3)?;
                let (dh, ch) = self.forward_double(g, src, d, c, steps)?;
                g.concat(dh, ch)
            }
        }
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, params: &ParamStore, x: &Tensor, steps: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut b = Binder::new(params, false);
        let y = self.forward(&mut g, &mut b, xv, steps)?;
        Ok(g.value(y).clone())
    }
}
