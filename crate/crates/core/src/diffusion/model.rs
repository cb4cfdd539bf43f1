use crate::error::{Error, Result};
use crate::nn::{Binder, Graph, ParamStore, Tensor, UNet};

/// Anything that maps a noisy normalized batch `N×4×R³` at per-sample step
/// indices to an estimate of the clean batch.
pub trait Denoiser: Sync {
    fn resolution(&self) -> usize;

    fn denoise(&self, x: &Tensor, steps: &[usize]) -> Result<Tensor>;

    /// Vector-Jacobian product `Jᵀ·cot` of [`Denoiser::denoise`] at `x`.
    fn denoise_vjp(&self, _x: &Tensor, _steps: &[usize], _cot: &[f64]) -> Result<Tensor> {
        Err(Error::invalid("this denoiser does not provide input gradients"))
    }
}

/// A U-Net with a fixed parameter set.
#[derive(Debug, Clone)]
pub struct UNetDenoiser {
    pub net: UNet,
    pub params: ParamStore,
}

impl UNetDenoiser {
    pub fn new(net: UNet, params: ParamStore) -> Self {
        Self { net, params }
    }
}

impl Denoiser for UNetDenoiser {
    fn resolution(&self) -> usize {
        self.net.config().resolution
    }

    fn denoise(&self, x: &Tensor, steps: &[usize]) -> Result<Tensor> {
        self.net.predict(&self.params, x, steps)
    }

    fn denoise_vjp(&self, x: &Tensor, steps: &[usize], cot: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let mut b = Binder::new(&self.params, false);
        let y = self.net.forward(&mut g, &mut b, xv, steps)?;
        let s = g.dot_const(y, cot)?;
        Ok(g.backward(s)?.get(xv))
    }
}
