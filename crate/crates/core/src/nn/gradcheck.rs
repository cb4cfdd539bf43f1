//! Finite-difference checks for reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::{self, Purpose};

/// Outcome of one gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
        }
    }
}

/// `|a − b| / max(|a|, |b|)`, or 0 when both magnitudes are below `floor`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m < floor {
        0.0
    } else {
        (a - b).abs() / m
    }
}

/// Richardson-extrapolated central difference of `f` along coordinate `i`;
/// truncation error is `O(h⁴)`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
    let x0 = x[i];
    let mut diff = |step: f64, x: &mut [f64]| -> Result<f64> {
        x[i] = x0 + step;
        let fp = f(x)?;
        x[i] = x0 - step;
        let fm = f(x)?;
        x[i] = x0;
        Ok((fp - fm) / (2.0 * step))
    };
    let d1 = diff(h, x)?;
    let d2 = diff(h / 2.0, x)?;
    Ok((4.0 * d2 - d1) / 3.0)
}

/// Gradient floor below which coordinates are not compared.
pub const GRAD_FLOOR: f64 = 1e-8;

/// Checks every input coordinate of `build` against finite differences of
/// the scalar `Σ c_j y_j`, where `y` is the built output and `c` a fixed
/// random projection.
pub fn check_op<F>(inputs: &[Tensor], seed: u64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let n_out = g.value(y).numel();
    let mut r = rng::stream(seed, Purpose::Test, 0);
    let coeffs = rng::normal_vec(&mut r, n_out);
    let loss = g.dot_const(y, &coeffs)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        let mut flat = input.data().to_vec();
        let shape = input.shape().to_vec();
        let mut eval = |x: &[f64]| -> Result<f64> {
            let mut g = Graph::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if j == k {
                        g.constant(Tensor::from_parts(shape.clone(), x.to_vec()))
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect();
            let y = build(&mut g, &vs)?;
            let l = g.dot_const(y, &coeffs)?;
            Ok(g.value(l).item())
        };
        for i in 0..flat.len() {
            let numeric = central_difference(&mut flat, i, 1e-3, &mut eval)?;
            let a = analytic.data()[i];
            if a.abs().max(numeric.abs()) > GRAD_FLOOR {
                report.checked += 1;
            }
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric, GRAD_FLOOR));
        }
    }
    Ok(report)
}

/// One named isolated check per differentiable op, all on inputs of at most
/// 4³ voxels.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut r = rng::stream(seed, Purpose::Test, 1);
    let mut rand = |shape: &[usize]| -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), rng::normal_vec(&mut r, n))
    };
    let vol = [2, 2, 4, 4, 4];
    let mut out = Vec::new();

    let ins = [rand(&vol), rand(&[3, 2, 3, 3, 3]), rand(&[3])];
    out.push(("conv3d k=3", check_op(&ins, seed, |g, v| g.conv3d(v[0], v[1], v[2]))?));

    let ins = [rand(&vol), rand(&[3, 2, 1, 1, 1]), rand(&[3])];
    out.push(("conv3d k=1", check_op(&ins, seed, |g, v| g.conv3d(v[0], v[1], v[2]))?));

    let ins = [rand(&[2, 4, 2, 2, 2]), rand(&[4]), rand(&[4])];
    out.push(("group_norm", check_op(&ins, seed, |g, v| g.group_norm(v[0], v[1], v[2], 2))?));

    let ins = [rand(&vol)];
    out.push(("silu", check_op(&ins, seed, |g, v| Ok(g.silu(v[0])))?));

    let ins = [rand(&vol), rand(&vol)];
    out.push(("add", check_op(&ins, seed, |g, v| g.add(v[0], v[1]))?));

    let ins = [rand(&vol), rand(&[2, 2])];
    out.push(("add_channel", check_op(&ins, seed, |g, v| g.add_channel(v[0], v[1]))?));

    let ins = [rand(&[3, 5]), rand(&[4, 5]), rand(&[4])];
    out.push(("linear", check_op(&ins, seed, |g, v| g.linear(v[0], v[1], v[2]))?));

    let ins = [rand(&[2, 1, 4, 4, 4]), rand(&[2, 2, 4, 4, 4])];
    out.push(("concat", check_op(&ins, seed, |g, v| g.concat(v[0], v[1]))?));

    let ins = [rand(&[2, 3, 4, 4, 4])];
    out.push(("slice_channels", check_op(&ins, seed, |g, v| g.slice_channels(v[0], 1, 2))?));

    let ins = [rand(&vol)];
    out.push(("avg_pool2", check_op(&ins, seed, |g, v| g.avg_pool2(v[0]))?));

    let ins = [rand(&[2, 2, 2, 2, 2])];
    out.push(("upsample2", check_op(&ins, seed, |g, v| g.upsample2(v[0]))?));

    let ins = [rand(&[1, 2, 2, 2, 2]), rand(&[1, 2, 2, 2, 2]), rand(&[1, 2, 2, 2, 2])];
    out.push(("attention", check_op(&ins, seed, |g, v| g.attention(v[0], v[1], v[2]))?));

    let ins = [rand(&vol)];
    out.push(("scale", check_op(&ins, seed, |g, v| Ok(g.scale(v[0], -1.7)))?));

    let target = rand(&vol).into_data();
    let weights: Vec<f64> = rand(&vol).data().iter().map(|w| w.abs()).collect();
    let ins = [rand(&vol)];
    out.push(("weighted_sse", check_op(&ins, seed, |g, v| g.weighted_sse(v[0], &target, &weights))?));

    let coeffs = rand(&vol).into_data();
    let ins = [rand(&vol)];
    out.push(("dot_const", check_op(&ins, seed, |g, v| g.dot_const(v[0], &coeffs))?));

    Ok(out)
}

/// End-to-end check of `n` randomly chosen U-Net parameter gradients.
/// Parameters are perturbed away from their initialization first, so that
/// zero-initialized layers do not mask upstream gradients.
pub fn unet_spot_check(cfg: &super::UNetConfig, n: usize, seed: u64) -> Result<GradCheck> {
    use super::{Binder, UNet};
    use rand::Rng as _;

    let net = UNet::new(cfg.clone())?;
    let mut params = net.init(seed)?;
    let mut r = rng::stream(seed, Purpose::Test, 2);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng::normal(&mut r);
        }
    }
    let res = cfg.resolution;
    let x = Tensor::from_parts(vec![1, 4, res, res, res], rng::normal_vec(&mut r, 4 * res * res * res));
    let coeffs = rng::normal_vec(&mut r, x.numel());
    let steps = [7usize];

    let loss_of = |p: &super::ParamStore| -> Result<f64> {
        let y = net.predict(p, &x, &steps)?;
        Ok(super::kernels::dot(y.data(), &coeffs))
    };

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut binder = Binder::new(&params, true);
    let y = net.forward(&mut g, &mut binder, xv, &steps)?;
    let l = g.dot_const(y, &coeffs)?;
    let mut grads = g.backward(l)?;
    let analytic = binder.gradients(&mut grads);

    let names: Vec<String> = params.names().cloned().collect();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
    };
    for _ in 0..n {
        let name = &names[r.random_range(0..names.len())];
        let len = params.get(name).expect("listed name").numel();
        let i = r.random_range(0..len);
        let a = analytic.get(name).expect("gradient per parameter").data()[i];
        let mut work = params.clone();
        let mut flat = params.get(name).expect("listed name").data().to_vec();
        let mut eval = |v: &[f64]| -> Result<f64> {
            work.get_mut(name).expect("listed name").data_mut().copy_from_slice(v);
            loss_of(&work)
        };
        let numeric = central_difference(&mut flat, i, 1e-3, &mut eval)?;
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric, GRAD_FLOOR));
    }
    Ok(report)
}
