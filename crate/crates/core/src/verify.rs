//! Self-checks run by `voxdiff verify`: gradient agreement with finite
//! differences and the numerical invariants of rendering and diffusion.

use rand::Rng as _;

use crate::camera::{self, CameraPose, Intrinsics, Ray};
use crate::diffusion::{perturb, perturb_shared, ChannelScheduleConfig, ChannelSchedules, NoiseSchedule, ScheduleConfig, ScheduleKind};
use crate::error::Result;
use crate::image::Image;
use crate::nn::gradcheck::{self, central_difference, relative_error, GradCheck, GRAD_FLOOR};
use crate::nn::UNetConfig;
use crate::render::{self, QuadratureConfig, View};
use crate::rng::{self, Purpose};
use crate::voxgrid::{ActivationParams, Bounds, VoxelGrid};

/// One line of the report.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn grad(name: impl Into<String>, g: GradCheck, tol: f64) -> Self {
        Self::new(name, g.max_rel_err <= tol, format!("max rel err {:.2e} over {} coords (tol {tol:.0e})", g.max_rel_err, g.checked))
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// A random `R³` grid with moderate densities, so that every voxel receives
/// some gradient from a camera at distance 4.
pub fn random_grid(resolution: usize, seed: u64) -> VoxelGrid {
    let mut r = rng::stream(seed, Purpose::Test, 0);
    let data = (0..resolution.pow(3) * 4)
        .map(|k| if k % 4 == 0 { r.random_range(-1.5..0.5) } else { r.random_range(-2.0..2.0) })
        .collect();
    VoxelGrid::from_data(resolution, Bounds::unit_cube(), data).expect("valid grid")
}

/// Analytic photometric gradient of a random 4³ grid against an 8×8
/// random target image versus central differences of the loss.
pub fn renderer_gradient(seed: u64) -> Result<GradCheck> {
    let act = ActivationParams::default();
    let mut grid = random_grid(4, seed);
    let intr = Intrinsics::framing_unit_cube(8, 8, 4.0)?;
    let pose = CameraPose::look_at([2.4, -2.6, 1.9], [0.0; 3])?;
    let quad = QuadratureConfig::for_resolution(4);
    let mut r = rng::stream(seed, Purpose::Test, 1);
    let image = Image::new(8, 8, (0..8 * 8 * 3).map(|_| r.random::<f64>()).collect())?;
    let views = [View { pose, image }];
    let analytic = render::photometric_grad(&grid, &views, &intr, &quad, &act)?;
    let bounds = *grid.bounds();
    let mut f = |x: &[f64]| -> Result<f64> {
        let g = VoxelGrid::from_data(4, bounds, x.to_vec())?;
        render::photometric_loss(&g, &views, &intr, &quad, &act)
    };
    let mut out = GradCheck { max_rel_err: 0.0, checked: 0 };
    let data = grid.data_mut();
    for i in 0..data.len() {
        let fd = central_difference(data, i, 1e-3, &mut f)?;
        if analytic[i].abs().max(fd.abs()) > GRAD_FLOOR {
            out.checked += 1;
            out.max_rel_err = out.max_rel_err.max(relative_error(analytic[i], fd, GRAD_FLOOR));
        }
    }
    Ok(out)
}

/// Largest `|Σw + T_end − 1|` over `n` random rays through a random grid.
pub fn weight_normalization(n: usize, seed: u64) -> f64 {
    let act = ActivationParams::default();
    let grid = random_grid(6, seed);
    let quad = QuadratureConfig {
        stratified: true,
        seed,
        ..QuadratureConfig::for_resolution(6)
    };
    let mut r = rng::stream(seed, Purpose::Test, 2);
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let origin = camera::normalize([rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r)]).map(|v| 3.0 * v);
        let target: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.8..0.8));
        let dir = camera::normalize([target[0] - origin[0], target[1] - origin[1], target[2] - origin[2]]);
        let ray = Ray::clipped(origin, dir, grid.bounds());
        let s = render::render_ray_keyed(&grid, &ray, &quad, &act, k as u64);
        worst = worst.max((s.weights.iter().sum::<f64>() + s.t_end - 1.0).abs());
    }
    worst
}

/// Error of the composite through a homogeneous medium against
/// `c·(1 − e^{−σL}) + bg·e^{−σL}` with 1024 samples.
pub fn constant_medium_error() -> Result<f64> {
    let act = ActivationParams::default();
    let (sigma, c) = (1.7, [0.8, 0.3, 0.1]);
    let fill = [act.raw_for_density(sigma), crate::voxgrid::logit(c[0]), crate::voxgrid::logit(c[1]), crate::voxgrid::logit(c[2])];
    let grid = VoxelGrid::filled(5, Bounds::unit_cube(), fill)?;
    let quad = QuadratureConfig {
        n_samples: 1024,
        ..QuadratureConfig::for_resolution(5)
    };
    let dir = camera::normalize([1.0, 0.4, -0.3]);
    let ray = Ray::clipped([-3.0, -1.2, 0.9], dir, grid.bounds());
    let len = ray.t_far - ray.t_near;
    let tt = (-sigma * len).exp();
    let s = render::render_ray(&grid, &ray, &quad, &act);
    Ok((0..3).map(|k| (s.rgb[k] - (c[k] * (1.0 - tt) + tt)).abs()).fold(0.0, f64::max))
}

fn schedule_checks(out: &mut Vec<Check>) -> Result<()> {
    let mut unit = 0.0f64;
    let mut monotone = true;
    let mut post_var = true;
    for t in [4, 64, 1000] {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = NoiseSchedule::new(ScheduleConfig { kind, ..ScheduleConfig::cosine(t) })?;
            for i in 0..=t {
                let (a, sg) = s.eval(i)?;
                unit = unit.max((a * a + sg * sg - 1.0).abs());
                if i > 0 {
                    monotone &= s.snr(i)? < s.snr(i - 1)?;
                    let var = s.posterior(i)?.2;
                    let prev = s.eval(i - 1)?.1;
                    post_var &= var >= 0.0 && var <= prev * prev + 1e-15;
                }
            }
        }
    }
    out.push(Check::new("schedule α²+σ²=1", unit <= 1e-12, format!("max deviation {unit:.1e}")));
    out.push(Check::new("schedule SNR strictly decreasing", monotone, "T ∈ {4, 64, 1000}, cosine and linear"));
    out.push(Check::new("posterior variance bounds", post_var, "0 ≤ var ≤ σ²_{i−1}"));
    Ok(())
}

fn perturbation_checks(out: &mut Vec<Check>) -> Result<()> {
    let sched = NoiseSchedule::new(ScheduleConfig::cosine(64))?;
    let shared = ChannelSchedules::shared(sched.clone());
    let mut r = rng::stream(11, Purpose::Test, 3);
    let x = rng::normal_vec(&mut r, 2 * 4 * 27);
    let e = rng::normal_vec(&mut r, x.len());
    out.push(Check::new("perturb identity at i=0", perturb(&x, &[0, 0], &e, &shared)? == x, "bit-exact"));
    let same = perturb(&x, &[5, 60], &e, &shared)? == perturb_shared(&x, &[5, 60], &e, &sched)?;
    out.push(Check::new("separate schedules reduce to shared", same, "bit-exact"));

    let cfg = ChannelScheduleConfig {
        density: ScheduleConfig::cosine(64),
        color: ScheduleConfig {
            kind: ScheduleKind::Linear,
            ..ScheduleConfig::cosine(64)
        },
    };
    let scheds = ChannelSchedules::new(&cfg)?;
    let n = 10_000;
    let x = rng::normal_vec(&mut r, n * 4);
    let e = rng::normal_vec(&mut r, n * 4);
    let y = perturb(&x, &vec![32; n], &e, &scheds)?;
    let var = |v: &[f64], pick: &dyn Fn(usize) -> bool| {
        let xs: Vec<f64> = v.iter().enumerate().filter(|(k, _)| pick(*k)).map(|(_, v)| *v).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let mut worst = 0.0f64;
    for (c, s) in [(0usize, &scheds.density), (1, &scheds.color)] {
        let pick = |k: usize| if c == 0 { k % 4 == 0 } else { k % 4 != 0 };
        let (a, sg) = s.eval(32)?;
        let want = a * a * var(&x, &pick) + sg * sg;
        worst = worst.max((var(&y, &pick) - want).abs() / want);
    }
    out.push(Check::new("perturbation variance", worst <= 0.05, format!("max relative deviation {worst:.3} over 10⁴ draws")));
    Ok(())
}

/// Runs the suite. Everything here finishes in a few seconds.
pub fn run_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    out.push(Check::grad("renderer gradient (4³, 8×8)", renderer_gradient(seed)?, 1e-5));
    let wn = weight_normalization(10_000, seed);
    out.push(Check::new("weights + transmittance = 1", wn <= 1e-6, format!("max deviation {wn:.1e} over 10⁴ rays")));
    let cm = constant_medium_error()?;
    out.push(Check::new("constant medium closed form", cm <= 1e-3, format!("max error {cm:.1e}")));
    for (name, g) in gradcheck::op_suite(seed)? {
        out.push(Check::grad(format!("op {name}"), g, 1e-5));
    }
    let cfg = UNetConfig {
        resolution: 4,
        width: 4,
        levels: 1,
        res_blocks: 1,
        attention_resolutions: vec![2],
        ..UNetConfig::default()
    };
    out.push(Check::grad("U-Net parameter spot check", gradcheck::unet_spot_check(&cfg, 20, seed)?, 1e-4));
    schedule_checks(&mut out)?;
    perturbation_checks(&mut out)?;
    Ok(out)
}
