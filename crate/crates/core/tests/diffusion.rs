use voxdiff::camera::{CameraPose, Intrinsics};
use voxdiff::diffusion::*;
use voxdiff::nn::{Tensor, UNet, UNetConfig};
use voxdiff::nn::gradcheck::{central_difference, relative_error};
use voxdiff::render::{self, QuadratureConfig, View};
use voxdiff::rng::{self, Purpose};
use voxdiff::scenegen::{random_scene, voxelize_scene};
use voxdiff::voxgrid::{ActivationParams, Bounds, VoxelGrid};

fn scheds(t: usize) -> ChannelSchedules {
    ChannelSchedules::new(&ChannelScheduleConfig::shared(ScheduleConfig::cosine(t))).unwrap()
}

/// Independent evaluation of the cosine rule.
fn cosine_alpha_bar(i: usize, t: usize) -> f64 {
    let s = 0.008;
    let f = |u: f64| (((u + s) / (1.0 + s)) * std::f64::consts::PI / 2.0).cos().powi(2);
    f(i as f64 / t as f64) / f(0.0)
}

struct Constant {
    r: usize,
    field: Vec<f64>,
}

impl Denoiser for Constant {
    fn resolution(&self) -> usize {
        self.r
    }
    fn denoise(&self, x: &Tensor, _steps: &[usize]) -> voxdiff::Result<Tensor> {
        let n = x.shape()[0];
        Tensor::new(x.shape().to_vec(), self.field.iter().cycle().take(n * self.field.len()).copied().collect())
    }
}

/// Maps any input to whichever of two fields is nearer in L2.
struct Nearest {
    r: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Denoiser for Nearest {
    fn resolution(&self) -> usize {
        self.r
    }
    fn denoise(&self, x: &Tensor, _steps: &[usize]) -> voxdiff::Result<Tensor> {
        let d = |g: &[f64]| x.data().iter().zip(g).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        let pick = if d(&self.a) <= d(&self.b) { &self.a } else { &self.b };
        Tensor::new(x.shape().to_vec(), pick.clone())
    }
}

#[test]
fn schedule_table_invariants() {
    for t in [4, 64, 1000] {
        let s = NoiseSchedule::new(ScheduleConfig::cosine(t)).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        for i in 0..=t {
            let (a, sg) = s.eval(i).unwrap();
            assert!((a * a + sg * sg - 1.0).abs() <= 1e-12);
        }
        for i in 1..=t {
            assert!(s.snr(i).unwrap() < s.snr(i - 1).unwrap(), "T={t} i={i}");
        }
        for i in 1..=t {
            let (_, _, var) = s.posterior(i).unwrap();
            let (_, sigma_prev) = s.eval(i - 1).unwrap();
            assert!(var >= 0.0 && var <= sigma_prev * sigma_prev + 1e-15);
        }
    }
}

#[test]
fn cosine_table_matches_formula_at_t4() {
    let s = NoiseSchedule::new(ScheduleConfig::cosine(4)).unwrap();
    let mut prev = -1.0;
    for i in 0..=4 {
        let ab = cosine_alpha_bar(i, 4);
        let (_, sg) = s.eval(i).unwrap();
        assert!((sg - (1.0 - ab).sqrt()).abs() < 1e-14);
        assert!(sg > prev);
        prev = sg;
    }
}

#[test]
fn snr_weights_match_table_differences() {
    let s = NoiseSchedule::new(ScheduleConfig::cosine(4)).unwrap();
    let snr = |i: usize| {
        let ab = cosine_alpha_bar(i, 4);
        ab / (1.0 - ab)
    };
    assert_eq!(s.snr_weight(1).unwrap(), 1e4);
    for i in 2..=4 {
        let w = s.snr_weight(i).unwrap();
        assert!(w > 0.0);
        let expect = (snr(i - 1) - snr(i)).min(1e4);
        assert!((w - expect).abs() <= 1e-9 * expect.max(1.0), "i={i}: {w} vs {expect}");
    }
}

#[test]
fn perturb_identity_and_affinity() {
    let sc = scheds(64);
    let mut r = rng::stream(1, Purpose::Test, 0);
    let v = rng::normal_vec(&mut r, 2 * 4 * 8);
    let e = rng::normal_vec(&mut r, v.len());
    assert_eq!(perturb(&v, &[0, 0], &e, &sc).unwrap(), v);
    let zeros = vec![0.0; v.len()];
    let only_noise = perturb(&zeros, &[10, 40], &e, &sc).unwrap();
    for (k, (&p, &n)) in only_noise.iter().zip(&e).enumerate() {
        let i = if k < 32 { 10 } else { 40 };
        assert_eq!(p, sc.density.eval(i).unwrap().1 * n);
    }
    let full = perturb(&v, &[10, 40], &e, &sc).unwrap();
    let signal = perturb(&v, &[10, 40], &zeros, &sc).unwrap();
    for k in 0..v.len() {
        assert!((full[k] - signal[k] - only_noise[k]).abs() < 1e-15);
    }
}

#[test]
fn perturbation_preserves_variance() {
    let cfg = ChannelScheduleConfig {
        density: ScheduleConfig::cosine(64),
        color: ScheduleConfig {
            kind: ScheduleKind::Linear,
            ..ScheduleConfig::cosine(64)
        },
    };
    let sc = ChannelSchedules::new(&cfg).unwrap();
    let mut r = rng::stream(2, Purpose::Test, 0);
    let n = 10_000;
    let v = rng::normal_vec(&mut r, n * 4);
    let e = rng::normal_vec(&mut r, n * 4);
    let steps = vec![32; n];
    let out = perturb(&v, &steps, &e, &sc).unwrap();
    let var_of = |xs: Vec<f64>| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let density: Vec<f64> = out.chunks(4).map(|f| f[0]).collect();
    let color: Vec<f64> = out.chunks(4).flat_map(|f| f[1..].to_vec()).collect();
    let vin_d = var_of(v.chunks(4).map(|f| f[0]).collect());
    let vin_c = var_of(v.chunks(4).flat_map(|f| f[1..].to_vec()).collect());
    for (got, vin, s) in [(var_of(density), vin_d, &sc.density), (var_of(color), vin_c, &sc.color)] {
        let (a, sg) = s.eval(32).unwrap();
        let expect = a * a * vin + sg * sg;
        assert!((got - expect).abs() <= 0.05 * expect, "{got} vs {expect}");
    }
}

#[test]
fn separate_schedules_reduce_to_shared() {
    let s = NoiseSchedule::new(ScheduleConfig::cosine(64)).unwrap();
    let sc = ChannelSchedules::shared(s.clone());
    let mut r = rng::stream(3, Purpose::Test, 0);
    let v = rng::normal_vec(&mut r, 3 * 4 * 27);
    let e = rng::normal_vec(&mut r, v.len());
    let steps = [1, 33, 64];
    assert_eq!(perturb(&v, &steps, &e, &sc).unwrap(), perturb_shared(&v, &steps, &e, &s).unwrap());
}

fn toy_grids(r: usize) -> Vec<VoxelGrid> {
    let act = ActivationParams::default();
    (0..3).map(|i| voxelize_scene(&random_scene(40 + i), r, &act).unwrap()).collect()
}

#[test]
fn normalization_statistics() {
    let grids = toy_grids(4);
    let (norm, stats) = normalize_dataset(&grids).unwrap();
    let group = |c0: usize, c1: usize| -> Vec<f64> {
        norm.iter().flat_map(|f| f[c0 * 64..c1 * 64].to_vec()).collect()
    };
    for xs in [group(0, 1), group(1, 4)] {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!(m.abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-9);
    }
    for (g, f) in grids.iter().zip(&norm) {
        let back = stats.normalized_to_grid(f, 4, Bounds::unit_cube()).unwrap();
        for (a, b) in back.data().iter().zip(g.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
    let flat = VoxelGrid::filled(4, Bounds::unit_cube(), [-10.0, 0.1, 0.2, 0.3]).unwrap();
    let (norm, stats) = normalize_dataset(&[flat]).unwrap();
    assert_eq!(stats.density_scale, 1.0);
    assert!(norm[0][..64].iter().all(|&v| v == 0.0));
}

#[test]
fn loss_closed_forms() {
    let sc = scheds(4);
    let stats = NormStats::identity();
    let v = Tensor::new(vec![1, 4, 1, 1, 1], vec![0.7, -0.2, 0.4, 1.1]).unwrap();
    let eps = vec![0.3, -0.1, 0.2, 0.5];
    let zero = Constant { r: 1, field: vec![0.0; 4] };
    let loss = diffusion_loss(&zero, &v, &[2], &eps, &sc, &stats, &LossConfig::default()).unwrap();
    let expect = 0.7f64.powi(2) + (0.2f64.powi(2) + 0.4f64.powi(2) + 1.1f64.powi(2)) / 3.0;
    assert!((loss - expect).abs() < 1e-14);

    let oracle = Constant { r: 1, field: v.data().to_vec() };
    assert_eq!(diffusion_loss(&oracle, &v, &[3], &eps, &sc, &stats, &LossConfig::default()).unwrap(), 0.0);

    let base = LossConfig::default();
    let inf = LossConfig {
        tau: f64::INFINITY,
        ..base
    };
    let vis = LossConfig { tau: 0.5, ..base };
    let l_base = diffusion_loss(&zero, &v, &[2], &eps, &sc, &stats, &base).unwrap();
    assert_eq!(l_base.to_bits(), diffusion_loss(&zero, &v, &[2], &eps, &sc, &stats, &inf).unwrap().to_bits());
    let l_vis = diffusion_loss(&zero, &v, &[2], &eps, &sc, &stats, &vis).unwrap();
    // D = 0.7 > τ adds one extra unit of color weight.
    assert!((l_vis - l_base - (0.2f64.powi(2) + 0.4f64.powi(2) + 1.1f64.powi(2)) / 3.0).abs() < 1e-14);
}

#[test]
fn snr_weighting_scales_groups() {
    let sc = scheds(4);
    let v = vec![1.0; 4];
    let w = loss_weights(&v, &[3], &sc, &NormStats::identity(), &LossConfig { weighting: Weighting::Snr, tau: f64::INFINITY }).unwrap();
    let ws = sc.density.snr_weight(3).unwrap();
    assert!((w[0] - ws).abs() < 1e-12 * ws);
    assert!((w[1] - ws / 3.0).abs() < 1e-12 * ws);
}

#[test]
fn posterior_collapse_and_mean() {
    let sc = scheds(4);
    let g = vec![0.3, -1.2, 0.8, 2.0];
    let oracle = Constant { r: 1, field: g.clone() };
    let mut r = rng::stream(0, Purpose::Test, 1);
    let noisy = vec![5.0, -7.0, 9.0, 0.1];
    assert_eq!(posterior_step(&oracle, &noisy, 1, &mut r, &sc, false).unwrap(), g);
    for i in 2..=4 {
        let (a_i, _) = sc.density.eval(i).unwrap();
        let (a_s, _) = sc.density.eval(i - 1).unwrap();
        let vi: Vec<f64> = g.iter().map(|x| a_i * x).collect();
        let mean = posterior_step(&oracle, &vi, i, &mut r, &sc, true).unwrap();
        for (m, x) in mean.iter().zip(&g) {
            assert!((m - a_s * x).abs() < 1e-12, "i={i}");
        }
    }
    assert!(posterior_step(&oracle, &noisy, 0, &mut r, &sc, false).is_err());
    assert!(posterior_step(&oracle, &noisy, 5, &mut r, &sc, false).is_err());
}

#[test]
fn constant_oracle_sampling() {
    let sc = scheds(16);
    let r = 2;
    let mut gr = rng::stream(4, Purpose::Test, 0);
    let g = rng::normal_vec(&mut gr, 4 * r * r * r);
    let oracle = Constant { r, field: g.clone() };
    let stats = NormStats::identity();
    let mut rng_a = rng::stream(9, Purpose::Sample, 0);
    let det = sample_chain(&oracle, &sc, &stats, &mut rng_a, true, None, None).unwrap();
    assert!(det.iter().zip(&g).all(|(a, b)| (a - b).abs() <= 1e-6));

    let total_var: f64 = (2..=16).map(|i| sc.density.posterior(i).unwrap().2).sum();
    let mut rng_b = rng::stream(9, Purpose::Sample, 1);
    let s = sample_chain(&oracle, &sc, &stats, &mut rng_b, false, None, None).unwrap();
    let rms = (s.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / g.len() as f64).sqrt();
    assert!(rms <= 3.0 * total_var.sqrt());

    let grid_a = ancestral_sample(&oracle, &sc, &stats, &mut rng::stream(5, Purpose::Sample, 0), Bounds::unit_cube(), false).unwrap();
    let grid_b = ancestral_sample(&oracle, &sc, &stats, &mut rng::stream(5, Purpose::Sample, 0), Bounds::unit_cube(), false).unwrap();
    assert_eq!(grid_a, grid_b);
    assert_eq!(grid_a.resolution(), r);
    assert!(grid_a.data().iter().all(|v| v.is_finite()));
}

fn observation(grid: &VoxelGrid, size: usize) -> Observation {
    let act = ActivationParams::default();
    let intr = Intrinsics::framing_unit_cube(size, size, 4.0).unwrap();
    let pose = CameraPose::look_at([2.5, -2.8, 1.6], [0.0; 3]).unwrap();
    let quad = QuadratureConfig::for_resolution(grid.resolution());
    let image = render::render_image(grid, &pose, &intr, &quad, &act).unwrap();
    Observation {
        view: View { pose, image },
        intrinsics: intr,
        quadrature: quad,
        activation: act,
        bounds: *grid.bounds(),
    }
}

fn noisy_cfg(lambda: f64) -> GuidanceConfig {
    GuidanceConfig {
        mode: GuidanceMode::Noisy,
        lambda_noisy: lambda,
        ..GuidanceConfig::default()
    }
}

#[test]
fn noisy_guidance_is_scaled_photometric_gradient() {
    let grid = voxelize_scene(&random_scene(3), 4, &ActivationParams::default()).unwrap();
    let stats = NormStats::identity();
    let v = grid_to_planes(&grid);
    let obs = observation(&grid, 8);
    let g = guidance_grad(&v, &obs, &noisy_cfg(1.0), &stats, None, None).unwrap();
    assert!(g.iter().all(|x| x.abs() <= 1e-12));

    let other = voxelize_scene(&random_scene(4), 4, &ActivationParams::default()).unwrap();
    let v = grid_to_planes(&other);
    let lambda = 0.37;
    let g = guidance_grad(&v, &obs, &noisy_cfg(lambda), &stats, None, None).unwrap();
    let pg = render::photometric_grad(&other, std::slice::from_ref(&obs.view), &obs.intrinsics, &obs.quadrature, &obs.activation).unwrap();
    let expect = grid_to_planes(&VoxelGrid::from_data(4, Bounds::unit_cube(), pg.iter().map(|x| -lambda * x).collect()).unwrap());
    assert_eq!(g, expect);
}

#[test]
fn noisy_guidance_matches_finite_differences() {
    let act = ActivationParams::default();
    let target = voxelize_scene(&random_scene(5), 4, &act).unwrap();
    let obs = observation(&target, 8);
    let mut r = rng::stream(6, Purpose::Test, 0);
    let mut v: Vec<f64> = rng::normal_vec(&mut r, 256);
    for x in v[..64].iter_mut() {
        *x = *x * 0.3 - 0.3;
    }
    let stats = NormStats {
        density_mean: 0.5,
        density_scale: 1.5,
        color_mean: 0.0,
        color_scale: 2.0,
    };
    let lambda = 2.0;
    let g = guidance_grad(&v, &obs, &noisy_cfg(lambda), &stats, None, None).unwrap();
    let mut f = |x: &[f64]| -> voxdiff::Result<f64> {
        let grid = stats.normalized_to_grid(x, 4, Bounds::unit_cube())?;
        Ok(-lambda * render::photometric_loss(&grid, std::slice::from_ref(&obs.view), &obs.intrinsics, &obs.quadrature, &act)?)
    };
    let mut worst: f64 = 0.0;
    for i in 0..v.len() {
        let fd = central_difference(&mut v, i, 1e-4, &mut f).unwrap();
        let e = relative_error(g[i], fd, 1e-8);
        worst = worst.max(e);
    }
    assert!(worst <= 1e-5, "max rel err {worst}");
}

#[test]
fn denoised_guidance_requires_model_and_supports_jacobian() {
    let grid = voxelize_scene(&random_scene(8), 4, &ActivationParams::default()).unwrap();
    let obs = observation(&grid, 6);
    let stats = NormStats::identity();
    let v = vec![0.1; 256];
    let cfg = GuidanceConfig {
        mode: GuidanceMode::Denoised,
        ..GuidanceConfig::default()
    };
    assert!(guidance_grad(&v, &obs, &cfg, &stats, None, Some(1)).is_err());

    let net = UNet::new(UNetConfig {
        resolution: 4,
        width: 4,
        levels: 1,
        res_blocks: 1,
        ..UNetConfig::default()
    })
    .unwrap();
    let mut params = net.init(3).unwrap();
    let mut r = rng::stream(3, Purpose::Test, 3);
    for (_, t) in params.iter_mut() {
        for x in t.data_mut() {
            *x += 0.1 * rng::normal(&mut r);
        }
    }
    let model = UNetDenoiser::new(net, params);
    let full = GuidanceConfig { full_jacobian: true, ..cfg };
    let mut v: Vec<f64> = rng::normal_vec(&mut r, 256);
    let g = guidance_grad(&v, &obs, &full, &stats, Some(&model), Some(2)).unwrap();
    let mut f = |x: &[f64]| -> voxdiff::Result<f64> {
        let xt = Tensor::new(vec![1, 4, 4, 4, 4], x.to_vec())?;
        let xhat = model.denoise(&xt, &[2])?;
        let grid = stats.normalized_to_grid(xhat.data(), 4, Bounds::unit_cube())?;
        Ok(-render::photometric_loss(&grid, std::slice::from_ref(&obs.view), &obs.intrinsics, &obs.quadrature, &obs.activation)?)
    };
    for i in (0..256).step_by(17) {
        let fd = central_difference(&mut v, i, 1e-4, &mut f).unwrap();
        assert!(relative_error(g[i], fd, 1e-8) <= 1e-5, "coord {i}: {} vs {fd}", g[i]);
    }
}

#[test]
fn guided_with_zero_steps_is_ancestral() {
    let sc = scheds(8);
    let r = 4;
    let mut gr = rng::stream(4, Purpose::Test, 0);
    let a = rng::normal_vec(&mut gr, 4 * r * r * r);
    let b = rng::normal_vec(&mut gr, 4 * r * r * r);
    let model = Nearest { r, a, b };
    let stats = NormStats::identity();
    let grid = voxelize_scene(&random_scene(1), r, &ActivationParams::default()).unwrap();
    let obs = observation(&grid, 6);
    let guide = Guide {
        config: GuidanceConfig { k: 0, ..GuidanceConfig::default() },
        observation: &obs,
    };
    for seed in 0..3 {
        let u = ancestral_sample(&model, &sc, &stats, &mut rng::stream(seed, Purpose::Sample, 0), Bounds::unit_cube(), false).unwrap();
        let g = guided_sample(&model, &sc, &stats, &guide, &mut rng::stream(seed, Purpose::Sample, 0), false).unwrap();
        assert_eq!(u, g);
    }
}

fn two_scene_grids(r: usize) -> (VoxelGrid, VoxelGrid) {
    use voxdiff::scenegen::{Primitive, SceneSpec, Shape};
    let act = ActivationParams::default();
    let ball = |x: f64, albedo: [f64; 3]| Primitive {
        shape: Shape::Sphere { radius: 0.45 },
        center: [x, 0.0, 0.0],
        albedo,
        density: 80.0,
    };
    let a = SceneSpec::new(vec![ball(-0.45, [0.85, 0.15, 0.1])], 0).unwrap();
    let b = SceneSpec::new(vec![ball(0.45, [0.1, 0.2, 0.85])], 0).unwrap();
    (voxelize_scene(&a, r, &act).unwrap(), voxelize_scene(&b, r, &act).unwrap())
}

#[test]
fn guidance_selects_the_observed_grid() {
    let r = 8;
    let (ga, gb) = two_scene_grids(r);
    let stats = fit_norm_stats(&[ga.clone(), gb.clone()]).unwrap();
    let model = Nearest {
        r,
        a: stats.grid_to_normalized(&ga),
        b: stats.grid_to_normalized(&gb),
    };
    let sc = scheds(16);
    let obs = observation(&ga, 12);
    let guide = Guide {
        config: GuidanceConfig {
            k: 5,
            step_size: 1000.0,
            mode: GuidanceMode::Both,
            ..GuidanceConfig::default()
        },
        observation: &obs,
    };
    let mut hits = 0;
    for seed in 0..20 {
        let out = guided_sample(&model, &sc, &stats, &guide, &mut rng::stream(seed, Purpose::Sample, 0), false).unwrap();
        let d = |g: &VoxelGrid| out.data().iter().zip(g.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        if d(&ga) < d(&gb) {
            hits += 1;
        }
    }
    assert!(hits >= 19, "{hits}/20 runs chose the observed grid");
}

fn tiny_trainer(cfg: TrainConfig) -> Trainer {
    let grids = toy_grids(4);
    let (data, stats) = normalize_dataset(&grids).unwrap();
    let net = UNet::new(UNetConfig {
        resolution: 4,
        width: 4,
        levels: 1,
        res_blocks: 1,
        ..UNetConfig::default()
    })
    .unwrap();
    let params = net.init(cfg.seed).unwrap();
    Trainer::new(net, params, data, stats, scheds(16), Bounds::unit_cube(), ActivationParams::default(), cfg).unwrap()
}

#[test]
fn clipping_bounds_every_step() {
    let mut t = tiny_trainer(TrainConfig {
        clip_norm: 0.001,
        iterations: 20,
        batch_size: 2,
        lr: 1e-3,
        ..TrainConfig::default()
    });
    let trace = t.run(|_, _| Ok(())).unwrap();
    assert_eq!(trace.len(), 20);
    assert!(trace.iter().all(|r| r.clipped_norm <= 0.001 + 1e-12));
    assert!(trace.iter().any(|r| r.grad_norm > 0.001));
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let cfg = TrainConfig {
        iterations: 12,
        batch_size: 2,
        lr: 1e-3,
        warmup: 4,
        seed: 21,
        ..TrainConfig::default()
    };
    let mut straight = tiny_trainer(cfg);
    let full = straight.run(|_, _| Ok(())).unwrap();

    let mut first = tiny_trainer(TrainConfig { iterations: 5, ..cfg });
    first.run(|_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.vxck");
    first.checkpoint(true).write(&path).unwrap();
    let ck = DenoiserCheckpoint::read(&path).unwrap();
    assert_eq!(ck, first.checkpoint(true));
    let (data, _) = normalize_dataset(&toy_grids(4)).unwrap();
    let mut resumed = Trainer::resume(ck, data, cfg).unwrap();
    let rest = resumed.run(|_, _| Ok(())).unwrap();
    assert_eq!(rest.len(), 7);
    for (a, b) in rest.iter().zip(&full[5..]) {
        assert_eq!(a.step, b.step);
        assert!((a.loss - b.loss).abs() <= 1e-9);
    }
    assert_eq!(resumed.params(), straight.params());
}

#[test]
fn training_is_deterministic_and_writes_trace() {
    let cfg = TrainConfig {
        iterations: 4,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let a = tiny_trainer(cfg).run(|_, _| Ok(())).unwrap();
    let b = tiny_trainer(cfg).run(|_, _| Ok(())).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("trace.csv");
    write_train_csv(&a, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("step,loss,grad_norm,lr\n"));
    assert_eq!(text.lines().count(), 5);
}
