use proptest::prelude::*;
use voxdiff::camera::{CameraPose, Intrinsics, Ray};
use voxdiff::fit::{self, FitConfig};
use voxdiff::render::{self, QuadratureConfig, View};
use voxdiff::scenegen::random_scene;
use voxdiff::scenegen::voxelize_scene;
use voxdiff::verify;
use voxdiff::voxgrid::{ActivationParams, Bounds, VoxelGrid};

#[test]
fn photometric_gradient_matches_finite_differences() {
    for seed in 0..2 {
        let g = verify::renderer_gradient(seed).unwrap();
        assert!(g.checked > 200, "only {} coordinates above the floor", g.checked);
        assert!(g.max_rel_err <= 1e-5, "seed {seed}: {}", g.max_rel_err);
    }
}

#[test]
fn compositing_weights_are_a_partition_of_unity() {
    assert!(verify::weight_normalization(2000, 3) <= 1e-6);
    assert!(verify::constant_medium_error().unwrap() <= 1e-3);
}

#[test]
fn verify_suite_passes() {
    let report = verify::run_suite(0).unwrap();
    assert!(report.len() > 20);
    for c in &report {
        assert!(c.passed, "{c}");
    }
}

#[test]
fn rendering_is_thread_count_independent() {
    let grid = verify::random_grid(6, 9);
    let act = ActivationParams::default();
    let intr = Intrinsics::framing_unit_cube(24, 24, 4.0).unwrap();
    let pose = CameraPose::look_at([0.5, -3.9, 0.8], [0.0; 3]).unwrap();
    let quad = QuadratureConfig {
        stratified: true,
        seed: 2,
        ..QuadratureConfig::for_resolution(6)
    };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let views = |img| vec![View { pose, image: img }];
    let target = render::render_image(&verify::random_grid(6, 10), &pose, &intr, &quad, &act).unwrap();
    let a = one.install(|| render::photometric_loss_and_grad(&grid, &views(target.clone()), &intr, &quad, &act).unwrap());
    let b = three.install(|| render::photometric_loss_and_grad(&grid, &views(target.clone()), &intr, &quad, &act).unwrap());
    assert_eq!(a, b);
}

#[test]
fn fitting_recovers_a_scene_and_regularizers_clean_hidden_space() {
    let act = ActivationParams::default();
    let gt = voxelize_scene(&random_scene(2), 8, &act).unwrap();
    let intr = Intrinsics::framing_unit_cube(16, 16, 4.0).unwrap();
    let quad = QuadratureConfig::for_resolution(8);
    let poses = voxdiff::camera::sample_spherical_poses(12, 4.0, 1).unwrap();
    let views: Vec<View> = poses
        .iter()
        .map(|&pose| View {
            pose,
            image: render::render_image(&gt, &pose, &intr, &quad, &act).unwrap(),
        })
        .collect();
    let (train, held) = fit::split_views(views, 4);
    let cfg = FitConfig {
        iterations: 400,
        rays_per_step: 512,
        lambda_density: 1e-3,
        lambda_color: 1e-3,
        ..FitConfig::default()
    };
    let init = fit::initial_grid(8, &act, &cfg).unwrap();
    let reg = fit::fit_relufield(&train, &held, &intr, init.clone(), &cfg, &quad, &act).unwrap();
    let plain = fit::fit_relufield(&train, &held, &intr, init, &cfg.unregularized(), &quad, &act).unwrap();
    let first = reg.trace[..20].iter().map(|r| r.photometric).sum::<f64>();
    let last = reg.trace[reg.trace.len() - 20..].iter().map(|r| r.photometric).sum::<f64>();
    assert!(last < 0.2 * first, "photometric loss {first} -> {last}");
    assert!(reg.heldout_psnr.unwrap() > 20.0);
    let poses: Vec<_> = train.iter().map(|v| v.pose).collect();
    let mask = fit::invisible_mask(&reg.grid, &poses, &intr, &quad, &act, 1e-3).unwrap();
    let (dr, cr) = fit::masked_deviation(&reg.grid, &mask, act.d_min, cfg.color_target);
    let (dp, cp) = fit::masked_deviation(&plain.grid, &mask, act.d_min, cfg.color_target);
    assert!(dr <= dp && cr <= cp, "reg ({dr}, {cr}) vs plain ({dp}, {cp})");
}

fn arb_grid() -> impl Strategy<Value = VoxelGrid> {
    (2usize..5, any::<u64>()).prop_map(|(r, seed)| verify::random_grid(r, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weights_are_nonnegative_and_sum_with_transmittance_to_one(
        grid in arb_grid(),
        o in prop::array::uniform3(-3.0f64..3.0),
        t in prop::array::uniform3(-0.9f64..0.9),
        n in 2usize..64,
        stratified in any::<bool>(),
    ) {
        prop_assume!(o.iter().any(|v| v.abs() > 1.2));
        let dir = voxdiff::camera::normalize([t[0] - o[0], t[1] - o[1], t[2] - o[2]]);
        let ray = Ray::clipped(o, dir, &Bounds::unit_cube());
        let quad = QuadratureConfig { n_samples: n, stratified, ..QuadratureConfig::for_resolution(2) };
        let s = render::render_ray(&grid, &ray, &quad, &ActivationParams::default());
        prop_assert!(s.weights.iter().all(|&w| w >= 0.0));
        prop_assert!((s.weights.iter().sum::<f64>() + s.t_end - 1.0).abs() <= 1e-12);
        prop_assert!(s.rgb.iter().all(|c| (0.0..=1.0 + 1e-12).contains(c)));
    }

    #[test]
    fn rendered_images_stay_in_unit_range(grid in arb_grid(), az in 0.0f64..6.28) {
        let intr = Intrinsics::framing_unit_cube(6, 5, 4.0).unwrap();
        let pose = CameraPose::look_at([4.0 * az.cos(), 4.0 * az.sin(), 0.7], [0.0; 3]).unwrap();
        let img = render::render_image(&grid, &pose, &intr, &QuadratureConfig::for_resolution(4), &ActivationParams::default()).unwrap();
        prop_assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
