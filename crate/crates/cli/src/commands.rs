use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use rayon::prelude::*;
use serde::Serialize;
use voxdiff::camera::{CameraPose, Intrinsics};
use voxdiff::diffusion::{
    ancestral_sample, guided_sample, normalize_dataset, write_train_csv, DenoiserCheckpoint, Guide, Observation, Trainer,
};
use voxdiff::fit::{self, FitConfig};
use voxdiff::image::Image;
use voxdiff::nn::UNet;
use voxdiff::render::{self, QuadratureConfig};
use voxdiff::rng::{self, Purpose};
use voxdiff::scenegen::{build_dataset, SceneDataset};
use voxdiff::voxgrid::VoxelGrid;

use crate::config::{load_config, RunConfig};
use crate::{Command, Common, DatasetCommand, EvalCommand, EXIT_INPUT, EXIT_OK, EXIT_RUNTIME};

/// Maps an error chain to an exit code: numerical and output failures are
/// runtime errors, everything else is an input error.
pub(crate) fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<voxdiff::Error>() {
            return match err {
                voxdiff::Error::NonFinite { .. } | voxdiff::Error::Shape(_) => EXIT_RUNTIME,
                voxdiff::Error::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => EXIT_RUNTIME,
                _ => EXIT_INPUT,
            };
        }
    }
    EXIT_INPUT
}

pub(crate) fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Dataset(DatasetCommand::Build { common }) => with_config(&common, "dataset build", |cfg| dataset_build(&common, cfg)),
        Command::Fit { scene, common } => with_config(&common, "fit", |cfg| fit_scenes(&common, cfg, scene.as_deref())),
        Command::Train { resume, ground_truth, common } => with_config(&common, "train", |cfg| train(&common, cfg, resume.as_deref(), ground_truth)),
        Command::Sample { checkpoint, count, common } => {
            let ck = checkpoint.ok_or_else(|| anyhow!("sample needs --checkpoint"))?;
            with_config(&common, "sample", |cfg| sample(&common, cfg, &ck, count))
        }
        Command::Reconstruct { checkpoint, scene, view, common } => {
            let ck = checkpoint.ok_or_else(|| anyhow!("reconstruct needs --checkpoint"))?;
            with_config(&common, "reconstruct", |cfg| reconstruct(&common, cfg, &ck, &scene, view))
        }
        Command::Render {
            grid,
            pose,
            output,
            size,
            radius,
            samples,
            common,
        } => with_config(&common, "", |cfg| render_grid(cfg, &grid, &pose, &output, size, radius, samples)),
        Command::Eval(EvalCommand::Psnr { a, b, common }) => with_config(&common, "", |_| eval_psnr(&a, &b)),
        Command::Verify { common } => with_config(&common, "", |_| verify(common.seed)),
    }
}

/// Resolves the configuration, sizes the worker pool and runs `f`. A
/// non-empty `record` names the command written to `run.json`.
fn with_config(common: &Common, record: &str, f: impl FnOnce(&RunConfig) -> Result<i32>) -> Result<i32> {
    let mut cfg = load_config(common.config.as_deref(), &common.overrides)?;
    cfg.fit.seed = common.seed;
    cfg.train.seed = common.seed;
    if common.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(EXIT_OK);
    }
    init_pool(common.jobs);
    if !record.is_empty() {
        write_run_json(&common.out, record, common.seed, &cfg)?;
    }
    f(&cfg)
}

fn init_pool(jobs: usize) {
    let mut n = if jobs == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        jobs
    };
    if let Some(cap) = std::env::var("VOXDIFF_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&c| c > 0) {
        n = n.min(cap);
    }
    // The global pool can be sized once per process; later calls keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

#[derive(Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
}

fn write_run_json(out: &Path, command: &str, seed: u64, cfg: &RunConfig) -> Result<()> {
    create_dir(out)?;
    let rec = RunRecord {
        tool: "voxdiff",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        config: cfg,
    };
    let mut text = serde_json::to_string_pretty(&rec)?;
    text.push('\n');
    write_file(&out.join("run.json"), text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| voxdiff::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| voxdiff::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn dataset_build(common: &Common, cfg: &RunConfig) -> Result<i32> {
    let dir = cfg.dataset_dir(&common.out);
    let ds = build_dataset(&cfg.dataset, common.seed, &dir)?;
    println!("built {} scenes × {} views in {}", ds.len(), cfg.dataset.n_views, dir.display());
    Ok(EXIT_OK)
}

fn open_dataset(common: &Common, cfg: &RunConfig) -> Result<SceneDataset> {
    let dir = cfg.dataset_dir(&common.out);
    SceneDataset::open(&dir).with_context(|| format!("opening dataset {} (run `voxdiff dataset build` first)", dir.display()))
}

fn scene_index(ds: &SceneDataset, scene: &str) -> Result<usize> {
    if let Some(i) = ds.scene_index(scene) {
        return Ok(i);
    }
    match scene.parse::<usize>() {
        Ok(i) if i < ds.len() => Ok(i),
        _ => bail!("unknown scene {scene:?}; the dataset has {} scenes (scene_0000 …)", ds.len()),
    }
}

fn fit_scenes(common: &Common, cfg: &RunConfig, scene: Option<&str>) -> Result<i32> {
    let mut ds = open_dataset(common, cfg)?;
    let picked: Vec<usize> = match scene {
        Some(s) => vec![scene_index(&ds, s)?],
        None => (0..ds.len()).collect(),
    };
    let trace_dir = common.out.join("fit");
    create_dir(&trace_dir)?;
    let intr = ds.intrinsics();
    let quad = ds.quadrature();
    let act = ds.activation();
    let resolution = ds.manifest.config.resolution;
    let fitted = picked
        .par_iter()
        .map(|&i| {
            let (train, held) = fit::split_views(ds.views(i)?, cfg.io.holdout_every);
            let fc = FitConfig { seed: common.seed, ..cfg.fit };
            let init = fit::initial_grid(resolution, &act, &fc)?;
            let res = fit::fit_relufield(&train, &held, &intr, init, &fc, &quad, &act)?;
            Ok((i, res))
        })
        .collect::<voxdiff::Result<Vec<_>>>()?;
    for (i, res) in fitted {
        let id = ds.manifest.scenes[i].id.clone();
        fit::write_trace_csv(&res.trace, trace_dir.join(format!("{id}.csv")))?;
        ds.set_fitted(i, &res.grid.quantized())?;
        match res.heldout_psnr {
            Some(p) => println!("{id}: held-out PSNR {p:.2} dB"),
            None => println!("{id}: fitted (no held-out views)"),
        }
    }
    Ok(EXIT_OK)
}

fn train(common: &Common, cfg: &RunConfig, resume: Option<&Path>, ground_truth: bool) -> Result<i32> {
    let ds = open_dataset(common, cfg)?;
    let grids = (0..ds.len())
        .map(|i| {
            if ground_truth {
                return Ok(ds.gt_grid(i)?);
            }
            ds.fitted_grid(i)?.ok_or_else(|| {
                anyhow!("{} has no fitted grid; run `voxdiff fit` or pass --ground-truth", ds.manifest.scenes[i].id)
            })
        })
        .collect::<Result<Vec<VoxelGrid>>>()?;
    let resolution = ds.manifest.config.resolution;
    let ck_dir = common.out.join("checkpoints");
    create_dir(&ck_dir)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = DenoiserCheckpoint::read(path)?;
            if ck.unet.resolution != resolution {
                bail!("checkpoint resolution {} does not match dataset resolution {resolution}", ck.unet.resolution);
            }
            let data = grids.iter().map(|g| ck.stats.grid_to_normalized(g)).collect();
            Trainer::resume(ck, data, cfg.train)?
        }
        None => {
            if cfg.unet.resolution != resolution {
                bail!("unet.resolution is {} but the dataset grids are {resolution}³", cfg.unet.resolution);
            }
            let (data, stats) = normalize_dataset(&grids)?;
            let net = UNet::new(cfg.unet.clone())?;
            let params = net.init(common.seed)?;
            let scheds = voxdiff::diffusion::ChannelSchedules::new(&cfg.schedule)?;
            Trainer::new(net, params, data, stats, scheds, *grids[0].bounds(), ds.activation(), cfg.train)?
        }
    };
    let every = cfg.train.checkpoint_every;
    let trace = trainer.run(|t, rec| {
        let done = t.step_count();
        if done % 100 == 0 {
            info!("step {done}: loss {:.5}, grad norm {:.3}", rec.loss, rec.grad_norm);
        }
        if every > 0 && done % every as u64 == 0 {
            t.checkpoint(true).write(&ck_dir.join(format!("step_{done:06}.vxck")))?;
        }
        Ok(())
    })?;
    let final_path = common.out.join("denoiser.vxck");
    trainer.checkpoint(true).write(&final_path)?;
    write_train_csv(&trace, &common.out.join("train.csv"))?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!("trained steps {}..={}: loss {:.5} -> {:.5}", first.step, last.step, first.loss, last.loss);
    }
    println!("checkpoint {}", final_path.display());
    Ok(EXIT_OK)
}

/// Camera for previews: on the dataset sphere, above and off-axis.
fn preview_camera(cfg: &RunConfig) -> Result<(CameraPose, Intrinsics)> {
    let r = cfg.dataset.radius;
    let dir = voxdiff::camera::normalize([0.6, -0.7, 0.4]);
    let pose = CameraPose::look_at(dir.map(|v| v * r), [0.0; 3])?;
    let intr = Intrinsics::framing_unit_cube(cfg.dataset.image_size, cfg.dataset.image_size, r)?;
    Ok((pose, intr))
}

fn sample(common: &Common, cfg: &RunConfig, ck_path: &Path, count: usize) -> Result<i32> {
    let ck = DenoiserCheckpoint::read(ck_path)?;
    let model = ck.denoiser()?;
    let scheds = ck.channel_schedules()?;
    let dir = common.out.join("samples");
    create_dir(&dir)?;
    let (pose, intr) = preview_camera(cfg)?;
    let quad = QuadratureConfig::for_resolution(ck.unet.resolution);
    for k in 0..count {
        let mut r = rng::stream(common.seed, Purpose::Sample, k as u64);
        let grid = ancestral_sample(&model, &scheds, &ck.stats, &mut r, ck.bounds, cfg.io.deterministic)?.quantized();
        let path = dir.join(format!("sample_{k:03}.vxgr"));
        grid.write(&path)?;
        if cfg.io.preview {
            render::render_image(&grid, &pose, &intr, &quad, &ck.activation)?.write_ppm(path.with_extension("ppm"))?;
        }
        println!("{}", path.display());
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct ReconstructReport {
    scene: String,
    view: usize,
    input_view_psnr: f64,
    other_views_psnr: Option<f64>,
}

fn reconstruct(common: &Common, cfg: &RunConfig, ck_path: &Path, scene: &str, view: usize) -> Result<i32> {
    let ds = open_dataset(common, cfg)?;
    let i = scene_index(&ds, scene)?;
    let n_views = ds.manifest.scenes[i].views.len();
    if view >= n_views {
        bail!("--view {view} is out of range: {} has {n_views} views", ds.manifest.scenes[i].id);
    }
    let ck = DenoiserCheckpoint::read(ck_path)?;
    let resolution = ds.manifest.config.resolution;
    if ck.unet.resolution != resolution {
        bail!("checkpoint resolution {} does not match dataset resolution {resolution}", ck.unet.resolution);
    }
    let model = ck.denoiser()?;
    let scheds = ck.channel_schedules()?;
    let mut views = ds.views(i)?;
    let observed = views.remove(view);
    let obs = Observation {
        view: observed,
        intrinsics: ds.intrinsics(),
        quadrature: ds.quadrature(),
        activation: ck.activation,
        bounds: ck.bounds,
    };
    let guide = Guide {
        config: cfg.guidance,
        observation: &obs,
    };
    let mut r = rng::stream(common.seed, Purpose::Sample, i as u64);
    let grid = guided_sample(&model, &scheds, &ck.stats, &guide, &mut r, cfg.io.deterministic)?.quantized();

    let id = ds.manifest.scenes[i].id.clone();
    let dir = common.out.join("reconstruct");
    create_dir(&dir)?;
    let stem = dir.join(format!("{id}_view{view:03}"));
    grid.write(stem.with_extension("vxgr"))?;
    let render_input = render::render_image(&grid, &obs.view.pose, &obs.intrinsics, &obs.quadrature, &obs.activation)?;
    if cfg.io.preview {
        render_input.write_ppm(stem.with_extension("ppm"))?;
    }
    let report = ReconstructReport {
        scene: id,
        view,
        input_view_psnr: render::psnr(&render_input.quantized(), &obs.view.image)?,
        other_views_psnr: fit::mean_psnr(&grid, &views, &obs.intrinsics, &obs.quadrature, &obs.activation)?,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_file(&stem.with_extension("json"), text.as_bytes())?;
    println!("{}", text.trim_end());
    Ok(EXIT_OK)
}

fn render_grid(cfg: &RunConfig, grid: &Path, pose: &[f64], output: &Path, size: usize, radius: f64, samples: usize) -> Result<i32> {
    let grid = VoxelGrid::read(grid)?;
    let pose = CameraPose::from_flat(&pose[..9], &pose[9..])?;
    let intr = Intrinsics::framing_unit_cube(size, size, radius)?;
    let mut quad = QuadratureConfig::for_resolution(grid.resolution());
    if samples > 0 {
        quad.n_samples = samples;
    }
    let img = render::render_image(&grid, &pose, &intr, &quad, &cfg.dataset.activation)?;
    write_image(&img, output)?;
    println!("{}", output.display());
    Ok(EXIT_OK)
}

fn is_pfm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm"))
}

fn write_image(img: &Image, path: &Path) -> Result<()> {
    if is_pfm(path) {
        img.write_pfm(path)?;
    } else {
        img.write_ppm(path)?;
    }
    Ok(())
}

fn read_image(path: &PathBuf) -> Result<Image> {
    Ok(if is_pfm(path) { Image::read_pfm(path)? } else { Image::read_ppm(path)? })
}

fn eval_psnr(a: &PathBuf, b: &PathBuf) -> Result<i32> {
    let (a, b) = (read_image(a)?, read_image(b)?);
    if a.width != b.width || a.height != b.height {
        bail!("images differ in size: {}x{} vs {}x{}", a.width, a.height, b.width, b.height);
    }
    println!("{:.4}", render::psnr(&a, &b)?);
    Ok(EXIT_OK)
}

fn verify(seed: u64) -> Result<i32> {
    let report = voxdiff::verify::run_suite(seed)?;
    let failed = report.iter().filter(|c| !c.passed).count();
    for c in &report {
        println!("{c}");
    }
    println!("{} checks, {failed} failed", report.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_RUNTIME })
}
