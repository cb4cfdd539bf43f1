//! The `voxdiff` command line: dataset construction, per-scene fitting,
//! denoiser training, sampling, single-view reconstruction, rendering and
//! self-verification.
//!
//! [`run`] takes the full argument vector and returns the process exit
//! code: 0 on success, 1 on input errors (bad flags, configuration, missing
//! or corrupt files) and 2 on runtime failures.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{load_config, parse_config, IoConfig, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "voxdiff", version, about = "Diffusion priors over voxel radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub(crate) struct Common {
    /// JSON run configuration; omitted sections and fields take defaults
    /// [default: none]
    #[arg(long, value_name = "PATH", global = true)]
    config: Option<PathBuf>,

    /// Override one configuration value, e.g. `--set train.lr=0.001`.
    /// Applied after the file, in order [default: none]
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Root seed; every random stream of the run derives from it.
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,

    /// Run directory that receives all outputs and `run.json`.
    #[arg(long, value_name = "DIR", default_value = "run", global = true)]
    out: PathBuf,

    /// Worker threads (0 = all cores). `VOXDIFF_THREADS` caps the pool.
    #[arg(long, default_value_t = 0, global = true)]
    jobs: usize,

    /// Print the resolved configuration (defaults plus overrides) as JSON
    /// and exit [default: off]
    #[arg(long, default_value_t = false, global = true)]
    print_config: bool,
}

#[derive(Debug, Subcommand)]
pub(crate) enum Command {
    /// Procedural scene datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Fit a regularized grid to the posed views of one scene or all scenes.
    Fit {
        /// Scene id (e.g. scene_0003) [default: all scenes]
        #[arg(long)]
        scene: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the denoiser on the dataset's fitted grids.
    Train {
        /// Continue from a checkpoint that carries optimizer state [default:
        /// none]
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Train on ground-truth grids instead of fitted ones [default: off]
        #[arg(long, default_value_t = false)]
        ground_truth: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Draw unconditional samples from a trained denoiser.
    Sample {
        /// Trained denoiser checkpoint.
        #[arg(long, value_name = "PATH", required = true)]
        checkpoint: Option<PathBuf>,
        /// Number of samples.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct a scene from one of its views with guided sampling.
    Reconstruct {
        /// Trained denoiser checkpoint.
        #[arg(long, value_name = "PATH", required = true)]
        checkpoint: Option<PathBuf>,
        /// Scene id or index.
        #[arg(long)]
        scene: String,
        /// Index of the observed view.
        #[arg(long, default_value_t = 63)]
        view: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Render a grid file from a camera pose.
    Render {
        /// Grid file (.vxgr).
        #[arg(long, value_name = "PATH")]
        grid: PathBuf,
        /// Camera-to-world pose: 9 rotation entries (row-major) then 3
        /// position coordinates.
        #[arg(long, num_args = 12, value_name = "X", allow_negative_numbers = true, required = true)]
        pose: Vec<f64>,
        /// Output image; `.pfm` writes floats, anything else binary PPM.
        #[arg(long, value_name = "PATH", default_value = "render.ppm")]
        output: PathBuf,
        /// Image width and height in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Camera distance used to frame the unit cube.
        #[arg(long, default_value_t = 4.0)]
        radius: f64,
        /// Samples per ray (0 = twice the grid resolution).
        #[arg(long, default_value_t = 0)]
        samples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the gradient and invariant self-check suite.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Subcommand)]
pub(crate) enum DatasetCommand {
    /// Generate scenes, ground-truth grids and posed views.
    Build {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Subcommand)]
pub(crate) enum EvalCommand {
    /// PSNR in dB between two images of equal size.
    Psnr {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INPUT,
            };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let code = commands::exit_code(&e);
            eprintln!("error: {e:#}");
            code
        }
    }
}
