//! Denoising diffusion over normalized voxel fields.
//!
//! Fields are handled as `4×R³` channel planes (density first, then three
//! color channels) and batches as `N×4×R³` tensors. Channel 0 is perturbed
//! under the density schedule and channels 1..3 under the color schedule:
//!
//! ```
//! use voxdiff::diffusion::{perturb, ChannelScheduleConfig, ChannelSchedules, ScheduleConfig};
//!
//! let scheds = ChannelSchedules::new(&ChannelScheduleConfig::shared(ScheduleConfig::cosine(4)))?;
//! let x = vec![1.0; 4];
//! let eps = vec![0.5; 4];
//! assert_eq!(perturb(&x, &[0], &eps, &scheds)?, x);
//! let (a, s) = scheds.density.eval(2)?;
//! assert_eq!(perturb(&x, &[2], &eps, &scheds)?[0], a + 0.5 * s);
//! # Ok::<(), voxdiff::Error>(())
//! ```

mod data;
mod loss;
mod model;
mod sample;
mod schedule;
mod train;

pub use data::{fit_norm_stats, grid_to_planes, normalize_dataset, perturb, perturb_shared, planes_to_grid, stack, NormStats};
pub use loss::{diffusion_loss, loss_weights, weighted_sse, LossConfig, Weighting};
pub use model::{Denoiser, UNetDenoiser};
pub use sample::{
    ancestral_sample, guidance_grad, guided_sample, posterior_step, sample_chain, Guide, GuidanceConfig, GuidanceMode, Observation,
};
pub use schedule::{ChannelScheduleConfig, ChannelSchedules, NoiseSchedule, ScheduleConfig, ScheduleKind};
pub use train::{write_train_csv, DenoiserCheckpoint, TrainConfig, TrainRecord, Trainer};
