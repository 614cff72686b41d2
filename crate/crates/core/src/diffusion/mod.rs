//! Diffusion substrate: schedules, guidance, training stages and samplers.

pub mod guidance;
pub mod sample;
pub mod schedule;
pub mod train;

pub use guidance::{cfg_combine, GuidanceConfig};
pub use schedule::{ddim_loop, ddim_step, ddim_timesteps, DdimConfig, NoiseSchedule, ScheduleKind};
pub use train::{Stage, StageConfig};
