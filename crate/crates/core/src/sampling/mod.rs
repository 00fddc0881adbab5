//! Noising kernels, reverse samplers and time schedules.

mod ancestral;
mod export;
mod kernels;
mod schedule;

pub use ancestral::{ancestral_sample, cm_multistep_sample, SampleBatch};
pub use export::{read_samples_csv, write_samples_csv};
pub use kernels::{ddim_kernel, ddim_sigma, ddim_step, euler_step, forward_noise, noise};
pub use schedule::{log_schedule, rho_schedule, Schedule, ScheduleRule};
