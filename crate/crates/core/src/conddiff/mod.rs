//! Conditional latent diffusion: schedule, condition projectors, the 1-D U-Net
//! denoiser, ε-prediction training, and ancestral sampling.

mod condition;
mod model;
mod sample;
mod schedule;

pub use condition::{ConditionEmbedding, ConditionKind, ConditionSpec};
pub use model::{train_diffusion, DenoiserArch, DenoiserModel, DiffConfig};
pub use sample::{p_sample_batch, p_sample_loop, read_trajectory, record_trajectory, Trajectory};
pub use schedule::{make_schedule, q_sample, timestep_embedding, NoiseSchedule};
