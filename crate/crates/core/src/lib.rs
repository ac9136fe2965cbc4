pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod error;
pub mod hierarchy;
pub mod metrics;
pub mod nn;
pub mod patchgan;
pub mod patchvae;
pub mod resample;
pub mod schedule;
pub mod tensor;
pub mod video;
