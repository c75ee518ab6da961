//! Unsupervised deblurring of precipitation fields.
//!
//! A blurry forecast `y'` is modelled as `conv(K, y)` for an unknown kernel
//! `K`. [`sampler::postcast_deblur`] runs a diffusion sampler whose clean-field
//! estimate is pulled toward explaining `y'` while `K` is fitted on the fly.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod field;
pub mod io;
pub mod kernel;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod synthetic;

pub use config::RunConfig;
pub use denoiser::{ConvDenoiser, Denoiser, GaussianMixtureModel};
pub use diffusion::{linear_schedule, NoiseSchedule};
pub use error::{Error, Result};
pub use field::{Field, Units};
pub use kernel::BlurKernel;
pub use metrics::{CsiReport, CsiScore, DatasetTag};
pub use sampler::{postcast_deblur, GuidanceConfig, SamplerConfig, SamplerTrace, StepRecord};
pub use synthetic::{BlurFamily, FieldSpec, PlantSpec, PlantedPair};
