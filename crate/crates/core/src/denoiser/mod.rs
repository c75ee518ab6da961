//! Noise predictors `eps(x_t, t)`.
//!
//! [`GaussianMixtureModel`] gives the exact posterior-mean denoiser of a
//! mixture prior and is the reference prior for sampler verification.
//! [`ConvDenoiser`] is a small trainable network for the denoising objective.

mod conv;
mod gmm;

pub use conv::{train_conv_denoiser, ConvDenoiser, TrainConfig, TrainOutcome};
pub use gmm::{GaussianMixtureModel, GmmComponent};

use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::field::Field;

pub trait Denoiser: Send + Sync {
    /// Predicted noise for `x_t` at step `t`; same shape as the input.
    fn predict_noise(&self, x_t: &Field, t: usize, schedule: &NoiseSchedule) -> Result<Field>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_noise(&self, x_t: &Field, t: usize, schedule: &NoiseSchedule) -> Result<Field> {
        (**self).predict_noise(x_t, t, schedule)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict_noise(&self, x_t: &Field, t: usize, schedule: &NoiseSchedule) -> Result<Field> {
        (**self).predict_noise(x_t, t, schedule)
    }
}
