//! Reverse diffusion guided by a blurry prediction.
//!
//! Each step estimates the clean field, measures how well the current kernel
//! maps it onto the blurry target, derives a guidance scale from that
//! distance, shifts the clean estimate down the distance gradient, samples
//! from the resulting posterior and finally takes one gradient step on the
//! kernel itself. No paired data is involved: the kernel is learned from
//! scratch during sampling.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{estimate_x0, NoiseSchedule};
use crate::error::{Error, Result};
use crate::field::{Field, Units};
use crate::kernel::{self, init_kernel, BlurKernel};
use crate::rng::{derived, normal_field, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrPolicy {
    /// `lr * cos^2(pi/2 * (T - t) / T)`, full rate at the first reverse step.
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lr: f64,
    pub lr_policy: LrPolicy,
    /// Additive constant in the scale numerator.
    pub c: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Lower bound on the distance in the scale denominator.
    pub loss_floor: f64,
    pub clamp_x0: bool,
    /// Bypasses auto-scaling when set.
    pub fixed_scale: Option<f64>,
    /// Freezes the kernel at its initial value.
    pub fixed_kernel: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            lr_policy: LrPolicy::Cosine,
            c: 0.0,
            scale_min: 0.0,
            scale_max: 1e6,
            loss_floor: 1e-12,
            clamp_x0: true,
            fixed_scale: None,
            fixed_kernel: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::param("lr", format!("{} must be > 0", self.lr)));
        }
        if !(self.scale_min <= self.scale_max) {
            return Err(Error::param(
                "scale_min",
                format!("{} exceeds scale_max {}", self.scale_min, self.scale_max),
            ));
        }
        if !(self.loss_floor > 0.0) {
            return Err(Error::param("loss_floor", format!("{} must be > 0", self.loss_floor)));
        }
        if let Some(s) = self.fixed_scale {
            if !s.is_finite() {
                return Err(Error::param("fixed_scale", "must be finite"));
            }
        }
        if !self.c.is_finite() {
            return Err(Error::param("C", "must be finite"));
        }
        Ok(())
    }

    /// Kernel learning rate at reverse step `t` of `steps`.
    pub fn lr_at(&self, t: usize, steps: usize) -> f64 {
        match self.lr_policy {
            LrPolicy::Constant => self.lr,
            LrPolicy::Cosine => {
                let progress = (steps - t) as f64 / steps as f64;
                self.lr * (FRAC_PI_2 * progress).cos().powi(2)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelInit {
    pub size: usize,
    pub mean: f64,
    pub std: f64,
}

impl Default for KernelInit {
    fn default() -> Self {
        Self {
            size: kernel::DEFAULT_KERNEL_SIZE,
            mean: kernel::DEFAULT_INIT_MEAN,
            std: kernel::DEFAULT_INIT_STD,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kernel: KernelInit,
    pub guidance: GuidanceConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Distance at the pre-guidance clean estimate.
    pub loss: f64,
    pub scale: f64,
    /// Kernel mean after this step's update.
    pub kernel_mean: f64,
}

/// Everything one reverse step produced; the extra fields feed diagnostics.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub x_prev: Field,
    pub record: StepRecord,
    pub x_tilde0: Field,
    pub grad_x0: Field,
    pub mean_unguided: Field,
    pub mean_guided: Field,
    pub variance: f64,
}

#[derive(Debug, Clone)]
pub struct SamplerTrace {
    /// One record per reverse step, in execution order (`t = T` first).
    pub records: Vec<StepRecord>,
    /// Deblurred field in data units, clamped to `[0, 1]`.
    pub x0: Field,
    pub kernel: BlurKernel,
}

/// A failed run with the records completed before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub partial: Vec<StepRecord>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} after {} completed steps", self.error, self.partial.len())
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

fn finite(field: &Field, step: usize, line: u8, what: &'static str) -> Result<()> {
    if field.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { step, line, what })
    }
}

/// Guidance strength from the first-order expansion of the guidance
/// log-likelihood around the unguided mean:
/// `s = clamp(((x_t - mu) . grad_x - C) / max(loss, floor), s_min, s_max)`.
pub fn auto_scale(
    x_t: &Field,
    mu: &Field,
    grad_x: &Field,
    loss: f64,
    config: &GuidanceConfig,
    step: usize,
) -> Result<f64> {
    if let Some(s) = config.fixed_scale {
        return Ok(s);
    }
    x_t.check_same_shape(mu)?;
    x_t.check_same_shape(grad_x)?;
    if !loss.is_finite() || loss < 0.0 {
        return Err(Error::Numeric {
            step,
            line: 4,
            what: "distance in guidance scale",
        });
    }
    let numer: f64 = x_t
        .values()
        .iter()
        .zip(mu.values())
        .zip(grad_x.values())
        .map(|((x, m), g)| (x - m) * g)
        .sum::<f64>()
        - config.c;
    let raw = numer / loss.max(config.loss_floor);
    if !raw.is_finite() {
        return Err(Error::Numeric {
            step,
            line: 4,
            what: "guidance scale",
        });
    }
    Ok(raw.clamp(config.scale_min, config.scale_max))
}

fn add_noise(mean: &Field, variance: f64, t: usize, rng: &mut impl Rng) -> Field {
    if t <= 1 {
        return mean.clone();
    }
    let sd = variance.sqrt();
    mean.map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
}

/// One unguided DDPM ancestral step.
pub fn ancestral_step(
    schedule: &NoiseSchedule,
    denoiser: &impl Denoiser,
    x_t: &Field,
    t: usize,
    clamp_x0: bool,
    rng: &mut impl Rng,
) -> Result<Field> {
    let eps = denoiser.predict_noise(x_t, t, schedule)?;
    let mut x0 = estimate_x0(schedule, x_t, t, &eps)?;
    if clamp_x0 {
        x0 = x0.clamp(-1.0, 1.0);
    }
    finite(&x0, t, 2, "clean estimate")?;
    let (c0, ct) = schedule.posterior_coefficients(t);
    let mean = x0.lin_comb(c0, x_t, ct);
    let x_prev = add_noise(&mean, schedule.posterior_variance(t), t, rng);
    finite(&x_prev, t, 8, "sample")?;
    Ok(x_prev)
}

/// Executes one guided reverse step and updates `kernel` in place.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step(
    schedule: &NoiseSchedule,
    denoiser: &impl Denoiser,
    kernel: &mut BlurKernel,
    y_prime: &Field,
    x_t: &Field,
    t: usize,
    config: &GuidanceConfig,
    rng: &mut impl Rng,
) -> Result<StepOutput> {
    schedule.check_step(t)?;
    x_t.check_same_shape(y_prime)?;

    let eps = denoiser.predict_noise(x_t, t, schedule)?;
    let mut x_tilde0 = estimate_x0(schedule, x_t, t, &eps)?;
    if config.clamp_x0 {
        x_tilde0 = x_tilde0.clamp(-1.0, 1.0);
    }
    finite(&x_tilde0, t, 2, "clean estimate")?;

    let eval = kernel::evaluate(kernel, &x_tilde0, y_prime)?;
    if !eval.loss.is_finite() {
        return Err(Error::Numeric {
            step: t,
            line: 3,
            what: "distance",
        });
    }

    let (c0, ct) = schedule.posterior_coefficients(t);
    let mean_unguided = x_tilde0.lin_comb(c0, x_t, ct);
    let scale = auto_scale(x_t, &mean_unguided, &eval.grad_field, eval.loss, config, t)?;

    let factor = scale * (1.0 - schedule.alpha_bar(t)) / (schedule.alpha_bar(t - 1).sqrt() * schedule.beta(t));
    let guided = x_tilde0.lin_comb(1.0, &eval.grad_field, -factor);
    finite(&guided, t, 5, "guided clean estimate")?;

    let mean_guided = guided.lin_comb(c0, x_t, ct);
    finite(&mean_guided, t, 6, "posterior mean")?;
    let variance = schedule.posterior_variance(t);

    let x_prev = add_noise(&mean_guided, variance, t, rng);
    finite(&x_prev, t, 8, "sample")?;

    if !config.fixed_kernel {
        kernel.descend(&eval.grad_kernel, config.lr_at(t, schedule.steps()));
        if !kernel.is_finite() {
            return Err(Error::Numeric {
                step: t,
                line: 9,
                what: "kernel parameters",
            });
        }
    }

    Ok(StepOutput {
        x_prev,
        record: StepRecord {
            t,
            loss: eval.loss,
            scale,
            kernel_mean: kernel.mean(),
        },
        x_tilde0,
        grad_x0: eval.grad_field,
        mean_unguided,
        mean_guided,
        variance,
    })
}

/// Random streams of a run: `(sampling noise, kernel init)`.
fn run_streams(seed: u64) -> (SimRng, SimRng) {
    (derived(seed, 0), derived(seed, 1))
}

/// Deblurs `y_prime` (data units) from pure noise.
pub fn postcast_deblur(
    schedule: &NoiseSchedule,
    denoiser: &impl Denoiser,
    y_prime: &Field,
    config: &SamplerConfig,
    seed: u64,
) -> std::result::Result<SamplerTrace, RunFailure> {
    postcast_deblur_observed(schedule, denoiser, y_prime, config, seed, |_| {})
}

/// Like [`postcast_deblur`], calling `observe` after every step.
pub fn postcast_deblur_observed(
    schedule: &NoiseSchedule,
    denoiser: &impl Denoiser,
    y_prime: &Field,
    config: &SamplerConfig,
    seed: u64,
    mut observe: impl FnMut(&StepOutput),
) -> std::result::Result<SamplerTrace, RunFailure> {
    let fail = |error: Error, partial: Vec<StepRecord>| RunFailure { error, partial };
    config.guidance.validate().map_err(|e| fail(e, vec![]))?;
    let y = y_prime.to_model();
    let (h, w) = y.shape();
    let (mut rng, mut kernel_rng) = run_streams(seed);
    let mut x = normal_field(&mut rng, h, w, Units::Model);
    let mut kernel = init_kernel(config.kernel.size, config.kernel.mean, config.kernel.std, &mut kernel_rng)
        .map_err(|e| fail(e, vec![]))?;

    let steps = schedule.steps();
    let mut records = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        match guided_reverse_step(schedule, denoiser, &mut kernel, &y, &x, t, &config.guidance, &mut rng) {
            Ok(out) => {
                observe(&out);
                records.push(out.record);
                x = out.x_prev;
            }
            Err(e) => return Err(fail(e, records)),
        }
    }
    Ok(SamplerTrace {
        records,
        x0: x.to_data().clamp(0.0, 1.0),
        kernel,
    })
}

/// Unguided ancestral sampling with the same noise stream as [`postcast_deblur`].
pub fn sample_unconditional(
    schedule: &NoiseSchedule,
    denoiser: &impl Denoiser,
    shape: (usize, usize),
    clamp_x0: bool,
    seed: u64,
) -> Result<Field> {
    let (mut rng, _) = run_streams(seed);
    let mut x = normal_field(&mut rng, shape.0, shape.1, Units::Model);
    for t in (1..=schedule.steps()).rev() {
        x = ancestral_step(schedule, denoiser, &x, t, clamp_x0, &mut rng)?;
    }
    Ok(x)
}

pub fn trace_to_csv(records: &[StepRecord]) -> String {
    let mut out = String::from("step,loss,scale,kernel_mean\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.t, r.loss, r.scale, r.kernel_mean));
    }
    out
}
