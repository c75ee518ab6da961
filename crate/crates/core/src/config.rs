//! Run configuration loaded from a sectioned TOML file.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected so typos never silently fall back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::TrainConfig;
use crate::diffusion::{linear_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::POOLINGS;
use crate::sampler::{GuidanceConfig, KernelInit, LrPolicy, SamplerConfig};
use crate::synthetic::{BlurFamily, EmConfig, FieldSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_1: f64,
    #[serde(rename = "beta_T")]
    pub beta_t: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_1: 1e-4,
            beta_t: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelSection {
    pub size: usize,
    pub init_mean: f64,
    pub init_std: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        let k = KernelInit::default();
        Self {
            size: k.size,
            init_mean: k.mean,
            init_std: k.std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceSection {
    pub lr: f64,
    pub lr_policy: LrPolicy,
    #[serde(rename = "C")]
    pub c: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub loss_floor: f64,
    pub clamp_x0: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_scale: Option<f64>,
    pub fixed_kernel: bool,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        Self {
            lr: g.lr,
            lr_policy: g.lr_policy,
            c: g.c,
            scale_min: g.scale_min,
            scale_max: g.scale_max,
            loss_floor: g.loss_floor,
            clamp_x0: g.clamp_x0,
            fixed_scale: g.fixed_scale,
            fixed_kernel: g.fixed_kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub cells_mean: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub spread_min: f64,
    pub spread_max: f64,
    pub background_noise: f64,
    /// Blur families cycled over the generated pairs.
    pub families: Vec<BlurFamily>,
    pub severity_min: usize,
    pub severity_max: usize,
    pub gain: f64,
    pub motion_angle_deg: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let f = FieldSpec::default();
        Self {
            height: f.height,
            width: f.width,
            count: 30,
            cells_mean: f.cells_mean,
            amplitude_min: f.amplitude_min,
            amplitude_max: f.amplitude_max,
            spread_min: f.spread_min,
            spread_max: f.spread_max,
            background_noise: f.background_noise,
            families: vec![BlurFamily::Gaussian, BlurFamily::Motion, BlurFamily::Mixed],
            severity_min: 1,
            severity_max: 3,
            gain: 1.0,
            motion_angle_deg: 30.0,
        }
    }
}

impl DataSection {
    pub fn field_spec(&self, seed: u64) -> FieldSpec {
        FieldSpec {
            height: self.height,
            width: self.width,
            cells_mean: self.cells_mean,
            amplitude_min: self.amplitude_min,
            amplitude_max: self.amplitude_max,
            spread_min: self.spread_min,
            spread_max: self.spread_max,
            background_noise: self.background_noise,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Quantile of the clean fields used as the event threshold.
    pub quantile: f64,
    /// Explicit threshold in data units; overrides `quantile`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub poolings: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            quantile: 0.99,
            tau: None,
            poolings: POOLINGS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub draws_per_field: usize,
    pub channels: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            draws_per_field: t.draws_per_field,
            channels: t.channels,
            kernel_size: t.kernel_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSection {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub kmeans_iter: usize,
    pub min_std: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        let em = EmConfig::default();
        Self {
            k: 16,
            max_iter: em.max_iter,
            tol: em.tol,
            kmeans_iter: em.kmeans_iter,
            min_std: em.min_std,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleSection,
    pub kernel: KernelSection,
    pub guidance: GuidanceSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub train: TrainSection,
    pub prior: PriorSection,
}

const ROOT_KEYS: &[&str] = &["seed", "schedule", "kernel", "guidance", "data", "eval", "train", "prior"];

fn section_keys(section: &str) -> &'static [&'static str] {
    match section {
        "schedule" => &["T", "beta_1", "beta_T"],
        "kernel" => &["size", "init_mean", "init_std"],
        "guidance" => &[
            "lr",
            "lr_policy",
            "C",
            "scale_min",
            "scale_max",
            "loss_floor",
            "clamp_x0",
            "fixed_scale",
            "fixed_kernel",
        ],
        "data" => &[
            "height",
            "width",
            "count",
            "cells_mean",
            "amplitude_min",
            "amplitude_max",
            "spread_min",
            "spread_max",
            "background_noise",
            "families",
            "severity_min",
            "severity_max",
            "gain",
            "motion_angle_deg",
        ],
        "eval" => &["quantile", "tau", "poolings"],
        "train" => &["epochs", "batch_size", "lr", "draws_per_field", "channels", "kernel_size"],
        "prior" => &["k", "max_iter", "tol", "kmeans_iter", "min_std"],
        _ => &[],
    }
}

fn suggest(key: &str, candidates: &[&str]) -> Option<String> {
    candidates
        .iter()
        .map(|c| (strsim::levenshtein(key, c), *c))
        .filter(|&(d, c)| d <= 2.max(c.len() / 3))
        .min_by_key(|&(d, _)| d)
        .map(|(_, c)| c.to_string())
}

fn unknown(path: String, leaf: &str, candidates: &[&str], prefix: &str) -> Error {
    Error::UnknownKey {
        key: path,
        suggestion: suggest(leaf, candidates).map(|s| format!("{prefix}{s}")),
    }
}

fn line_of(text: &str, err: &toml::de::Error) -> usize {
    err.span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0)
}

fn check_keys(table: &toml::Table) -> Result<()> {
    for (key, value) in table {
        if !ROOT_KEYS.contains(&key.as_str()) {
            return Err(unknown(key.clone(), key, ROOT_KEYS, ""));
        }
        if key == "seed" {
            continue;
        }
        let Some(inner) = value.as_table() else {
            return Err(Error::ConfigRange {
                key: key.clone(),
                reason: "expected a section".into(),
            });
        };
        let allowed = section_keys(key);
        for k in inner.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(unknown(format!("{key}.{k}"), k, allowed, ""));
            }
        }
    }
    Ok(())
}

fn range(key: &str, ok: bool, reason: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::ConfigRange {
            key: key.into(),
            reason: reason.into(),
        })
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::ConfigParse {
            line: line_of(text, &e),
            message: e.message().to_string(),
        })?;
        check_keys(&table)?;
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigParse {
            line: line_of(text, &e),
            message: e.message().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        range("schedule.T", s.steps >= 2, format!("{} < 2", s.steps))?;
        range("schedule.beta_1", s.beta_1 > 0.0 && s.beta_1 <= s.beta_t, "need 0 < beta_1 <= beta_T")?;
        range("schedule.beta_T", s.beta_t < 1.0, "need beta_T < 1")?;

        let k = &self.kernel;
        range("kernel.size", k.size % 2 == 1, format!("{} is not odd", k.size))?;
        range("kernel.init_mean", k.init_mean.is_finite(), "must be finite")?;
        range("kernel.init_std", k.init_std >= 0.0 && k.init_std.is_finite(), "must be >= 0")?;

        let g = &self.guidance;
        range("guidance.lr", g.lr > 0.0 && g.lr.is_finite(), "must be > 0")?;
        range("guidance.scale_min", g.scale_min <= g.scale_max, "exceeds scale_max")?;
        range("guidance.loss_floor", g.loss_floor > 0.0, "must be > 0")?;
        range("guidance.C", g.c.is_finite(), "must be finite")?;
        if let Some(f) = g.fixed_scale {
            range("guidance.fixed_scale", f.is_finite() && f >= 0.0, "must be finite and >= 0")?;
        }

        let d = &self.data;
        range("data.height", d.height > 0, "must be > 0")?;
        range("data.width", d.width > 0, "must be > 0")?;
        range("data.families", !d.families.is_empty(), "need at least one family")?;
        range("data.severity_min", d.severity_min <= d.severity_max, "exceeds severity_max")?;
        range("data.gain", d.gain > 0.0 && d.gain.is_finite(), "must be > 0")?;
        d.field_spec(self.seed).validate().map_err(|e| Error::ConfigRange {
            key: "data".into(),
            reason: e.to_string(),
        })?;

        let e = &self.eval;
        range("eval.quantile", e.quantile > 0.0 && e.quantile < 1.0, "must lie in (0, 1)")?;
        range("eval.poolings", !e.poolings.is_empty() && !e.poolings.contains(&0), "need positive windows")?;
        if let Some(t) = e.tau {
            range("eval.tau", t.is_finite(), "must be finite")?;
        }

        let t = &self.train;
        range("train.epochs", t.epochs >= 1, "must be >= 1")?;
        range("train.batch_size", t.batch_size >= 1, "must be >= 1")?;
        range("train.lr", t.lr > 0.0, "must be > 0")?;
        range("train.draws_per_field", t.draws_per_field >= 1, "must be >= 1")?;

        let p = &self.prior;
        range("prior.k", p.k >= 1, "must be >= 1")?;
        range("prior.min_std", p.min_std > 0.0, "must be > 0")?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.schedule.steps, self.schedule.beta_1, self.schedule.beta_t)
    }

    pub fn sampler(&self) -> SamplerConfig {
        let g = &self.guidance;
        SamplerConfig {
            kernel: KernelInit {
                size: self.kernel.size,
                mean: self.kernel.init_mean,
                std: self.kernel.init_std,
            },
            guidance: GuidanceConfig {
                lr: g.lr,
                lr_policy: g.lr_policy,
                c: g.c,
                scale_min: g.scale_min,
                scale_max: g.scale_max,
                loss_floor: g.loss_floor,
                clamp_x0: g.clamp_x0,
                fixed_scale: g.fixed_scale,
                fixed_kernel: g.fixed_kernel,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            draws_per_field: t.draws_per_field,
            channels: t.channels.clone(),
            kernel_size: t.kernel_size,
            seed: self.seed,
        }
    }

    pub fn em_config(&self) -> EmConfig {
        let p = &self.prior;
        EmConfig {
            max_iter: p.max_iter,
            tol: p.tol,
            kmeans_iter: p.kmeans_iter,
            min_std: p.min_std,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_published_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.schedule.steps, 1000);
        assert_eq!(c.schedule.beta_1, 1e-4);
        assert_eq!(c.schedule.beta_t, 0.02);
        assert_eq!(c.kernel.size, 9);
        assert_eq!(c.kernel.init_mean, 0.6);
        assert_eq!(c.guidance.lr, 2e-4);
        assert_eq!(c.guidance.lr_policy, LrPolicy::Cosine);
        assert_eq!(c.guidance.c, 0.0);
        assert_eq!(c.guidance.fixed_scale, None);
        assert_eq!(c.eval.poolings, vec![1, 4, 16]);
    }

    #[test]
    fn fixed_scale_ablation() {
        let c = RunConfig::from_toml_str("[guidance]\nfixed_scale = 3500\nfixed_kernel = true\n").unwrap();
        assert_eq!(c.sampler().guidance.fixed_scale, Some(3500.0));
        assert!(c.sampler().guidance.fixed_kernel);
    }

    #[test]
    fn typo_gets_a_suggestion() {
        match RunConfig::from_toml_str("[schedule]\nbeta1 = 0.001\n") {
            Err(Error::UnknownKey { key, suggestion }) => {
                assert_eq!(key, "schedule.beta1");
                assert_eq!(suggestion.as_deref(), Some("beta_1"));
            }
            other => panic!("{other:?}"),
        }
        let err = RunConfig::from_toml_str("[guidence]\n").unwrap_err();
        assert!(err.to_string().contains("did you mean `guidance`"), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match RunConfig::from_toml_str("[schedule]\nT = 10\nbeta_1 = = 2\n") {
            Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_toml_str("\n[kernel]\nsize = \"nine\"\n") {
            Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_range_values() {
        for text in [
            "[schedule]\nT = 1",
            "[schedule]\nbeta_1 = 0.5\nbeta_T = 0.1",
            "[kernel]\nsize = 4",
            "[guidance]\nlr = 0.0",
            "[guidance]\nscale_min = 5.0\nscale_max = 1.0",
            "[eval]\nquantile = 1.5",
            "[data]\nheight = 0",
        ] {
            assert!(
                matches!(RunConfig::from_toml_str(text), Err(Error::ConfigRange { .. })),
                "{text}"
            );
        }
    }

    #[test]
    fn serialized_config_round_trips() {
        let mut c = RunConfig {
            seed: 42,
            ..Default::default()
        };
        c.guidance.fixed_scale = Some(3500.0);
        c.data.families = vec![BlurFamily::Motion];
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }
}
