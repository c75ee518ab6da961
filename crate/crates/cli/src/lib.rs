//! Library side of the `postcast` command: argument types, the run manifest,
//! and the batch drivers shared by the binary and the acceptance suite.

pub mod ablation;
pub mod commands;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use postcast_core::io::{list_grids, read_dataset, read_grid, DatasetIndex, INDEX_FILE};
use postcast_core::{ConvDenoiser, Denoiser, Error, Field, GaussianMixtureModel, NoiseSchedule, RunConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Parser, Serialize, Deserialize)]
#[command(name = "postcast", version, about = "Deblur precipitation forecasts with a guided diffusion prior")]
pub struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batch commands.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "postcast-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum Command {
    /// Generate synthetic fields and planted blur pairs.
    Gen,
    /// Fit the mixture prior to the clean fields of a dataset.
    FitPrior {
        dataset: PathBuf,
        /// Number of components; defaults to `prior.k`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the convolutional denoiser on the clean fields of a dataset.
    Train { dataset: PathBuf },
    /// Deblur one grid, a directory of grids, or the blurry side of a dataset.
    Deblur {
        input: PathBuf,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Score predictions against observations, next to the blurry baselines.
    Eval {
        pred: PathBuf,
        obs: PathBuf,
        /// Blurry grids to report alongside; taken from `obs` when it is a dataset.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Event threshold in data units; overrides the configured quantile.
        #[arg(long)]
        tau: Option<f64>,
        /// Comma-separated pooling windows.
        #[arg(long, value_delimiter = ',')]
        poolings: Option<Vec<usize>>,
    },
    /// Compare fixed kernel + fixed scale, kernel updates only, and the full method.
    Ablate {
        dataset: PathBuf,
        #[command(flatten)]
        model: ModelArg,
        /// Scale used by the two fixed-scale configurations.
        #[arg(long, default_value_t = ablation::ABLATION_SCALE)]
        scale: f64,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::FitPrior { .. } => "fit-prior",
            Command::Train { .. } => "train",
            Command::Deblur { .. } => "deblur",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, clap::Args, Serialize, Deserialize)]
#[group(required = true, multiple = false)]
pub struct ModelArg {
    /// Mixture prior written by `fit-prior`.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Network written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

/// A failure tagged with the pipeline stage it happened in.
#[derive(Debug)]
pub struct CliError {
    pub stage: &'static str,
    /// Input the failure concerns, for batch commands.
    pub subject: Option<String>,
    pub error: Error,
}

impl CliError {
    pub fn new(stage: &'static str, error: Error) -> Self {
        Self {
            stage,
            subject: None,
            error,
        }
    }

    pub fn about(mut self, subject: impl Into<String>) -> Self {
        self.subject = Some(subject.into());
        self
    }

    /// 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match &self.error {
            e if e.is_numeric() => 3,
            Error::ConfigParse { .. } | Error::UnknownKey { .. } | Error::ConfigRange { .. } | Error::Parameter { .. } => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.subject {
            Some(s) => write!(f, "[{}] {s}: {}", self.stage, self.error),
            None => write!(f, "[{}] {}", self.stage, self.error),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) trait Stage<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T> Stage<T> for postcast_core::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| CliError::new(stage, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Written next to every command's outputs. Everything except
/// `wall_clock_secs` is a pure function of the command line and config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    pub seed: u64,
    pub jobs: usize,
    pub config: RunConfig,
    pub inputs: Vec<PathBuf>,
    /// Relative to the output directory.
    pub outputs: Vec<PathBuf>,
    pub stages: Vec<StageStatus>,
    pub wall_clock_secs: f64,
}

/// Mutable state of one invocation.
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
    pub jobs: usize,
    pub manifest: RunManifest,
    started: Instant,
}

impl Run {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.to_path_buf());
    }

    pub fn stage_ok(&mut self, stage: &str) {
        self.manifest.stages.push(StageStatus {
            stage: stage.into(),
            ok: true,
            detail: None,
        });
    }

    /// Writes `bytes` to `rel` under the output directory and records it.
    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let rel = rel.as_ref();
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_error("output", parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| io_error("output", &path, e))?;
        self.manifest.outputs.push(rel.to_path_buf());
        Ok(())
    }

    /// Absolute path for `rel`, with its parent directory created.
    pub fn prepare(&self, rel: impl AsRef<Path>) -> CliResult<PathBuf> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_error("output", parent, e))?;
        }
        Ok(path)
    }

    /// Records a file some core routine already wrote under the output directory.
    pub fn record(&mut self, rel: impl AsRef<Path>) {
        self.manifest.outputs.push(rel.as_ref().to_path_buf());
    }

    fn finish(mut self, failure: Option<&CliError>) -> CliResult<RunManifest> {
        if let Some(err) = failure {
            self.manifest.stages.push(StageStatus {
                stage: err.stage.into(),
                ok: false,
                detail: Some(err.to_string()),
            });
        }
        self.manifest.outputs.sort();
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let path = self.out.join(MANIFEST_FILE);
        fs::create_dir_all(&self.out).map_err(|e| io_error("manifest", &self.out, e))?;
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::new("manifest", e.into()))?;
        fs::write(&path, text).map_err(|e| io_error("manifest", &path, e))?;
        Ok(self.manifest)
    }
}

pub(crate) fn io_error(stage: &'static str, path: &Path, source: std::io::Error) -> CliError {
    CliError::new(
        stage,
        Error::Io {
            path: path.to_path_buf(),
            source,
        },
    )
}

/// Loads the configuration and applies command-line overrides.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).stage("config")?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.jobs == 0 {
        return Err(CliError::new(
            "config",
            Error::Parameter {
                name: "jobs",
                reason: "must be >= 1".into(),
            },
        ));
    }
    config.validate().stage("config")?;
    Ok(config)
}

/// Runs one parsed invocation and writes its manifest, also on failure.
pub fn execute(cli: &Cli) -> CliResult<RunManifest> {
    let config = resolve_config(cli)?;
    let mut run = Run {
        manifest: RunManifest {
            command: cli.command.clone(),
            seed: config.seed,
            jobs: cli.jobs,
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            stages: Vec::new(),
            wall_clock_secs: 0.0,
        },
        config,
        out: cli.out.clone(),
        jobs: cli.jobs,
        started: Instant::now(),
    };
    let outcome = fs::create_dir_all(&run.out)
        .map_err(|e| io_error("output", &cli.out, e))
        .and_then(|_| commands::dispatch(&mut run, &cli.command));
    match outcome {
        Ok(()) => run.finish(None),
        Err(err) => {
            // The original error matters more than a failure to record it.
            let _ = run.finish(Some(&err));
            Err(err)
        }
    }
}

/// A loaded noise predictor of either kind.
pub enum Model {
    Gmm(GaussianMixtureModel),
    Conv(ConvDenoiser),
}

impl Model {
    pub fn load(arg: &ModelArg) -> CliResult<Self> {
        match (&arg.prior, &arg.model) {
            (Some(p), _) => GaussianMixtureModel::load_json(p).map(Model::Gmm).stage("model"),
            (None, Some(m)) => ConvDenoiser::load(m).map(Model::Conv).stage("model"),
            (None, None) => Err(CliError::new(
                "model",
                Error::Parameter {
                    name: "prior",
                    reason: "one of --prior or --model is required".into(),
                },
            )),
        }
    }

    pub fn path(arg: &ModelArg) -> Option<&Path> {
        arg.prior.as_deref().or(arg.model.as_deref())
    }
}

impl Denoiser for Model {
    fn predict_noise(&self, x_t: &Field, t: usize, schedule: &NoiseSchedule) -> postcast_core::Result<Field> {
        match self {
            Model::Gmm(m) => m.predict_noise(x_t, t, schedule),
            Model::Conv(m) => m.predict_noise(x_t, t, schedule),
        }
    }
}

pub fn is_dataset(dir: &Path) -> bool {
    dir.join(INDEX_FILE).is_file()
}

/// Instance key of a grid file: its stem up to the first underscore.
pub fn grid_key(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match stem.split_once('_') {
        Some((head, _)) => head.to_string(),
        None => stem,
    }
}

/// Keyed grids of a directory. A dataset directory yields its clean fields.
pub fn keyed_grids(dir: &Path) -> postcast_core::Result<Vec<(String, Field)>> {
    if is_dataset(dir) {
        return Ok(read_dataset(dir)?.into_iter().map(|(e, p)| (e.id, p.clean)).collect());
    }
    let mut out: Vec<(String, Field)> = Vec::new();
    for path in list_grids(dir)? {
        let key = grid_key(&path);
        if out.iter().any(|(k, _)| *k == key) {
            return Err(Error::Data(format!("two grids in {} share the key `{key}`", dir.display())));
        }
        out.push((key, read_grid(&path)?));
    }
    Ok(out)
}

/// Blurry grids of a dataset keyed by instance id.
pub fn dataset_blurry(dir: &Path) -> postcast_core::Result<Vec<(String, Field)>> {
    Ok(read_dataset(dir)?.into_iter().map(|(e, p)| (e.id, p.blurry)).collect())
}

/// Clean fields of a dataset directory, or every grid of a plain directory.
pub fn training_fields(dir: &Path) -> postcast_core::Result<Vec<Field>> {
    let fields: Vec<Field> = keyed_grids(dir)?.into_iter().map(|(_, f)| f).collect();
    if fields.is_empty() {
        return Err(Error::Data(format!("no grids in {}", dir.display())));
    }
    Ok(fields)
}

/// Input grids for `deblur`: a file, a plain directory, or a dataset's blurry side.
pub fn deblur_inputs(input: &Path) -> postcast_core::Result<Vec<(String, PathBuf)>> {
    if input.is_file() {
        let name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, input.to_path_buf())]);
    }
    let paths: Vec<PathBuf> = if is_dataset(input) {
        DatasetIndex::load(input)?
            .entries
            .into_iter()
            .map(|e| input.join(e.blurry))
            .collect()
    } else {
        list_grids(input)?
    };
    if paths.is_empty() {
        return Err(Error::Data(format!("no grids in {}", input.display())));
    }
    Ok(paths
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect())
}

/// Per-input seed; independent of scheduling order.
pub fn file_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// Rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let rank = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = rank;
            }
            i = j + 1;
        }
        out
    }
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_matches_hand_values() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &[2.0, 4.0, 6.0, 8.0, 100.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // Ranks 1,2,3,4,5 vs 2,1,4,3,5: 1 - 6*4/(5*24) = 0.8.
        assert!((spearman(&x, &[2.0, 1.0, 4.0, 3.0, 5.0]) - 0.8).abs() < 1e-12);
        assert_eq!(spearman(&x, &[1.0; 5]), 0.0);
    }

    #[test]
    fn keys_strip_suffixes() {
        assert_eq!(grid_key(Path::new("a/00012_blurry.pcf")), "00012");
        assert_eq!(grid_key(Path::new("radar.pcf")), "radar");
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let code = |e| CliError::new("x", e).exit_code();
        assert_eq!(code(Error::UnknownKey { key: "a".into(), suggestion: None }), 1);
        assert_eq!(code(Error::Data("bad".into())), 2);
        assert_eq!(code(Error::Numeric { step: 3, line: 5, what: "mean" }), 3);
    }
}
