//! Batch deblurring and the three-way comparison of kernel learning and
//! guidance scaling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use postcast_core::kernel::convolve;
use postcast_core::metrics::csi_report;
use postcast_core::sampler::RunFailure;
use postcast_core::{postcast_deblur, BlurKernel, CsiReport, Denoiser, Error, Field, NoiseSchedule, SamplerConfig, SamplerTrace};

use crate::{file_seed, spearman, CliError, CliResult};

/// Scale of the fixed-scale configurations.
pub const ABLATION_SCALE: f64 = 3500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Initial kernel frozen, fixed scale.
    Neither,
    /// Kernel learned, fixed scale.
    KernelOnly,
    /// Kernel learned, auto scale (as configured).
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Neither, Variant::KernelOnly, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Neither => "fixed-kernel+fixed-scale",
            Variant::KernelOnly => "kernel-only",
            Variant::Full => "full",
        }
    }

    pub fn apply(self, base: &SamplerConfig, scale: f64) -> SamplerConfig {
        let mut c = base.clone();
        match self {
            Variant::Neither => {
                c.guidance.fixed_kernel = true;
                c.guidance.fixed_scale = Some(scale);
            }
            Variant::KernelOnly => {
                c.guidance.fixed_kernel = false;
                c.guidance.fixed_scale = Some(scale);
            }
            Variant::Full => c.guidance.fixed_kernel = false,
        }
        c
    }
}

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::new("sample", Error::Data(format!("thread pool: {e}"))))
}

/// Deblurs every input; input `i` uses seed `seed ^ i`. Results keep input order.
pub fn deblur_batch<D: Denoiser>(
    schedule: &NoiseSchedule,
    model: &D,
    inputs: &[Field],
    config: &SamplerConfig,
    seed: u64,
    jobs: usize,
) -> CliResult<Vec<Result<SamplerTrace, RunFailure>>> {
    Ok(pool(jobs)?.install(|| {
        inputs
            .par_iter()
            .enumerate()
            .map(|(i, y)| postcast_deblur(schedule, model, y, config, file_seed(seed, i)))
            .collect()
    }))
}

/// `||K * x - y||^2 / ||y||^2` in model units, the space the kernel is fitted in.
pub fn reblur_fidelity(kernel: &BlurKernel, x0: &Field, y: &Field) -> f64 {
    let y = y.to_model();
    let r = convolve(kernel, &x0.to_model()).sub(&y);
    r.norm_sq() / y.norm_sq()
}

/// The same residual measured against the blurry field in data units.
pub fn reblur_fidelity_data(kernel: &BlurKernel, x0: &Field, y: &Field) -> f64 {
    let r = convolve(kernel, &x0.to_model()).sub(&y.to_model());
    r.norm_sq() / 4.0 / y.to_data().norm_sq()
}

/// Rank correlation of the kernel mean with reverse progress.
pub fn kernel_trend(trace: &SamplerTrace) -> f64 {
    let progress: Vec<f64> = (0..trace.records.len()).map(|i| i as f64).collect();
    let means: Vec<f64> = trace.records.iter().map(|r| r.kernel_mean).collect();
    spearman(&progress, &means)
}

/// One planted or observed instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub id: String,
    pub clean: Field,
    pub blurry: Field,
}

#[derive(Debug, Clone)]
pub struct InstanceOutcome {
    pub id: String,
    pub trace: SamplerTrace,
    pub report: CsiReport,
    pub baseline: CsiReport,
    pub fidelity: f64,
    pub fidelity_data: f64,
    pub kernel_trend: f64,
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub instances: Vec<InstanceOutcome>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl VariantOutcome {
    /// Mean over instances of the per-instance CSI.
    pub fn mean_csi(&self, pool: usize) -> f64 {
        mean(self.instances.iter().filter_map(|i| i.report.at(pool)).map(|s| s.csi))
    }

    pub fn baseline_mean_csi(&self, pool: usize) -> f64 {
        mean(self.instances.iter().filter_map(|i| i.baseline.at(pool)).map(|s| s.csi))
    }
}

/// Deblurs and scores `instances` under one sampler configuration.
#[allow(clippy::too_many_arguments)]
pub fn score_variant<D: Denoiser>(
    variant: Variant,
    instances: &[Instance],
    model: &D,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    tau: f64,
    pools: &[usize],
    seed: u64,
    jobs: usize,
) -> CliResult<VariantOutcome> {
    let blurry: Vec<Field> = instances.iter().map(|i| i.blurry.clone()).collect();
    let traces = deblur_batch(schedule, model, &blurry, config, seed, jobs)?;
    let mut out = Vec::with_capacity(instances.len());
    for (inst, trace) in instances.iter().zip(traces) {
        let trace = trace.map_err(|f| CliError::new("sample", f.error).about(&inst.id))?;
        let score = |pred: &Field| csi_report(pred, &inst.clean, tau, pools).map_err(|e| CliError::new("evaluate", e).about(&inst.id));
        out.push(InstanceOutcome {
            id: inst.id.clone(),
            report: score(&trace.x0)?,
            baseline: score(&inst.blurry)?,
            fidelity: reblur_fidelity(&trace.kernel, &trace.x0, &inst.blurry),
            fidelity_data: reblur_fidelity_data(&trace.kernel, &trace.x0, &inst.blurry),
            kernel_trend: kernel_trend(&trace),
            trace,
        });
    }
    Ok(VariantOutcome { variant, instances: out })
}

/// All three variants over the same instances and seeds.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation<D: Denoiser>(
    instances: &[Instance],
    model: &D,
    schedule: &NoiseSchedule,
    base: &SamplerConfig,
    scale: f64,
    tau: f64,
    pools: &[usize],
    seed: u64,
    jobs: usize,
) -> CliResult<Vec<VariantOutcome>> {
    Variant::ALL
        .iter()
        .map(|&v| score_variant(v, instances, model, schedule, &v.apply(base, scale), tau, pools, seed, jobs))
        .collect()
}

pub fn summary_csv(outcomes: &[VariantOutcome], pools: &[usize]) -> String {
    let mut s = String::from("config,pool,mean_csi,baseline_mean_csi,instances\n");
    for o in outcomes {
        for &p in pools {
            s.push_str(&format!(
                "{},{p},{},{},{}\n",
                o.variant.label(),
                o.mean_csi(p),
                o.baseline_mean_csi(p),
                o.instances.len()
            ));
        }
    }
    s
}

pub fn instances_csv(outcomes: &[VariantOutcome], pools: &[usize]) -> String {
    let mut s = String::from("config,id,pool,csi,baseline_csi,fidelity,fidelity_data,kernel_trend,kernel_mean\n");
    for o in outcomes {
        for i in &o.instances {
            for &p in pools {
                let csi = i.report.at(p).map_or(f64::NAN, |s| s.csi);
                let base = i.baseline.at(p).map_or(f64::NAN, |s| s.csi);
                s.push_str(&format!(
                    "{},{},{p},{csi},{base},{},{},{},{}\n",
                    o.variant.label(),
                    i.id,
                    i.fidelity,
                    i.fidelity_data,
                    i.kernel_trend,
                    i.trace.kernel.mean()
                ));
            }
        }
    }
    s
}
