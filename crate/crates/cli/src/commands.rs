//! One function per subcommand. Each reads its inputs, writes under the run's
//! output directory and records what it wrote in the manifest.

use std::collections::BTreeMap;
use std::path::Path;

use postcast_core::config::DataSection;
use postcast_core::io::{read_dataset, read_grid, write_dataset, write_kernel, INDEX_FILE};
use postcast_core::metrics::{aggregate, csi_report, quantile_threshold, report_rows, CsiScore};
use postcast_core::sampler::trace_to_csv;
use postcast_core::synthetic::{fit_gmm_prior, generate_fields, plant_blur};
use postcast_core::denoiser::train_conv_denoiser;
use postcast_core::{Error, Field, PlantSpec, PlantedPair, Result, RunConfig};

use crate::ablation::{self, Instance};
use crate::{
    dataset_blurry, deblur_inputs, is_dataset, keyed_grids, training_fields, CliError, CliResult, Command, Model, Run,
    Stage,
};

pub(crate) fn dispatch(run: &mut Run, command: &Command) -> CliResult<()> {
    match command {
        Command::Gen => gen(run),
        Command::FitPrior { dataset, k } => fit_prior(run, dataset, *k),
        Command::Train { dataset } => train(run, dataset),
        Command::Deblur { input, model } => {
            if let Some(p) = Model::path(model) {
                run.input(p);
            }
            deblur(run, input, &Model::load(model)?)
        }
        Command::Eval {
            pred,
            obs,
            baseline,
            tau,
            poolings,
        } => eval(run, pred, obs, baseline.as_deref(), *tau, poolings.as_deref()),
        Command::Ablate { dataset, model, scale } => {
            if let Some(p) = Model::path(model) {
                run.input(p);
            }
            ablate(run, dataset, &Model::load(model)?, *scale)
        }
    }
}

/// Blur settings for pair `i`: severities cycle fastest, then families.
pub fn plant_spec(data: &DataSection, i: usize) -> PlantSpec {
    let span = data.severity_max - data.severity_min + 1;
    let family = data.families[(i / span) % data.families.len()];
    let mut spec = PlantSpec::new(family, data.severity_min + i % span);
    spec.gain = data.gain;
    spec.motion_angle_deg = data.motion_angle_deg;
    spec
}

/// The planted pairs `gen` writes for `config`.
pub fn planted_suite(config: &RunConfig) -> Result<Vec<PlantedPair>> {
    let d = &config.data;
    generate_fields(&d.field_spec(config.seed), d.count)?
        .iter()
        .enumerate()
        .map(|(i, f)| plant_blur(f, &plant_spec(d, i)))
        .collect()
}

fn gen(run: &mut Run) -> CliResult<()> {
    let pairs = planted_suite(&run.config).stage("generate")?;
    let index = write_dataset(&run.out, &pairs).stage("output")?;
    for e in &index.entries {
        run.record(&e.clean);
        run.record(&e.blurry);
        run.record(&e.kernel);
        run.record(Path::new(&e.kernel).with_extension("json"));
    }
    run.record(INDEX_FILE);
    run.stage_ok("generate");
    println!("gen: {} planted pairs in {}", pairs.len(), run.out.display());
    Ok(())
}

fn fit_prior(run: &mut Run, dataset: &Path, k: Option<usize>) -> CliResult<()> {
    run.input(dataset);
    let fields = training_fields(dataset).stage("input")?;
    let k = k.unwrap_or(run.config.prior.k);
    let fit = fit_gmm_prior(&fields, k, &run.config.em_config()).stage("fit")?;
    run.stage_ok("fit");
    fit.model.save_json(&run.out.join("prior.json")).stage("output")?;
    run.record("prior.json");
    let mut csv = String::from("iteration,log_likelihood\n");
    for (i, ll) in fit.log_likelihood.iter().enumerate() {
        csv.push_str(&format!("{},{ll}\n", i + 1));
    }
    run.write("em.csv", csv)?;
    println!(
        "fit-prior: k={k} on {} fields, {} EM iterations, log-likelihood {:.6e}",
        fields.len(),
        fit.log_likelihood.len(),
        fit.log_likelihood.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train(run: &mut Run, dataset: &Path) -> CliResult<()> {
    run.input(dataset);
    let fields = training_fields(dataset).stage("input")?;
    let schedule = run.config.schedule().stage("config")?;
    let outcome = train_conv_denoiser(&fields, &schedule, &run.config.train_config()).stage("train")?;
    run.stage_ok("train");
    outcome.model.save(&run.out.join("model.pcdn")).stage("output")?;
    run.record("model.pcdn");
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    run.write("loss.csv", csv)?;
    println!(
        "train: {} epochs, final loss {:.6}",
        outcome.losses.len(),
        outcome.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn deblur(run: &mut Run, input: &Path, model: &Model) -> CliResult<()> {
    run.input(input);
    let inputs = deblur_inputs(input).stage("input")?;
    let fields = inputs
        .iter()
        .map(|(name, p)| read_grid(p).map_err(|e| CliError::new("input", e).about(name)))
        .collect::<CliResult<Vec<Field>>>()?;
    let schedule = run.config.schedule().stage("config")?;
    let sampler = run.config.sampler();
    let results = ablation::deblur_batch(&schedule, model, &fields, &sampler, run.seed(), run.jobs)?;

    let mut first_err = None;
    for ((name, _), result) in inputs.iter().zip(results) {
        let stem = Path::new(name).file_stem().unwrap().to_string_lossy().into_owned();
        match result {
            Ok(trace) => {
                let x0_rel = Path::new("x0").join(name);
                run.write(&x0_rel, postcast_core::io::encode_grid(&trace.x0).stage("output")?)?;
                let k_rel = Path::new("kernels").join(format!("{stem}.csv"));
                write_kernel(&run.prepare(&k_rel)?, &trace.kernel, 0).stage("output")?;
                run.record(&k_rel);
                run.record(k_rel.with_extension("json"));
                run.write(Path::new("traces").join(format!("{stem}.csv")), trace_to_csv(&trace.records))?;
                let last = trace.records.last();
                println!(
                    "deblur {name}: loss {:.4e}, kernel mean {:.5}",
                    last.map_or(f64::NAN, |r| r.loss),
                    trace.kernel.mean()
                );
            }
            Err(failure) => {
                eprintln!("deblur {name}: {failure}");
                if !failure.partial.is_empty() {
                    run.write(Path::new("traces").join(format!("{stem}.partial.csv")), trace_to_csv(&failure.partial))?;
                }
                first_err.get_or_insert(CliError::new("sample", failure.error).about(name.clone()));
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => {
            run.stage_ok("sample");
            Ok(())
        }
    }
}

/// Threshold from an explicit value, the config, or the observation quantile.
fn threshold(config: &RunConfig, explicit: Option<f64>, obs: &[Field]) -> Result<f64> {
    match explicit.or(config.eval.tau) {
        Some(t) => Ok(t),
        None => quantile_threshold(obs, config.eval.quantile),
    }
}

fn eval(
    run: &mut Run,
    pred: &Path,
    obs: &Path,
    baseline: Option<&Path>,
    tau: Option<f64>,
    pools: Option<&[usize]>,
) -> CliResult<()> {
    run.input(pred);
    run.input(obs);
    let preds: BTreeMap<String, Field> = keyed_grids(pred).stage("input")?.into_iter().collect();
    let observed = keyed_grids(obs).stage("input")?;
    let baselines: BTreeMap<String, Field> = match baseline {
        Some(b) => {
            run.input(b);
            keyed_grids(b).stage("input")?.into_iter().collect()
        }
        None if is_dataset(obs) => dataset_blurry(obs).stage("input")?.into_iter().collect(),
        None => BTreeMap::new(),
    };
    if observed.is_empty() {
        return Err(CliError::new("input", Error::Data(format!("no observations in {}", obs.display()))));
    }
    let pools = pools.map_or_else(|| run.config.eval.poolings.clone(), <[usize]>::to_vec);
    if pools.is_empty() || pools.contains(&0) {
        return Err(CliError::new(
            "config",
            Error::Parameter {
                name: "poolings",
                reason: "need positive windows".into(),
            },
        ));
    }
    let obs_fields: Vec<Field> = observed.iter().map(|(_, f)| f.clone()).collect();
    let tau = threshold(&run.config, tau, &obs_fields).stage("evaluate")?;

    let mut rows = Vec::new();
    let mut totals: BTreeMap<(&str, usize), Vec<CsiScore>> = BTreeMap::new();
    for (key, o) in &observed {
        let p = preds
            .get(key)
            .ok_or_else(|| CliError::new("input", Error::Data(format!("no prediction for `{key}`"))))?;
        let mut sources = vec![("pred", p)];
        if let Some(b) = baselines.get(key) {
            sources.push(("baseline", b));
        }
        for (source, field) in sources {
            let report = csi_report(field, o, tau, &pools).map_err(|e| CliError::new("evaluate", e).about(key))?;
            rows.extend(report_rows(&format!("{key},{source}"), &report));
            for s in &report.scores {
                totals.entry((source, s.pool)).or_default().push(*s);
            }
        }
    }
    run.stage_ok("evaluate");

    let mut csv = String::from("id,source,threshold,pool,tp,fp,fn,csi\n");
    for r in rows {
        csv.push_str(&r);
        csv.push('\n');
    }
    for ((source, pool), scores) in &totals {
        let agg = aggregate(scores).expect("non-empty");
        let mean = scores.iter().map(|s| s.csi).sum::<f64>() / scores.len() as f64;
        csv.push_str(&format!("pooled,{source},{tau},{pool},{},{},{},{}\n", agg.tp, agg.fp, agg.fn_, agg.csi));
        csv.push_str(&format!("mean,{source},{tau},{pool},,,,{mean}\n"));
        println!("eval {source} P{pool}: mean CSI {mean:.4}, pooled CSI {:.4}", agg.csi);
    }
    run.write("report.csv", csv)
}

fn ablate(run: &mut Run, dataset: &Path, model: &Model, scale: f64) -> CliResult<()> {
    run.input(dataset);
    let instances: Vec<Instance> = read_dataset(dataset)
        .stage("input")?
        .into_iter()
        .map(|(e, p)| Instance {
            id: e.id,
            clean: p.clean,
            blurry: p.blurry,
        })
        .collect();
    if instances.is_empty() {
        return Err(CliError::new("input", Error::Data("empty dataset".into())));
    }
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(CliError::new(
            "config",
            Error::Parameter {
                name: "scale",
                reason: format!("{scale} must be finite and >= 0"),
            },
        ));
    }
    let clean: Vec<Field> = instances.iter().map(|i| i.clean.clone()).collect();
    let tau = threshold(&run.config, None, &clean).stage("evaluate")?;
    let schedule = run.config.schedule().stage("config")?;
    let pools = run.config.eval.poolings.clone();
    let outcomes = ablation::run_ablation(
        &instances,
        model,
        &schedule,
        &run.config.sampler(),
        scale,
        tau,
        &pools,
        run.seed(),
        run.jobs,
    )?;
    run.stage_ok("ablate");
    for o in &outcomes {
        let cells: Vec<String> = pools.iter().map(|&p| format!("P{p} {:.4}", o.mean_csi(p))).collect();
        println!("ablate {}: {}", o.variant.label(), cells.join(", "));
    }
    run.write("ablation.csv", ablation::summary_csv(&outcomes, &pools))?;
    run.write("ablation_instances.csv", ablation::instances_csv(&outcomes, &pools))
}
