use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use metabias_core::bma::{bma_screen, write_screen_csv, BmaConfig, BmaScreenResult};
use metabias_core::dataset::{self, MetaDataset, ModeratorSchema};
use metabias_core::ensemble::{fit_ensemble, write_weightfn_csv, EnsembleConfig, EnsembleReport, PriorConfig, SamplerConfig};
use metabias_core::metareg::{coefficient_table, reml_fit, write_coefficients_csv, CoefficientRow, RemlFit};
use metabias_core::pooling::{funnel_data, uwls, write_funnel_csv};
use metabias_core::simulate::{generate, SimConfig};
use metabias_core::{json, Error, Result};

use crate::manifest::{config_digest, now, InputFile, RunManifest};
use crate::{BiasArgs, Command, FullArgs, InputArgs, MetaregArgs, SamplerArgs, ScreenArgs, ScreenOptions, SimulateArgs};

/// Grid spacing of the exported weight-function curve.
const WEIGHTFN_STEP: f64 = 0.005;

/// Output files, inputs and warnings collected while a command runs.
struct Run {
    out_dir: PathBuf,
    inputs: Vec<InputFile>,
    outputs: Vec<String>,
    warnings: Vec<String>,
}

impl Run {
    fn new(out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        Ok(Self { out_dir: out_dir.to_path_buf(), inputs: vec![], outputs: vec![], warnings: vec![] })
    }

    fn warn(&mut self, msg: String) {
        eprintln!("warning: {msg}");
        self.warnings.push(msg);
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.out_dir.join(name))?);
        body(&mut w)?;
        w.flush()?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, |w| json::to_writer(w, value))
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Pool(a) => run_command("pool", &a.out_dir.clone(), a.seed, &a, |r| pool(r, &a)),
        Command::Funnel(a) => run_command("funnel", &a.out_dir.clone(), a.seed, &a, |r| funnel(r, &a)),
        Command::Bias(a) => run_command("bias", &a.input.out_dir.clone(), a.input.seed, &a, |r| bias(r, &a)),
        Command::Metareg(a) => run_command("metareg", &a.input.out_dir.clone(), a.input.seed, &a, |r| metareg(r, &a)),
        Command::Screen(a) => run_command("screen", &a.input.out_dir.clone(), a.input.seed, &a, |r| screen(r, &a)),
        Command::Simulate(a) => simulate(&a),
        Command::Full(a) => run_command("full", &a.input.out_dir.clone(), a.input.seed, &a, |r| full(r, &a)),
    }
}

/// Runs `body` and writes manifest.json whether it succeeds or not.
fn run_command<S: Serialize>(
    command: &str,
    out_dir: &Path,
    seed: u64,
    settings: &S,
    body: impl FnOnce(&mut Run) -> Result<()>,
) -> Result<()> {
    let started_at = now();
    let mut run = Run::new(out_dir)?;
    let result = body(&mut run);
    finish(run, command, seed, serde_json::to_value(settings)?, started_at, result)
}

fn finish(
    mut run: Run,
    command: &str,
    seed: u64,
    settings: serde_json::Value,
    started_at: String,
    result: Result<()>,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config_digest: config_digest(command, &settings, &run.inputs),
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at,
        finished_at: now(),
        status: if result.is_ok() { "ok" } else { "error" }.to_string(),
        error: result.as_ref().err().map(|e| e.to_string()),
        settings,
        inputs: std::mem::take(&mut run.inputs),
        outputs: std::mem::take(&mut run.outputs),
        warnings: std::mem::take(&mut run.warnings),
    };
    let written = json::to_writer(BufWriter::new(File::create(run.out_dir.join("manifest.json"))?), &manifest);
    result?;
    written
}

fn load(run: &mut Run, args: &InputArgs) -> Result<MetaDataset> {
    run.inputs.push(InputFile::read("input", &args.input)?);
    let data = match &args.schema {
        Some(path) => {
            run.inputs.push(InputFile::read("schema", path)?);
            dataset::load_csv(&args.input, &ModeratorSchema::from_json_file(path)?)?
        }
        None => dataset::load_csv_inferred(&args.input)?,
    };
    Ok(data)
}

#[derive(Debug, Serialize)]
struct OutlierScreen {
    status: &'static str,
    n_input: usize,
    excluded: Vec<String>,
}

/// Applies the ten-IQR screen unless disabled; datasets below its
/// four-estimate minimum pass through with a warning.
fn screen_outliers(run: &mut Run, data: MetaDataset, disabled: bool) -> Result<(MetaDataset, OutlierScreen)> {
    let n_input = data.len();
    if disabled {
        return Ok((data, OutlierScreen { status: "disabled", n_input, excluded: vec![] }));
    }
    if n_input < 4 {
        run.warn(format!("outlier screen skipped: it needs at least 4 estimates, got {n_input}"));
        return Ok((data, OutlierScreen { status: "skipped", n_input, excluded: vec![] }));
    }
    let (kept, excluded) = dataset::filter_outliers(&data)?;
    if !excluded.is_empty() {
        run.warn(format!("outlier screen excluded {} estimate(s): {}", excluded.len(), excluded.join(", ")));
    }
    Ok((kept, OutlierScreen { status: "applied", n_input, excluded }))
}

fn prepared(run: &mut Run, args: &InputArgs) -> Result<(MetaDataset, OutlierScreen)> {
    let data = load(run, args)?;
    screen_outliers(run, data, args.no_outlier_filter)
}

#[derive(Debug, Serialize)]
struct PoolReport {
    outliers: OutlierScreen,
    mu_hat: f64,
    se_naive: f64,
    se_cluster: f64,
    p_value_cluster: f64,
    n_estimates: usize,
    n_studies: usize,
}

fn do_pool(run: &mut Run, data: &MetaDataset, outliers: OutlierScreen) -> Result<f64> {
    let p = uwls(data)?;
    let report = PoolReport {
        outliers,
        mu_hat: p.mu_hat,
        se_naive: p.se_naive,
        se_cluster: p.se_cluster,
        p_value_cluster: p.p_value_cluster,
        n_estimates: p.n_estimates,
        n_studies: p.n_studies,
    };
    run.write_json("pool.json", &report)?;
    Ok(p.mu_hat)
}

fn do_funnel(run: &mut Run, data: &MetaDataset) -> Result<()> {
    let mu = uwls(data)?.mu_hat;
    let rows = funnel_data(data, mu)?;
    run.write("funnel.csv", |w| write_funnel_csv(&rows, w))
}

fn pool(run: &mut Run, args: &InputArgs) -> Result<()> {
    let (data, outliers) = prepared(run, args)?;
    do_pool(run, &data, outliers).map(|_| ())
}

fn funnel(run: &mut Run, args: &InputArgs) -> Result<()> {
    let (data, _) = prepared(run, args)?;
    do_funnel(run, &data)
}

#[derive(Debug, Serialize)]
struct BiasOutput<'a> {
    seed: u64,
    sampler: &'a SamplerConfig,
    priors: &'a PriorConfig,
    #[serde(flatten)]
    report: EnsembleReport,
}

fn ensemble_config(s: &SamplerArgs) -> EnsembleConfig {
    let mut cfg = EnsembleConfig::default();
    cfg.sampler.chains = s.chains;
    cfg.sampler.iterations = s.iters;
    cfg.sampler.burn_in = s.burn_in;
    cfg
}

fn do_bias(run: &mut Run, data: &MetaDataset, sampler: &SamplerArgs, seed: u64) -> Result<()> {
    let cfg = ensemble_config(sampler);
    cfg.sampler.validate()?;
    let (posteriors, summary) = fit_ensemble(data, &cfg, seed)?;
    let report = EnsembleReport::new(data.len(), &posteriors, summary);
    for label in &report.unconverged {
        run.warn(format!("model {label} did not reach split R-hat <= {}", cfg.sampler.rhat_threshold));
    }
    let curve = report.weight_function(WEIGHTFN_STEP);
    run.write_json("ensemble.json", &BiasOutput { seed, sampler: &cfg.sampler, priors: &cfg.priors, report })?;
    run.write("weightfn.csv", |w| write_weightfn_csv(w, &curve))
}

fn bias(run: &mut Run, args: &BiasArgs) -> Result<()> {
    let (data, _) = prepared(run, &args.input)?;
    do_bias(run, &data, &args.sampler, args.input.seed)
}

#[derive(Debug, Serialize)]
struct MetaregOutput {
    fit: RemlFit,
    coefficients: Vec<CoefficientRow>,
}

fn do_metareg(run: &mut Run, data: &MetaDataset, moderators: &[String]) -> Result<()> {
    let fit = reml_fit(data, moderators)?;
    let coefficients = coefficient_table(&fit);
    run.write("metareg.csv", |w| write_coefficients_csv(&coefficients, w))?;
    run.write_json("metareg.json", &MetaregOutput { fit, coefficients })
}

fn metareg(run: &mut Run, args: &MetaregArgs) -> Result<()> {
    let (data, _) = prepared(run, &args.input)?;
    let moderators = match &args.moderators {
        Some(m) => clean(m),
        None => data.schema().names().map(String::from).collect(),
    };
    do_metareg(run, &data, &moderators)
}

fn clean(list: &[String]) -> Vec<String> {
    list.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn do_screen(
    run: &mut Run,
    data: &MetaDataset,
    candidates: Option<&[String]>,
    opts: &ScreenOptions,
) -> Result<BmaScreenResult> {
    let forced = clean(&opts.forced);
    let candidates = match candidates {
        Some(c) => clean(c),
        None => data.schema().names().filter(|n| !forced.iter().any(|f| f == n)).map(String::from).collect(),
    };
    let config = BmaConfig { precision_weighted: opts.precision_weighted, ..Default::default() };
    let result = bma_screen(data, &candidates, &forced, opts.threshold, &config)?;
    run.write("screen.csv", |w| write_screen_csv(&result, w))?;
    Ok(result)
}

fn screen(run: &mut Run, args: &ScreenArgs) -> Result<()> {
    let (data, _) = prepared(run, &args.input)?;
    do_screen(run, &data, args.moderators.as_deref(), &args.screen).map(|_| ())
}

fn full(run: &mut Run, args: &FullArgs) -> Result<()> {
    let (data, outliers) = prepared(run, &args.input)?;
    let rows = dataset::describe(&data);
    run.write("describe.csv", |w| dataset::write_describe_csv(&rows, w))?;
    do_pool(run, &data, outliers)?;
    do_funnel(run, &data)?;
    do_bias(run, &data, &args.sampler, args.input.seed)?;
    let screened = do_screen(run, &data, args.moderators.as_deref(), &args.screen)?;
    do_metareg(run, &data, &screened.included)
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let started_at = now();
    let mut run = Run::new(&args.out_dir)?;
    let mut config = SimConfig::default();
    let result = (|| {
        if let Some(path) = &args.config {
            run.inputs.push(InputFile::read("config", path)?);
            config = SimConfig::from_json(&std::fs::read_to_string(path)?)?;
        }
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        let data = generate(&config)?;
        run.write("dataset.csv", |w| dataset::write_csv(&data, w))?;
        run.write_json("simulation.json", &config)
    })();
    let settings = serde_json::to_value(&config).map_err(Error::from)?;
    finish(run, "simulate", config.seed, settings, started_at, result)
}
