use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use incidence::data::{load_dataset, observed_by_level1, save_dataset, ColumnMapping, Dataset};
use incidence::imputation::{assemble_mi_stack, impute_locf, load_mi_stack, MIStack};
use incidence::intervals::{build_at_risk_intervals, EncounterTable, IntervalRules};
use incidence::pipeline::{run_pipeline, run_simulation_study, write_report, write_study, Mode, PipelineConfig};
use incidence::pooling::{rubin_pool, stepdown_select};
use incidence::risk::{pool_expected, TrainedModel};
use incidence::sim::{gen_dataset, sim_diagnostics, Period, SimConfig};
use serde::Serialize;

/// Risk-adjusted incidence monitoring for hierarchical recurrent-event data.
///
/// Thread count follows RAYON_NUM_THREADS.
#[derive(Parser)]
#[command(name = "incidence", version)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its truth sidecar.
    Simulate(SimulateArgs),
    /// Build at-risk intervals from encounters, or fill missing covariates.
    Ingest(IngestArgs),
    /// Step-down covariate selection on an imputation stack.
    Select(ConfigArgs),
    /// Fit one model per imputation copy.
    Fit(FitArgs),
    /// Expected counts per program from fitted models.
    Predict(PredictArgs),
    /// Full pipeline run with variance, coverage and flags.
    Validate(ConfigArgs),
    /// Summary and flag table of a finished run.
    Report(ReportArgs),
    /// Repeated simulated runs aggregated into a coverage table.
    Study(StudyArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation configuration (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_period)]
    period: Option<Period>,
    #[arg(long)]
    n_level1: Option<usize>,
    #[arg(long)]
    n_level2: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Encounter table (JSON) to turn into at-risk intervals.
    #[arg(long, conflicts_with = "dataset")]
    encounters: Option<PathBuf>,
    /// Interval rules (JSON); defaults apply when absent.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Existing interval dataset (CSV).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Fill missing covariates forward, then backward.
    #[arg(long)]
    locf: bool,
    /// Output dataset (CSV); a JSON log is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset path; with several copies a pattern where {} is the copy number.
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 1)]
    copies: usize,
    #[arg(long)]
    mapping: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Pipeline configuration whose fit settings are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Models written by `fit`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of a `validate` run.
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    replicates: Option<usize>,
}

fn parse_period(s: &str) -> std::result::Result<Period, String> {
    match s {
        "three_year" | "3y" => Ok(Period::ThreeYear),
        "one_year" | "1y" => Ok(Period::OneYear),
        _ => Err(format!("unknown period {s}; use three_year or one_year")),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::from_json_file(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mapping_for(path: &str, mapping: &Option<PathBuf>) -> Result<ColumnMapping> {
    Ok(match mapping {
        Some(m) => ColumnMapping::from_json_file(m)?,
        None => ColumnMapping::from_csv_header(Path::new(&path.replace("{}", "1")))?,
    })
}

fn load_stack(args: &DataArgs) -> Result<MIStack> {
    let mapping = mapping_for(&args.data, &args.mapping)?;
    Ok(if args.copies > 1 {
        load_mi_stack(&args.data, args.copies, &mapping)?
    } else {
        assemble_mi_stack(vec![load_dataset(Path::new(&args.data), &mapping)?])?
    })
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str::<SimConfig>(&fs::read_to_string(p)?)
            .map_err(|e| incidence::Error::Config(format!("{}: {e}", p.display())))?,
        None => SimConfig::for_period(a.period.unwrap_or(Period::ThreeYear), a.seed.unwrap_or(1)),
    };
    if let Some(p) = a.period {
        if a.config.is_some() && p != cfg.period {
            bail!(incidence::Error::Config("--period conflicts with the configuration file".into()));
        }
    }
    if let Some(n) = a.n_level1 {
        cfg.n_level1 = n;
    }
    if let Some(n) = a.n_level2 {
        cfg.n_level2 = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let (data, truth) = gen_dataset(&cfg)?;
    fs::create_dir_all(&a.out)?;
    save_dataset(&data, &a.out.join("dataset.csv"))?;
    write_json(&a.out.join("truth.json"), &truth)?;
    write_json(&a.out.join("diagnostics.json"), &sim_diagnostics(&data, &truth))?;
    write_json(&a.out.join("sim_config.json"), &cfg)?;
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let log_path = a.out.with_extension("log.json");
    let mut data: Dataset = if let Some(enc) = &a.encounters {
        let table: EncounterTable = serde_json::from_str(&fs::read_to_string(enc)?)
            .map_err(|e| incidence::Error::Schema(format!("{}: {e}", enc.display())))?;
        let rules = match &a.rules {
            Some(p) => serde_json::from_str::<IntervalRules>(&fs::read_to_string(p)?)
                .map_err(|e| incidence::Error::Config(format!("{}: {e}", p.display())))?,
            None => IntervalRules::default(),
        };
        let build = build_at_risk_intervals(&table, &rules)?;
        write_json(&log_path, &serde_json::json!({ "build": build.log, "origins": build.origins }))?;
        build.dataset
    } else if let Some(path) = &a.dataset {
        let mapping = mapping_for(&path.to_string_lossy(), &a.mapping)?;
        load_dataset(path, &mapping)?
    } else {
        bail!(incidence::Error::Config("ingest needs --encounters or --dataset".into()));
    };
    if a.locf {
        let r = impute_locf(&data)?;
        let log = serde_json::json!({ "dropped": r.dropped, "all_missing_subjects": r.all_missing_subjects });
        write_json(&a.out.with_extension("locf.json"), &log)?;
        data = r.dataset;
    }
    if let Some(parent) = a.out.parent() {
        fs::create_dir_all(parent)?;
    }
    save_dataset(&data, &a.out)?;
    Ok(())
}

fn select(a: ConfigArgs) -> Result<()> {
    let cfg = load_config(&a)?;
    let Some(inputs) = &cfg.analysis else {
        bail!(incidence::Error::Config("select needs an analysis section".into()));
    };
    if inputs.copies < 2 {
        bail!(incidence::Error::Config("selection needs at least two imputation copies".into()));
    }
    let stack = load_stack(&DataArgs {
        data: inputs.training.clone(),
        copies: inputs.copies,
        mapping: inputs.mapping.clone(),
    })?;
    let trace = stepdown_select(&stack, &cfg.fit, &cfg.selection_thresholds)?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("selection_trace.json"), &trace)?;
    fs::write(cfg.output_dir.join("selection_trace.txt"), trace.to_text())?;
    print!("{}", trace.to_text());
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct ModelFile {
    models: Vec<TrainedModel>,
    pooled: Option<incidence::pooling::PooledEstimate>,
}

fn fit(a: FitArgs) -> Result<()> {
    let fit_cfg = match &a.config {
        Some(p) => PipelineConfig::from_json_file(p)?.fit,
        None => PipelineConfig::default().fit,
    };
    let stack = load_stack(&a.data)?;
    let models = stack
        .copies()
        .iter()
        .map(|d| TrainedModel::train(d, &fit_cfg, None))
        .collect::<incidence::Result<Vec<_>>>()?;
    let pooled = if models.len() > 1 {
        let betas: Vec<Vec<f64>> = models.iter().map(|m| m.fit.beta_hat.clone()).collect();
        let covs: Vec<_> = models.iter().map(|m| m.fit.beta_cov_matrix()).collect();
        Some(rubin_pool(stack.covariate_names(), &betas, &covs)?)
    } else {
        None
    };
    write_json(&a.out, &ModelFile { models, pooled })
}

#[derive(Serialize)]
struct ExpectedRow {
    level1: String,
    observed: u64,
    expected: f64,
}

fn predict(a: PredictArgs) -> Result<()> {
    let file: ModelFile = serde_json::from_str(&fs::read_to_string(&a.model)?)
        .map_err(|e| incidence::Error::Schema(format!("{}: {e}", a.model.display())))?;
    let stack = load_stack(&a.data)?;
    if stack.m() != file.models.len() {
        bail!(incidence::Error::Validation(format!(
            "{} models but {} data copies",
            file.models.len(),
            stack.m()
        )));
    }
    let names = file.models[0].fit.covariate_names.clone();
    let stack = stack.select_covariates_by_name(&names)?;
    let per_copy: Vec<BTreeMap<String, f64>> = file
        .models
        .iter()
        .zip(stack.copies())
        .map(|(m, d)| m.expected_by_program(d))
        .collect::<incidence::Result<_>>()?;
    let observed = observed_by_level1(stack.copy(0));
    let mut w = csv::Writer::from_path(&a.out)?;
    for (id, &obs) in &observed {
        let v: Vec<f64> = per_copy.iter().map(|m| m[&**id]).collect();
        w.serialize(ExpectedRow {
            level1: id.to_string(),
            observed: obs,
            expected: pool_expected(&v)?,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn validate(a: ConfigArgs) -> Result<()> {
    let cfg = load_config(&a)?;
    let run = run_pipeline(&cfg)?;
    for s in run.scenarios() {
        println!("{}: {} programs, spearman {:?}", s.name, s.observed.len(), s.spearman);
    }
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let r = write_report(&a.dir)?;
    print!("{}", r.text);
    Ok(())
}

fn study(a: StudyArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(n) = a.replicates {
        cfg.replicates = n;
    }
    if cfg.mode != Mode::Simulate {
        bail!(incidence::Error::Config("study needs simulate mode".into()));
    }
    let report = run_simulation_study(&cfg)?;
    write_study(&report, &cfg)?;
    println!(
        "{} of {} replicates completed; tables in {}",
        report.replicates_completed,
        report.replicates_requested,
        cfg.output_dir.display()
    );
    if report.failure_flag {
        eprintln!("warning: more than 5% of replicates failed");
    }
    Ok(())
}

/// 1 for bad input or configuration, 2 for numerical failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<incidence::Error>()) {
        Some(err) if !err.is_input_error() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }))
        .init();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Ingest(a) => ingest(a),
        Command::Select(a) => select(a),
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::Validate(a) => validate(a),
        Command::Report(a) => report(a),
        Command::Study(a) => study(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
