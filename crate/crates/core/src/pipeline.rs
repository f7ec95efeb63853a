//! End-to-end runs: simulate or load data, impute, select covariates, fit,
//! predict per-program counts with their variance, validate coverage and
//! write artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cox::{fit_cox_with, FrailtyFit, Level};
use crate::data::{load_dataset, observed_by_level1, save_dataset, ColumnMapping, Dataset};
use crate::error::{Error, Result};
use crate::imputation::{assemble_mi_stack, impute_locf, load_mi_stack, MIStack};
use crate::pooling::{stepdown_select, SelectionThresholds, SelectionTrace};
use crate::risk::{restrict_to_training, FitConfig, ProgramPrediction, TrainedModel};
use crate::sim::{gen_dataset, sim_diagnostics, Period, ReVariance, SimConfig};
use crate::stats::{paired_histogram, spearman, weighted_residuals, HistogramBin, ResidualRow};
use crate::variance::{
    assemble_prediction, block_partition, block_variance_from_estimates, leave_block_estimates,
    leave_one_out_estimates, loo_variance_from_estimates, prediction_coverage, BlockPlan, CiMode, Estimator,
    Normalization,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Simulate,
    Analyze,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Validation day 0 is training day 0.
    Origin,
    /// Validation ends where training ends.
    TrainingEnd,
}

/// Simulated training and validation data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    pub n_level1: usize,
    pub n_level2: usize,
    pub training_periods: Vec<Period>,
    /// Evaluate each model on its own training data.
    pub validate_same_period: bool,
    /// Evaluate each model on an independent following one-year period.
    pub validate_next_period: bool,
    /// Where the following year sits on the time axis of a longer training
    /// period.
    pub next_period_alignment: Alignment,
    pub h0: Option<f64>,
    pub beta: Option<Vec<f64>>,
    pub level1_variance: Option<ReVariance>,
    pub level2_variance: Option<ReVariance>,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            n_level1: 30,
            n_level2: 1500,
            training_periods: vec![Period::ThreeYear, Period::OneYear],
            validate_same_period: true,
            validate_next_period: true,
            next_period_alignment: Alignment::Origin,
            h0: None,
            beta: None,
            level1_variance: None,
            level2_variance: None,
        }
    }
}

impl SimulationSettings {
    pub fn sim_config(&self, period: Period, seed: u64, program_seed: u64) -> SimConfig {
        let mut c = SimConfig::for_period(period, seed).scaled(self.n_level1, self.n_level2);
        c.program_seed = Some(program_seed);
        if let Some(h) = self.h0 {
            c.h0 = h;
        }
        if let Some(b) = &self.beta {
            c.beta = b.clone();
        }
        if let Some(v) = self.level1_variance {
            c.level1_variance = v;
        }
        if let Some(v) = self.level2_variance {
            c.level2_variance = v;
        }
        c
    }
}

/// Files to analyze. With `copies > 1` the paths are patterns where `{}`
/// stands for the copy number `1..=copies`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisInputs {
    pub training: String,
    #[serde(default)]
    pub validation: Option<String>,
    #[serde(default)]
    pub mapping: Option<PathBuf>,
    #[serde(default = "one")]
    pub copies: usize,
    /// Fill missing covariates by carrying values forward and backward.
    #[serde(default)]
    pub locf: bool,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub simulation: SimulationSettings,
    pub analysis: Option<AnalysisInputs>,
    pub m_blocks: Vec<usize>,
    pub confidence_levels: Vec<f64>,
    pub variance_estimator: Estimator,
    pub normalization: Normalization,
    /// Also report coverage under this normalization, from the same refits.
    pub comparison_normalization: Option<Normalization>,
    pub ci_mode: CiMode,
    pub selection: bool,
    pub selection_thresholds: SelectionThresholds,
    pub fit: FitConfig,
    pub seed: u64,
    pub replicates: usize,
    pub output_dir: PathBuf,
    /// Truncates validation intervals at this day.
    pub validation_cutoff_day: Option<f64>,
    pub histogram_bins: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::Simulate,
            simulation: SimulationSettings::default(),
            analysis: None,
            m_blocks: vec![5, 10, 15],
            confidence_levels: vec![0.7, 0.8, 0.9, 0.95, 0.995],
            variance_estimator: Estimator::BlockJackknife,
            normalization: Normalization::Verbatim,
            comparison_normalization: None,
            ci_mode: CiMode::TwoSided,
            selection: false,
            selection_thresholds: SelectionThresholds::default(),
            fit: FitConfig::default(),
            seed: 1,
            replicates: 1,
            output_dir: PathBuf::from("out"),
            validation_cutoff_day: None,
            histogram_bins: 20,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.confidence_levels.is_empty() {
            return bad("at least one confidence level is required".into());
        }
        for &c in &self.confidence_levels {
            if !(c > 0.0 && c < 1.0) {
                return bad(format!("confidence level {c} must lie strictly between 0 and 1"));
            }
        }
        if self.variance_estimator == Estimator::BlockJackknife {
            if self.m_blocks.is_empty() {
                return bad("at least one block count is required".into());
            }
            if let Some(m) = self.m_blocks.iter().find(|&&m| m < 2) {
                return bad(format!("block count {m} must be at least 2"));
            }
        }
        if self.replicates == 0 {
            return bad("replicates must be positive".into());
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins must be positive".into());
        }
        if let Some(c) = self.validation_cutoff_day {
            if !(c > 0.0) {
                return bad(format!("validation cutoff day {c} must be positive"));
            }
        }
        if let CiMode::Asymmetric { upper_share } = self.ci_mode {
            if !(0.0..=1.0).contains(&upper_share) {
                return bad(format!("upper_share {upper_share} must lie in [0, 1]"));
            }
        }
        let f = &self.fit.frailty;
        if !(f.theta_lower > 0.0 && f.theta_upper > f.theta_lower && f.theta_tol > 0.0 && f.max_iter > 0) {
            return bad("frailty options need 0 < theta_lower < theta_upper, positive tolerance and iterations".into());
        }
        if let Some(spec) = &self.fit.random_effects {
            spec.validate()?;
        }
        let t = &self.selection_thresholds;
        if !(t.stop <= t.drop2 && t.drop2 <= t.drop3) {
            return bad("selection thresholds must satisfy stop <= drop2 <= drop3".into());
        }
        match self.mode {
            Mode::Simulate => {
                let s = &self.simulation;
                if s.training_periods.is_empty() {
                    return bad("simulation needs at least one training period".into());
                }
                if !s.validate_same_period && !s.validate_next_period {
                    return bad("simulation needs at least one validation target".into());
                }
                if self.selection {
                    return bad("selection needs imputation copies and is only available in analyze mode".into());
                }
                let max_m = self.m_blocks.iter().copied().max().unwrap_or(2);
                if self.variance_estimator == Estimator::BlockJackknife && max_m > s.n_level1 {
                    return bad(format!("block count {max_m} exceeds the {} simulated programs", s.n_level1));
                }
                for p in &s.training_periods {
                    s.sim_config(*p, 0, 0).validate()?;
                }
            }
            Mode::Analyze => {
                let Some(a) = &self.analysis else {
                    return bad("analyze mode needs an analysis section".into());
                };
                if a.copies == 0 {
                    return bad("copies must be positive".into());
                }
                if a.copies > 1 && !a.training.contains("{}") {
                    return bad("with several copies the training path must contain {}".into());
                }
                if self.selection && a.copies < 2 {
                    return bad("selection needs at least two imputation copies".into());
                }
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Seed of a named substream of `master`.
pub fn substream(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Block count; the number of programs for leave-one-out.
    pub m: usize,
    pub confidence: f64,
    pub prediction: ProgramPrediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub scenario: String,
    pub normalization: Normalization,
    pub confidence: f64,
    pub m: usize,
    pub coverage: f64,
    pub abs_cov_diff: f64,
}

/// One trained model evaluated on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub name: String,
    pub training: String,
    pub evaluation: String,
    pub expected: BTreeMap<String, f64>,
    pub observed: BTreeMap<String, u64>,
    pub spearman: Option<f64>,
    pub coverage: Vec<CoverageRow>,
    pub predictions: Vec<PredictionRecord>,
    pub residuals: Vec<ResidualRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingResult {
    pub name: String,
    /// One fit per imputation copy.
    pub fits: Vec<FrailtyFit>,
    pub plans: Vec<BlockPlan>,
    pub scenarios: Vec<ScenarioResult>,
}

fn string_keys(m: BTreeMap<std::sync::Arc<str>, u64>) -> BTreeMap<String, u64> {
    m.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Fits one model per copy, predicts every evaluation set and estimates the
/// across-program variance by refitting without blocks of programs.
pub fn train_and_evaluate(
    name: &str,
    train: &[Dataset],
    evals: Vec<(String, Vec<Dataset>)>,
    cfg: &PipelineConfig,
    block_seed: u64,
) -> Result<TrainingResult> {
    if train.is_empty() {
        return Err(Error::Validation("no training copies".into()));
    }
    if let Some((n, _)) = evals.iter().find(|(_, c)| c.len() != train.len()) {
        return Err(Error::Validation(format!("evaluation set {n} has a different number of copies")));
    }
    let models: Vec<TrainedModel> = train
        .par_iter()
        .map(|d| TrainedModel::train(d, &cfg.fit, None))
        .collect::<Result<_>>()?;
    let evals: Vec<(String, Vec<Dataset>)> = evals
        .into_iter()
        .map(|(n, copies)| {
            let kept = copies.iter().map(|d| restrict_to_training(&models[0].fit, d)).collect();
            (n, kept)
        })
        .collect();
    let n_copies = train.len();
    // [eval][copy]
    let expected: Vec<Vec<BTreeMap<String, f64>>> = evals
        .iter()
        .map(|(_, copies)| {
            models
                .iter()
                .zip(copies)
                .map(|(m, d)| m.expected_by_program(d))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let ids: Vec<String> = train[0].level1_ids().iter().map(|s| s.to_string()).collect();
    let mut plans = vec![];
    let norms: Vec<Normalization> = std::iter::once(cfg.normalization)
        .chain(cfg.comparison_normalization.filter(|&n| n != cfg.normalization && cfg.variance_estimator == Estimator::BlockJackknife))
        .collect();
    // (normalization, m, [eval][copy] -> variance per program)
    let mut across: Vec<(Normalization, usize, Vec<Vec<BTreeMap<String, f64>>>)> = vec![];
    match cfg.variance_estimator {
        Estimator::BlockJackknife => {
            for &m in &cfg.m_blocks {
                let plan = block_partition(&ids, m, substream(block_seed, &format!("blocks-{m}")))?;
                let mut var = vec![vec![Vec::with_capacity(n_copies); evals.len()]; norms.len()];
                for l in 0..n_copies {
                    let refs: Vec<&Dataset> = evals.iter().map(|(_, c)| &c[l]).collect();
                    let est = leave_block_estimates(&train[l], &refs, &cfg.fit, &plan, Some(&models[l].fit.beta_hat))?;
                    for (k, &norm) in norms.iter().enumerate() {
                        for (e, est_e) in est.iter().enumerate() {
                            var[k][e].push(block_variance_from_estimates(est_e, plan.q, norm));
                        }
                    }
                }
                for (k, v) in var.into_iter().enumerate() {
                    across.push((norms[k], m, v));
                }
                plans.push(plan);
            }
        }
        Estimator::LooJackknife => {
            let mut var = vec![Vec::with_capacity(n_copies); evals.len()];
            for l in 0..n_copies {
                let refs: Vec<&Dataset> = evals.iter().map(|(_, c)| &c[l]).collect();
                let est = leave_one_out_estimates(&train[l], &refs, &cfg.fit, Some(&models[l].fit.beta_hat))?;
                for (e, est_e) in est.iter().enumerate() {
                    var[e].push(loo_variance_from_estimates(est_e, &expected[e][l]));
                }
            }
            across.push((cfg.normalization, ids.len(), var));
        }
    }

    let mut scenarios = vec![];
    for (e, (eval_name, copies)) in evals.iter().enumerate() {
        let observed = string_keys(observed_by_level1(&copies[0]));
        let pooled: BTreeMap<String, f64> = observed
            .keys()
            .map(|k| {
                let s: f64 = expected[e].iter().map(|x| x[k]).sum();
                (k.clone(), s / n_copies as f64)
            })
            .collect();
        let scenario = format!("{name}_on_{eval_name}");
        let mut predictions = vec![];
        let mut coverage = vec![];
        for &conf in &cfg.confidence_levels {
            for (norm, m, var) in &across {
                let mut preds = Vec::with_capacity(observed.len());
                for (k, &obs) in &observed {
                    let per_copy: Vec<f64> = expected[e].iter().map(|x| x[k]).collect();
                    let across_copy: Vec<f64> = var[e].iter().map(|x| x[k]).collect();
                    preds.push(assemble_prediction(k, obs, per_copy, &across_copy, conf, cfg.ci_mode)?);
                }
                let cov = prediction_coverage(&preds)?;
                coverage.push(CoverageRow {
                    scenario: scenario.clone(),
                    normalization: *norm,
                    confidence: conf,
                    m: *m,
                    coverage: cov,
                    abs_cov_diff: (cov - conf).abs(),
                });
                if *norm != cfg.normalization {
                    continue;
                }
                predictions.extend(preds.into_iter().map(|p| PredictionRecord {
                    m: *m,
                    confidence: conf,
                    prediction: p,
                }));
            }
        }
        let (est, obs): (Vec<f64>, Vec<f64>) = observed.iter().map(|(k, &o)| (pooled[k], o as f64)).unzip();
        scenarios.push(ScenarioResult {
            name: scenario,
            training: name.to_string(),
            evaluation: eval_name.clone(),
            spearman: spearman(&est, &obs),
            residuals: weighted_residuals(&copies[0], &pooled, &observed),
            expected: pooled,
            observed,
            coverage,
            predictions,
        });
    }
    Ok(TrainingResult {
        name: name.to_string(),
        fits: models.into_iter().map(|m| m.fit).collect(),
        plans,
        scenarios,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub replicate: usize,
    pub dataset: String,
    pub censor_rate: f64,
    pub second_event_rate: f64,
    pub events_total: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub replicate: usize,
    pub training: String,
    pub model: String,
    pub covariate: String,
    pub estimate: f64,
    pub std_err: f64,
}

pub struct SimulatedData {
    pub name: String,
    pub dataset: Dataset,
    pub truth: crate::sim::SimTruth,
}

pub struct ReplicateRun {
    pub index: usize,
    pub seed: u64,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub coefficients: Vec<CoefficientRow>,
    pub trainings: Vec<TrainingResult>,
    pub data: Vec<SimulatedData>,
}

fn period_name(p: Period) -> &'static str {
    match p {
        Period::ThreeYear => "three_year",
        Period::OneYear => "one_year",
    }
}

fn coefficient_rows(replicate: usize, training: &str, model: &str, fit: &FrailtyFit) -> Vec<CoefficientRow> {
    fit.covariate_names
        .iter()
        .enumerate()
        .map(|(j, c)| CoefficientRow {
            replicate,
            training: training.to_string(),
            model: model.to_string(),
            covariate: c.clone(),
            estimate: fit.beta_hat[j],
            std_err: fit.std_err[j],
        })
        .collect()
}

/// Simulates the training periods and the following year, then trains and
/// evaluates each period.
pub fn simulate_replicate(cfg: &PipelineConfig, index: usize) -> Result<ReplicateRun> {
    let s = &cfg.simulation;
    let seed = substream(cfg.seed, &format!("replicate-{index}"));
    let program_seed = substream(seed, "programs");
    let mut data = vec![];
    let mut diagnostics = vec![];
    let mut push = |name: &str, c: SimConfig, data: &mut Vec<SimulatedData>| -> Result<()> {
        let (d, truth) = gen_dataset(&c)?;
        let diag = sim_diagnostics(&d, &truth);
        diagnostics.push(DiagnosticsRow {
            replicate: index,
            dataset: name.to_string(),
            censor_rate: diag.censor_rate,
            second_event_rate: diag.second_event_rate,
            events_total: diag.events_total,
        });
        data.push(SimulatedData {
            name: name.to_string(),
            dataset: d,
            truth,
        });
        Ok(())
    };
    for &p in &s.training_periods {
        let name = period_name(p);
        push(name, s.sim_config(p, substream(seed, name), program_seed), &mut data)?;
    }
    let next = if s.validate_next_period {
        push("next_year", s.sim_config(Period::OneYear, substream(seed, "next_year"), program_seed), &mut data)?;
        let d = data.last().expect("just pushed").dataset.clone();
        Some(match cfg.validation_cutoff_day {
            Some(c) => d.truncate(c),
            None => d,
        })
    } else {
        None
    };

    let mut coefficients = vec![];
    let mut trainings = vec![];
    for (k, &p) in s.training_periods.iter().enumerate() {
        let name = period_name(p);
        let train = &data[k].dataset;
        let cox = fit_cox_with(train, Some(Level::Level1), None, &cfg.fit.frailty)?;
        coefficients.extend(coefficient_rows(index, name, "cox", &cox));
        let mut evals = vec![];
        if s.validate_same_period {
            evals.push((name.to_string(), vec![train.clone()]));
        }
        if let Some(n) = &next {
            let shifted = match s.next_period_alignment {
                Alignment::Origin => n.clone(),
                Alignment::TrainingEnd => {
                    let train_len = s.sim_config(p, 0, 0).period_length_days;
                    let next_len = s.sim_config(Period::OneYear, 0, 0).period_length_days;
                    n.shift_time((train_len - next_len).max(0.0))
                }
            };
            evals.push(("next_year".to_string(), vec![shifted]));
        }
        let t = train_and_evaluate(name, std::slice::from_ref(train), evals, cfg, substream(seed, &format!("jackknife-{name}")))?;
        if cfg.fit.random_effects.is_some() {
            coefficients.extend(coefficient_rows(index, name, "frailty", &t.fits[0]));
        }
        trainings.push(t);
    }
    Ok(ReplicateRun {
        index,
        seed,
        diagnostics,
        coefficients,
        trainings,
        data,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyCoverageRow {
    pub scenario: String,
    pub normalization: Normalization,
    pub confidence: f64,
    pub m: usize,
    pub mean_coverage: f64,
    pub abs_cov_diff: f64,
    pub replicates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateCoverageRow {
    pub replicate: usize,
    pub scenario: String,
    pub normalization: Normalization,
    pub confidence: f64,
    pub m: usize,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub replicate: usize,
    pub scenario: String,
    pub level1: String,
    pub expected: f64,
    pub observed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub group: String,
    pub quantity: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpearmanRow {
    pub scenario: String,
    pub pairs: usize,
    pub spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config_hash: String,
    pub seed: u64,
    pub replicates_requested: usize,
    pub replicates_completed: usize,
    pub failures: Vec<ReplicateFailure>,
    /// More than five percent of replicates failed.
    pub failure_flag: bool,
    pub coverage: Vec<StudyCoverageRow>,
    pub spearman: Vec<SpearmanRow>,
    pub coefficient_means: Vec<MeanRow>,
    pub diagnostic_means: Vec<MeanRow>,
    pub replicate_coverage: Vec<ReplicateCoverageRow>,
    pub coefficients: Vec<CoefficientRow>,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub counts: Vec<CountRow>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn group_means(groups: BTreeMap<(String, String), Vec<f64>>) -> Vec<MeanRow> {
    groups
        .into_iter()
        .map(|((group, quantity), v)| {
            let (mean, sd) = mean_sd(&v);
            MeanRow {
                group,
                quantity,
                mean,
                sd,
                n: v.len(),
            }
        })
        .collect()
}

/// Runs `cfg.replicates` simulated replicates and aggregates coverage,
/// coefficients and simulator diagnostics. Failed replicates are recorded
/// and excluded.
pub fn run_simulation_study(cfg: &PipelineConfig) -> Result<StudyReport> {
    cfg.validate()?;
    if cfg.mode != Mode::Simulate {
        return Err(Error::Config("the simulation study needs simulate mode".into()));
    }
    let runs: Vec<(usize, Result<ReplicateRun>)> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| (r, simulate_replicate(cfg, r)))
        .collect();
    let mut failures = vec![];
    let mut replicate_coverage = vec![];
    let mut coefficients = vec![];
    let mut diagnostics = vec![];
    let mut counts = vec![];
    let mut completed = 0;
    for (r, run) in runs {
        match run {
            Err(e) => {
                warn!("replicate {r} failed: {e}");
                failures.push(ReplicateFailure {
                    replicate: r,
                    error: e.to_string(),
                });
            }
            Ok(run) => {
                completed += 1;
                coefficients.extend(run.coefficients);
                diagnostics.extend(run.diagnostics);
                for sc in run.trainings.iter().flat_map(|t| &t.scenarios) {
                    replicate_coverage.extend(sc.coverage.iter().map(|c| ReplicateCoverageRow {
                        replicate: r,
                        scenario: c.scenario.clone(),
                        normalization: c.normalization,
                        confidence: c.confidence,
                        m: c.m,
                        coverage: c.coverage,
                    }));
                    counts.extend(sc.observed.iter().map(|(k, &o)| CountRow {
                        replicate: r,
                        scenario: sc.name.clone(),
                        level1: k.clone(),
                        expected: sc.expected[k],
                        observed: o,
                    }));
                }
            }
        }
    }
    if completed == 0 {
        return Err(Error::Validation(format!("all {} replicates failed", cfg.replicates)));
    }
    let failure_flag = failures.len() as f64 > 0.05 * cfg.replicates as f64;
    if failure_flag {
        warn!("{} of {} replicates failed", failures.len(), cfg.replicates);
    }

    // keyed by scenario order of first appearance, then confidence and m
    let mut order: Vec<String> = vec![];
    let mut cells: BTreeMap<(bool, usize, u64, usize), Vec<f64>> = BTreeMap::new();
    for c in &replicate_coverage {
        let s = match order.iter().position(|x| x == &c.scenario) {
            Some(i) => i,
            None => {
                order.push(c.scenario.clone());
                order.len() - 1
            }
        };
        let comparison = c.normalization != cfg.normalization;
        cells.entry((comparison, s, c.confidence.to_bits(), c.m)).or_default().push(c.coverage);
    }
    let coverage = cells
        .into_iter()
        .map(|((comparison, s, conf, m), v)| {
            let confidence = f64::from_bits(conf);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            StudyCoverageRow {
                scenario: order[s].clone(),
                normalization: if comparison {
                    cfg.comparison_normalization.expect("comparison rows need one")
                } else {
                    cfg.normalization
                },
                confidence,
                m,
                mean_coverage: mean,
                abs_cov_diff: (mean - confidence).abs(),
                replicates: v.len(),
            }
        })
        .collect();

    let spearman_rows = order
        .iter()
        .map(|s| {
            let (est, obs): (Vec<f64>, Vec<f64>) = counts
                .iter()
                .filter(|c| &c.scenario == s)
                .map(|c| (c.expected, c.observed as f64))
                .unzip();
            SpearmanRow {
                scenario: s.clone(),
                pairs: est.len(),
                spearman: spearman(&est, &obs),
            }
        })
        .collect();

    let mut coef_groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for c in &coefficients {
        coef_groups
            .entry((format!("{}/{}", c.training, c.model), c.covariate.clone()))
            .or_default()
            .push(c.estimate);
    }
    let mut diag_groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for d in &diagnostics {
        diag_groups.entry((d.dataset.clone(), "censor_rate".into())).or_default().push(d.censor_rate);
        diag_groups
            .entry((d.dataset.clone(), "second_event_rate".into()))
            .or_default()
            .push(d.second_event_rate);
        diag_groups
            .entry((d.dataset.clone(), "events_total".into()))
            .or_default()
            .push(d.events_total as f64);
    }

    Ok(StudyReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        replicates_requested: cfg.replicates,
        replicates_completed: completed,
        failures,
        failure_flag,
        coverage,
        spearman: spearman_rows,
        coefficient_means: group_means(coef_groups),
        diagnostic_means: group_means(diag_groups),
        replicate_coverage,
        coefficients,
        diagnostics,
        counts,
    })
}

/// Seeds, configuration hash and output file hashes of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub substreams: BTreeMap<String, u64>,
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: String,
    pub error: String,
    pub input_error: bool,
    pub completed_stages: Vec<String>,
}

/// Writes output files and remembers their hashes for the manifest.
pub struct ArtifactWriter {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(ArtifactWriter {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(vec![]);
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.bytes(name, &bytes)
    }

    pub fn dataset(&mut self, name: &str, data: &Dataset) -> Result<()> {
        let mut buf = vec![];
        crate::data::write_dataset(data, &mut buf)?;
        self.bytes(name, &buf)
    }

    pub fn manifest(mut self, command: &str, cfg: &PipelineConfig, substreams: BTreeMap<String, u64>) -> Result<Manifest> {
        let m = Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            substreams,
            files: std::mem::take(&mut self.files),
        };
        self.json("manifest.json", &m)?;
        Ok(m)
    }

    pub fn failure(&mut self, record: &FailureRecord) -> Result<()> {
        self.json("failure.json", record)
    }
}

/// Writes the study tables.
pub fn write_study(report: &StudyReport, cfg: &PipelineConfig) -> Result<Manifest> {
    let mut w = ArtifactWriter::new(&cfg.output_dir)?;
    w.csv("study_coverage.csv", &report.coverage)?;
    w.csv("replicate_coverage.csv", &report.replicate_coverage)?;
    w.csv("coefficients.csv", &report.coefficients)?;
    w.csv("coefficient_means.csv", &report.coefficient_means)?;
    w.csv("diagnostics.csv", &report.diagnostics)?;
    w.csv("diagnostic_means.csv", &report.diagnostic_means)?;
    w.csv("counts.csv", &report.counts)?;
    w.csv("spearman.csv", &report.spearman)?;
    let mut hist = vec![];
    for s in &report.spearman {
        let (est, obs): (Vec<f64>, Vec<f64>) = report
            .counts
            .iter()
            .filter(|c| c.scenario == s.scenario)
            .map(|c| (c.expected, c.observed as f64))
            .unzip();
        hist.extend(histogram_rows(&s.scenario, &paired_histogram(&est, &obs, cfg.histogram_bins)));
    }
    w.csv("histogram.csv", &hist)?;
    w.json("failures.json", &report.failures)?;
    w.json("config.json", cfg)?;
    let substreams = (0..cfg.replicates)
        .map(|r| (format!("replicate-{r}"), substream(cfg.seed, &format!("replicate-{r}"))))
        .collect();
    w.manifest("study", cfg, substreams)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub scenario: String,
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub estimated: u64,
    pub observed: u64,
}

fn histogram_rows(scenario: &str, bins: &[HistogramBin]) -> Vec<HistogramRow> {
    bins.iter()
        .enumerate()
        .map(|(i, b)| HistogramRow {
            scenario: scenario.to_string(),
            bin: i,
            lo: b.lo,
            hi: b.hi,
            estimated: b.estimated,
            observed: b.observed,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionCsvRow {
    pub scenario: String,
    pub m: usize,
    pub confidence: f64,
    pub level1: String,
    pub observed: u64,
    pub expected: f64,
    pub var_poisson: f64,
    pub var_across: f64,
    pub var_mi: f64,
    pub total_variance: f64,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub flag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualCsvRow {
    pub scenario: String,
    pub level1: String,
    pub covariate: String,
    pub weighted_value: f64,
    pub exposure: f64,
    pub residual: f64,
}

/// Everything a single pipeline run produced; saved as `run.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub config: PipelineConfig,
    pub covariates: Vec<String>,
    pub selection: Option<SelectionTrace>,
    pub trainings: Vec<TrainingResult>,
}

impl RunArtifacts {
    pub fn scenarios(&self) -> impl Iterator<Item = &ScenarioResult> {
        self.trainings.iter().flat_map(|t| &t.scenarios)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("run.json"))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_run(w: &mut ArtifactWriter, run: &RunArtifacts) -> Result<()> {
    let mut preds = vec![];
    let mut cov = vec![];
    let mut hist = vec![];
    let mut sp = vec![];
    let mut res = vec![];
    for s in run.scenarios() {
        for r in &s.predictions {
            let p = &r.prediction;
            preds.push(PredictionCsvRow {
                scenario: s.name.clone(),
                m: r.m,
                confidence: r.confidence,
                level1: p.level1.clone(),
                observed: p.observed,
                expected: p.expected_pooled,
                var_poisson: p.variance_components.poisson,
                var_across: p.variance_components.across_group,
                var_mi: p.variance_components.mi,
                total_variance: p.total_variance,
                z: p.z,
                p_value: p.p_value,
                ci_lo: p.ci.lo,
                ci_hi: p.ci.hi,
                flag: p.flag.as_str().to_string(),
            });
        }
        cov.extend(s.coverage.iter().cloned());
        let (est, obs): (Vec<f64>, Vec<f64>) =
            s.observed.iter().map(|(k, &o)| (s.expected[k], o as f64)).unzip();
        hist.extend(histogram_rows(&s.name, &paired_histogram(&est, &obs, run.config.histogram_bins)));
        sp.push(SpearmanRow {
            scenario: s.name.clone(),
            pairs: est.len(),
            spearman: s.spearman,
        });
        res.extend(s.residuals.iter().map(|r| ResidualCsvRow {
            scenario: s.name.clone(),
            level1: r.level1.clone(),
            covariate: r.covariate.clone(),
            weighted_value: r.weighted_value,
            exposure: r.exposure,
            residual: r.residual,
        }));
    }
    w.csv("predictions.csv", &preds)?;
    w.csv("coverage.csv", &cov)?;
    w.csv("histogram.csv", &hist)?;
    w.csv("spearman.csv", &sp)?;
    w.csv("residuals.csv", &res)?;
    let fits: BTreeMap<&str, &[FrailtyFit]> = run.trainings.iter().map(|t| (t.name.as_str(), t.fits.as_slice())).collect();
    w.json("fits.json", &fits)?;
    let plans: BTreeMap<&str, &[BlockPlan]> = run.trainings.iter().map(|t| (t.name.as_str(), t.plans.as_slice())).collect();
    w.json("block_plans.json", &plans)?;
    if let Some(trace) = &run.selection {
        w.json("selection_trace.json", trace)?;
        w.bytes("selection_trace.txt", trace.to_text().as_bytes())?;
    }
    w.json("run.json", run)?;
    let report = emit_report(run);
    w.bytes("report.txt", report.text.as_bytes())?;
    w.csv("flags.csv", &report.flags)?;
    Ok(())
}

fn load_copies(path: &str, copies: usize, mapping: &ColumnMapping) -> Result<MIStack> {
    if copies > 1 {
        load_mi_stack(path, copies, mapping)
    } else {
        assemble_mi_stack(vec![load_dataset(Path::new(path), mapping)?])
    }
}

fn locf_stack(stack: &MIStack) -> Result<MIStack> {
    let results = stack.copies().iter().map(impute_locf).collect::<Result<Vec<_>>>()?;
    let mut keep: Vec<String> = results[0].dataset.covariate_names().to_vec();
    for r in &results[1..] {
        keep.retain(|c| r.dataset.covariate_names().contains(c));
    }
    let copies = results
        .into_iter()
        .map(|r| r.dataset.select_covariates_by_name(&keep))
        .collect::<Result<Vec<_>>>()?;
    assemble_mi_stack(copies)
}

struct Stages {
    done: Vec<String>,
    current: String,
}

impl Stages {
    fn start(&mut self, s: &str) {
        if !self.current.is_empty() {
            self.done.push(std::mem::take(&mut self.current));
        }
        info!("stage {s}");
        self.current = s.to_string();
    }
}

/// Runs the whole pipeline once and writes its artifacts. On failure the
/// artifacts written so far stay on disk next to `failure.json`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut w = ArtifactWriter::new(&cfg.output_dir)?;
    w.json("config.json", cfg)?;
    let mut stages = Stages {
        done: vec![],
        current: String::new(),
    };
    let mut substreams = BTreeMap::new();
    let outcome = match cfg.mode {
        Mode::Simulate => simulate_run(cfg, &mut w, &mut stages, &mut substreams),
        Mode::Analyze => analyze_run(cfg, &mut w, &mut stages, &mut substreams),
    };
    match outcome {
        Ok(run) => {
            stages.start("write");
            write_run(&mut w, &run)?;
            w.manifest("pipeline", cfg, substreams)?;
            Ok(run)
        }
        Err(e) => {
            w.failure(&FailureRecord {
                stage: stages.current.clone(),
                error: e.to_string(),
                input_error: e.is_input_error(),
                completed_stages: stages.done.clone(),
            })?;
            w.manifest("pipeline", cfg, substreams)?;
            Err(e)
        }
    }
}

fn simulate_run(
    cfg: &PipelineConfig,
    w: &mut ArtifactWriter,
    stages: &mut Stages,
    substreams: &mut BTreeMap<String, u64>,
) -> Result<RunArtifacts> {
    stages.start("simulate");
    let run = simulate_replicate(cfg, 0)?;
    substreams.insert("replicate-0".into(), run.seed);
    for d in &run.data {
        w.dataset(&format!("data/{}.csv", d.name), &d.dataset)?;
        w.json(&format!("data/{}_truth.json", d.name), &d.truth)?;
    }
    w.csv("diagnostics.csv", &run.diagnostics)?;
    w.csv("coefficients.csv", &run.coefficients)?;
    Ok(RunArtifacts {
        config: cfg.clone(),
        covariates: SimConfig::covariate_names(),
        selection: None,
        trainings: run.trainings,
    })
}

fn analyze_run(
    cfg: &PipelineConfig,
    w: &mut ArtifactWriter,
    stages: &mut Stages,
    substreams: &mut BTreeMap<String, u64>,
) -> Result<RunArtifacts> {
    let a = cfg.analysis.as_ref().expect("validated");
    stages.start("load");
    let first = a.training.replace("{}", "1");
    let mapping = match &a.mapping {
        Some(p) => ColumnMapping::from_json_file(p)?,
        None => ColumnMapping::from_csv_header(Path::new(&first))?,
    };
    let mut train = load_copies(&a.training, a.copies, &mapping)?;
    let mut validation = match &a.validation {
        Some(v) => Some(load_copies(v, a.copies, &mapping)?),
        None => None,
    };
    if a.locf {
        stages.start("impute");
        train = locf_stack(&train)?;
        validation = validation.as_ref().map(locf_stack).transpose()?;
    }
    let mut selection = None;
    if cfg.selection {
        stages.start("select");
        let trace = stepdown_select(&train, &cfg.fit, &cfg.selection_thresholds)?;
        w.json("selection_trace.json", &trace)?;
        w.bytes("selection_trace.txt", trace.to_text().as_bytes())?;
        if trace.final_covariates.is_empty() {
            return Err(Error::Validation("selection removed every covariate".into()));
        }
        train = train.select_covariates_by_name(&trace.final_covariates)?;
        selection = Some(trace);
    }
    let names = train.covariate_names().to_vec();
    let validation = validation
        .map(|v| -> Result<MIStack> {
            let v = v.select_covariates_by_name(&names)?;
            Ok(match cfg.validation_cutoff_day {
                Some(c) => v.map(|d| d.truncate(c)),
                None => v,
            })
        })
        .transpose()?;
    stages.start("evaluate");
    let block_seed = substream(cfg.seed, "jackknife-training");
    substreams.insert("jackknife-training".into(), block_seed);
    let mut evals = vec![("training".to_string(), train.copies().to_vec())];
    if let Some(v) = validation {
        evals.push(("validation".to_string(), v.into_copies()));
    }
    let t = train_and_evaluate("training", train.copies(), evals, cfg, block_seed)?;
    Ok(RunArtifacts {
        config: cfg.clone(),
        covariates: names,
        selection,
        trainings: vec![t],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlagRow {
    pub scenario: String,
    pub m: usize,
    pub confidence: f64,
    pub level1: String,
    pub observed: u64,
    pub expected: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p_value: Option<f64>,
    pub flag: String,
}

pub struct Report {
    pub text: String,
    pub flags: Vec<FlagRow>,
}

/// Human-readable summary and a flag table with one row per program,
/// block count and confidence level.
pub fn emit_report(run: &RunArtifacts) -> Report {
    let mut text = String::new();
    let _ = writeln!(text, "covariates: {}", run.covariates.join(", "));
    if let Some(s) = &run.selection {
        let _ = writeln!(text, "selection dropped {} of {} covariates", s.dropped().len(), s.initial_covariates.len());
    }
    let mut flags = vec![];
    for s in run.scenarios() {
        let total_obs: u64 = s.observed.values().sum();
        let total_exp: f64 = s.expected.values().sum();
        let _ = writeln!(text, "\n== {} ({} programs)", s.name, s.observed.len());
        let _ = writeln!(text, "observed {total_obs}, expected {total_exp:.2}");
        match s.spearman {
            Some(r) => {
                let _ = writeln!(text, "spearman {r:.3}");
            }
            None => {
                let _ = writeln!(text, "spearman undefined");
            }
        }
        let _ = writeln!(text, "{:>8} {:>4} {:>9} {:>9} {:>6} {:>6}", "conf", "m", "coverage", "absdiff", "above", "below");
        for c in s.coverage.iter().filter(|c| c.normalization == run.config.normalization) {
            let (mut above, mut below) = (0, 0);
            for r in s.predictions.iter().filter(|r| r.m == c.m && r.confidence == c.confidence) {
                match r.prediction.flag {
                    crate::risk::Flag::Above => above += 1,
                    crate::risk::Flag::Below => below += 1,
                    crate::risk::Flag::Within => {}
                }
            }
            let _ = writeln!(
                text,
                "{:>8} {:>4} {:>9.4} {:>9.4} {:>6} {:>6}",
                c.confidence, c.m, c.coverage, c.abs_cov_diff, above, below
            );
        }
        flags.extend(s.predictions.iter().map(|r| FlagRow {
            scenario: s.name.clone(),
            m: r.m,
            confidence: r.confidence,
            level1: r.prediction.level1.clone(),
            observed: r.prediction.observed,
            expected: r.prediction.expected_pooled,
            ci_lo: r.prediction.ci.lo,
            ci_hi: r.prediction.ci.hi,
            p_value: r.prediction.p_value,
            flag: r.prediction.flag.as_str().to_string(),
        }));
    }
    Report { text, flags }
}

/// Writes `report.txt` and `flags.csv` for a finished run directory.
pub fn write_report(dir: &Path) -> Result<Report> {
    let run = RunArtifacts::load(dir)?;
    let report = emit_report(&run);
    fs::write(dir.join("report.txt"), &report.text)?;
    let mut w = csv::Writer::from_path(dir.join("flags.csv"))?;
    for r in &report.flags {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(report)
}

/// Saves a dataset next to the other artifacts.
pub fn save_named(dir: &Path, name: &str, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_dataset(data, &dir.join(name))
}
