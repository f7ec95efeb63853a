//! Variance of expected counts: Poisson, across-program (block or
//! leave-one-out jackknife) and imputation components, with the Z-test,
//! confidence intervals and coverage.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::risk::{pool_expected, FitConfig, Flag, Interval, ProgramPrediction, TrainedModel, VarianceComponents};

/// Random partition of sampled program ids into `m` blocks of `q`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub seed: u64,
    pub sampled_level1_ids: Vec<String>,
    pub blocks: Vec<Vec<String>>,
    pub excluded: Vec<String>,
}

/// Largest `q` with `m * q <= n`.
pub fn block_size(n: usize, m: usize) -> usize {
    n.checked_div(m).unwrap_or(0)
}

pub fn block_partition<S: AsRef<str>>(ids: &[S], m: usize, seed: u64) -> Result<BlockPlan> {
    let n = ids.len();
    if m < 2 || m > n {
        return Err(Error::Config(format!(
            "block count {m} must be between 2 and the number of programs {n}"
        )));
    }
    let q = block_size(n, m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, n, m * q).into_vec();
    let sampled: Vec<String> = picked.iter().map(|&i| ids[i].as_ref().to_string()).collect();
    let mut used = vec![false; n];
    picked.iter().for_each(|&i| used[i] = true);
    let excluded = (0..n)
        .filter(|&i| !used[i])
        .map(|i| ids[i].as_ref().to_string())
        .collect();
    let blocks = sampled.chunks(q).map(|c| c.to_vec()).collect();
    Ok(BlockPlan {
        n,
        m,
        q,
        seed,
        sampled_level1_ids: sampled,
        blocks,
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `(m - 1) * q * sum of squared deviations`.
    Verbatim,
    /// `(m - 1) / m * sum of squared deviations`.
    Classical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    BlockJackknife,
    LooJackknife,
}

fn sum_sq_dev(values: &[f64], center: f64) -> f64 {
    values.iter().map(|v| (v - center).powi(2)).sum()
}

/// Block-jackknife variance from the leave-block estimates of one program.
pub fn block_jackknife_formula(estimates: &[f64], q: usize, norm: Normalization) -> f64 {
    let m = estimates.len();
    if m == 0 {
        return 0.0;
    }
    let mean = estimates.iter().sum::<f64>() / m as f64;
    let ss = sum_sq_dev(estimates, mean);
    match norm {
        Normalization::Verbatim => (m as f64 - 1.0) * q as f64 * ss,
        Normalization::Classical => (m as f64 - 1.0) / m as f64 * ss,
    }
}

/// Leave-one-out jackknife variance around the full-data estimate.
pub fn loo_formula(leave_out: &[f64], full: f64) -> f64 {
    (leave_out.len() as f64 - 1.0) * sum_sq_dev(leave_out, full)
}

/// Spread of the per-copy expected counts, divisor `M`.
pub fn mi_variance(per_copy: &[f64]) -> f64 {
    if per_copy.len() < 2 {
        return 0.0;
    }
    let mean = per_copy.iter().sum::<f64>() / per_copy.len() as f64;
    sum_sq_dev(per_copy, mean) / per_copy.len() as f64
}

pub fn total_variance(poisson: f64, across: f64, mi: f64) -> Result<f64> {
    if poisson < 0.0 || across < 0.0 || mi < 0.0 {
        return Err(Error::Validation("variance components must be nonnegative".into()));
    }
    Ok(poisson + across + mi)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Test statistic and two-sided p-value against the standard normal.
pub fn z_test(observed: f64, expected: f64, variance: f64) -> Result<(f64, f64)> {
    if !(variance > 0.0) {
        return Err(Error::DegenerateTest);
    }
    let t = (observed - expected) / variance.sqrt();
    Ok((t, 2.0 * std_normal().sf(t.abs())))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMode {
    TwoSided,
    /// Only an upper bound; the lower bound is negative infinity.
    OneSidedUpper,
    /// Only a lower bound; the upper bound is infinity.
    OneSidedLower,
    /// Two-sided with `upper_share` of the error rate above the interval.
    Asymmetric { upper_share: f64 },
}

/// Symmetric interval `expected ± z * sqrt(variance)` at level `1 - alpha`.
pub fn confidence_interval(expected: f64, variance: f64, alpha: f64) -> (f64, f64) {
    confidence_interval_with(expected, variance, 1.0 - alpha, CiMode::TwoSided)
}

pub fn confidence_interval_with(expected: f64, variance: f64, confidence: f64, mode: CiMode) -> (f64, f64) {
    let alpha = 1.0 - confidence;
    let sd = variance.max(0.0).sqrt();
    let (lower_tail, upper_tail) = match mode {
        CiMode::TwoSided => (alpha / 2.0, alpha / 2.0),
        CiMode::OneSidedUpper => (0.0, alpha),
        CiMode::OneSidedLower => (alpha, 0.0),
        CiMode::Asymmetric { upper_share } => (alpha * (1.0 - upper_share), alpha * upper_share),
    };
    let bound = |tail: f64| {
        if tail <= 0.0 {
            f64::INFINITY
        } else {
            normal_quantile(1.0 - tail) * sd
        }
    };
    let lo = if lower_tail <= 0.0 { f64::NEG_INFINITY } else { expected - bound(lower_tail) };
    let hi = if upper_tail <= 0.0 { f64::INFINITY } else { expected + bound(upper_tail) };
    (lo, hi)
}

/// Share of programs whose observed count lies in its interval, bounds
/// included.
pub fn coverage(intervals: &BTreeMap<String, (f64, f64)>, observed: &BTreeMap<String, u64>) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::Validation("coverage of an empty program set".into()));
    }
    if intervals.len() != observed.len() || intervals.keys().any(|k| !observed.contains_key(k)) {
        return Err(Error::Validation("intervals and observed counts cover different programs".into()));
    }
    let hits = intervals
        .iter()
        .filter(|(k, (lo, hi))| {
            let o = observed[*k] as f64;
            *lo <= o && o <= *hi
        })
        .count();
    Ok(hits as f64 / intervals.len() as f64)
}

pub fn prediction_coverage(predictions: &[ProgramPrediction]) -> Result<f64> {
    let intervals = predictions.iter().map(|p| (p.level1.clone(), (p.ci.lo, p.ci.hi))).collect();
    let observed = predictions.iter().map(|p| (p.level1.clone(), p.observed)).collect();
    coverage(&intervals, &observed)
}

fn refit_estimates(
    train: &Dataset,
    evals: &[&Dataset],
    cfg: &FitConfig,
    left_out: &[Vec<String>],
    keep_only: Option<&[String]>,
    warm: Option<&[f64]>,
) -> Result<Vec<Vec<BTreeMap<String, f64>>>> {
    let refit = |b: usize| -> Result<Vec<BTreeMap<String, f64>>> {
        let dropped: HashSet<&str> = left_out[b].iter().map(|s| s.as_str()).collect();
        let kept: Option<HashSet<&str>> = keep_only.map(|k| k.iter().map(|s| s.as_str()).collect());
        let sub = train.retain_level1(|id| !dropped.contains(id) && kept.as_ref().is_none_or(|k| k.contains(id)));
        let model = TrainedModel::train(&sub, cfg, warm)?;
        evals.iter().map(|e| model.expected_unchecked(e)).collect()
    };
    let per_block: Vec<Vec<BTreeMap<String, f64>>> = (0..left_out.len())
        .into_par_iter()
        .map(|b| {
            refit(b).map_err(|e| Error::BlockFit {
                block: b,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    Ok((0..evals.len())
        .map(|e| per_block.iter().map(|blk| blk[e].clone()).collect())
        .collect())
}

/// Leave-block expected counts for every program of each evaluation set,
/// indexed `[eval][block]`. Refits start from `warm` (original scale).
pub fn leave_block_estimates(
    train: &Dataset,
    evals: &[&Dataset],
    cfg: &FitConfig,
    plan: &BlockPlan,
    warm: Option<&[f64]>,
) -> Result<Vec<Vec<BTreeMap<String, f64>>>> {
    refit_estimates(train, evals, cfg, &plan.blocks, Some(&plan.sampled_level1_ids), warm)
}

/// Leave-one-program-out expected counts, indexed `[eval][program]`.
pub fn leave_one_out_estimates(
    train: &Dataset,
    evals: &[&Dataset],
    cfg: &FitConfig,
    warm: Option<&[f64]>,
) -> Result<Vec<Vec<BTreeMap<String, f64>>>> {
    let ids: Vec<Vec<String>> = train.level1_ids().iter().map(|s| vec![s.to_string()]).collect();
    if ids.len() < 2 {
        return Err(Error::Config("leave-one-out jackknife needs at least two programs".into()));
    }
    refit_estimates(train, evals, cfg, &ids, None, warm)
}

fn transpose(estimates: &[BTreeMap<String, f64>]) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for map in estimates {
        for (k, v) in map {
            out.entry(k.clone()).or_default().push(*v);
        }
    }
    out
}

/// Across-program variance per program from leave-block estimates.
pub fn block_variance_from_estimates(
    estimates: &[BTreeMap<String, f64>],
    q: usize,
    norm: Normalization,
) -> BTreeMap<String, f64> {
    transpose(estimates)
        .into_iter()
        .map(|(k, v)| (k, block_jackknife_formula(&v, q, norm)))
        .collect()
}

pub fn block_jackknife_variance(
    train: &Dataset,
    eval: &Dataset,
    cfg: &FitConfig,
    plan: &BlockPlan,
    warm: Option<&[f64]>,
    norm: Normalization,
) -> Result<BTreeMap<String, f64>> {
    let est = leave_block_estimates(train, &[eval], cfg, plan, warm)?;
    Ok(block_variance_from_estimates(&est[0], plan.q, norm))
}

/// Leave-one-out variance per program around the full-data estimates.
pub fn loo_variance_from_estimates(
    estimates: &[BTreeMap<String, f64>],
    full: &BTreeMap<String, f64>,
) -> BTreeMap<String, f64> {
    transpose(estimates)
        .into_iter()
        .map(|(k, v)| {
            let f = full[&k];
            (k, loo_formula(&v, f))
        })
        .collect()
}

/// Leave-one-program-out jackknife variance around the full-data estimates.
pub fn loo_jackknife_variance(
    train: &Dataset,
    eval: &Dataset,
    cfg: &FitConfig,
    full: &BTreeMap<String, f64>,
    warm: Option<&[f64]>,
) -> Result<BTreeMap<String, f64>> {
    let est = leave_one_out_estimates(train, &[eval], cfg, warm)?;
    Ok(loo_variance_from_estimates(&est[0], full))
}

/// Per-program variance decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub estimator: Estimator,
    pub normalization: Normalization,
    pub plan: Option<BlockPlan>,
    pub components: BTreeMap<String, VarianceComponents>,
}

impl VarianceReport {
    pub fn total(&self, level1: &str) -> Option<f64> {
        self.components
            .get(level1)
            .map(|c| c.poisson + c.across_group + c.mi)
    }
}

/// Combines per-copy expected counts and per-copy across-program variances
/// into one prediction.
pub fn assemble_prediction(
    level1: &str,
    observed: u64,
    expected_per_copy: Vec<f64>,
    across_per_copy: &[f64],
    confidence: f64,
    mode: CiMode,
) -> Result<ProgramPrediction> {
    let pooled = pool_expected(&expected_per_copy)?;
    let across = pool_expected(across_per_copy)?;
    let components = VarianceComponents {
        poisson: pooled,
        across_group: across,
        mi: mi_variance(&expected_per_copy),
    };
    let total = total_variance(components.poisson, components.across_group, components.mi)?;
    let (lo, hi) = confidence_interval_with(pooled, total, confidence, mode);
    let (z, p_value) = match z_test(observed as f64, pooled, total) {
        Ok((z, p)) => (Some(z), Some(p)),
        Err(_) => (None, None),
    };
    Ok(ProgramPrediction {
        level1: level1.to_string(),
        observed,
        expected_per_copy,
        expected_pooled: pooled,
        variance_components: components,
        total_variance: total,
        z,
        p_value,
        ci: Interval { lo, hi, level: confidence },
        flag: Flag::classify(observed as f64, lo, hi),
    })
}
