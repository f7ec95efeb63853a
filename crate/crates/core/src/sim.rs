//! Synthetic hierarchical recurrent-event data with piecewise-exponential
//! event times, time-varying covariates and program and subject frailties.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AtRiskRow, Dataset, GroupId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Period {
    ThreeYear,
    OneYear,
}

/// Variance of a random intercept.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReVariance {
    /// Absolute value of one draw from a centered normal with this variance.
    HalfNormal { scale: f64 },
    Fixed(f64),
}

impl ReVariance {
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            ReVariance::HalfNormal { scale } => {
                let z: f64 = StandardNormal.sample(rng);
                (z * scale.sqrt()).abs()
            }
            ReVariance::Fixed(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_level1: usize,
    pub n_level2: usize,
    pub period: Period,
    pub n_timepoints: usize,
    pub period_length_days: f64,
    pub h0: f64,
    /// Five time-invariant then five time-varying coefficients.
    pub beta: Vec<f64>,
    pub level1_variance: ReVariance,
    pub level2_variance: ReVariance,
    pub censor_rate: f64,
    pub washout_days: f64,
    pub fixed_variance: f64,
    pub fixed_covariance: f64,
    /// Mean of each time-varying covariate at each time point.
    pub varying_mean: Vec<f64>,
    /// Upper bound of the uniform draw scaling the time-varying covariance.
    pub varying_scale_max: f64,
    pub seed: u64,
    /// When set, program effects and their variance come from this seed so
    /// that datasets of different periods share programs.
    pub program_seed: Option<u64>,
}

impl SimConfig {
    pub fn three_year(seed: u64) -> Self {
        SimConfig {
            n_level1: 150,
            n_level2: 10_000,
            period: Period::ThreeYear,
            n_timepoints: 12,
            period_length_days: 1100.0,
            h0: (-8f64).exp(),
            beta: vec![0.5; 10],
            level1_variance: ReVariance::HalfNormal { scale: 0.001 },
            level2_variance: ReVariance::HalfNormal { scale: 0.001 },
            censor_rate: 1.0 / 600.0,
            washout_days: 730.0,
            fixed_variance: 0.1,
            fixed_covariance: 0.02,
            varying_mean: (-5..=6).map(f64::from).collect(),
            varying_scale_max: 0.1,
            seed,
            program_seed: None,
        }
    }

    pub fn one_year(seed: u64) -> Self {
        SimConfig {
            period: Period::OneYear,
            n_timepoints: 4,
            period_length_days: 400.0,
            censor_rate: 1.0 / 300.0,
            varying_mean: vec![-1.0, 0.0, 1.0, 2.0],
            ..Self::three_year(seed)
        }
    }

    pub fn for_period(period: Period, seed: u64) -> Self {
        match period {
            Period::ThreeYear => Self::three_year(seed),
            Period::OneYear => Self::one_year(seed),
        }
    }

    /// Same design at a smaller size.
    pub fn scaled(mut self, n_level1: usize, n_level2: usize) -> Self {
        self.n_level1 = n_level1;
        self.n_level2 = n_level2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("simulation: {m}")));
        if self.n_level1 == 0 || self.n_level2 == 0 {
            return bad("group counts must be positive");
        }
        if self.n_timepoints < 2 {
            return bad("at least two time points are required");
        }
        if !(self.period_length_days >= self.n_timepoints as f64 + self.n_timepoints as f64) {
            return bad("period too short for distinct time points");
        }
        if self.beta.len() != 10 {
            return bad("ten coefficients are required");
        }
        if self.varying_mean.len() != self.n_timepoints {
            return bad("one time-varying mean per time point is required");
        }
        if !(self.h0 >= 0.0) || !(self.censor_rate > 0.0) || !(self.washout_days > 0.0) {
            return bad("hazard must be nonnegative, censoring rate and washout positive");
        }
        if !(self.varying_scale_max > 0.0) {
            return bad("time-varying covariance scale must be positive");
        }
        for v in [self.level1_variance, self.level2_variance] {
            let ok = match v {
                ReVariance::HalfNormal { scale } => scale >= 0.0,
                ReVariance::Fixed(x) => x >= 0.0,
            };
            if !ok {
                return bad("random-effect variances must be nonnegative");
            }
        }
        fixed_cholesky(self)?;
        Ok(())
    }

    pub fn covariate_names() -> Vec<String> {
        (1..=5)
            .map(|k| format!("fixed{k}"))
            .chain((1..=5).map(|k| format!("varying{k}")))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    pub program: String,
    pub effect: f64,
    pub censor_time: f64,
    /// Latent event times before the end of observation.
    pub latent_events: Vec<f64>,
    /// Events that were observed (before censoring).
    pub observed_events: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub time_points: Vec<f64>,
    pub varying_scale: f64,
    pub level1_variance: f64,
    pub level2_variance: f64,
    pub program_ids: Vec<String>,
    pub program_effects: Vec<f64>,
    pub subjects: Vec<SubjectTruth>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimDiagnostics {
    pub censor_rate: f64,
    pub second_event_rate: f64,
    pub events_total: u64,
}

fn fixed_cholesky(cfg: &SimConfig) -> Result<DMatrix<f64>> {
    let s = DMatrix::from_fn(5, 5, |i, j| {
        if i == j {
            cfg.fixed_variance
        } else {
            cfg.fixed_covariance
        }
    });
    s.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Config("time-invariant covariance is not positive definite".into()))
}

fn toeplitz_cholesky(g: usize) -> DMatrix<f64> {
    DMatrix::from_fn(g, g, |i, j| (g - i.abs_diff(j)) as f64)
        .cholesky()
        .expect("linearly decreasing Toeplitz matrix is positive definite")
        .l()
}

fn program_label(j: usize) -> String {
    format!("P{:03}", j + 1)
}

fn subject_label(i: usize) -> String {
    format!("S{:05}", i + 1)
}

/// First event at or after `from` under a hazard that is constant on
/// `[t_g, t_{g+1})`, or `None` before the last time point.
fn next_event<R: Rng>(rng: &mut R, times: &[f64], hazard: &[f64], from: f64) -> Option<f64> {
    let last = *times.last()?;
    if from >= last {
        return None;
    }
    let mut g = times.partition_point(|&t| t <= from) - 1;
    let mut cur = from;
    while g + 1 < times.len() {
        if hazard[g] > 0.0 {
            let s = Exp::new(hazard[g]).expect("positive rate").sample(rng);
            if cur + s < times[g + 1] {
                return Some(cur + s);
            }
        }
        cur = times[g + 1];
        g += 1;
    }
    None
}

struct Subject {
    rows: Vec<AtRiskRow>,
    truth: SubjectTruth,
}

/// Draws one dataset and its generating values.
pub fn gen_dataset(cfg: &SimConfig) -> Result<(Dataset, SimTruth)> {
    cfg.validate()?;
    let g = cfg.n_timepoints;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let draw = Uniform::new_inclusive(g as f64, cfg.period_length_days).expect("valid bounds");
    let mut points = BTreeSet::new();
    while points.len() < g - 1 {
        points.insert(draw.sample(&mut rng).round() as i64);
    }
    let times: Vec<f64> = std::iter::once(0.0).chain(points.into_iter().map(|t| t as f64)).collect();
    let varying_scale = rng.random_range(0.0..cfg.varying_scale_max);
    let level2_variance = cfg.level2_variance.draw(&mut rng);

    let mut program_rng = match cfg.program_seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s),
        None => rng.clone(),
    };
    let level1_variance = cfg.level1_variance.draw(&mut program_rng);
    let program_effects: Vec<f64> = (0..cfg.n_level1)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut program_rng);
            z * level1_variance.sqrt()
        })
        .collect();
    let program_ids: Vec<String> = (0..cfg.n_level1).map(program_label).collect();

    let l1 = fixed_cholesky(cfg)?;
    let l2 = toeplitz_cholesky(g) * varying_scale.sqrt();
    let mu2 = DVector::from_vec(cfg.varying_mean.clone());
    let censor = Exp::new(cfg.censor_rate).expect("positive rate");
    let sd2 = level2_variance.sqrt();
    let tau = times[g - 1];
    let names = SimConfig::covariate_names();

    let subjects: Vec<Subject> = (0..cfg.n_level2)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let j = rng.random_range(0..cfg.n_level1);
            let e1 = DVector::from_fn(5, |_, _| StandardNormal.sample(&mut rng));
            let fixed = &l1 * e1;
            let varying: Vec<DVector<f64>> = (0..5)
                .map(|_| {
                    let e = DVector::from_fn(g, |_, _| StandardNormal.sample(&mut rng));
                    &mu2 + &l2 * e
                })
                .collect();
            let z: f64 = StandardNormal.sample(&mut rng);
            let b1 = z * sd2;
            let c = censor.sample(&mut rng);

            let fixed_lp: f64 = (0..5).map(|k| fixed[k] * cfg.beta[k]).sum();
            let hazard: Vec<f64> = (0..g)
                .map(|t| {
                    let v: f64 = (0..5).map(|k| varying[k][t] * cfg.beta[5 + k]).sum();
                    cfg.h0 * (fixed_lp + v + b1 + program_effects[j]).exp()
                })
                .collect();
            let mut latent = Vec::new();
            let mut from = 0.0;
            while let Some(t) = next_event(&mut rng, &times, &hazard, from) {
                latent.push(t);
                from = t + cfg.washout_days;
            }
            let end = c.min(tau);
            let observed: Vec<f64> = latent.iter().copied().filter(|&t| t <= c).collect();

            let label = GroupId::new(&program_label(j), &subject_label(i));
            let mut rows = Vec::new();
            let mut k = 0u32;
            let mut push_span = |start: f64, stop: f64, event: bool, rows: &mut Vec<AtRiskRow>| {
                let mut a = start;
                while a < stop {
                    let gi = times.partition_point(|&t| t <= a) - 1;
                    let b = if gi + 1 < g { times[gi + 1].min(stop) } else { stop };
                    if b <= a {
                        break;
                    }
                    k += 1;
                    let mut cov: Vec<f64> = fixed.iter().copied().collect();
                    cov.extend(varying.iter().map(|v| v[gi]));
                    rows.push(AtRiskRow {
                        group: label.clone(),
                        encounter: k,
                        start: a,
                        stop: b,
                        event: event && b == stop,
                        covariates: cov,
                    });
                    a = b;
                }
            };
            let mut start = 0.0;
            for &t in &observed {
                push_span(start, t, true, &mut rows);
                start = t + cfg.washout_days;
            }
            if start < end {
                push_span(start, end, false, &mut rows);
            }
            Subject {
                rows,
                truth: SubjectTruth {
                    id: subject_label(i),
                    program: program_label(j),
                    effect: b1,
                    censor_time: c,
                    latent_events: latent,
                    observed_events: observed,
                },
            }
        })
        .collect();

    let mut rows = Vec::new();
    let mut truths = Vec::with_capacity(subjects.len());
    for s in subjects {
        rows.extend(s.rows);
        truths.push(s.truth);
    }
    let data = Dataset::new(rows, names)?;
    Ok((
        data,
        SimTruth {
            time_points: times,
            varying_scale,
            level1_variance,
            level2_variance,
            program_ids,
            program_effects,
            subjects: truths,
        },
    ))
}

/// Censoring rate, share of subjects with at least two events and the total
/// event count.
pub fn sim_diagnostics(data: &Dataset, truth: &SimTruth) -> SimDiagnostics {
    let n = truth.subjects.len().max(1) as f64;
    let mut counts = std::collections::HashMap::new();
    for r in data.rows().iter().filter(|r| r.event) {
        *counts.entry(r.group.level2.clone()).or_insert(0u32) += 1;
    }
    let with_event = counts.len() as f64;
    let second = counts.values().filter(|&&c| c >= 2).count() as f64;
    SimDiagnostics {
        censor_rate: 1.0 - with_event / n,
        second_event_rate: second / n,
        events_total: data.total_events(),
    }
}

/// Normal draw helper used by fixtures: `n` values with the given mean and SD.
pub fn normal_sample(seed: u64, n: usize, mean: f64, sd: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(mean, sd).expect("finite parameters");
    (0..n).map(|_| d.sample(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(period: Period, seed: u64) -> SimConfig {
        SimConfig::for_period(period, seed).scaled(10, 300)
    }

    #[test]
    fn zero_hazard_has_no_events() {
        let mut cfg = small(Period::OneYear, 1);
        cfg.h0 = 0.0;
        let (data, truth) = gen_dataset(&cfg).unwrap();
        assert_eq!(data.total_events(), 0);
        let d = sim_diagnostics(&data, &truth);
        assert_eq!(d.censor_rate, 1.0);
    }

    #[test]
    fn reproducible_and_consistent() {
        let cfg = small(Period::ThreeYear, 7);
        let (a, ta) = gen_dataset(&cfg).unwrap();
        let (b, tb) = gen_dataset(&cfg).unwrap();
        assert_eq!(a.rows().len(), b.rows().len());
        assert_eq!(ta, tb);
        let observed: usize = ta.subjects.iter().map(|s| s.observed_events.len()).sum();
        assert_eq!(observed as u64, a.total_events());
        a.require_relative_origin().unwrap();
    }

    #[test]
    fn event_times_inside_intervals_and_spaced() {
        let cfg = small(Period::ThreeYear, 3);
        let (_, truth) = gen_dataset(&cfg).unwrap();
        for s in &truth.subjects {
            for t in &s.latent_events {
                assert!(!truth.time_points.contains(t));
                assert!(*t > 0.0 && *t < *truth.time_points.last().unwrap());
            }
            for w in s.latent_events.windows(2) {
                assert!(w[1] - w[0] >= cfg.washout_days);
            }
        }
    }
}
