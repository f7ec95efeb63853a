//! Observed and risk-adjusted expected event counts per program.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::cox::{
    breslow_hazard, fit_cox_with, fit_frailty, random_effect_offsets, FrailtyFit, FrailtyOptions,
    HazardTable, Level, RandomEffectSpec,
};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// How a model is fitted and turned into predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// `None` fits a fixed-effects Cox model only.
    pub random_effects: Option<RandomEffectSpec>,
    pub frailty: FrailtyOptions,
    /// Start the frailty fit from a Cox fit.
    pub cox_init: bool,
    /// Groups for the sandwich covariance of the Cox fit.
    pub robust_level: Option<Level>,
    /// Add estimated random effects to the linear predictor of the hazard
    /// and the expected counts.
    pub include_frailty_in_prediction: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            random_effects: Some(RandomEffectSpec::level1(0.1)),
            frailty: FrailtyOptions::default(),
            cox_init: true,
            robust_level: Some(Level::Level1),
            include_frailty_in_prediction: false,
        }
    }
}

/// Fits the configured model. `init` (original scale) skips the Cox start.
pub fn fit_model(data: &Dataset, cfg: &FitConfig, init: Option<&[f64]>) -> Result<FrailtyFit> {
    match &cfg.random_effects {
        None => fit_cox_with(data, cfg.robust_level, init, &cfg.frailty),
        Some(spec) => {
            let cox;
            let start = match init {
                Some(b) => Some(b),
                None if cfg.cox_init => {
                    cox = fit_cox_with(data, None, None, &cfg.frailty)?;
                    Some(cox.beta_hat.as_slice())
                }
                None => None,
            };
            fit_frailty(data, spec, start, &cfg.frailty)
        }
    }
}

/// A fitted model with its Breslow hazard on the training data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainedModel {
    pub fit: FrailtyFit,
    pub hazard: HazardTable,
    pub include_frailty: bool,
}

impl TrainedModel {
    pub fn new(fit: FrailtyFit, training: &Dataset, include_frailty: bool) -> Result<Self> {
        let offsets = random_effect_offsets(&fit.random_effects, training, include_frailty);
        let hazard = breslow_hazard(&fit.beta_hat, &offsets, training)?;
        Ok(TrainedModel {
            fit,
            hazard,
            include_frailty,
        })
    }

    pub fn train(training: &Dataset, cfg: &FitConfig, init: Option<&[f64]>) -> Result<Self> {
        let fit = fit_model(training, cfg, init)?;
        Self::new(fit, training, cfg.include_frailty_in_prediction)
    }

    /// Expected count of every row of `data`.
    pub fn row_expected(&self, data: &Dataset) -> Result<Vec<f64>> {
        let eta = self.fit.linear_predictor(data, self.include_frailty)?;
        Ok(data
            .rows()
            .iter()
            .zip(eta)
            .map(|(r, e)| e.exp() * self.hazard.mass(r.start, r.stop))
            .collect())
    }

    /// Expected counts per program of `data`, without checking that the
    /// programs were part of training.
    pub fn expected_unchecked(&self, data: &Dataset) -> Result<BTreeMap<String, f64>> {
        let per_row = self.row_expected(data)?;
        let mut out: BTreeMap<String, f64> =
            data.level1_ids().iter().map(|id| (id.to_string(), 0.0)).collect();
        for (r, e) in data.rows().iter().zip(per_row) {
            *out.get_mut(&*r.group.level1).expect("listed") += e;
        }
        Ok(out)
    }

    /// Expected counts per program; every program must appear in training.
    pub fn expected_by_program(&self, data: &Dataset) -> Result<BTreeMap<String, f64>> {
        check_programs(&self.fit, data)?;
        if let Some(last) = self.hazard.last_time() {
            if data.rows().iter().any(|r| r.stop > last) {
                warn!("evaluation intervals extend past the last training event time {last}; no hazard mass there");
            }
        }
        self.expected_unchecked(data)
    }
}

/// Errors listing evaluation programs that are absent from training.
pub fn check_programs(fit: &FrailtyFit, data: &Dataset) -> Result<()> {
    let missing: Vec<String> = data
        .level1_ids()
        .iter()
        .filter(|id| fit.training_level1.binary_search_by(|t| t.as_str().cmp(id)).is_err())
        .map(|id| id.to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::ProgramsNotInTraining(missing))
    }
}

/// Keeps only the programs that appear in training, logging the others.
pub fn restrict_to_training(fit: &FrailtyFit, data: &Dataset) -> Dataset {
    let known = |id: &str| fit.training_level1.binary_search_by(|t| t.as_str().cmp(id)).is_ok();
    let dropped: Vec<&str> = data.level1_ids().iter().map(|s| &**s).filter(|s| !known(s)).collect();
    if !dropped.is_empty() {
        warn!("{} evaluation program(s) absent from training dropped: {dropped:?}", dropped.len());
    }
    data.retain_level1(known)
}

/// Expected count of one program under a fitted model and hazard.
pub fn expected_events(fit: &FrailtyFit, hazard: &HazardTable, data: &Dataset, level1: &str) -> Result<f64> {
    if !data.level1_ids().iter().any(|id| &**id == level1) {
        return Err(Error::UnknownGroup(level1.to_string()));
    }
    check_programs(fit, data)?;
    let model = TrainedModel {
        fit: fit.clone(),
        hazard: hazard.clone(),
        include_frailty: false,
    };
    let rows = model.row_expected(data)?;
    Ok(data
        .rows()
        .iter()
        .zip(rows)
        .filter(|(r, _)| &*r.group.level1 == level1)
        .map(|(_, e)| e)
        .sum())
}

/// Mean over imputation copies.
pub fn pool_expected(per_copy: &[f64]) -> Result<f64> {
    if per_copy.is_empty() {
        return Err(Error::Validation("no imputation copies to pool".into()));
    }
    Ok(per_copy.iter().sum::<f64>() / per_copy.len() as f64)
}

/// Position of the observed count relative to the interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Below,
    Within,
    Above,
}

impl Flag {
    /// Bounds are inclusive: an observed count equal to a bound is within.
    pub fn classify(observed: f64, lo: f64, hi: f64) -> Flag {
        if observed > hi {
            Flag::Above
        } else if observed < lo {
            Flag::Below
        } else {
            Flag::Within
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Flag::Below => "below",
            Flag::Within => "within",
            Flag::Above => "above",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub poisson: f64,
    pub across_group: f64,
    pub mi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

/// Prediction for one program pooled over imputation copies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramPrediction {
    pub level1: String,
    pub observed: u64,
    pub expected_per_copy: Vec<f64>,
    pub expected_pooled: f64,
    pub variance_components: VarianceComponents,
    pub total_variance: f64,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    pub ci: Interval,
    pub flag: Flag,
}
