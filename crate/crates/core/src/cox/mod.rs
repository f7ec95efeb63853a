//! Cox and mixed-effects Andersen-Gill models with the Breslow baseline
//! hazard.

mod breslow;
mod engine;
mod fit;

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use breslow::{breslow_hazard, HazardTable};
pub use fit::{fit_cox, fit_cox_with, fit_frailty, penalized_loglik, FrailtyOptions, ThetaSearch, MONOTONE_LIMIT};

use crate::data::{Dataset, Structure};
use crate::error::{Error, Result};

/// Hierarchy level of a grouping factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Level1,
    Level2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectTerm {
    pub level: Level,
    pub variance_init: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectSpec {
    pub terms: Vec<RandomEffectTerm>,
    pub structure: Structure,
}

impl RandomEffectSpec {
    pub fn level1(variance_init: f64) -> Self {
        RandomEffectSpec {
            terms: vec![RandomEffectTerm {
                level: Level::Level1,
                variance_init,
            }],
            structure: Structure::Nested,
        }
    }

    pub fn two_level(variance_init: f64, structure: Structure) -> Self {
        RandomEffectSpec {
            terms: vec![
                RandomEffectTerm {
                    level: Level::Level1,
                    variance_init,
                },
                RandomEffectTerm {
                    level: Level::Level2,
                    variance_init,
                },
            ],
            structure,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() || self.terms.len() > 2 {
            return Err(Error::Config("one or two random-effect terms are required".into()));
        }
        if self.terms.len() == 2 && self.terms[0].level == self.terms[1].level {
            return Err(Error::Config("random-effect terms must use different levels".into()));
        }
        if self.terms.iter().any(|t| !(t.variance_init > 0.0)) {
            return Err(Error::Config("random-effect variances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectEstimate {
    pub level: Level,
    pub variance: f64,
    pub ids: Vec<String>,
    pub values: Vec<f64>,
}

/// Estimates from one Cox or frailty fit, on the original covariate scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrailtyFit {
    pub covariate_names: Vec<String>,
    pub beta_hat: Vec<f64>,
    pub beta_cov: Vec<Vec<f64>>,
    pub std_err: Vec<f64>,
    pub random_effects: Vec<RandomEffectEstimate>,
    pub theta_hat: Vec<f64>,
    /// Penalized partial log-likelihood at the optimum.
    pub loglik: f64,
    /// Unpenalized partial log-likelihood at the optimum.
    pub partial_loglik: f64,
    pub profile_loglik: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub degenerate_random_effect: bool,
    pub monotone_likelihood: bool,
    pub robust: Option<Level>,
    pub training_level1: Vec<String>,
}

impl FrailtyFit {
    pub fn beta_cov_matrix(&self) -> DMatrix<f64> {
        let p = self.beta_hat.len();
        DMatrix::from_fn(p, p, |i, j| self.beta_cov[i][j])
    }

    /// Fixed-effects linear predictor per row, optionally including the
    /// estimated random effects of known levels.
    pub fn linear_predictor(&self, data: &Dataset, include_frailty: bool) -> Result<Vec<f64>> {
        if data.covariate_names() != self.covariate_names.as_slice() {
            return Err(Error::Schema(format!(
                "evaluation covariates {:?} differ from fitted {:?}",
                data.covariate_names(),
                self.covariate_names
            )));
        }
        data.require_complete()?;
        let offsets = random_effect_offsets(&self.random_effects, data, include_frailty);
        Ok(data
            .rows()
            .iter()
            .zip(offsets)
            .map(|(r, o)| o + r.covariates.iter().zip(&self.beta_hat).map(|(x, b)| x * b).sum::<f64>())
            .collect())
    }
}

/// Sum of the random effects of each row; levels without an estimate
/// contribute zero.
pub fn random_effect_offsets(effects: &[RandomEffectEstimate], data: &Dataset, include: bool) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    if !include {
        return out;
    }
    for e in effects {
        let lookup: HashMap<&str, f64> = e.ids.iter().map(|s| s.as_str()).zip(e.values.iter().copied()).collect();
        for (o, r) in out.iter_mut().zip(data.rows()) {
            let key: &str = match e.level {
                Level::Level1 => &r.group.level1,
                Level::Level2 => &r.group.level2,
            };
            *o += lookup.get(key).copied().unwrap_or(0.0);
        }
    }
    out
}

/// Partial log-likelihood with its exact gradient and Hessian.
#[derive(Clone, Debug)]
pub struct PartialLikelihood {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Counting-process partial log-likelihood (Breslow ties) at `beta` with a
/// fixed per-row offset.
pub fn partial_loglik(beta: &[f64], offsets: &[f64], data: &Dataset) -> Result<PartialLikelihood> {
    if beta.len() != data.p() || offsets.len() != data.len() {
        return Err(Error::Validation(format!(
            "expected {} coefficients and {} offsets",
            data.p(),
            data.len()
        )));
    }
    let design = fit::raw_design(data, offsets.to_vec())?;
    let ev = engine::evaluate(&design, beta, &[], true)?;
    Ok(PartialLikelihood {
        value: ev.loglik,
        gradient: ev.grad_a,
        hessian: -ev.info.expect("requested").aa,
    })
}
