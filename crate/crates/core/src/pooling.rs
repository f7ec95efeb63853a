//! Rubin pooling of coefficients across imputation copies and step-down
//! covariate selection on pooled p-values.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::imputation::MIStack;
use crate::risk::{fit_model, FitConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub covariate_names: Vec<String>,
    pub beta_bar: Vec<f64>,
    pub within_var: Vec<Vec<f64>>,
    pub between_var: Vec<Vec<f64>>,
    pub total_var: Vec<Vec<f64>>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    /// Degrees of freedom per coefficient; `None` means the normal reference.
    pub df: Vec<Option<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Pools `M >= 2` coefficient vectors and covariance matrices.
pub fn rubin_pool(names: &[String], betas: &[Vec<f64>], covs: &[DMatrix<f64>]) -> Result<PooledEstimate> {
    let m = betas.len();
    if m < 2 {
        return Err(Error::Validation("pooling needs at least two imputation copies".into()));
    }
    let p = names.len();
    if covs.len() != m || betas.iter().any(|b| b.len() != p) || covs.iter().any(|c| c.shape() != (p, p)) {
        return Err(Error::Validation("inconsistent dimensions in pooling input".into()));
    }
    let mf = m as f64;
    let beta_bar: Vec<f64> = (0..p).map(|j| betas.iter().map(|b| b[j]).sum::<f64>() / mf).collect();
    let within = covs.iter().fold(DMatrix::zeros(p, p), |acc, c| acc + c) / mf;
    let mut between = DMatrix::<f64>::zeros(p, p);
    for b in betas {
        for i in 0..p {
            for j in 0..p {
                between[(i, j)] += (b[i] - beta_bar[i]) * (b[j] - beta_bar[j]);
            }
        }
    }
    between /= mf - 1.0;
    let inflate = 1.0 + 1.0 / mf;
    let total = &within + &between * inflate;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut t_stats = Vec::with_capacity(p);
    let mut p_values = Vec::with_capacity(p);
    let mut df = Vec::with_capacity(p);
    for j in 0..p {
        let t = beta_bar[j] / total[(j, j)].sqrt();
        let nu = if between[(j, j)] > 0.0 {
            let r = within[(j, j)] / (inflate * between[(j, j)]);
            Some((mf - 1.0) * (1.0 + r).powi(2))
        } else {
            None
        };
        let pv = match nu {
            Some(nu) => {
                2.0 * StudentsT::new(0.0, 1.0, nu)
                    .map_err(|e| Error::Validation(format!("t reference: {e}")))?
                    .sf(t.abs())
            }
            None => 2.0 * normal.sf(t.abs()),
        };
        t_stats.push(t);
        p_values.push(pv);
        df.push(nu);
    }
    Ok(PooledEstimate {
        covariate_names: names.to_vec(),
        beta_bar,
        within_var: rows(&within),
        between_var: rows(&between),
        total_var: rows(&total),
        t_stats,
        p_values,
        df,
    })
}

/// Fits every copy and pools the results.
pub fn pooled_fit(stack: &MIStack, cfg: &FitConfig) -> Result<PooledEstimate> {
    let fits = stack
        .copies()
        .par_iter()
        .map(|d| fit_model(d, cfg, None))
        .collect::<Result<Vec<_>>>()?;
    let betas: Vec<Vec<f64>> = fits.iter().map(|f| f.beta_hat.clone()).collect();
    let covs: Vec<DMatrix<f64>> = fits.iter().map(|f| f.beta_cov_matrix()).collect();
    rubin_pool(stack.covariate_names(), &betas, &covs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionThresholds {
    /// Drop up to three covariates with p at or above this.
    pub drop3: f64,
    /// Drop up to two covariates with p above this.
    pub drop2: f64,
    /// Drop one covariate while the largest p is at or above this.
    pub stop: f64,
}

impl Default for SelectionThresholds {
    fn default() -> Self {
        SelectionThresholds {
            drop3: 0.5,
            drop2: 0.25,
            stop: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Drop3,
    Drop2,
    Drop1,
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub covariates: Vec<String>,
    pub p_values: Vec<f64>,
    pub rule: Rule,
    pub dropped: Vec<String>,
    pub dropped_p_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub initial_covariates: Vec<String>,
    pub iterations: Vec<SelectionStep>,
    pub final_covariates: Vec<String>,
    pub final_estimate: Option<PooledEstimate>,
    /// Each column is tested on its own, including dummy columns of one
    /// categorical variable.
    pub column_wise: bool,
}

impl SelectionTrace {
    pub fn dropped(&self) -> Vec<String> {
        self.iterations.iter().flat_map(|s| s.dropped.clone()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "initial covariates ({}): {}", self.initial_covariates.len(), self.initial_covariates.join(", "));
        for (i, step) in self.iterations.iter().enumerate() {
            let pairs: Vec<String> = step
                .dropped
                .iter()
                .zip(&step.dropped_p_values)
                .map(|(n, p)| format!("{n} (p={p:.4})"))
                .collect();
            let rule = match step.rule {
                Rule::Drop3 => "drop3",
                Rule::Drop2 => "drop2",
                Rule::Drop1 => "drop1",
                Rule::Stop => "stop",
            };
            let _ = writeln!(out, "iteration {}: rule {rule}; dropped {}", i + 1, if pairs.is_empty() { "none".to_string() } else { pairs.join(", ") });
        }
        let _ = writeln!(out, "final covariates ({}): {}", self.final_covariates.len(), self.final_covariates.join(", "));
        if let Some(est) = &self.final_estimate {
            for (j, n) in est.covariate_names.iter().enumerate() {
                let _ = writeln!(out, "  {n}: beta {:.4} t {:.3} p {:.4}", est.beta_bar[j], est.t_stats[j], est.p_values[j]);
            }
        }
        out
    }
}

/// Which covariates one step removes, given pooled p-values. Ranking is by
/// p-value descending, ties by name.
pub fn selection_rule(names: &[String], p_values: &[f64], th: &SelectionThresholds) -> (Rule, Vec<usize>) {
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by(|&a, &b| p_values[b].total_cmp(&p_values[a]).then_with(|| names[a].cmp(&names[b])));
    let Some(&top) = order.first() else {
        return (Rule::Stop, vec![]);
    };
    let max = p_values[top];
    let pick = |limit: usize, keep: &dyn Fn(f64) -> bool| -> Vec<usize> {
        order.iter().copied().filter(|&i| keep(p_values[i])).take(limit).collect()
    };
    if max >= th.drop3 {
        (Rule::Drop3, pick(3, &|p| p >= th.drop3))
    } else if max > th.drop2 {
        (Rule::Drop2, pick(2, &|p| p > th.drop2))
    } else if max >= th.stop {
        (Rule::Drop1, vec![top])
    } else {
        (Rule::Stop, vec![])
    }
}

/// Backward elimination on pooled p-values until the largest is below the
/// stop threshold, followed by a final pooled fit on the survivors.
pub fn stepdown_select(stack: &MIStack, cfg: &FitConfig, th: &SelectionThresholds) -> Result<SelectionTrace> {
    if stack.m() < 2 {
        return Err(Error::Validation("selection needs at least two imputation copies".into()));
    }
    let initial = stack.covariate_names().to_vec();
    if initial.is_empty() {
        return Err(Error::Validation("selection needs at least one covariate".into()));
    }
    let mut trace = SelectionTrace {
        initial_covariates: initial.clone(),
        iterations: vec![],
        final_covariates: initial.clone(),
        final_estimate: None,
        column_wise: true,
    };
    let fail = |trace: &SelectionTrace, e: Error| Error::Selection {
        completed: trace.iterations.len(),
        trace: Box::new(trace.clone()),
        source: Box::new(e),
    };
    let mut current = initial;
    loop {
        if current.is_empty() {
            break;
        }
        let sub = stack.select_covariates_by_name(&current).map_err(|e| fail(&trace, e))?;
        let est = pooled_fit(&sub, cfg).map_err(|e| fail(&trace, e))?;
        let (rule, drop) = selection_rule(&current, &est.p_values, th);
        if rule == Rule::Stop {
            trace.final_estimate = Some(est);
            break;
        }
        let dropped: Vec<String> = drop.iter().map(|&i| current[i].clone()).collect();
        trace.iterations.push(SelectionStep {
            covariates: current.clone(),
            p_values: est.p_values.clone(),
            rule,
            dropped_p_values: drop.iter().map(|&i| est.p_values[i]).collect(),
            dropped: dropped.clone(),
        });
        current.retain(|c| !dropped.contains(c));
    }
    trace.final_covariates = current;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("x{i}")).collect()
    }

    #[test]
    fn two_copy_hand_example() {
        let covs = vec![DMatrix::from_element(1, 1, 1.0); 2];
        let est = rubin_pool(&names(1), &[vec![1.0], vec![3.0]], &covs).unwrap();
        assert_eq!(est.beta_bar[0], 2.0);
        assert_eq!(est.between_var[0][0], 2.0);
        assert_eq!(est.total_var[0][0], 4.0);
        assert_eq!(est.t_stats[0], 1.0);
    }

    #[test]
    fn identical_copies_use_within_variance() {
        let covs = vec![DMatrix::from_element(1, 1, 0.25); 3];
        let est = rubin_pool(&names(1), &vec![vec![1.0]; 3], &covs).unwrap();
        assert_eq!(est.total_var[0][0], 0.25);
        assert_eq!(est.df[0], None);
        assert!(rubin_pool(&names(1), &[vec![1.0]], &covs[..1]).is_err());
    }

    #[test]
    fn rules() {
        let n = names(4);
        let (rule, drop) = selection_rule(&n, &[0.7, 0.6, 0.55, 0.05], &SelectionThresholds::default());
        assert_eq!(rule, Rule::Drop3);
        assert_eq!(drop, vec![0, 1, 2]);
        let (rule, drop) = selection_rule(&n, &[0.3, 0.26, 0.25, 0.05], &SelectionThresholds::default());
        assert_eq!(rule, Rule::Drop2);
        assert_eq!(drop, vec![0, 1]);
        let (rule, drop) = selection_rule(&n, &[0.25, 0.2, 0.01, 0.05], &SelectionThresholds::default());
        assert_eq!(rule, Rule::Drop1);
        assert_eq!(drop, vec![0]);
        let (rule, drop) = selection_rule(&n, &[0.09, 0.02, 0.01, 0.05], &SelectionThresholds::default());
        assert_eq!(rule, Rule::Stop);
        assert!(drop.is_empty());
        // ties broken by name
        let (_, drop) = selection_rule(&n, &[0.2, 0.2, 0.01, 0.05], &SelectionThresholds::default());
        assert_eq!(drop, vec![0]);
        // at most as many as exceed the threshold
        let (_, drop) = selection_rule(&n, &[0.6, 0.4, 0.01, 0.05], &SelectionThresholds::default());
        assert_eq!(drop, vec![0]);
    }
}
