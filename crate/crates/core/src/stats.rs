//! Summaries of predicted against observed counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub estimated: u64,
    pub observed: u64,
}

/// Shared equal-width bins over the combined range; the last bin is closed.
pub fn paired_histogram(estimated: &[f64], observed: &[f64], bins: usize) -> Vec<HistogramBin> {
    let all = estimated.iter().chain(observed);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if bins == 0 || !lo.is_finite() {
        return vec![];
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lo: lo + b as f64 * width,
            hi: if b + 1 == bins && hi > lo { hi } else { lo + (b + 1) as f64 * width },
            estimated: 0,
            observed: 0,
        })
        .collect();
    let slot = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
    estimated.iter().for_each(|&v| out[slot(v)].estimated += 1);
    observed.iter().for_each(|&v| out[slot(v)].observed += 1);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub level1: String,
    pub covariate: String,
    /// Covariate mean over the program's rows weighted by at-risk time.
    pub weighted_value: f64,
    pub exposure: f64,
    /// Observed minus expected count.
    pub residual: f64,
}

/// Program residuals against each exposure-weighted covariate.
pub fn weighted_residuals(
    data: &Dataset,
    expected: &BTreeMap<String, f64>,
    observed: &BTreeMap<String, u64>,
) -> Vec<ResidualRow> {
    let p = data.p();
    let mut acc: BTreeMap<&str, (f64, Vec<f64>)> = BTreeMap::new();
    for r in data.rows() {
        let e = acc.entry(&*r.group.level1).or_insert_with(|| (0.0, vec![0.0; p]));
        let w = r.stop - r.start;
        e.0 += w;
        for (s, x) in e.1.iter_mut().zip(&r.covariates) {
            *s += w * x;
        }
    }
    let mut out = vec![];
    for (id, (w, sums)) in acc {
        let (Some(exp), Some(obs)) = (expected.get(id), observed.get(id)) else {
            continue;
        };
        for (name, s) in data.covariate_names().iter().zip(sums) {
            out.push(ResidualRow {
                level1: id.to_string(),
                covariate: name.clone(),
                weighted_value: if w > 0.0 { s / w } else { f64::NAN },
                exposure: w,
                residual: *obs as f64 - exp,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 4.0, 9.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        // closed form 1 - 6 sum d^2 / (n (n^2 - 1)) without ties
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((r - (1.0 - 6.0 * 4.0 / 60.0)).abs() < 1e-12);
    }

    #[test]
    fn histogram_counts() {
        let h = paired_histogram(&[0.0, 1.0, 2.0], &[4.0, 2.5], 2);
        assert_eq!(h.len(), 2);
        assert_eq!((h[0].estimated, h[1].estimated), (2, 1));
        assert_eq!((h[0].observed, h[1].observed), (0, 2));
        assert_eq!(h[1].hi, 4.0);
        let flat = paired_histogram(&[3.0], &[3.0], 4);
        assert_eq!(flat[0].estimated + flat[0].observed, 2);
    }
}
