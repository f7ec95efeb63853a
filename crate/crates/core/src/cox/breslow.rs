use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Step-function estimate of the baseline cumulative hazard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardTable {
    pub times: Vec<f64>,
    pub increments: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl HazardTable {
    /// Index range of jump times inside `(lower, upper]`.
    pub fn range(&self, lower: f64, upper: f64) -> std::ops::Range<usize> {
        let lo = self.times.partition_point(|&t| t <= lower);
        let hi = self.times.partition_point(|&t| t <= upper);
        lo..hi.max(lo)
    }

    /// Hazard mass on `(lower, upper]`.
    pub fn mass(&self, lower: f64, upper: f64) -> f64 {
        self.increments[self.range(lower, upper)].iter().sum()
    }

    pub fn cumulative_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => 0.0,
            k => self.cumulative[k - 1],
        }
    }

    pub fn last_time(&self) -> Option<f64> {
        self.times.last().copied()
    }
}

/// Breslow estimate: at each distinct event time the number of events divided
/// by the sum of `exp(z'beta + offset)` over rows at risk.
pub fn breslow_hazard(beta: &[f64], offsets: &[f64], data: &Dataset) -> Result<HazardTable> {
    if beta.len() != data.p() || offsets.len() != data.len() {
        return Err(Error::Validation(format!(
            "expected {} coefficients and {} offsets",
            data.p(),
            data.len()
        )));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFiniteLinearPredictor);
    }
    data.require_complete()?;
    let mut times: Vec<f64> = data.rows().iter().filter(|r| r.event).map(|r| r.stop).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut deaths = vec![0.0; times.len()];
    let mut denom = vec![0.0; times.len()];
    for (r, off) in data.rows().iter().zip(offsets) {
        let lo = times.partition_point(|&t| t <= r.start);
        let hi = times.partition_point(|&t| t <= r.stop);
        if r.event {
            deaths[hi - 1] += 1.0;
        }
        if lo < hi {
            let w = (r.covariates.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>() + off).exp();
            if !w.is_finite() {
                return Err(Error::NonFiniteLinearPredictor);
            }
            for d in &mut denom[lo..hi] {
                *d += w;
            }
        }
    }
    let mut increments = Vec::with_capacity(times.len());
    for (k, (&d, &s)) in deaths.iter().zip(&denom).enumerate() {
        if !(s > 0.0) {
            return Err(Error::EmptyRiskSet(times[k]));
        }
        increments.push(d / s);
    }
    let mut acc = 0.0;
    let cumulative = increments
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    Ok(HazardTable {
        times,
        increments,
        cumulative,
    })
}
