//! Construction of at-risk intervals from dated encounter records.
//!
//! An at-risk period begins on the first day with `lookback_days` of
//! infection-free history (or immediately for infants when allowed) and ends at
//! the next incident infection, loss to follow-up, or the period cutoff. After
//! an incident infection the subject re-enters the risk set once
//! `washout_days` have elapsed. Encounters separated by more than
//! `max_gap_days` break the carry-forward assumption and start a new chain.
//! Covariates of an interval are those of the latest encounter on or before
//! the interval start.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{AtRiskRow, Dataset, GroupId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalRules {
    pub washout_days: i64,
    pub lookback_days: i64,
    /// 18 months.
    pub max_gap_days: i64,
    pub exclude_post_transplant: bool,
    /// Subjects younger than the look-back at their first encounter are at
    /// risk from that encounter.
    pub infant_at_risk: bool,
}

impl Default for IntervalRules {
    fn default() -> Self {
        IntervalRules {
            washout_days: 730,
            lookback_days: 730,
            max_gap_days: 548,
            exclude_post_transplant: true,
            infant_at_risk: true,
        }
    }
}

impl IntervalRules {
    pub fn validate(&self) -> Result<()> {
        if self.washout_days <= 0 || self.lookback_days <= 0 || self.max_gap_days <= 0 {
            return Err(Error::Config(
                "interval rule day counts must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// One dated encounter. Days are integer offsets from an arbitrary epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encounter {
    pub level1: String,
    pub level2: String,
    pub day: Option<i64>,
    pub infection: bool,
    pub covariates: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectInfo {
    pub level2: String,
    pub birth_day: Option<i64>,
    pub transplant_day: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncounterTable {
    pub covariate_names: Vec<String>,
    pub encounters: Vec<Encounter>,
    #[serde(default)]
    pub subjects: Vec<SubjectInfo>,
    /// Study period `(period_start, period_end]`; earlier encounters only
    /// provide look-back history.
    pub period_start: i64,
    pub period_end: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildLog {
    pub excluded_undated: Vec<String>,
    pub excluded_start_on_infection: Vec<String>,
    pub post_transplant_dropped: usize,
    pub gap_breaks: usize,
    /// Subject and day of same-day encounters at different programs.
    pub rejected_relocations: Vec<(String, i64)>,
}

#[derive(Clone, Debug)]
pub struct IntervalBuild {
    pub dataset: Dataset,
    /// Absolute day mapped to relative day 0, per subject.
    pub origins: BTreeMap<String, i64>,
    pub log: BuildLog,
}

/// Per-subject encounters after exclusions, sorted by day and merged within
/// a day.
pub fn clean_encounters(
    table: &EncounterTable,
    rules: &IntervalRules,
) -> (BTreeMap<String, Vec<Encounter>>, BuildLog) {
    let infos: HashMap<&str, &SubjectInfo> = table
        .subjects
        .iter()
        .map(|s| (s.level2.as_str(), s))
        .collect();
    let mut by_subject: BTreeMap<String, Vec<Encounter>> = BTreeMap::new();
    for e in &table.encounters {
        by_subject.entry(e.level2.clone()).or_default().push(e.clone());
    }
    let mut log = BuildLog::default();
    let mut out = BTreeMap::new();
    for (subject, mut encs) in by_subject {
        if encs.iter().any(|e| e.day.is_none()) {
            warn!("subject {subject} excluded: encounter without a date");
            log.excluded_undated.push(subject);
            continue;
        }
        encs.sort_by_key(|e| e.day);
        if rules.exclude_post_transplant {
            if let Some(td) = infos.get(subject.as_str()).and_then(|s| s.transplant_day) {
                let before = encs.len();
                encs.retain(|e| e.day.expect("dated") <= td);
                log.post_transplant_dropped += before - encs.len();
            }
        }
        let mut merged: Vec<Encounter> = Vec::with_capacity(encs.len());
        let mut i = 0;
        while i < encs.len() {
            let day = encs[i].day;
            let mut j = i;
            while j < encs.len() && encs[j].day == day {
                j += 1;
            }
            let same_day = &encs[i..j];
            if same_day.iter().any(|e| e.level1 != same_day[0].level1) {
                let d = day.expect("dated");
                warn!("subject {subject}: encounters at different programs on day {d} rejected");
                log.rejected_relocations.push((subject.clone(), d));
            } else {
                let mut m = same_day[same_day.len() - 1].clone();
                m.infection = same_day.iter().any(|e| e.infection);
                merged.push(m);
            }
            i = j;
        }
        if !merged.is_empty() {
            out.insert(subject, merged);
        }
    }
    (out, log)
}

struct Segment {
    start: i64,
    stop: i64,
    event: bool,
}

/// Builds counting-process rows from raw encounters.
pub fn build_at_risk_intervals(
    table: &EncounterTable,
    rules: &IntervalRules,
) -> Result<IntervalBuild> {
    rules.validate()?;
    if table.period_end <= table.period_start {
        return Err(Error::Config("period_end must be after period_start".into()));
    }
    let p = table.covariate_names.len();
    if let Some(e) = table.encounters.iter().find(|e| e.covariates.len() != p) {
        return Err(Error::Validation(format!(
            "encounter of subject {} has {} covariates, expected {p}",
            e.level2,
            e.covariates.len()
        )));
    }
    let infos: HashMap<&str, &SubjectInfo> = table
        .subjects
        .iter()
        .map(|s| (s.level2.as_str(), s))
        .collect();
    let (cleaned, mut log) = clean_encounters(table, rules);
    let (ps, pe) = (table.period_start, table.period_end);

    let mut labels: HashMap<String, Arc<str>> = HashMap::new();
    let mut label = |s: &str| -> Arc<str> {
        labels
            .entry(s.to_string())
            .or_insert_with(|| Arc::from(s))
            .clone()
    };

    let mut rows = Vec::new();
    let mut origins = BTreeMap::new();
    'subjects: for (subject, encs) in &cleaned {
        let info = infos.get(subject.as_str());
        let days: Vec<i64> = encs.iter().map(|e| e.day.expect("dated")).collect();
        let mut chains: Vec<std::ops::Range<usize>> = Vec::new();
        let mut first = 0;
        for i in 1..encs.len() {
            if days[i] - days[i - 1] > rules.max_gap_days {
                chains.push(first..i);
                first = i;
            }
        }
        chains.push(first..encs.len());
        log.gap_breaks += chains.len() - 1;

        let mut segments: Vec<(std::ops::Range<usize>, Segment)> = Vec::new();
        let mut push = |chain: &std::ops::Range<usize>, a: i64, b: i64, event: bool| {
            let start = a.max(ps);
            let stop = b.min(pe);
            if start < stop {
                segments.push((
                    chain.clone(),
                    Segment {
                        start,
                        stop,
                        event: event && b <= pe,
                    },
                ));
            }
        };
        let mut last_infection: Option<i64> = None;
        let n_chains = chains.len();
        for (ci, chain) in chains.iter().enumerate() {
            let f = days[chain.start];
            let last = days[chain.end - 1];
            let mut chain_end = if ci + 1 == n_chains && pe - last <= rules.max_gap_days {
                pe.max(last)
            } else {
                last
            };
            if let Some(td) = info.and_then(|s| s.transplant_day) {
                if rules.exclude_post_transplant {
                    chain_end = chain_end.min(td);
                }
            }
            let infant = rules.infant_at_risk
                && info
                    .and_then(|s| s.birth_day)
                    .is_some_and(|b| f - b < rules.lookback_days);
            let mut eligible = if infant { f } else { f + rules.lookback_days };
            if let Some(e) = last_infection {
                eligible = eligible.max(e + rules.washout_days);
            }
            for k in chain.clone().filter(|&k| encs[k].infection) {
                let e = days[k];
                if e == eligible && e > ps && e <= pe {
                    warn!("subject {subject} excluded: at-risk start falls on an infection date");
                    log.excluded_start_on_infection.push(subject.clone());
                    continue 'subjects;
                }
                if e > eligible {
                    push(chain, eligible, e, true);
                }
                last_infection = Some(e);
                eligible = eligible.max(e + rules.washout_days);
            }
            if eligible < chain_end {
                push(chain, eligible, chain_end, false);
            }
        }
        let Some(origin) = segments.iter().map(|(_, s)| s.start).min() else {
            continue;
        };
        origins.insert(subject.clone(), origin);
        let l2 = label(subject);
        let mut k = 0u32;
        for (chain, seg) in &segments {
            let mut cuts = vec![seg.start];
            cuts.extend(
                days[chain.clone()]
                    .iter()
                    .copied()
                    .filter(|&d| d > seg.start && d < seg.stop),
            );
            cuts.push(seg.stop);
            for w in 0..cuts.len() - 1 {
                let (a, b) = (cuts[w], cuts[w + 1]);
                // latest encounter on or before the interval start
                let src = chain
                    .clone()
                    .rev()
                    .find(|&i| days[i] <= a)
                    .unwrap_or(chain.start);
                k += 1;
                rows.push(AtRiskRow {
                    group: GroupId {
                        level1: label(&encs[src].level1),
                        level2: l2.clone(),
                    },
                    encounter: k,
                    start: (a - origin) as f64,
                    stop: (b - origin) as f64,
                    event: seg.event && w + 2 == cuts.len(),
                    covariates: encs[src].covariates.clone(),
                });
            }
        }
    }
    info!(
        "built {} at-risk rows for {} subjects ({} excluded without dates, {} excluded at infection start)",
        rows.len(),
        origins.len(),
        log.excluded_undated.len(),
        log.excluded_start_on_infection.len()
    );
    let dataset = Dataset::new(rows, table.covariate_names.clone())?;
    Ok(IntervalBuild {
        dataset,
        origins,
        log,
    })
}

/// Re-applies the interval rules to rows that are already in counting-process
/// form: shifts each subject to relative day 0 and removes at-risk time that
/// falls inside a washout window. Output of [`build_at_risk_intervals`] passes
/// through unchanged.
pub fn rebuild_at_risk_intervals(data: &Dataset, rules: &IntervalRules) -> Result<Dataset> {
    rules.validate()?;
    let washout = rules.washout_days as f64;
    let mut rows: Vec<AtRiskRow> = Vec::with_capacity(data.len());
    let all = data.rows();
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].group.level2 == all[i].group.level2 {
            j += 1;
        }
        let origin = all[i].start;
        let mut blocked_until = f64::NEG_INFINITY;
        for r in &all[i..j] {
            let mut start = r.start - origin;
            let stop = r.stop - origin;
            if stop <= blocked_until {
                continue;
            }
            if start < blocked_until {
                start = blocked_until;
            }
            if r.event {
                blocked_until = stop + washout;
            }
            rows.push(AtRiskRow {
                start,
                stop,
                ..r.clone()
            });
        }
        i = j;
    }
    Dataset::new(rows, data.covariate_names().to_vec())
}
