//! Deterministic missing-value filling and multiple-imputation stacks.

use std::path::Path;

use log::warn;

use crate::data::{load_dataset, ColumnMapping, Dataset};
use crate::error::{Error, Result};

/// Fills interior and trailing gaps with the last observed value and leading
/// gaps with the first observed value. Returns the filled series and whether
/// the series had no observed value at all (in which case it is unchanged).
pub fn locf_nocb(series: &[Option<f64>]) -> (Vec<Option<f64>>, bool) {
    let Some(first) = series.iter().flatten().next().copied() else {
        return (series.to_vec(), true);
    };
    let mut last = first;
    let filled = series
        .iter()
        .map(|v| {
            if let Some(x) = v {
                last = *x;
            }
            Some(last)
        })
        .collect();
    (filled, false)
}

/// Replaces each missing value by the maximum observed value dated within the
/// trailing `window_days` (inclusive) up to and including the same day.
/// `series` must be sorted by day.
pub fn windowed_max_fill(series: &[(i64, Option<f64>)], window_days: i64) -> Vec<Option<f64>> {
    series
        .iter()
        .map(|&(day, value)| {
            value.or_else(|| {
                series
                    .iter()
                    .filter(|(d, _)| *d <= day && day - *d <= window_days)
                    .filter_map(|(_, v)| *v)
                    .reduce(f64::max)
            })
        })
        .collect()
}

/// Result of [`impute_locf`].
#[derive(Clone, Debug)]
pub struct LocfResult {
    pub dataset: Dataset,
    /// Covariates dropped because more than half of the subjects never had
    /// an observed value.
    pub dropped: Vec<String>,
    /// Per kept covariate, number of subjects with no observed value.
    pub all_missing_subjects: Vec<(String, usize)>,
}

/// Applies [`locf_nocb`] per subject and covariate over rows ordered by start.
pub fn impute_locf(data: &Dataset) -> Result<LocfResult> {
    let p = data.p();
    let rows = data.rows();
    let mut cov: Vec<Vec<f64>> = rows.iter().map(|r| r.covariates.clone()).collect();
    let mut flagged = vec![0usize; p];
    let n_subjects = data.n_level2();
    let mut i = 0;
    while i < rows.len() {
        let mut j = i;
        while j < rows.len() && rows[j].group.level2 == rows[i].group.level2 {
            j += 1;
        }
        for (c, flag) in flagged.iter_mut().enumerate() {
            let series: Vec<Option<f64>> = (i..j)
                .map(|r| Some(cov[r][c]).filter(|v| v.is_finite()))
                .collect();
            let (filled, all_missing) = locf_nocb(&series);
            if all_missing {
                *flag += 1;
            }
            for (r, v) in (i..j).zip(filled) {
                cov[r][c] = v.unwrap_or(f64::NAN);
            }
        }
        i = j;
    }
    let filled = data.with_covariates(cov)?;
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    let mut all_missing_subjects = Vec::new();
    for (c, name) in data.covariate_names().iter().enumerate() {
        if 2 * flagged[c] > n_subjects {
            warn!(
                "covariate {name} dropped: {} of {n_subjects} subjects have no observed value",
                flagged[c]
            );
            dropped.push(name.clone());
        } else {
            keep.push(c);
            all_missing_subjects.push((name.clone(), flagged[c]));
        }
    }
    Ok(LocfResult {
        dataset: filled.select_covariates(&keep),
        dropped,
        all_missing_subjects,
    })
}

/// `M` imputed copies of one dataset that differ only in covariate values.
#[derive(Clone, Debug)]
pub struct MIStack {
    copies: Vec<Dataset>,
}

impl MIStack {
    pub fn m(&self) -> usize {
        self.copies.len()
    }

    pub fn copies(&self) -> &[Dataset] {
        &self.copies
    }

    pub fn copy(&self, l: usize) -> &Dataset {
        &self.copies[l]
    }

    pub fn into_copies(self) -> Vec<Dataset> {
        self.copies
    }

    pub fn covariate_names(&self) -> &[String] {
        self.copies[0].covariate_names()
    }

    pub fn select_covariates_by_name(&self, names: &[String]) -> Result<MIStack> {
        Ok(MIStack {
            copies: self
                .copies
                .iter()
                .map(|d| d.select_covariates_by_name(names))
                .collect::<Result<_>>()?,
        })
    }

    pub fn map<F: Fn(&Dataset) -> Dataset>(&self, f: F) -> MIStack {
        MIStack {
            copies: self.copies.iter().map(f).collect(),
        }
    }
}

/// Checks that all copies share rows, intervals and events with copy 0.
pub fn assemble_mi_stack(copies: Vec<Dataset>) -> Result<MIStack> {
    let Some(base) = copies.first() else {
        return Err(Error::Validation("an imputation stack needs at least one copy".into()));
    };
    for (l, copy) in copies.iter().enumerate().skip(1) {
        let mismatch = |row: usize, what: &str| Error::StackMismatch {
            copy: l,
            row,
            what: what.to_string(),
        };
        if copy.covariate_names() != base.covariate_names() {
            return Err(mismatch(0, "covariate names"));
        }
        for (r, (a, b)) in base.rows().iter().zip(copy.rows()).enumerate() {
            if a.group != b.group {
                return Err(mismatch(r, "group labels"));
            }
            if a.start != b.start || a.stop != b.stop {
                return Err(mismatch(r, "interval bounds"));
            }
            if a.event != b.event {
                return Err(mismatch(r, "event indicator"));
            }
        }
        if copy.len() != base.len() {
            return Err(mismatch(base.len().min(copy.len()), "row count"));
        }
    }
    Ok(MIStack { copies })
}

/// Loads `m` copies from files named by `pattern`, where `{}` is replaced by
/// the copy index `1..=m`.
pub fn load_mi_stack(pattern: &str, m: usize, mapping: &ColumnMapping) -> Result<MIStack> {
    if !pattern.contains("{}") {
        return Err(Error::Config(format!(
            "imputation file pattern {pattern} lacks a {{}} placeholder"
        )));
    }
    let copies = (1..=m)
        .map(|l| load_dataset(Path::new(&pattern.replace("{}", &l.to_string())), mapping))
        .collect::<Result<Vec<_>>>()?;
    assemble_mi_stack(copies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AtRiskRow, GroupId};

    #[test]
    fn locf_interior() {
        let (v, flag) = locf_nocb(&[Some(5.0), None, None, Some(7.0)]);
        assert_eq!(v, vec![Some(5.0), Some(5.0), Some(5.0), Some(7.0)]);
        assert!(!flag);
    }

    #[test]
    fn nocb_leading() {
        let (v, _) = locf_nocb(&[None, Some(3.0), None]);
        assert_eq!(v, vec![Some(3.0); 3]);
    }

    #[test]
    fn all_missing_flagged() {
        let (v, flag) = locf_nocb(&[None, None]);
        assert_eq!(v, vec![None, None]);
        assert!(flag);
    }

    #[test]
    fn window_max() {
        let s = [(100, Some(80.0)), (350, Some(85.0)), (400, None)];
        assert_eq!(windowed_max_fill(&s, 365)[2], Some(85.0));
        let s = [(10, Some(80.0)), (400, None)];
        assert_eq!(windowed_max_fill(&s, 365)[1], None);
    }

    #[test]
    fn window_boundary_inclusive() {
        let s = [(35, Some(90.0)), (380, Some(85.0)), (400, None)];
        assert_eq!(windowed_max_fill(&s, 365)[2], Some(90.0));
        let s = [(34, Some(90.0)), (380, Some(85.0)), (400, None)];
        assert_eq!(windowed_max_fill(&s, 365)[2], Some(85.0));
    }

    fn row(subject: &str, start: f64, stop: f64, event: bool, x: f64) -> AtRiskRow {
        AtRiskRow {
            group: GroupId::new("P", subject),
            encounter: 1,
            start,
            stop,
            event,
            covariates: vec![x, f64::NAN],
        }
    }

    #[test]
    fn dataset_locf_drops_mostly_missing() {
        let d = Dataset::new(
            vec![
                row("a", 0.0, 1.0, false, f64::NAN),
                row("a", 1.0, 2.0, true, 4.0),
                row("b", 0.0, 3.0, false, 2.0),
            ],
            vec!["x".into(), "y".into()],
        )
        .unwrap();
        let out = impute_locf(&d).unwrap();
        assert_eq!(out.dropped, vec!["y".to_string()]);
        assert_eq!(out.dataset.covariate_names(), &["x".to_string()]);
        assert_eq!(out.dataset.rows()[0].covariates, vec![4.0]);
    }

    #[test]
    fn stack_mismatch_names_row() {
        let a = Dataset::new(vec![row("a", 0.0, 1.0, false, 1.0), row("b", 0.0, 1.0, true, 1.0)], vec!["x".into(), "y".into()]).unwrap();
        let b = Dataset::new(vec![row("a", 0.0, 1.0, false, 2.0), row("b", 0.0, 1.0, false, 1.0)], vec!["x".into(), "y".into()]).unwrap();
        let err = assemble_mi_stack(vec![a.clone(), b]).unwrap_err();
        match err {
            Error::StackMismatch { copy, row, .. } => assert_eq!((copy, row), (1, 1)),
            e => panic!("unexpected {e}"),
        }
        let a = a.select_covariates(&[0]);
        let single = assemble_mi_stack(vec![a.clone()]).unwrap();
        assert_eq!(single.m(), 1);
        assert_eq!(single.into_copies(), vec![a]);
    }
}
