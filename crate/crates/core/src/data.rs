//! Counting-process data model for two-level hierarchical recurrent-event data.
//!
//! Each [`AtRiskRow`] is one `(start, stop]` interval of a level-2 subject
//! (patient) attached to a level-1 group (program). Covariates are constant on
//! the interval. A [`Dataset`] keeps rows sorted by subject and start time and
//! enforces the interval invariants at construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-level group label of a row: level-1 (program) and level-2 (subject).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId {
    pub level1: Arc<str>,
    pub level2: Arc<str>,
}

impl GroupId {
    pub fn new(level1: &str, level2: &str) -> Self {
        GroupId {
            level1: Arc::from(level1),
            level2: Arc::from(level2),
        }
    }
}

/// One at-risk interval `(start, stop]` in relative days.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtRiskRow {
    pub group: GroupId,
    /// Encounter index `k` within the subject, starting at 1.
    pub encounter: u32,
    pub start: f64,
    pub stop: f64,
    /// An event occurs at `stop`.
    pub event: bool,
    /// Covariate values on the interval. `NaN` marks a missing value.
    pub covariates: Vec<f64>,
}

/// Whether every subject belongs to exactly one program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Nested,
    Crossed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    rows: Vec<AtRiskRow>,
    covariate_names: Vec<String>,
    level1_ids: Vec<Arc<str>>,
    level2_ids: Vec<Arc<str>>,
    structure: Structure,
}

impl Dataset {
    /// Validates and sorts rows (by subject, then start).
    pub fn new(mut rows: Vec<AtRiskRow>, covariate_names: Vec<String>) -> Result<Self> {
        let p = covariate_names.len();
        let mut seen = BTreeSet::new();
        for name in &covariate_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate covariate name {name}")));
            }
        }
        for (i, row) in rows.iter().enumerate() {
            if row.covariates.len() != p {
                return Err(Error::Validation(format!(
                    "row {i} has {} covariates, expected {p}",
                    row.covariates.len()
                )));
            }
            if !row.start.is_finite() || !row.stop.is_finite() {
                return Err(Error::Validation(format!("row {i} has a non-finite bound")));
            }
            if row.start < 0.0 {
                return Err(Error::Validation(format!(
                    "row {i} of subject {} starts before day 0",
                    row.group.level2
                )));
            }
            if row.start >= row.stop {
                return Err(Error::Validation(format!(
                    "row {i} of subject {} has start {} >= stop {}",
                    row.group.level2, row.start, row.stop
                )));
            }
        }
        rows.sort_by(|a, b| {
            a.group
                .level2
                .cmp(&b.group.level2)
                .then(a.start.total_cmp(&b.start))
        });
        for pair in rows.windows(2) {
            if pair[0].group.level2 == pair[1].group.level2 && pair[1].start < pair[0].stop {
                return Err(Error::Overlap {
                    subject: pair[0].group.level2.to_string(),
                });
            }
        }
        Ok(Self::assemble(rows, covariate_names))
    }

    /// Builds from rows that are already valid and sorted.
    fn assemble(rows: Vec<AtRiskRow>, covariate_names: Vec<String>) -> Self {
        let mut l1 = BTreeSet::new();
        let mut l2: BTreeMap<Arc<str>, Arc<str>> = BTreeMap::new();
        let mut crossed = false;
        for row in &rows {
            l1.insert(row.group.level1.clone());
            match l2.get(&row.group.level2) {
                Some(prog) if *prog != row.group.level1 => crossed = true,
                Some(_) => {}
                None => {
                    l2.insert(row.group.level2.clone(), row.group.level1.clone());
                }
            }
        }
        Dataset {
            rows,
            covariate_names,
            level1_ids: l1.into_iter().collect(),
            level2_ids: l2.into_keys().collect(),
            structure: if crossed {
                Structure::Crossed
            } else {
                Structure::Nested
            },
        }
    }

    pub fn rows(&self) -> &[AtRiskRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Number of covariates `p`.
    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    /// Sorted distinct level-1 labels.
    pub fn level1_ids(&self) -> &[Arc<str>] {
        &self.level1_ids
    }

    /// Number of distinct level-1 groups `N`.
    pub fn n_level1(&self) -> usize {
        self.level1_ids.len()
    }

    /// Sorted distinct level-2 labels.
    pub fn level2_ids(&self) -> &[Arc<str>] {
        &self.level2_ids
    }

    pub fn n_level2(&self) -> usize {
        self.level2_ids.len()
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn total_events(&self) -> u64 {
        self.rows.iter().filter(|r| r.event).count() as u64
    }

    pub fn has_missing(&self) -> bool {
        self.rows
            .iter()
            .any(|r| r.covariates.iter().any(|v| v.is_nan()))
    }

    /// Index into [`Dataset::level1_ids`] for every row.
    pub fn level1_index(&self) -> Vec<usize> {
        self.rows
            .iter()
            .map(|r| {
                self.level1_ids
                    .binary_search(&r.group.level1)
                    .expect("level-1 id table is built from rows")
            })
            .collect()
    }

    /// Index into [`Dataset::level2_ids`] for every row.
    pub fn level2_index(&self) -> Vec<usize> {
        self.rows
            .iter()
            .map(|r| {
                self.level2_ids
                    .binary_search(&r.group.level2)
                    .expect("level-2 id table is built from rows")
            })
            .collect()
    }

    /// Row indices per level-1 group.
    pub fn rows_by_level1(&self) -> BTreeMap<Arc<str>, Vec<usize>> {
        let mut map: BTreeMap<Arc<str>, Vec<usize>> = BTreeMap::new();
        for (i, row) in self.rows.iter().enumerate() {
            map.entry(row.group.level1.clone()).or_default().push(i);
        }
        map
    }

    /// Keeps the rows whose level-1 label satisfies `keep`.
    pub fn retain_level1<F: Fn(&str) -> bool>(&self, keep: F) -> Dataset {
        let rows = self
            .rows
            .iter()
            .filter(|r| keep(&r.group.level1))
            .cloned()
            .collect();
        Self::assemble(rows, self.covariate_names.clone())
    }

    /// Keeps the covariate columns listed in `columns`, in that order.
    pub fn select_covariates(&self, columns: &[usize]) -> Dataset {
        let names = columns
            .iter()
            .map(|&c| self.covariate_names[c].clone())
            .collect();
        let rows = self
            .rows
            .iter()
            .map(|r| AtRiskRow {
                covariates: columns.iter().map(|&c| r.covariates[c]).collect(),
                ..r.clone()
            })
            .collect();
        Self::assemble(rows, names)
    }

    /// Keeps the named covariates, in the given order.
    pub fn select_covariates_by_name(&self, names: &[String]) -> Result<Dataset> {
        let cols = names
            .iter()
            .map(|n| {
                self.covariate_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::Schema(format!("unknown covariate {n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_covariates(&cols))
    }

    /// Truncates follow-up at `cutoff` days: rows starting at or after the
    /// cutoff are dropped and rows spanning it end there without an event.
    pub fn truncate(&self, cutoff: f64) -> Dataset {
        let rows = self
            .rows
            .iter()
            .filter(|r| r.start < cutoff)
            .map(|r| {
                if r.stop > cutoff {
                    AtRiskRow {
                        stop: cutoff,
                        event: false,
                        ..r.clone()
                    }
                } else {
                    r.clone()
                }
            })
            .collect();
        Self::assemble(rows, self.covariate_names.clone())
    }

    /// Moves every interval later by `offset` days.
    pub fn shift_time(&self, offset: f64) -> Dataset {
        let rows = self
            .rows
            .iter()
            .map(|r| AtRiskRow {
                start: r.start + offset,
                stop: r.stop + offset,
                ..r.clone()
            })
            .collect();
        Self::assemble(rows, self.covariate_names.clone())
    }

    /// Same rows with covariate values replaced, row by row.
    pub fn with_covariates(&self, covariates: Vec<Vec<f64>>) -> Result<Dataset> {
        if covariates.len() != self.rows.len() {
            return Err(Error::Validation(format!(
                "expected {} covariate rows, got {}",
                self.rows.len(),
                covariates.len()
            )));
        }
        let p = self.p();
        let rows = self
            .rows
            .iter()
            .zip(covariates)
            .enumerate()
            .map(|(i, (r, c))| {
                if c.len() != p {
                    return Err(Error::Validation(format!(
                        "row {i} has {} covariates, expected {p}",
                        c.len()
                    )));
                }
                Ok(AtRiskRow {
                    covariates: c,
                    ..r.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(rows, self.covariate_names.clone()))
    }

    /// Errors if any covariate value is missing.
    pub fn require_complete(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            if let Some(k) = r.covariates.iter().position(|v| !v.is_finite()) {
                return Err(Error::MissingCovariate {
                    row: i,
                    covariate: self.covariate_names[k].clone(),
                });
            }
        }
        Ok(())
    }

    /// Errors unless every subject's earliest interval starts at day 0.
    pub fn require_relative_origin(&self) -> Result<()> {
        let mut first: HashMap<&str, f64> = HashMap::new();
        for r in &self.rows {
            first
                .entry(&r.group.level2)
                .and_modify(|s| *s = s.min(r.start))
                .or_insert(r.start);
        }
        let mut bad: Vec<_> = first
            .into_iter()
            .filter(|(_, s)| *s != 0.0)
            .map(|(k, _)| k)
            .collect();
        bad.sort_unstable();
        match bad.first() {
            Some(subject) => Err(Error::Validation(format!(
                "subject {subject} does not start at relative day 0"
            ))),
            None => Ok(()),
        }
    }
}

/// Observed event count `N_j` of a level-1 group.
pub fn observed_events(data: &Dataset, level1: &str) -> Result<u64> {
    if data
        .level1_ids()
        .binary_search_by(|id| id.as_ref().cmp(level1))
        .is_err()
    {
        return Err(Error::UnknownGroup(level1.to_string()));
    }
    Ok(data
        .rows()
        .iter()
        .filter(|r| r.event && &*r.group.level1 == level1)
        .count() as u64)
}

/// Observed counts of every level-1 group.
pub fn observed_by_level1(data: &Dataset) -> BTreeMap<Arc<str>, u64> {
    let mut out: BTreeMap<Arc<str>, u64> =
        data.level1_ids().iter().map(|id| (id.clone(), 0)).collect();
    for r in data.rows().iter().filter(|r| r.event) {
        *out.get_mut(&r.group.level1).expect("id table") += 1;
    }
    out
}

/// Maps CSV column names onto dataset fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub level1: String,
    pub level2: String,
    pub start: String,
    pub stop: String,
    pub event: String,
    #[serde(default)]
    pub encounter: Option<String>,
    pub covariates: Vec<String>,
}

impl ColumnMapping {
    /// Canonical layout: `level1, level2, start, stop, event, covariates...`.
    pub fn canonical(covariates: &[String]) -> Self {
        ColumnMapping {
            level1: "level1".into(),
            level2: "level2".into(),
            start: "start".into(),
            stop: "stop".into(),
            event: "event".into(),
            encounter: None,
            covariates: covariates.to_vec(),
        }
    }

    /// Canonical names, with every other column of the file as a covariate.
    pub fn from_csv_header(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let fixed = ["level1", "level2", "start", "stop", "event", "encounter"];
        let headers = rdr.headers()?;
        let covariates: Vec<String> = headers
            .iter()
            .filter(|h| !fixed.contains(h))
            .map(String::from)
            .collect();
        let mut m = Self::canonical(&covariates);
        if headers.iter().any(|h| h == "encounter") {
            m.encounter = Some("encounter".into());
        }
        Ok(m)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn parse_event(field: &str, line: usize) -> Result<bool> {
    match field.trim() {
        "1" | "true" | "TRUE" | "True" => Ok(true),
        "0" | "false" | "FALSE" | "False" => Ok(false),
        other => Err(Error::Validation(format!(
            "line {line}: event indicator {other:?} is not 0/1"
        ))),
    }
}

fn parse_required(field: &str, column: &str, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::Validation(format!("line {line}: column {column} value {field:?} is not a number"))
    })
}

/// Reads a dataset from CSV using a column mapping. Empty covariate fields
/// are read as missing.
pub fn read_dataset<R: Read>(reader: R, mapping: &ColumnMapping) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name}")))
    };
    let i1 = find(&mapping.level1)?;
    let i2 = find(&mapping.level2)?;
    let is = find(&mapping.start)?;
    let it = find(&mapping.stop)?;
    let ie = find(&mapping.event)?;
    let ik = mapping.encounter.as_deref().map(find).transpose()?;
    let ic = mapping
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut interner: HashMap<String, Arc<str>> = HashMap::new();
    let mut intern = |s: &str| -> Arc<str> {
        if let Some(a) = interner.get(s) {
            return a.clone();
        }
        let a: Arc<str> = Arc::from(s);
        interner.insert(s.to_string(), a.clone());
        a
    };

    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let level1 = rec.get(i1).unwrap_or("");
        let level2 = rec.get(i2).unwrap_or("");
        if level1.is_empty() || level2.is_empty() {
            return Err(Error::Validation(format!("line {line}: empty group label")));
        }
        let covariates = ic
            .iter()
            .map(|&c| {
                let f = rec.get(c).unwrap_or("");
                if f.is_empty() || f == "NA" {
                    Ok(f64::NAN)
                } else {
                    parse_required(f, &headers[c], line)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let encounter = match ik {
            Some(k) => parse_required(rec.get(k).unwrap_or(""), &headers[k], line)? as u32,
            None => 0,
        };
        rows.push(AtRiskRow {
            group: GroupId {
                level1: intern(level1),
                level2: intern(level2),
            },
            encounter,
            start: parse_required(rec.get(is).unwrap_or(""), &mapping.start, line)?,
            stop: parse_required(rec.get(it).unwrap_or(""), &mapping.stop, line)?,
            event: parse_event(rec.get(ie).unwrap_or(""), line)?,
            covariates,
        });
    }
    let mut data = Dataset::new(rows, mapping.covariates.clone())?;
    if ik.is_none() {
        let mut k = 0;
        for i in 0..data.rows.len() {
            k = if i > 0 && data.rows[i].group.level2 == data.rows[i - 1].group.level2 {
                k + 1
            } else {
                1
            };
            data.rows[i].encounter = k;
        }
    }
    data.require_relative_origin()?;
    Ok(data)
}

/// Loads a dataset from a CSV file.
pub fn load_dataset(path: &Path, mapping: &ColumnMapping) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(file), mapping)
}

/// Writes the canonical CSV layout; missing covariates become empty fields.
pub fn write_dataset<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["level1", "level2", "start", "stop", "event"];
    header.extend(data.covariate_names().iter().map(String::as_str));
    w.write_record(&header)?;
    for r in data.rows() {
        let mut rec = vec![
            r.group.level1.to_string(),
            r.group.level2.to_string(),
            r.start.to_string(),
            r.stop.to_string(),
            if r.event { "1".into() } else { "0".into() },
        ];
        rec.extend(r.covariates.iter().map(|v| {
            if v.is_nan() {
                String::new()
            } else {
                v.to_string()
            }
        }));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(data, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mapping() -> ColumnMapping {
        ColumnMapping::canonical(&["age".to_string()])
    }

    #[test]
    fn parses_three_rows() {
        let csv = "level1,level2,start,stop,event,age\n\
                   A,s1,0,10,1,3.5\n\
                   A,s1,10,20,0,3.5\n\
                   B,s2,0,5,0,\n";
        let data = read_dataset(csv.as_bytes(), &mapping()).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data.n_level1(), 2);
        assert_eq!(data.structure(), Structure::Nested);
        assert!(data.rows()[2].covariates[0].is_nan());
        assert_eq!(data.rows()[1].encounter, 2);
    }

    #[test]
    fn rejects_zero_length_interval() {
        let csv = "level1,level2,start,stop,event,age\nA,s1,0,0,1,1\n";
        let err = read_dataset(csv.as_bytes(), &mapping()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn rejects_overlap_naming_subject() {
        let csv = "level1,level2,start,stop,event,age\n\
                   A,pat7,0,10,0,1\n\
                   A,pat7,8,20,1,1\n";
        match read_dataset(csv.as_bytes(), &mapping()).unwrap_err() {
            Error::Overlap { subject } => assert_eq!(subject, "pat7"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let csv = "level1,level2,start,stop,age\nA,s1,0,1,1\n";
        assert!(matches!(
            read_dataset(csv.as_bytes(), &mapping()).unwrap_err(),
            Error::Schema(_)
        ));
    }

    #[test]
    fn rejects_subject_not_starting_at_zero() {
        let csv = "level1,level2,start,stop,event,age\nA,s1,3,9,0,1\n";
        assert!(read_dataset(csv.as_bytes(), &mapping()).is_err());
    }

    #[test]
    fn detects_crossed_structure() {
        let rows = vec![
            AtRiskRow {
                group: GroupId::new("A", "s1"),
                encounter: 1,
                start: 0.0,
                stop: 5.0,
                event: false,
                covariates: vec![],
            },
            AtRiskRow {
                group: GroupId::new("B", "s1"),
                encounter: 2,
                start: 5.0,
                stop: 9.0,
                event: true,
                covariates: vec![],
            },
        ];
        let d = Dataset::new(rows, vec![]).unwrap();
        assert_eq!(d.structure(), Structure::Crossed);
        assert_eq!(d.n_level2(), 1);
    }

    #[test]
    fn observed_counts() {
        let csv = "level1,level2,start,stop,event,age\n\
                   A,s1,0,10,1,1\n\
                   A,s2,0,10,0,1\n\
                   A,s3,0,10,1,1\n\
                   B,s4,0,10,0,1\n";
        let data = read_dataset(csv.as_bytes(), &mapping()).unwrap();
        assert_eq!(observed_events(&data, "A").unwrap(), 2);
        assert_eq!(observed_events(&data, "B").unwrap(), 0);
        assert!(matches!(
            observed_events(&data, "C"),
            Err(Error::UnknownGroup(_))
        ));
        let all = observed_by_level1(&data);
        assert_eq!(all.values().sum::<u64>(), data.total_events());
    }

    #[test]
    fn csv_round_trip() {
        let csv = "level1,level2,start,stop,event,age\n\
                   A,s1,0,10.5,1,1.25\n\
                   B,s2,0,7,0,\n";
        let data = read_dataset(csv.as_bytes(), &mapping()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), &mapping()).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in back.rows().iter().zip(data.rows()) {
            assert_eq!(a.group, b.group);
            assert_eq!((a.start, a.stop, a.event), (b.start, b.stop, b.event));
            assert_eq!(a.covariates[0].is_nan(), b.covariates[0].is_nan());
        }
    }

    #[test]
    fn truncation_clips_and_clears_event() {
        let csv = "level1,level2,start,stop,event,age\n\
                   A,s1,0,100,0,1\n\
                   A,s1,100,200,1,1\n";
        let data = read_dataset(csv.as_bytes(), &mapping()).unwrap();
        let t = data.truncate(150.0);
        assert_eq!(t.len(), 2);
        assert_eq!(t.rows()[1].stop, 150.0);
        assert!(!t.rows()[1].event);
        assert_eq!(data.truncate(100.0).len(), 1);
    }
}
