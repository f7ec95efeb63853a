mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use incidence::data::{load_dataset, AtRiskRow, ColumnMapping, Dataset, GroupId};
use incidence::pipeline::{
    run_pipeline, run_simulation_study, save_named, write_report, write_study, AnalysisInputs, Mode, PipelineConfig,
    SimulationSettings,
};
use incidence::sim::Period;

fn small_config(dir: &Path) -> PipelineConfig {
    PipelineConfig {
        simulation: SimulationSettings {
            n_level1: 10,
            n_level2: 400,
            training_periods: vec![Period::OneYear],
            ..Default::default()
        },
        m_blocks: vec![2, 5],
        confidence_levels: vec![0.8, 0.95],
        output_dir: dir.to_path_buf(),
        seed: 7,
        ..Default::default()
    }
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn malformed_configuration_is_rejected_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let mut cfg = small_config(&out);
    cfg.confidence_levels = vec![0.9, 1.2];
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.is_input_error());
    assert!(!out.exists());
    let mut cfg = small_config(&out);
    cfg.m_blocks = vec![1];
    assert!(cfg.validate().is_err());
    let json = r#"{"seed": 3, "no_such_field": 1}"#;
    assert!(serde_json::from_str::<PipelineConfig>(json).is_err());
}

#[test]
fn single_replicate_mean_equals_its_coverage() {
    let tmp = tempfile::tempdir().unwrap();
    let report = run_simulation_study(&small_config(tmp.path())).unwrap();
    assert_eq!(report.replicates_completed, 1);
    assert!(!report.coverage.is_empty());
    for row in &report.coverage {
        let single = report
            .replicate_coverage
            .iter()
            .find(|r| r.scenario == row.scenario && r.m == row.m && r.confidence == row.confidence)
            .unwrap();
        assert_eq!(row.mean_coverage, single.coverage);
        assert!((row.abs_cov_diff - (row.mean_coverage - row.confidence).abs()).abs() < 1e-15);
    }
}

#[test]
fn study_artifacts_are_byte_identical_on_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.replicates = 2;
    write_study(&run_simulation_study(&cfg).unwrap(), &cfg).unwrap();
    let first = read_tree(tmp.path());
    write_study(&run_simulation_study(&cfg).unwrap(), &cfg).unwrap();
    let second = read_tree(tmp.path());
    assert!(first.contains_key("manifest.json"));
    assert_eq!(first, second);
}

fn extra_program(data: &Dataset) -> Dataset {
    let first: Vec<String> = data.rows().iter().map(|r| r.group.level2.to_string()).take(5).collect();
    let mut rows = data.rows().to_vec();
    for r in data.rows().iter().filter(|r| first.contains(&r.group.level2.to_string())) {
        rows.push(AtRiskRow {
            group: GroupId::new("UNSEEN", &format!("U-{}", r.group.level2)),
            ..r.clone()
        });
    }
    Dataset::new(rows, data.covariate_names().to_vec()).unwrap()
}

#[test]
fn analysis_of_simulated_files_validates_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let sim_dir = tmp.path().join("sim");
    let run = run_pipeline(&small_config(&sim_dir)).unwrap();
    assert!(sim_dir.join("data/one_year.csv").exists());
    assert!(run.scenarios().count() >= 2);

    let path = sim_dir.join("data/next_year.csv");
    let next = load_dataset(&path, &ColumnMapping::from_csv_header(&path).unwrap()).unwrap();
    save_named(tmp.path(), "validation.csv", &extra_program(&next)).unwrap();
    let out = tmp.path().join("analysis");
    let cfg = PipelineConfig {
        mode: Mode::Analyze,
        analysis: Some(AnalysisInputs {
            training: sim_dir.join("data/one_year.csv").display().to_string(),
            validation: Some(tmp.path().join("validation.csv").display().to_string()),
            mapping: None,
            copies: 1,
            locf: false,
        }),
        validation_cutoff_day: Some(200.0),
        ..small_config(&out)
    };
    let run = run_pipeline(&cfg).unwrap();
    let training = run.scenarios().find(|s| s.evaluation == "training").unwrap();
    let obs: u64 = training.observed.values().sum();
    let exp: f64 = training.expected.values().sum();
    assert!((exp - obs as f64).abs() < 1e-6 * obs as f64);
    for s in run.scenarios() {
        assert!(!s.expected.contains_key("UNSEEN"));
        assert!(s.predictions.iter().all(|p| p.prediction.level1 != "UNSEEN"));
        for c in &s.coverage {
            assert!((0.0..=1.0).contains(&c.coverage));
            assert!((c.abs_cov_diff - (c.coverage - c.confidence).abs()).abs() < 1e-15);
        }
    }
    let validation = run.scenarios().find(|s| s.evaluation == "validation").unwrap();
    let early = next.rows().iter().filter(|r| r.event && r.stop <= 200.0).count() as u64;
    assert_eq!(validation.observed.values().sum::<u64>(), early);

    let report = write_report(&out).unwrap();
    assert!(report.text.contains("observed"));
    assert!(out.join("flags.csv").exists());
    assert!(report.flags.iter().all(|f| match f.flag.as_str() {
        "within" => f.ci_lo <= f.observed as f64 && f.observed as f64 <= f.ci_hi,
        "above" => f.observed as f64 > f.ci_hi,
        _ => (f.observed as f64) < f.ci_lo,
    }));
}

#[test]
fn failed_analysis_leaves_failure_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        mode: Mode::Analyze,
        analysis: Some(AnalysisInputs {
            training: tmp.path().join("missing.csv").display().to_string(),
            validation: None,
            mapping: None,
            copies: 1,
            locf: false,
        }),
        ..small_config(&tmp.path().join("out"))
    };
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.is_input_error());
    let text = fs::read_to_string(tmp.path().join("out/failure.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["stage"], "load");
    assert_eq!(v["input_error"], true);
    assert!(tmp.path().join("out/manifest.json").exists());
}
