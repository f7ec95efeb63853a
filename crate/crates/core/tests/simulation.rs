mod common;

use common::{no_random_effects, simulated, simulated_with};
use incidence::cox::fit_cox;
use incidence::data::{AtRiskRow, Dataset, GroupId};
use incidence::sim::{gen_dataset, sim_diagnostics, Period, SimConfig, SimTruth, SubjectTruth};

#[test]
fn zero_baseline_hazard_gives_no_events() {
    for period in [Period::ThreeYear, Period::OneYear] {
        let (data, truth) = simulated_with(period, 3, 10, 400, |c| c.h0 = 0.0);
        assert_eq!(data.total_events(), 0);
        assert!(truth.subjects.iter().all(|s| s.latent_events.is_empty()));
    }
}

#[test]
fn constant_hazard_event_probability() {
    let h = 2e-3;
    let n = 100_000;
    let mut cfg = SimConfig::one_year(17).scaled(5, n);
    cfg.n_timepoints = 2;
    cfg.varying_mean = vec![0.0, 0.0];
    cfg.beta = vec![0.0; 10];
    cfg.h0 = h;
    cfg.censor_rate = 1e-12;
    no_random_effects(&mut cfg);
    let (_, truth) = gen_dataset(&cfg).unwrap();
    let t2 = truth.time_points[1];
    let p = 1.0 - (-h * t2).exp();
    let hits = truth.subjects.iter().filter(|s| !s.observed_events.is_empty()).count() as f64;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((hits - n as f64 * p).abs() < 3.0 * sd, "{hits} vs {} (sd {sd})", n as f64 * p);
}

#[test]
fn same_seed_reproduces_dataset() {
    let (a, ta) = simulated(Period::ThreeYear, 99, 8, 300);
    let (b, tb) = simulated(Period::ThreeYear, 99, 8, 300);
    let (c, _) = simulated(Period::ThreeYear, 100, 8, 300);
    assert_eq!(a.rows(), b.rows());
    assert_eq!(ta, tb);
    assert_ne!(a.rows(), c.rows());
}

#[test]
fn events_lie_inside_intervals_and_respect_washout() {
    let mut cfg = SimConfig::three_year(5).scaled(10, 800);
    cfg.h0 = (-6f64).exp();
    cfg.washout_days = 200.0;
    let (data, truth) = gen_dataset(&cfg).unwrap();
    assert!(data.rows().iter().any(|r| r.event));
    for r in data.rows().iter().filter(|r| r.event) {
        assert!(r.start < r.stop);
        let s = truth.subjects.iter().find(|s| s.id == *r.group.level2).unwrap();
        assert!(s.observed_events.contains(&r.stop));
    }
    for s in &truth.subjects {
        for w in s.latent_events.windows(2) {
            assert!(w[1] - w[0] >= cfg.washout_days);
        }
        for &t in &s.observed_events {
            let covered = data
                .rows()
                .iter()
                .filter(|r| *r.group.level2 == *s.id)
                .any(|r| r.start < t + cfg.washout_days && r.stop > t);
            assert!(!covered, "subject {} at risk during washout after {t}", s.id);
        }
    }
}

#[test]
fn null_effects_are_mostly_insignificant() {
    let mut inside = 0;
    let mut total = 0;
    for rep in 0..50u64 {
        let (data, _) = simulated_with(Period::ThreeYear, 1000 + rep, 30, 1500, |c| {
            c.beta = vec![0.0; 10];
            no_random_effects(c);
        });
        let fit = fit_cox(&data, None).unwrap();
        for (b, se) in fit.beta_hat.iter().zip(&fit.std_err) {
            total += 1;
            if b.abs() < 2.0 * se {
                inside += 1;
            }
        }
    }
    let share = inside as f64 / total as f64;
    assert!(share >= 0.9, "share {share}");
}

#[test]
fn diagnostics_on_hand_built_data() {
    let row = |s: &str, start: f64, stop: f64, event: bool| AtRiskRow {
        group: GroupId::new("P1", s),
        encounter: 1,
        start,
        stop,
        event,
        covariates: vec![0.0],
    };
    let data = Dataset::new(
        vec![
            row("a", 0.0, 50.0, false),
            row("b", 0.0, 10.0, true),
            row("c", 0.0, 5.0, true),
            row("c", 20.0, 30.0, true),
        ],
        vec!["x".into()],
    )
    .unwrap();
    let subject = |id: &str| SubjectTruth {
        id: id.into(),
        program: "P1".into(),
        effect: 0.0,
        censor_time: 50.0,
        latent_events: vec![],
        observed_events: vec![],
    };
    let truth = SimTruth {
        time_points: vec![0.0, 50.0],
        varying_scale: 0.0,
        level1_variance: 0.0,
        level2_variance: 0.0,
        program_ids: vec!["P1".into()],
        program_effects: vec![0.0],
        subjects: vec![subject("a"), subject("b"), subject("c")],
    };
    let d = sim_diagnostics(&data, &truth);
    assert!((d.censor_rate - 1.0 / 3.0).abs() < 1e-15);
    assert!((d.second_event_rate - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(d.events_total, 3);
}

#[test]
fn invalid_configurations_are_rejected() {
    let base = SimConfig::three_year(1);
    let mut c = base.clone();
    c.beta = vec![0.5; 9];
    assert!(gen_dataset(&c).is_err());
    let mut c = base.clone();
    c.n_level1 = 0;
    assert!(gen_dataset(&c).is_err());
    let mut c = base;
    c.fixed_covariance = 0.5;
    assert!(gen_dataset(&c).is_err());
}
