mod common;

use std::collections::BTreeMap;

use common::fixture;
use incidence::cox::{breslow_hazard, fit_cox};
use incidence::data::{AtRiskRow, Dataset, GroupId};
use incidence::pooling::rubin_pool;
use incidence::risk::{expected_events, FitConfig, Flag, TrainedModel};
use incidence::variance::{
    block_jackknife_formula, block_jackknife_variance, block_partition, block_size, confidence_interval,
    coverage, loo_formula, mi_variance, z_test, Normalization,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn row(program: &str, subject: &str, start: f64, stop: f64, event: bool, x: f64) -> AtRiskRow {
    AtRiskRow {
        group: GroupId::new(program, subject),
        encounter: 1,
        start,
        stop,
        event,
        covariates: vec![x],
    }
}

#[test]
fn expected_counts_match_hand_computation() {
    // beta = ln 2; event times 2 and 3 with risk-set sums 4 and 3.
    let data = Dataset::new(
        vec![
            row("P1", "a", 0.0, 2.0, true, 0.0),
            row("P1", "b", 0.0, 3.0, true, 1.0),
            row("P2", "c", 1.0, 4.0, false, 0.0),
        ],
        vec!["x".into()],
    )
    .unwrap();
    let mut fit = fit_cox(&data, None).unwrap();
    fit.beta_hat = vec![2f64.ln()];
    let h = breslow_hazard(&fit.beta_hat, &[0.0; 3], &data).unwrap();
    assert!((h.increments[0] - 0.25).abs() < 1e-15);
    assert!((h.increments[1] - 1.0 / 3.0).abs() < 1e-15);
    let p1 = expected_events(&fit, &h, &data, "P1").unwrap();
    let p2 = expected_events(&fit, &h, &data, "P2").unwrap();
    assert!((p1 - 17.0 / 12.0).abs() < 1e-12, "{p1}");
    assert!((p2 - 7.0 / 12.0).abs() < 1e-12, "{p2}");
    assert!(expected_events(&fit, &h, &data, "P9").is_err());
}

#[test]
fn five_program_expected_counts_match_direct_sum() {
    let data = fixture(21, 5, 40, 2);
    let model = TrainedModel::train(
        &data,
        &FitConfig {
            random_effects: None,
            ..Default::default()
        },
        None,
    )
    .unwrap();
    let beta = &model.fit.beta_hat;
    let h = &model.hazard;
    let got = model.expected_by_program(&data).unwrap();
    let mut want: BTreeMap<String, f64> = BTreeMap::new();
    for r in data.rows() {
        let risk = (r.covariates[0] * beta[0] + r.covariates[1] * beta[1]).exp();
        let mass: f64 = h
            .times
            .iter()
            .zip(&h.increments)
            .filter(|(t, _)| r.start < **t && **t <= r.stop)
            .map(|(_, d)| d)
            .sum();
        *want.entry(r.group.level1.to_string()).or_default() += risk * mass;
    }
    assert_eq!(got.len(), 5);
    for (k, v) in &want {
        assert!((got[k] - v).abs() < 1e-12, "{k}: {} vs {v}", got[k]);
    }
}

#[test]
fn null_effect_expected_counts_are_proportional_to_rows() {
    // Every row spans (0, 10] and all events fall at 10: one risk set.
    let mut rows = vec![];
    let sizes = [3usize, 5, 2, 7];
    let mut k = 0;
    for (j, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            rows.push(row(&format!("P{j}"), &format!("S{k}"), 0.0, 10.0, k % 3 == 0, (k % 4) as f64));
            k += 1;
        }
    }
    let data = Dataset::new(rows, vec!["x".into()]).unwrap();
    let mut fit = fit_cox(&data, None).unwrap();
    fit.beta_hat = vec![0.0];
    let h = breslow_hazard(&[0.0], &vec![0.0; data.len()], &data).unwrap();
    let total_events = data.total_events() as f64;
    for (j, &n) in sizes.iter().enumerate() {
        let e = expected_events(&fit, &h, &data, &format!("P{j}")).unwrap();
        assert!((e - n as f64 * total_events / 17.0).abs() < 1e-12);
    }
}

#[test]
fn jackknife_formulas_by_hand() {
    // Two blocks {a, a + d}: squared deviations sum to d^2 / 2.
    let (a, d) = (4.0, 0.6);
    let ss = d * d / 2.0;
    assert!((block_jackknife_formula(&[a, a + d], 3, Normalization::Verbatim) - 3.0 * ss).abs() < 1e-14);
    assert!((block_jackknife_formula(&[a, a + d], 3, Normalization::Classical) - ss / 2.0).abs() < 1e-14);
    // Three leave-one-out values around a full estimate of 2.
    let v = loo_formula(&[1.0, 2.5, 2.0], 2.0);
    assert!((v - 2.0 * (1.0 + 0.25)).abs() < 1e-14);
}

#[test]
fn mi_variance_uses_copy_count_divisor() {
    let x: Vec<f64> = (0..10).map(|i| 3.0 + 0.1 * i as f64 * (i as f64).sin()).collect();
    let mean = x.iter().sum::<f64>() / 10.0;
    let want = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 10.0;
    assert!((mi_variance(&x) - want).abs() < 1e-15);
    assert_eq!(mi_variance(&[5.0]), 0.0);
}

#[test]
fn equal_observed_and_expected_is_not_significant() {
    let (t, p) = z_test(7.0, 7.0, 3.0).unwrap();
    assert_eq!(t, 0.0);
    assert!((p - 1.0).abs() < 1e-15);
    assert!(z_test(7.0, 7.0, 0.0).is_err());
}

#[test]
fn interval_bounds_are_inclusive() {
    assert_eq!(Flag::classify(5.0, 5.0, 9.0), Flag::Within);
    assert_eq!(Flag::classify(9.0, 5.0, 9.0), Flag::Within);
    assert_eq!(Flag::classify(9.0 + 1e-9, 5.0, 9.0), Flag::Above);
    assert_eq!(Flag::classify(4.999, 5.0, 9.0), Flag::Below);
}

/// Independent Rubin pooling with plain loops.
fn rubin_oracle(betas: &[Vec<f64>], vars: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<Option<f64>>) {
    let m = betas.len() as f64;
    let p = betas[0].len();
    let mut out = (vec![], vec![], vec![]);
    for j in 0..p {
        let bar = betas.iter().map(|b| b[j]).sum::<f64>() / m;
        let w = vars.iter().map(|v| v[j]).sum::<f64>() / m;
        let b = betas.iter().map(|x| (x[j] - bar).powi(2)).sum::<f64>() / (m - 1.0);
        let t = w + (1.0 + 1.0 / m) * b;
        let df = if b > 0.0 {
            Some((m - 1.0) * (1.0 + w / ((1.0 + 1.0 / m) * b)).powi(2))
        } else {
            None
        };
        out.0.push(bar);
        out.1.push(t);
        out.2.push(df);
    }
    out
}

fn copies(seed: u64, m: usize, p: usize) -> (Vec<Vec<f64>>, Vec<DMatrix<f64>>) {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    let betas: Vec<Vec<f64>> = (0..m).map(|_| (0..p).map(|_| next() - 0.5).collect()).collect();
    let covs = (0..m)
        .map(|_| {
            let a = DMatrix::from_fn(p, p, |_, _| next() * 0.1);
            &a * a.transpose() + DMatrix::identity(p, p) * 0.01
        })
        .collect();
    (betas, covs)
}

#[test]
fn rubin_pooling_matches_loop_oracle() {
    let (betas, covs) = copies(3, 10, 4);
    let names: Vec<String> = (0..4).map(|j| format!("x{j}")).collect();
    let pooled = rubin_pool(&names, &betas, &covs).unwrap();
    let vars: Vec<Vec<f64>> = covs.iter().map(|c| (0..4).map(|j| c[(j, j)]).collect()).collect();
    let (bar, tot, df) = rubin_oracle(&betas, &vars);
    for j in 0..4 {
        assert!((pooled.beta_bar[j] - bar[j]).abs() < 1e-12);
        assert!((pooled.total_var[j][j] - tot[j]).abs() < 1e-12);
        let (a, b) = (pooled.df[j].unwrap(), df[j].unwrap());
        assert!((a - b).abs() < 1e-9 * b);
    }
}

#[test]
fn duplicated_programs_give_zero_across_program_variance() {
    let base = fixture(4, 1, 30, 1);
    let mut rows = vec![];
    for j in 0..6 {
        for r in base.rows() {
            let mut r = r.clone();
            r.group = GroupId::new(&format!("P{j}"), &format!("{}-{j}", r.group.level2));
            rows.push(r);
        }
    }
    let data = Dataset::new(rows, vec!["x0".into()]).unwrap();
    let cfg = FitConfig {
        random_effects: None,
        robust_level: None,
        ..Default::default()
    };
    let ids: Vec<String> = data.level1_ids().iter().map(|s| s.to_string()).collect();
    let plan = block_partition(&ids, 3, 1).unwrap();
    let v = block_jackknife_variance(&data, &data, &cfg, &plan, None, Normalization::Verbatim).unwrap();
    let full = TrainedModel::train(&data, &cfg, None).unwrap().expected_by_program(&data).unwrap();
    for (k, var) in v {
        assert!(var <= 1e-20 * full[&k].powi(2), "{k}: {var}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn block_size_is_floor(n in 2usize..400, m in 2usize..50) {
        prop_assume!(m <= n);
        let q = block_size(n, m);
        prop_assert_eq!(q, n / m);
        prop_assert!(m * q <= n && m * (q + 1) > n);
        let ids: Vec<String> = (0..n).map(|i| format!("P{i}")).collect();
        let plan = block_partition(&ids, m, n as u64).unwrap();
        prop_assert_eq!(plan.blocks.len(), m);
        prop_assert!(plan.blocks.iter().all(|b| b.len() == q));
        prop_assert_eq!(plan.excluded.len(), n - m * q);
    }

    #[test]
    fn rubin_pooling_is_permutation_invariant(seed in 0u64..10_000, m in 2usize..8, rot in 0usize..8) {
        let (betas, covs) = copies(seed, m, 3);
        let names: Vec<String> = (0..3).map(|j| format!("x{j}")).collect();
        let a = rubin_pool(&names, &betas, &covs).unwrap();
        let mut pb = betas.clone();
        let mut pc = covs.clone();
        pb.rotate_left(rot % m);
        pc.rotate_left(rot % m);
        pb.reverse();
        pc.reverse();
        let b = rubin_pool(&names, &pb, &pc).unwrap();
        for j in 0..3 {
            prop_assert!((a.beta_bar[j] - b.beta_bar[j]).abs() < 1e-12);
            prop_assert!((a.total_var[j][j] - b.total_var[j][j]).abs() < 1e-12);
        }
    }

    #[test]
    fn interval_width_grows_with_confidence(e in 0.0f64..100.0, v in 0.01f64..100.0, c1 in 0.5f64..0.99, dc in 0.001f64..0.009) {
        let (l1, h1) = confidence_interval(e, v, 1.0 - c1);
        let (l2, h2) = confidence_interval(e, v, 1.0 - (c1 + dc));
        prop_assert!(h2 - l2 > h1 - l1);
        prop_assert!(l2 < l1 && h2 > h1);
    }

    #[test]
    fn coverage_is_monotone_in_level(obs in proptest::collection::vec(0u64..30, 5..40), seed in 0u64..1000) {
        let (mut i1, mut i2, mut o) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        for (k, &n) in obs.iter().enumerate() {
            let id = format!("P{k}");
            let e = 10.0 + ((k as u64 * 7 + seed) % 11) as f64;
            i1.insert(id.clone(), confidence_interval(e, e, 0.2));
            i2.insert(id.clone(), confidence_interval(e, e, 0.05));
            o.insert(id, n);
        }
        let (c1, c2) = (coverage(&i1, &o).unwrap(), coverage(&i2, &o).unwrap());
        prop_assert!(c2 >= c1);
        prop_assert!((0.0..=1.0).contains(&c1));
    }
}

#[test]
fn model_json_round_trip_preserves_expected_counts() {
    let (data, _) = common::simulated(incidence::sim::Period::OneYear, 4, 8, 600);
    let model = TrainedModel::train(&data, &FitConfig::default(), None).unwrap();
    let back: TrainedModel = serde_json::from_str(&serde_json::to_string(&model).unwrap()).unwrap();
    assert_eq!(model.hazard, back.hazard);
    assert_eq!(
        model.expected_by_program(&data).unwrap(),
        back.expected_by_program(&data).unwrap()
    );
}
