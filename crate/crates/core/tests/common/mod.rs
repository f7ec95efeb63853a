#![allow(dead_code)]

use incidence::data::{AtRiskRow, Dataset, GroupId};
use incidence::sim::{gen_dataset, Period, ReVariance, SimConfig, SimTruth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Small random counting-process dataset: subjects with one to three
/// contiguous integer-day rows, events more likely for larger covariate sums.
pub fn fixture(seed: u64, n_programs: usize, n_subjects: usize, p: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = vec![];
    for i in 0..n_subjects {
        let program = format!("P{:02}", i % n_programs);
        let subject = format!("S{i:04}");
        let base: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let mut start = 0.0;
        for k in 0..rng.random_range(1..=3u32) {
            let len = rng.random_range(5..60) as f64;
            let covariates: Vec<f64> = base
                .iter()
                .map(|b| b + 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let lin: f64 = covariates.iter().sum::<f64>() * 0.4;
            let event = rng.random::<f64>() < 0.35 * lin.exp() / (1.0 + 0.35 * lin.exp());
            rows.push(AtRiskRow {
                group: GroupId::new(&program, &subject),
                encounter: k + 1,
                start,
                stop: start + len,
                event,
                covariates,
            });
            start += len;
        }
    }
    let names = (0..p).map(|j| format!("x{j}")).collect();
    Dataset::new(rows, names).expect("valid fixture")
}

/// Desk-scale simulated dataset.
pub fn simulated(period: Period, seed: u64, n_level1: usize, n_level2: usize) -> (Dataset, SimTruth) {
    gen_dataset(&SimConfig::for_period(period, seed).scaled(n_level1, n_level2)).expect("valid config")
}

pub fn simulated_with(
    period: Period,
    seed: u64,
    n_level1: usize,
    n_level2: usize,
    edit: impl FnOnce(&mut SimConfig),
) -> (Dataset, SimTruth) {
    let mut c = SimConfig::for_period(period, seed).scaled(n_level1, n_level2);
    edit(&mut c);
    gen_dataset(&c).expect("valid config")
}

pub fn no_random_effects(c: &mut SimConfig) {
    c.level1_variance = ReVariance::Fixed(0.0);
    c.level2_variance = ReVariance::Fixed(0.0);
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Imputation stack of 1500 subjects in 30 programs with standard-normal
/// covariates `signal1..5` (coefficient 0.5) and `noise1..5` (no effect).
/// About a tenth of the values are missing and filled with independent
/// standard-normal draws in every copy.
pub fn signal_noise_stack(seed: u64, copies: usize) -> incidence::imputation::MIStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1500;
    let mut complete = vec![];
    let mut missing = vec![];
    let mut spans = vec![];
    for _ in 0..n {
        let x: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
        let lp: f64 = 0.5 * x[..5].iter().sum::<f64>();
        let t = -rng.random::<f64>().ln() / (0.002 * lp.exp());
        let c = rng.random_range(100.0..600.0);
        spans.push((t.min(c).max(1e-3), t <= c));
        missing.push((0..10).map(|_| rng.random::<f64>() < 0.1).collect::<Vec<bool>>());
        complete.push(x);
    }
    let names: Vec<String> = (1..=5)
        .map(|k| format!("signal{k}"))
        .chain((1..=5).map(|k| format!("noise{k}")))
        .collect();
    let stack = (0..copies)
        .map(|_| {
            let rows = (0..n)
                .map(|i| AtRiskRow {
                    group: GroupId::new(&format!("P{:02}", i % 30), &format!("S{i:05}")),
                    encounter: 1,
                    start: 0.0,
                    stop: spans[i].0,
                    event: spans[i].1,
                    covariates: (0..10)
                        .map(|j| if missing[i][j] { rng.sample(StandardNormal) } else { complete[i][j] })
                        .collect(),
                })
                .collect();
            Dataset::new(rows, names.clone()).unwrap()
        })
        .collect();
    incidence::imputation::assemble_mi_stack(stack).unwrap()
}
