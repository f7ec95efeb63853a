mod common;

use std::collections::BTreeSet;

use common::signal_noise_stack;
use incidence::imputation::assemble_mi_stack;
use incidence::pooling::{stepdown_select, Rule, SelectionThresholds};
use incidence::risk::FitConfig;

#[test]
fn trace_partitions_initial_covariates() {
    let stack = signal_noise_stack(1, 3);
    let trace = stepdown_select(&stack, &FitConfig::default(), &SelectionThresholds::default()).unwrap();
    let dropped: BTreeSet<String> = trace.dropped().into_iter().collect();
    let kept: BTreeSet<String> = trace.final_covariates.iter().cloned().collect();
    assert!(dropped.is_disjoint(&kept));
    let all: BTreeSet<String> = trace.initial_covariates.iter().cloned().collect();
    assert_eq!(&dropped | &kept, all);
    assert_eq!(dropped.len(), trace.dropped().len());
    for step in &trace.iterations {
        assert_ne!(step.rule, Rule::Stop);
        assert!(!step.dropped.is_empty() && step.dropped.len() <= 3);
    }
    let est = trace.final_estimate.as_ref().unwrap();
    assert!(est.p_values.iter().all(|&p| p < 0.1));
    assert_eq!(est.covariate_names, trace.final_covariates);
    for k in 1..=5 {
        assert!(kept.contains(&format!("signal{k}")), "signal{k} dropped: {}", trace.to_text());
    }
}

#[test]
fn selection_replays_identically() {
    let stack = signal_noise_stack(2, 2);
    let cfg = FitConfig::default();
    let a = stepdown_select(&stack, &cfg, &SelectionThresholds::default()).unwrap();
    let b = stepdown_select(&stack, &cfg, &SelectionThresholds::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn strong_signals_stop_immediately() {
    let stack = signal_noise_stack(3, 2);
    let signal: Vec<String> = (1..=5).map(|k| format!("signal{k}")).collect();
    let sub = stack.select_covariates_by_name(&signal).unwrap();
    let trace = stepdown_select(&sub, &FitConfig::default(), &SelectionThresholds::default()).unwrap();
    assert!(trace.iterations.is_empty(), "{}", trace.to_text());
    assert_eq!(trace.final_covariates, signal);
}

#[test]
fn single_copy_is_rejected() {
    let stack = signal_noise_stack(4, 2);
    let one = assemble_mi_stack(vec![stack.copy(0).clone()]).unwrap();
    assert!(stepdown_select(&one, &FitConfig::default(), &SelectionThresholds::default()).is_err());
}
