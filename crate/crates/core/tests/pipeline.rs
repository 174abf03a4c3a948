mod common;

use crl_core::analysis::{
    compute_metrics, export_report, load_trials, save_trials, split_step, trial_metrics, Normalization, ReportOptions,
};
use crl_core::models::SchemeKind;
use crl_core::simulation::{
    comparison_methods, estimate, generate_scenario, run_monte_carlo_methods, CovarianceMode, FilterSpec, Method,
    TrialRecord, UncertaintyLevel,
};

fn position_error(record: &TrialRecord, k: usize) -> f64 {
    let s = &record.steps[k];
    s.truth
        .blocks
        .iter()
        .zip(&s.estimate.blocks)
        .map(|(t, e)| (t.p - e.p).norm())
        .sum::<f64>()
        / s.truth.blocks.len() as f64
}

#[test]
fn every_method_runs_on_a_shared_scenario() {
    let mut cfg = common::short_config(15.0);
    cfg.uncertainty = UncertaintyLevel::from_q(3.0);
    cfg.seed = 77;
    let scenario = generate_scenario(&cfg).unwrap();
    let k0 = split_step(cfg.ts);
    for method in comparison_methods() {
        let rec = estimate(&scenario, &method);
        assert!(rec.is_complete(cfg.n_steps()), "{} {:?}", rec.method, rec.failure);
        assert_eq!(rec.steps[0].truth, scenario.truth[1]);
        // with relayed ranges the initial offset is pulled in within the horizon
        if method.scheme == SchemeKind::Fcrl {
            let late = position_error(&rec, rec.steps.len() - 1);
            assert!(late < 0.5 * position_error(&rec, 0), "{} ends at {late}", rec.method);
        }
        let m = compute_metrics(&rec, k0, Normalization::PerSample).unwrap();
        assert!(m.ss_er_p < m.tr_er_p, "{}", rec.method);
        let iters = rec.steps.iter().filter(|s| s.fp_iters.is_some()).count();
        match method.filter {
            FilterSpec::Ekf => assert_eq!(iters, 0),
            FilterSpec::Kernel { .. } => assert_eq!(iters, rec.steps.len()),
        }
    }
}

#[test]
fn monte_carlo_is_reproducible_and_round_trips() {
    let cfg = common::short_config(11.0);
    let methods = [
        Method::new(SchemeKind::Fcrl, FilterSpec::mlvc(), CovarianceMode::Smart),
        Method::new(SchemeKind::Ncrl, FilterSpec::Ekf, CovarianceMode::Inattentive),
    ];
    let levels = [UncertaintyLevel::from_q(1.0), UncertaintyLevel::from_q(4.0)];
    let a = run_monte_carlo_methods(&cfg, &methods, &levels, 2, 5).unwrap();
    let b = run_monte_carlo_methods(&cfg, &methods, &levels, 2, 5).unwrap();
    assert_eq!(a.len(), 8);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.seed, &x.method), (y.seed, &y.method));
        for (s, t) in x.steps.iter().zip(&y.steps) {
            assert_eq!(s.truth, t.truth);
            assert_eq!(s.estimate, t.estimate);
            assert_eq!(s.fp_iters, t.fp_iters);
        }
    }

    let dir = tempfile::tempdir().unwrap();
    save_trials(&a, dir.path()).unwrap();
    let loaded = load_trials(dir.path()).unwrap();
    assert_eq!(loaded, a);

    let summary = export_report(&loaded, &ReportOptions::default(), dir.path()).unwrap();
    assert_eq!(summary.trials, 8);
    assert_eq!(summary.failures, 0);
    assert_eq!(summary.groups.len(), 2);
    assert_eq!(summary.trial_metrics, trial_metrics(&a, Normalization::PaperLiteral));
}

#[test]
fn dropped_packets_still_complete() {
    let mut cfg = common::short_config(11.0);
    cfg.seed = 4;
    let full = generate_scenario(&cfg).unwrap();
    cfg.p_drop = 1.0;
    let none = generate_scenario(&cfg).unwrap();
    assert_eq!(full.truth, none.truth);
    let method = Method::new(SchemeKind::Fcrl, FilterSpec::Ekf, CovarianceMode::Smart);
    let with = estimate(&full, &method);
    let without = estimate(&none, &method);
    assert!(with.is_complete(cfg.n_steps()) && without.is_complete(cfg.n_steps()));
    // without any range the covariance grows over the run
    let first = without.steps[0].p_trace;
    let last = without.steps.last().unwrap().p_trace;
    assert!(last > 2.0 * first, "{first} -> {last}");
    assert!(with.steps.last().unwrap().p_trace < first);
}
