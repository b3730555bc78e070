use std::collections::HashSet;

use wsad_core::dataset::WeakLabelSplit;
use wsad_core::experiment::{
    read_reports, replay, run_experiment, sweep_labels, write_outputs, DataSource, ExperimentSpec,
};
use wsad_core::numerics::Rng;
use wsad_core::synth::SynthConfig;
use wsad_core::trainer::{sample_balanced_batch, TrainConfig};

fn spec(budgets: Vec<usize>) -> ExperimentSpec {
    let data = DataSource::Synthetic(SynthConfig {
        normals: 400,
        anomalies: 120,
        dim: 8,
        intrinsic_dim: 2,
        ..SynthConfig::default()
    });
    ExperimentSpec {
        train: TrainConfig {
            batch_size: 32,
            stage1_epochs: 2,
            stage2_epochs: 2,
            scorer_hidden: vec![8, 4],
            seed: 11,
            ..TrainConfig::default()
        },
        n_runs: 2,
        label_budgets: budgets,
        ..ExperimentSpec::new(data)
    }
}

// 19 degrees of freedom, upper 0.1% point of the chi-square distribution.
const CHI2_19_999: f64 = 43.82;

#[test]
fn labeled_anomalies_are_drawn_uniformly() {
    let pool: Vec<usize> = (1000..1020).collect();
    let split = WeakLabelSplit {
        train_unlabeled: (0..500).collect(),
        train_labeled_anomalies: pool.clone(),
        test: Vec::new(),
        contamination_rate: 0.0,
        n_labeled: pool.len(),
        n_labeled_requested: pool.len(),
        hidden_anomalies: 0,
        seed: 0,
    };
    let mut rng = Rng::new(2024);
    let mut counts = vec![0usize; pool.len()];
    let mut draws = 0;
    while draws < 100_000 {
        let batch = sample_balanced_batch(&split, 64, &mut rng).unwrap();
        assert_eq!(batch.unlabeled.len(), batch.anomalies.len());
        let distinct: HashSet<_> = batch.unlabeled.iter().collect();
        assert_eq!(distinct.len(), batch.unlabeled.len());
        for a in batch.anomalies {
            counts[a - 1000] += 1;
            draws += 1;
        }
    }
    let expected = draws as f64 / pool.len() as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    assert!(chi2 < CHI2_19_999, "chi-square {chi2:.2} over {counts:?}");
}

#[test]
fn stored_report_replays_exactly() {
    let spec = spec(vec![10]);
    let ds = spec.data.load().unwrap();
    let report = run_experiment(&spec, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_outputs(
        dir.path(),
        "tiny",
        &report.metric_records(),
        &report.to_text(),
        std::slice::from_ref(&report),
    )
    .unwrap();
    let stored = read_reports(&files.reports).unwrap();
    assert_eq!(stored.len(), 1);
    assert_eq!(stored[0].config, report.config);
    let again = replay(&stored[0]).unwrap();
    assert_eq!(again.metric_records(), report.metric_records());
}

#[test]
fn single_budget_sweep_matches_run() {
    let spec = spec(vec![30]);
    let ds = spec.data.load().unwrap();
    let run = run_experiment(&spec, &ds).unwrap();
    let sweep = sweep_labels(&spec, &ds).unwrap();
    assert_eq!(sweep.curve.len(), 1);
    assert_eq!(sweep.curve[0].auc_roc, run.aggregate.auc_roc);
    assert_eq!(sweep.curve[0].auc_pr, run.aggregate.auc_pr);
    let swept = &sweep.comparison.reports[0];
    for (a, b) in swept.runs.iter().zip(&run.runs) {
        assert_eq!(a.eval, b.eval);
    }
}

#[test]
fn sweep_has_one_point_per_budget() {
    let spec = spec(vec![5, 10, 20]);
    let ds = spec.data.load().unwrap();
    let sweep = sweep_labels(&spec, &ds).unwrap();
    let budgets: Vec<usize> = sweep.curve.iter().map(|p| p.budget).collect();
    assert_eq!(budgets, vec![5, 10, 20]);
    for p in &sweep.curve {
        assert_eq!(p.n_labeled, p.budget);
        assert!((0.0..=1.0).contains(&p.auc_roc.mean));
    }
    assert_eq!(sweep.to_text().matches("labels=").count(), 3);
}
