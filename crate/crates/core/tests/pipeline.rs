use fdgnn_core::autodiff::ParamStore;
use fdgnn_core::fgnn::{
    evaluate, fit_feature_norm, forward, forward_sample, init_params, predict, train, FgnnConfig,
    Sample,
};
use fdgnn_core::graphrep::{build_pair_graph, truncate_edges};
use fdgnn_core::netgen::{read_dataset, sample_dataset, write_dataset, ExperimentConfig};
use fdgnn_core::phy::{weighted_sum_rate, PowerAllocation};
use fdgnn_core::threshold::{expected_edges, ideal_threshold, threshold_sweep, SweepData};
use fdgnn_core::wmmse;
use proptest::prelude::*;
use tempfile::TempDir;

fn small(k: usize) -> ExperimentConfig {
    ExperimentConfig {
        fd_fraction: if k % 2 == 0 { 0.5 } else { 0.0 },
        ..ExperimentConfig::default().with_links(k)
    }
}

fn fitted(model: &FgnnConfig, samples: &[Sample]) -> ParamStore {
    let mut p = init_params(model, 11).unwrap();
    fit_feature_norm(&mut p, model, samples);
    p
}

#[test]
fn dataset_file_gives_identical_predictions() {
    let dir = TempDir::new().unwrap();
    let insts = sample_dataset(&small(8), 3, 12).unwrap();
    let path = dir.path().join("set.jsonl");
    write_dataset(&insts, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, insts);

    let model = FgnnConfig::default();
    let a: Vec<Sample> = insts.into_iter().map(Sample::from_instance).collect();
    let b: Vec<Sample> = back.into_iter().map(Sample::from_instance).collect();
    let params = fitted(&model, &a);
    assert_eq!(predict(&params, &model, &a), predict(&params, &model, &b));
}

#[test]
fn checkpoint_round_trip_keeps_predictions() {
    let dir = TempDir::new().unwrap();
    let model = FgnnConfig {
        epochs: 1,
        batch_size: 8,
        ..FgnnConfig::default()
    };
    let set: Vec<Sample> = sample_dataset(&small(6), 4, 24)
        .unwrap()
        .into_iter()
        .map(Sample::from_instance)
        .collect();
    let trained = train(&set, None, &model, 5).unwrap().params;
    let path = dir.path().join("ckpt.json");
    trained.save(&path).unwrap();
    let loaded = ParamStore::load(&path).unwrap();
    assert_eq!(loaded.adam.step, 3);
    assert_eq!(
        predict(&trained, &model, &set),
        predict(&loaded, &model, &set)
    );
}

#[test]
fn wmmse_reference_scores_one() {
    let model = FgnnConfig::default();
    let insts = sample_dataset(&small(10), 8, 6).unwrap();
    let refs: Vec<PowerAllocation> = insts
        .iter()
        .map(|i| wmmse(i, &Default::default()).unwrap())
        .collect();
    let set: Vec<Sample> = insts.into_iter().map(Sample::from_instance).collect();
    let params = fitted(&model, &set);
    let m = evaluate(&params, &model, &set, &refs).unwrap();
    let direct: f64 = set
        .iter()
        .zip(&refs)
        .map(|(s, p)| weighted_sum_rate(&s.instance, p).unwrap())
        .sum::<f64>()
        / set.len() as f64;
    assert!((m.mean_reference_rate - direct).abs() < 1e-12);
    assert!(m.ratio_vs_reference > 0.0);
    assert!(evaluate(&params, &model, &[], &[]).is_err());
}

#[test]
fn small_sweep_reports_every_threshold() {
    let model = FgnnConfig {
        epochs: 1,
        batch_size: 10,
        ..FgnnConfig::default()
    };
    let cfg = small(8);
    let train_set: Vec<Sample> = sample_dataset(&cfg, 20, 30)
        .unwrap()
        .into_iter()
        .map(Sample::from_instance)
        .collect();
    let test: Vec<Sample> = sample_dataset(&cfg, 21, 10)
        .unwrap()
        .into_iter()
        .map(Sample::from_instance)
        .collect();
    let refs: Vec<f64> = test
        .iter()
        .map(|s| {
            weighted_sum_rate(
                &s.instance,
                &wmmse(&s.instance, &Default::default()).unwrap(),
            )
            .unwrap()
        })
        .collect();
    let data = SweepData {
        train: &train_set,
        validation: None,
        test: &test,
        test_reference: &refs,
    };
    let report = threshold_sweep(&data, &[0.0, 40.0, 500.0], &model, 1).unwrap();
    report.validate().unwrap();
    assert_eq!(report.analytic_expected_edges[0], 0.0);
    assert_eq!(report.empirical_mean_edges[0], 0.0);
    assert_eq!(
        report.analytic_expected_edges[2],
        expected_edges(500.0, 8, 100.0)
    );
    assert_eq!(report.analytic_expected_edges[2], 28.0);
    // 2 FD pairs are SI edges, the rest interference edges.
    assert_eq!(report.empirical_mean_edges[2], 26.0);
    assert!(report
        .analytic_expected_edges
        .windows(2)
        .all(|w| w[0] <= w[1]));
    assert_eq!(ideal_threshold(&report, 0.0).unwrap(), 0.0);
    assert!(ideal_threshold(&report, 2.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn powers_stay_in_the_box(k in 1usize..12, seed in 0u64..10_000, t in 0.0f64..160.0) {
        let model = FgnnConfig::default();
        let params = init_params(&model, seed).unwrap();
        let inst = fdgnn_core::sample_instance(&small(k), seed).unwrap();
        let g = truncate_edges(&build_pair_graph(&inst), t);
        let p = forward(&g, &inst, &params, &model).unwrap();
        prop_assert_eq!(p.len(), k);
        prop_assert!(p.as_slice().iter().all(|&x| (0.0..=inst.config.p_max_w).contains(&x)));
    }

    #[test]
    fn truncation_only_removes_interference_edges(k in 2usize..14, seed in 0u64..10_000, t in 0.0f64..150.0) {
        let inst = fdgnn_core::sample_instance(&small(k), seed).unwrap();
        let full = build_pair_graph(&inst);
        let cut = truncate_edges(&full, t);
        prop_assert!(cut.num_edges() <= full.num_edges());
        prop_assert_eq!(cut.num_si_edges(), full.num_si_edges());
        let wide = Sample::from_instance(inst.clone()).truncated(1e4);
        let model = FgnnConfig::default();
        let params = init_params(&model, seed).unwrap();
        prop_assert_eq!(
            forward_sample(&wide, &params, &model),
            forward_sample(&Sample::from_instance(inst), &params, &model)
        );
    }
}
