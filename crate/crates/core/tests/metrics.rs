use std::collections::HashSet;
use std::f64::consts::PI;

use nasproxy::data::{synth_dataset, LabeledDataset, SynthSpec};
use nasproxy::metrics::{
    angle, lr1_from_codes, lr2_from_codes, metric_lr1, metric_lr2, metric_ntk, read_metric_csv, score_network,
    write_metric_csv, ActivationCodes, MetricKind, MetricSet, ScoreConfig, DEGENERATE_SCORE,
};
use nasproxy::space::{CellGenotype, CellOp, MacroConfig, Network};
use nasproxy::tensor::Graph;
use proptest::prelude::*;

fn small() -> MacroConfig {
    MacroConfig {
        stem_channels: 8,
        input_resolution: 8,
        ..MacroConfig::default()
    }
}

fn data() -> LabeledDataset {
    synth_dataset(&SynthSpec::new(10, 12, 8, 3)).unwrap()
}

fn codes_from_bits(rows: &[Vec<bool>]) -> ActivationCodes {
    let n_units = rows[0].len();
    let codes = rows
        .iter()
        .map(|r| {
            let mut w = vec![0u64; n_units.div_ceil(64)];
            for (i, &on) in r.iter().enumerate() {
                if on {
                    w[i / 64] |= 1 << (i % 64);
                }
            }
            w
        })
        .collect();
    ActivationCodes { codes, n_units }
}

#[test]
fn lr1_counts_distinct_patterns_of_a_real_network() {
    let ds = data();
    let g: CellGenotype = "3|3|1|2|3|4".parse().unwrap();
    let net = Network::<f32>::build(&g, &small(), 1).unwrap();
    let batch = ds.random_batch(32, 2).unwrap();
    let mut graph = Graph::new();
    net.forward(&mut graph, &batch).unwrap();
    let patterns: HashSet<Vec<bool>> = (0..32)
        .map(|i| {
            graph
                .activation_taps()
                .iter()
                .flat_map(|&t| {
                    let v = graph.value(t);
                    let per = v.len() / 32;
                    v.data()[i * per..(i + 1) * per].iter().map(|&x| x > 0.0).collect::<Vec<_>>()
                })
                .collect()
        })
        .collect();
    assert_eq!(metric_lr1(&net, &batch).unwrap().score, patterns.len() as f64);
}

#[test]
fn region_metrics_need_two_samples() {
    let ds = data();
    let net = Network::<f32>::build(&CellGenotype::uniform(CellOp::Conv3x3), &small(), 1).unwrap();
    let one = ds.random_batch(1, 0).unwrap();
    assert!(metric_lr1(&net, &one).is_err());
    assert!(metric_lr2(&net, &one).is_err());
}

#[test]
fn ntk_is_invariant_to_sample_order() {
    let ds = data();
    let m = MacroConfig { num_stages: 1, ..small() };
    let net = Network::<f64>::build(&"3|2|3|1|2|3".parse().unwrap(), &m, 4).unwrap();
    let batch = ds.random_batch(3, 5).unwrap().cast::<f64>();
    let a = metric_ntk(&net, &batch).unwrap();
    let b = metric_ntk(&net, &batch.select_batch(&[1, 2, 0])).unwrap();
    assert!(!a.degenerate);
    assert!(a.score <= -1.0);
    assert!((a.score - b.score).abs() <= 1e-8 * a.score.abs());
}

#[test]
fn scoring_is_deterministic_and_round_trips_through_csv() {
    let ds = data();
    let cfg = ScoreConfig {
        metrics: MetricSet::all(),
        region_batch: 16,
        ntk_batch: 2,
        ..ScoreConfig::default()
    };
    let g: CellGenotype = "3|1|2|0|4|3".parse().unwrap();
    let a = score_network(&g, &small(), &ds, &cfg, 11).unwrap();
    let b = score_network(&g, &small(), &ds, &cfg, 11).unwrap();
    assert_eq!(a, b);
    let mut buf = Vec::new();
    write_metric_csv(&[a.clone()], &mut buf).unwrap();
    let back = read_metric_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), 1);
    for k in [MetricKind::Angle, MetricKind::Loss, MetricKind::Param, MetricKind::Lr1, MetricKind::Lr2] {
        assert_eq!(back[0].score(k), a.score(k), "{k:?}");
    }
}

#[test]
fn zero_cell_collapses_to_uniform_prediction() {
    let ds = data();
    let cfg = ScoreConfig {
        metrics: "angle,loss".parse().unwrap(),
        ..ScoreConfig::default()
    };
    let zero = score_network(&CellGenotype::uniform(CellOp::Zeroize), &small(), &ds, &cfg, 3).unwrap();
    assert!(zero.scores.theta_pred.unwrap() < 1e-3);
    assert!((zero.scores.loss_score.unwrap() + 10f64.ln()).abs() < 1e-3);
}

proptest! {
    #[test]
    fn angle_is_symmetric_and_bounded(
        v in proptest::collection::vec(-5.0f64..5.0, 1..40),
        seed in 0u64..1000,
    ) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let w: Vec<f64> = v.iter().enumerate().map(|(i, x)| x * ((i as u64 + seed) % 7) as f64 - 1.0).collect();
        prop_assume!(w.iter().any(|x| x.abs() > 1e-3));
        let a = angle(&v, &w).unwrap();
        let b = angle(&w, &v).unwrap();
        prop_assert!((0.0..=PI).contains(&a));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn lr2_ignores_sample_order(
        rows in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 70), 2..10),
        rot in 0usize..10,
    ) {
        let codes = codes_from_bits(&rows);
        let mut shuffled = rows.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        let a = lr2_from_codes(&codes);
        let b = lr2_from_codes(&codes_from_bits(&shuffled));
        prop_assert_eq!(a.score.to_bits(), b.score.to_bits());
        let distinct: HashSet<&Vec<bool>> = rows.iter().collect();
        if distinct.len() < rows.len() {
            prop_assert!(a.degenerate);
            prop_assert_eq!(a.score, DEGENERATE_SCORE);
        }
        let lr1 = lr1_from_codes(&codes).score;
        prop_assert!(lr1 >= 1.0 && lr1 <= rows.len() as f64);
        prop_assert_eq!(lr1, distinct.len() as f64);
    }
}
