use nasproxy::data::{synth_dataset, SynthSpec};
use nasproxy::space::{
    build_supernet, count_params, count_state_params, prune_operator, CellGenotype, CellOp, MacroConfig, Network,
    SupernetState, NUM_EDGES, SPACE_SIZE,
};
use nasproxy::tensor::Graph;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> MacroConfig {
    MacroConfig {
        stem_channels: 8,
        input_resolution: 8,
        ..MacroConfig::default()
    }
}

#[test]
fn analytic_count_matches_built_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for m in [MacroConfig::default(), MacroConfig { cells_per_stage: 2, ..small() }] {
        for _ in 0..50 {
            let g = CellGenotype::from_index(rng.random_range(0..SPACE_SIZE)).unwrap();
            let net = Network::<f32>::build(&g, &m, 0).unwrap();
            assert_eq!(count_params(&g, &m), net.num_parameters(), "{g}");
        }
    }
}

#[test]
fn supernet_count_covers_every_active_op() {
    let m = small();
    let (net, state) = build_supernet::<f32>(&m, 1).unwrap();
    assert_eq!(count_state_params(&state, &m), net.num_parameters());
}

fn logits(net: &Network<f32>, images: &nasproxy::tensor::Tensor<f32>) -> Vec<f32> {
    let mut g = Graph::new();
    let out = net.forward(&mut g, images).unwrap();
    g.value(out.logits).data().to_vec()
}

/// A supernet pruned down to one genotype computes exactly what the plain
/// network computes.
#[test]
fn pruned_supernet_is_bit_identical_to_plain_network() {
    let m = small();
    let ds = synth_dataset(&SynthSpec::new(10, 4, 8, 0)).unwrap();
    let images = ds.random_batch(6, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let g = CellGenotype::from_index(rng.random_range(0..SPACE_SIZE)).unwrap();
        let (mut net, mut state) = build_supernet::<f32>(&m, 42).unwrap();
        for e in 0..NUM_EDGES {
            for op in CellOp::ALL {
                if op != g.op(e) {
                    state = prune_operator(&state, e, op).unwrap();
                }
            }
        }
        assert_eq!(state.to_genotype(), Some(g));
        net.set_state(state).unwrap();
        let plain = Network::<f32>::build(&g, &m, 42).unwrap();
        let (a, b) = (logits(&net, &images), logits(&plain, &images));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{g}");
    }
}

#[test]
fn masks_only_shrink() {
    let state = SupernetState::from_genotype(&CellGenotype::uniform(CellOp::Conv1x1));
    assert!(state.removable().is_empty());
    assert!(prune_operator(&state, 0, CellOp::Conv1x1).is_err());
    assert!(state.reactivate(0, CellOp::Conv3x3).is_err());
    let m = small();
    let mut net = Network::<f32>::build(&CellGenotype::uniform(CellOp::Conv1x1), &m, 0).unwrap();
    assert!(net.set_state(SupernetState::full()).is_err());
}

#[test]
fn same_seed_same_weights() {
    let m = small();
    let g: CellGenotype = "3|1|2|0|4|3".parse().unwrap();
    let a = Network::<f32>::build(&g, &m, 5).unwrap();
    let b = Network::<f32>::build(&g, &m, 5).unwrap();
    let c = Network::<f32>::build(&g, &m, 6).unwrap();
    assert_eq!(a.params().flatten_values(), b.params().flatten_values());
    assert_ne!(a.params().flatten_values(), c.params().flatten_values());
}

proptest! {
    #[test]
    fn conv_swap_changes_count_by_8c2(index in 0usize..SPACE_SIZE, edge in 0usize..NUM_EDGES) {
        let m = MacroConfig::default();
        let g = CellGenotype::from_index(index).unwrap();
        let with3 = count_params(&g.with_op(edge, CellOp::Conv3x3), &m);
        let with1 = count_params(&g.with_op(edge, CellOp::Conv1x1), &m);
        let expect: usize = (0..m.num_stages).map(|s| 8 * m.stage_channels(s).pow(2)).sum();
        prop_assert_eq!(with3 - with1, expect);
    }

    #[test]
    fn parameter_free_ops_are_interchangeable(index in 0usize..SPACE_SIZE, edge in 0usize..NUM_EDGES) {
        let m = MacroConfig::default();
        let g = CellGenotype::from_index(index).unwrap();
        let counts: Vec<usize> = [CellOp::Zeroize, CellOp::SkipConnect, CellOp::AvgPool3x3]
            .iter()
            .map(|&op| count_params(&g.with_op(edge, op), &m))
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[0] == w[1]));
    }
}
