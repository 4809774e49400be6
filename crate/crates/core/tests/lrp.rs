use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srcloc_core::lrp::*;
use srcloc_core::models::{build_loccnn, build_samplecnn, LocCnnConfig, SampleCnnConfig};
use srcloc_core::nn::{
    BranchTag, Conv1d, Dense, Edge, GraphBuilder, LayerGraph, LayerKind, Mode, Tensor,
};

fn dense(in_dim: usize, out_dim: usize, weight: Vec<f64>) -> LayerKind {
    LayerKind::Dense(Dense {
        weight,
        ..Dense::new(in_dim, out_dim)
    })
}

fn single_dense(weight: Vec<f64>, out_dim: usize, rule: Rule) -> (LayerGraph, RuleAssignment) {
    let mut b = GraphBuilder::new(vec![2]);
    b.chain("fc", dense(2, out_dim, weight));
    let g = b.finish("t").unwrap();
    let mut rules = RuleAssignment::default_for(&g, DEFAULT_GAMMA, DEFAULT_EPSILON);
    rules.set("fc", rule);
    (g, rules)
}

fn run(
    g: &LayerGraph,
    x: Vec<f64>,
    shape: Vec<usize>,
    rules: &RuleAssignment,
    seed: Option<&[f64]>,
) -> RelevanceMap {
    let (_, trace) = g
        .forward(&Tensor::new(shape, x).unwrap(), Mode::Inference)
        .unwrap();
    match seed {
        Some(s) => attribute_with_seed(g, &trace, rules, s).unwrap(),
        None => attribute(g, &trace, rules, Selector::Sum).unwrap(),
    }
}

#[test]
fn identity_dense_returns_the_active_input() {
    let (g, rules) = single_dense(vec![1.0, 0.0, 0.0, 1.0], 2, Rule::Epsilon { epsilon: 0.0 });
    let map = run(&g, vec![2.0, 0.0], vec![2], &rules, None);
    assert_eq!(map.output_seed, vec![2.0, 0.0]);
    assert!((map.input.data()[0] - 2.0).abs() < 1e-8);
    assert_eq!(map.input.data()[1], 0.0);
}

#[test]
fn symmetric_neuron_splits_evenly() {
    let (g, rules) = single_dense(vec![1.0, 1.0], 1, Rule::Epsilon { epsilon: 0.0 });
    let map = run(&g, vec![1.0, 1.0], vec![2], &rules, Some(&[4.0]));
    for v in map.input.data() {
        assert!((v - 2.0).abs() < 1e-8);
    }
}

#[test]
fn gamma_rule_hand_example() {
    // z = (1.25, -1), sum 0.25, R = (5, -4).
    let (g, rules) = single_dense(vec![1.0, -1.0], 1, Rule::Gamma { gamma: 0.25 });
    let map = run(&g, vec![1.0, 1.0], vec![2], &rules, Some(&[1.0]));
    assert!((map.input.data()[0] - 5.0).abs() < 1e-6);
    assert!((map.input.data()[1] + 4.0).abs() < 1e-6);
}

#[test]
fn wsquare_hand_example_and_input_independence() {
    let r = propagate_wsquare(&[3.0, 4.0], 1.0);
    assert!((r[0] - 9.0 / 25.0).abs() < 1e-15 && (r[1] - 16.0 / 25.0).abs() < 1e-15);
    assert_eq!(propagate_wsquare(&[0.0, 0.0], 1.0), vec![0.5, 0.5]);

    // Input convolution under w^2: doubling x leaves the input relevance unchanged.
    let mut b = GraphBuilder::new(vec![6, 1]);
    b.chain(
        "conv",
        LayerKind::Conv1d(Conv1d {
            weight: vec![3.0, 4.0],
            ..Conv1d::new(1, 1, 2, 2, 0)
        }),
    );
    b.chain(
        "flat",
        dense(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
    );
    let g = b.finish("t").unwrap();
    let mut rules = RuleAssignment::default_for(&g, 0.25, 0.0);
    assert_eq!(rules.rules["conv"], Rule::WSquare);
    rules.set("flat", Rule::WSquare);
    let seed = [0.7, -0.2, 1.5];
    let x = vec![0.5, 1.0, -2.0, 0.3, 0.7, 0.1];
    let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    let a = run(&g, x, vec![6, 1], &rules, Some(&seed));
    let b = run(&g, doubled, vec![6, 1], &rules, Some(&seed));
    assert_eq!(a.input, b.input);
    let expected: Vec<f64> = seed
        .iter()
        .flat_map(|r| [9.0 / 25.0 * r, 16.0 / 25.0 * r])
        .collect();
    for (got, want) in a.input.data().iter().zip(&expected) {
        assert!((got - want).abs() < 1e-12);
    }
    let total: f64 = a.input.data().iter().sum();
    assert!((total - seed.iter().sum::<f64>()).abs() < 1e-12);
}

#[test]
fn signal_takes_all_and_residual_split() {
    let (rs, rg) = propagate_signal_takes_all(&[0.3, -1.0, 2.0], 2);
    assert_eq!(rs, vec![0.3, -1.0, 2.0]);
    assert_eq!(rg, vec![0.0, 0.0]);

    let r = [1.0, -2.0, 0.5];
    let (m, s) = canonize_residual(&[0.4, 1.0, 3.0], &[0.0; 3], &r, DEFAULT_STABILIZER);
    for (a, b) in m.iter().zip(&r) {
        assert!((a - b).abs() < 1e-8);
    }
    assert!(s.iter().all(|v| *v == 0.0));
    let (m, s) = canonize_residual(&[0.7; 3], &[0.7; 3], &r, DEFAULT_STABILIZER);
    for ((a, b), c) in m.iter().zip(&s).zip(&r) {
        assert_eq!(a, b);
        assert!((a - c / 2.0).abs() < 1e-8);
    }
}

#[test]
fn bias_only_neuron_falls_back_to_wsquare() {
    // A zero input leaves the second hidden unit active through its bias alone.
    let mut b = GraphBuilder::new(vec![2]);
    b.chain(
        "fc1",
        LayerKind::Dense(Dense {
            weight: vec![1.0, 1.0, 1.0, 2.0],
            bias: vec![0.0, 1.0],
            ..Dense::new(2, 2)
        }),
    );
    b.chain("relu", LayerKind::Relu);
    b.chain("out", dense(2, 1, vec![1.0, 1.0]));
    let g = b.finish("t").unwrap();
    let mut rules = RuleAssignment::default_for(&g, DEFAULT_GAMMA, 0.0);
    rules.set("fc1", Rule::Epsilon { epsilon: 0.0 });
    let map = run(&g, vec![0.0, 0.0], vec![2], &rules, None);
    assert_eq!(map.output_seed, vec![1.0]);
    let r = map.input.data();
    assert!(
        (r[0] - 0.2).abs() < 1e-12 && (r[1] - 0.8).abs() < 1e-12,
        "{r:?}"
    );
}

fn relu_like() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), 0.01f64..10.0]
}

proptest! {
    #[test]
    fn residual_split_conserves(
        acts in prop::collection::vec((relu_like(), relu_like(), -5.0f64..5.0), 1..40)
    ) {
        let main: Vec<f64> = acts.iter().map(|a| a.0).collect();
        let skip: Vec<f64> = acts.iter().map(|a| a.1).collect();
        let r: Vec<f64> = acts.iter().map(|a| a.2).collect();
        let (m, s) = canonize_residual(&main, &skip, &r, DEFAULT_STABILIZER);
        for i in 0..r.len() {
            prop_assert!((m[i] + s[i] - r[i]).abs() <= 1e-6 * r[i].abs());
        }
    }
}

/// SE-style graph with a gate, and the same graph with the gate removed.
fn gated_pair(saturated_bias: f64) -> (LayerGraph, LayerGraph) {
    let conv = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        LayerKind::Conv1d(Conv1d {
            weight: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ..Conv1d::same(1, 2, 3)
        })
    };
    let head = || dense(2, 1, vec![0.8, -0.3]);
    let mut b = GraphBuilder::new(vec![8, 1]);
    let relu = {
        b.chain("conv", conv());
        b.chain("relu", LayerKind::Relu)
    };
    b.chain("gap", LayerKind::GlobalAvgPool1d);
    b.chain(
        "fc",
        LayerKind::Dense(Dense {
            bias: vec![saturated_bias; 2],
            ..Dense::new(2, 2)
        }),
    );
    let gate = b.chain("sigmoid", LayerKind::Sigmoid);
    b.add(
        "gate",
        LayerKind::Multiply,
        vec![
            Edge::tagged(relu, BranchTag::Signal),
            Edge::tagged(gate, BranchTag::Gate),
        ],
    );
    b.chain("pool", LayerKind::GlobalAvgPool1d);
    b.chain("out", head());
    let gated = b.finish("gated").unwrap();

    let mut b = GraphBuilder::new(vec![8, 1]);
    b.chain("conv", conv());
    b.chain("relu", LayerKind::Relu);
    b.chain("pool", LayerKind::GlobalAvgPool1d);
    b.chain("out", head());
    (gated, b.finish("plain").unwrap())
}

#[test]
fn saturated_gate_is_transparent() {
    let (gated, plain) = gated_pair(60.0);
    let x: Vec<f64> = (0..8).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.4).collect();
    let rg = RuleAssignment::default_for(&gated, 0.25, 0.0);
    let rp = RuleAssignment::default_for(&plain, 0.25, 0.0);
    let a = run(&gated, x.clone(), vec![8, 1], &rg, None);
    let b = run(&plain, x, vec![8, 1], &rp, None);
    assert_eq!(a.output_seed, b.output_seed);
    assert_eq!(a.input, b.input);
    // The gate branch receives nothing.
    let fc = gated.node_index("fc").unwrap();
    assert!(a.layers[fc].data().iter().all(|v| *v == 0.0));
}

#[test]
fn passthrough_and_maxpool_routing() {
    let mut b = GraphBuilder::new(vec![6, 1]);
    b.chain("relu", LayerKind::Relu);
    b.chain("pool", LayerKind::MaxPool1d { size: 2 });
    b.chain("out", dense(3, 1, vec![1.0, 2.0, 3.0]));
    let g = b.finish("t").unwrap();
    let rules = RuleAssignment::default_for(&g, 0.25, 0.0);
    // Window (2, 2) ties: the first sample wins.
    let map = run(
        &g,
        vec![1.0, 3.0, 2.0, 2.0, 5.0, -1.0],
        vec![6, 1],
        &rules,
        None,
    );
    let r = map.input.data();
    assert_eq!(r[0], 0.0);
    assert_eq!(r[3], 0.0);
    assert_eq!(r[5], 0.0);
    assert!(r[1] > 0.0 && r[2] > 0.0 && r[4] > 0.0);
    let (relu, pool) = (g.node_index("relu").unwrap(), g.node_index("pool").unwrap());
    assert_eq!(map.layers[relu].data(), r);
    let routed: f64 = map.layers[pool].data().iter().sum();
    assert!((routed - r.iter().sum::<f64>()).abs() < 1e-15);
}

fn tiny_loccnn() -> LayerGraph {
    let cfg = LocCnnConfig {
        input_len: 64,
        n_mics: 4,
        channels: vec![4, 6, 6],
        kernel_sizes: vec![5, 3, 3],
        pool_sizes: vec![4, 4, 4],
        dense_width: 8,
        dropout: 0.25,
        output_dim: 3,
    };
    let mut g = build_loccnn(&cfg).unwrap();
    g.initialize(17);
    g
}

fn tiny_samplecnn() -> LayerGraph {
    let cfg = SampleCnnConfig {
        input_len: 81,
        n_mics: 4,
        stem_channels: 4,
        stem_kernel: 3,
        stem_stride: 3,
        block_channels: vec![4, 6, 6],
        kernel: 3,
        pool: 3,
        se_ratio: 2,
        dropout: 0.25,
        output_dim: 3,
    };
    let mut g = build_samplecnn(&cfg).unwrap();
    g.initialize(5);
    g
}

fn random_input(g: &LayerGraph, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.input_shape().to_vec();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize_biases(g: &mut LayerGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = g
        .nodes()
        .iter()
        .filter(|n| n.kind.has_params())
        .map(|n| n.id.clone())
        .collect();
    for id in ids {
        let (_, b) = g.layer_params_mut(&id).unwrap();
        b.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conservation_without_epsilon(seed in 0u64..10_000, sample in any::<bool>()) {
        let mut g = if sample { tiny_samplecnn() } else { tiny_loccnn() };
        randomize_biases(&mut g, seed);
        let x = random_input(&g, seed);
        let (_, trace) = g.forward(&x, Mode::Inference).unwrap();
        let mut rules = RuleAssignment::default_for(&g, 0.25, 0.0);
        for n in g.nodes() {
            if matches!(n.kind, LayerKind::Dense(_)) {
                rules.set(&n.id, Rule::Epsilon { epsilon: 0.0 });
            }
        }
        let map = attribute(&g, &trace, &rules, Selector::Sum).unwrap();
        let seed_total: f64 = map.output_seed.iter().sum();
        prop_assume!(seed_total.abs() > 1e-3);
        let total: f64 = map.input.data().iter().sum();
        prop_assert!((total - seed_total).abs() <= 1e-4 * seed_total.abs(), "{} vs {}", total, seed_total);
        prop_assert!(map.input.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn epsilon_absorption_is_bounded(seed in 0u64..10_000) {
        let mut g = tiny_loccnn();
        randomize_biases(&mut g, seed);
        let x = random_input(&g, seed);
        let (_, trace) = g.forward(&x, Mode::Inference).unwrap();
        let rules = RuleAssignment::default_for(&g, 0.25, 0.05);
        let map = attribute(&g, &trace, &rules, Selector::Sum).unwrap();
        let seed_total: f64 = map.output_seed.iter().map(|v| v.abs()).sum();
        let total: f64 = map.input.data().iter().sum();
        prop_assert!(total.abs() <= seed_total * (1.0 + 1e-4));
    }
}

#[test]
fn gamma_zero_equals_epsilon_zero() {
    let g = tiny_loccnn();
    let x = random_input(&g, 9);
    let (_, trace) = g.forward(&x, Mode::Inference).unwrap();
    let mut a = RuleAssignment::default_for(&g, 0.25, 0.0);
    let mut b = a.clone();
    for n in g.nodes() {
        if matches!(n.kind, LayerKind::Conv1d(_) | LayerKind::Dense(_)) {
            a.set(&n.id, Rule::Gamma { gamma: 0.0 });
            b.set(&n.id, Rule::Epsilon { epsilon: 0.0 });
        }
    }
    let ma = attribute(&g, &trace, &a, Selector::Sum).unwrap();
    let mb = attribute(&g, &trace, &b, Selector::Sum).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn attribution_is_deterministic_and_selectors_partition() {
    let g = tiny_samplecnn();
    let x = random_input(&g, 4);
    let (out, trace) = g.forward(&x, Mode::Inference).unwrap();
    let rules = RuleAssignment::default_for(&g, 0.25, 0.0);
    let a = attribute(&g, &trace, &rules, Selector::Sum).unwrap();
    let b = attribute(&g, &trace, &rules, Selector::Sum).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.input.shape(), &[81, 4]);
    assert_eq!(a.output_seed, out.data());
    let parts: Vec<RelevanceMap> = [Selector::X, Selector::Y, Selector::Z]
        .iter()
        .map(|s| attribute(&g, &trace, &rules, *s).unwrap())
        .collect();
    assert_eq!(parts[1].output_seed, vec![0.0, out.data()[1], 0.0]);
    for i in 0..a.input.len() {
        let sum: f64 = parts.iter().map(|p| p.input.data()[i]).sum();
        assert!((sum - a.input.data()[i]).abs() <= 1e-9 * (1.0 + a.input.data()[i].abs()));
    }
}

#[test]
fn zero_window_gives_zero_relevance() {
    for g in [tiny_loccnn(), tiny_samplecnn()] {
        let shape = g.input_shape().to_vec();
        let x = Tensor::zeros(shape);
        let (_, trace) = g.forward(&x, Mode::Inference).unwrap();
        let map = attribute(
            &g,
            &trace,
            &RuleAssignment::default_for(&g, 0.25, 1e-6),
            Selector::Sum,
        )
        .unwrap();
        assert!(map.input.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn rule_errors() {
    let g = tiny_loccnn();
    let x = random_input(&g, 1);
    let (_, trace) = g.forward(&x, Mode::Inference).unwrap();
    let mut rules = RuleAssignment::default_for(&g, 0.25, 0.0);
    rules.rules.remove("fc1");
    assert!(matches!(
        attribute(&g, &trace, &rules, Selector::Sum),
        Err(LrpError::Unassigned(_))
    ));
    let mut rules = RuleAssignment::default_for(&g, 0.25, 0.0);
    rules.set("relu1", Rule::WSquare);
    assert!(matches!(
        attribute(&g, &trace, &rules, Selector::Sum),
        Err(LrpError::Incompatible { .. })
    ));
    let mut rules = RuleAssignment::default_for(&g, 0.25, 0.0);
    rules.set("conv2", Rule::Gamma { gamma: -1.0 });
    assert!(matches!(
        attribute(&g, &trace, &rules, Selector::Sum),
        Err(LrpError::InvalidRule(_))
    ));

    let rules = RuleAssignment::default_for(&g, 0.25, 0.0);
    let (_, train_trace) = g.forward(&x, Mode::Training { dropout_seed: 1 }).unwrap();
    assert!(matches!(
        attribute(&g, &train_trace, &rules, Selector::Sum),
        Err(LrpError::BadTrace)
    ));
    let mut g2 = g.clone();
    g2.initialize(99);
    assert!(matches!(
        attribute(&g2, &trace, &rules, Selector::Sum),
        Err(LrpError::BadTrace)
    ));
}

#[test]
fn default_rules_follow_layer_position() {
    let g = tiny_samplecnn();
    let rules = RuleAssignment::default_for(&g, 0.25, 1e-6);
    assert_eq!(rules.rules["stem"], Rule::WSquare);
    assert_eq!(rules.rules["block1_conv"], Rule::Gamma { gamma: 0.25 });
    assert_eq!(rules.rules["out"], Rule::Epsilon { epsilon: 1e-6 });
    assert_eq!(rules.rules["block1_gate"], Rule::SignalTakesAll);
    assert_eq!(rules.rules["block1_add"], Rule::ResidualSplit);
    assert_eq!(rules.rules["block1_se_sigmoid"], Rule::PassThrough);
    assert_eq!(rules.rules.len(), g.nodes().len());
    rules.check(&g).unwrap();
}

#[test]
fn relevance_signal_concatenates_in_order() {
    let w0 = Tensor::new(vec![3, 2], vec![0.0, 10.0, 1.0, 11.0, 2.0, 12.0]).unwrap();
    let w1 = Tensor::new(vec![3, 2], vec![3.0, 13.0, 4.0, 14.0, 5.0, 15.0]).unwrap();
    let sig = relevance_signal(&[(1, &w1), (0, &w0)]).unwrap();
    assert_eq!(sig[0], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    assert_eq!(sig[1], vec![10.0, 11.0, 12.0, 13.0, 14.0, 15.0]);
    assert!(matches!(
        relevance_signal(&[(0, &w0), (2, &w1)]),
        Err(LrpError::Windows(_))
    ));
    let odd = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
    assert!(matches!(
        relevance_signal(&[(0, &w0), (1, &odd)]),
        Err(LrpError::Windows(_))
    ));

    let long: Vec<Tensor> = (0..2)
        .map(|i| Tensor::new(vec![5120, 16], vec![i as f64; 5120 * 16]).unwrap())
        .collect();
    let sig = relevance_signal(&[(0, &long[0]), (1, &long[1])]).unwrap();
    assert_eq!(sig.len(), 16);
    assert!(sig
        .iter()
        .all(|c| c.len() == 10240 && c[5119] == 0.0 && c[5120] == 1.0));
}

#[test]
fn relevance_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::new(
        vec![4, 2],
        vec![0.5, -1.0, 2.0, 0.0, 1e-300, -3.5, 7.0, 8.0],
    )
    .unwrap();
    let p = dir.path().join("r.bin");
    write_relevance(&p, &t).unwrap();
    assert_eq!(read_relevance(&p).unwrap(), t);
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[20] ^= 1;
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(read_relevance(&p), Err(LrpError::Corrupt(_))));

    let wav = dir.path().join("r.wav");
    write_relevance_wav(&wav, &[vec![0.5, -2.0, 1.0], vec![0.0, 0.25, 0.0]], 16000).unwrap();
    let mut r = hound::WavReader::open(&wav).unwrap();
    assert_eq!(r.spec().channels, 2);
    let s: Vec<f32> = r.samples::<f32>().map(|v| v.unwrap()).collect();
    assert_eq!(s, vec![0.25, 0.0, -1.0, 0.125, 0.5, 0.0]);
}

#[test]
fn empty_graph_hands_seed_to_input() {
    let g = GraphBuilder::new(vec![3, 2]).finish("empty").unwrap();
    let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let (_, trace) = g.forward(&x, Mode::Inference).unwrap();
    let map = attribute(
        &g,
        &trace,
        &RuleAssignment::default_for(&g, 0.25, 0.0),
        Selector::Sum,
    )
    .unwrap();
    assert_eq!(map.input, x);
}
