use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srcloc_core::nn::*;

fn dense(in_dim: usize, out_dim: usize) -> LayerKind {
    LayerKind::Dense(Dense::new(in_dim, out_dim))
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> LayerKind {
    LayerKind::Conv1d(Conv1d::new(cin, cout, k, stride, pad))
}

/// One small graph per structural feature; together they cover every layer kind.
fn gradient_graphs() -> Vec<LayerGraph> {
    let mut out = Vec::new();

    // Strided and same-padded convolutions, max pooling, ReLU, dense head.
    let mut b = GraphBuilder::new(vec![20, 2]);
    b.chain("c1", conv(2, 3, 3, 1, 1));
    b.chain("r1", LayerKind::Relu);
    b.chain("c2", conv(3, 3, 4, 2, 1));
    b.chain("p", LayerKind::MaxPool1d { size: 3 });
    b.chain("fc", dense(9, 2));
    out.push(b.finish("a").unwrap());

    // Residual add, gating with a per-channel sigmoid gate, average pooling, dropout.
    let mut b = GraphBuilder::new(vec![12, 2]);
    let h = b.chain("stem", conv(2, 4, 3, 3, 0));
    let r = {
        b.chain("main", conv(4, 4, 3, 1, 1));
        b.chain("main_relu", LayerKind::Relu)
    };
    let add = b.add(
        "add",
        LayerKind::ResidualAdd,
        vec![
            Edge::tagged(r, BranchTag::Main),
            Edge::tagged(h, BranchTag::Skip),
        ],
    );
    b.add("gap", LayerKind::GlobalAvgPool1d, vec![Edge::plain(add)]);
    b.chain("se", dense(4, 4));
    let gate = b.chain("sig", LayerKind::Sigmoid);
    b.add(
        "mul",
        LayerKind::Multiply,
        vec![
            Edge::tagged(gate, BranchTag::Gate),
            Edge::tagged(add, BranchTag::Signal),
        ],
    );
    b.chain("drop", LayerKind::Dropout { rate: 0.3 });
    b.chain("fc", dense(16, 3));
    out.push(b.finish("b").unwrap());

    // Element-wise gate with identical shapes.
    let mut b = GraphBuilder::new(vec![6]);
    let x = b.chain("d1", dense(6, 5));
    let g = {
        b.add("d2", dense(6, 5), vec![Edge::plain(Source::Input)]);
        b.chain("s", LayerKind::Sigmoid)
    };
    b.add(
        "m",
        LayerKind::Multiply,
        vec![
            Edge::tagged(x, BranchTag::Signal),
            Edge::tagged(g, BranchTag::Gate),
        ],
    );
    b.chain("o", dense(5, 2));
    out.push(b.finish("c").unwrap());
    out
}

fn randomize(g: &mut LayerGraph, rng: &mut ChaCha8Rng) {
    for p in g.params_mut() {
        p.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
}

fn loss(g: &LayerGraph, x: &Tensor, c: &[f64], mode: Mode) -> f64 {
    let (y, _) = g.forward(x, mode).unwrap();
    y.data().iter().zip(c).map(|(a, b)| a * b).sum()
}

/// Central differences; `None` where one-sided slopes disagree (a kink).
fn numeric(f: &dyn Fn(f64) -> f64, v: f64) -> Option<f64> {
    let h = 1e-4;
    let (fp, f0, fm) = (f(v + h), f(v), f(v - h));
    let (dp, dm) = ((fp - f0) / h, (f0 - fm) / h);
    if (dp - dm).abs() > 1e-3 * dp.abs().max(dm.abs()) + 1e-6 {
        return None;
    }
    Some((fp - fm) / (2.0 * h))
}

fn close(a: f64, n: f64) -> bool {
    (a - n).abs() <= 1e-4 * a.abs().max(n.abs()) + 1e-8
}

#[test]
fn gradients_match_finite_differences() {
    let (mut checked, mut kinks) = (0usize, 0usize);
    for draw in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        for mut g in gradient_graphs() {
            randomize(&mut g, &mut rng);
            let shape = g.input_shape().to_vec();
            let n: usize = shape.iter().product();
            let x = Tensor::new(
                shape.clone(),
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let c: Vec<f64> = (0..g.output_dim())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let mode = Mode::Training { dropout_seed: draw };
            let (_, trace) = g.forward(&x, mode).unwrap();
            let grads = g.backward(&trace, &Tensor::from_vec(c.clone())).unwrap();

            let n_params = g.params().len();
            for p in 0..n_params {
                for i in 0..g.params()[p].len() {
                    let base = g.params()[p][i];
                    let f = |v: f64| {
                        let mut h = g.clone();
                        h.params_mut()[p][i] = v;
                        loss(&h, &x, &c, mode)
                    };
                    match numeric(&f, base) {
                        Some(num) => {
                            let ana = grads.params[p][i];
                            assert!(
                                close(ana, num),
                                "{} param {p}[{i}]: {ana} vs {num}",
                                g.arch_tag()
                            );
                            checked += 1;
                        }
                        None => kinks += 1,
                    }
                }
            }
            for i in 0..n {
                let f = |v: f64| {
                    let mut d = x.data().to_vec();
                    d[i] = v;
                    loss(&g, &Tensor::new(shape.clone(), d).unwrap(), &c, mode)
                };
                if let Some(num) = numeric(&f, x.data()[i]) {
                    let ana = grads.input.data()[i];
                    assert!(
                        close(ana, num),
                        "{} input {i}: {ana} vs {num}",
                        g.arch_tag()
                    );
                    checked += 1;
                } else {
                    kinks += 1;
                }
            }
        }
    }
    assert!(kinks * 100 < checked, "{kinks} kinks out of {checked}");
}

#[test]
fn trivial_forward_and_backward_cases() {
    let g = GraphBuilder::new(vec![4, 2]).finish("id").unwrap();
    let x = Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap();
    assert_eq!(g.forward(&x, Mode::Inference).unwrap().0, x);

    let mut b = GraphBuilder::new(vec![3]);
    b.chain(
        "fc",
        LayerKind::Dense(Dense {
            weight: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            ..Dense::new(3, 3)
        }),
    );
    let g = b.finish("eye").unwrap();
    assert_eq!(
        g.predict(&Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap(),
        vec![1.0, 2.0, 3.0]
    );

    let mut b = GraphBuilder::new(vec![1]);
    b.chain(
        "fc",
        LayerKind::Dense(Dense {
            weight: vec![3.0],
            ..Dense::new(1, 1)
        }),
    );
    let g = b.finish("lin").unwrap();
    let (_, t) = g
        .forward(
            &Tensor::from_vec(vec![2.0]),
            Mode::Training { dropout_seed: 0 },
        )
        .unwrap();
    let gr = g.backward(&t, &Tensor::from_vec(vec![1.0])).unwrap();
    assert_eq!(gr.params[0], vec![2.0]);
    assert_eq!(gr.params[1], vec![1.0]);

    let mut b = GraphBuilder::new(vec![2]);
    b.chain("r", LayerKind::Relu);
    b.chain(
        "fc",
        LayerKind::Dense(Dense {
            weight: vec![1.0, 1.0],
            ..Dense::new(2, 1)
        }),
    );
    let g = b.finish("relu").unwrap();
    let (_, t) = g
        .forward(&Tensor::from_vec(vec![-1.0, 2.0]), Mode::Inference)
        .unwrap();
    let gr = g.backward(&t, &Tensor::from_vec(vec![1.0])).unwrap();
    assert_eq!(gr.input.data(), &[0.0, 1.0]);
}

#[test]
fn maxpool_routes_to_one_sample_per_window() {
    let mut b = GraphBuilder::new(vec![7, 1]);
    b.chain("p", LayerKind::MaxPool1d { size: 3 });
    b.chain(
        "fc",
        LayerKind::Dense(Dense {
            weight: vec![1.0, 1.0],
            ..Dense::new(2, 1)
        }),
    );
    let g = b.finish("pool").unwrap();
    // Second window is a three-way tie; the trailing sample is dropped.
    let x = Tensor::new(vec![7, 1], vec![0.1, 0.9, 0.3, 0.5, 0.5, 0.5, 9.0]).unwrap();
    let (y, t) = g.forward(&x, Mode::Inference).unwrap();
    assert_eq!(y.data(), &[1.4]);
    let gr = g.backward(&t, &Tensor::from_vec(vec![1.0])).unwrap();
    assert_eq!(gr.input.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn inference_is_bit_identical_and_dropout_is_identity() {
    for mut g in gradient_graphs() {
        g.initialize(4);
        let shape = g.input_shape().to_vec();
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape, (0..n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = g.predict(&x).unwrap();
        let b = g.clone().predict(&x).unwrap();
        assert_eq!(a, b);
        let (_, t) = g.forward(&x, Mode::Inference).unwrap();
        if let Some(d) = g.node_index("drop") {
            assert_eq!(t.output(d), t.output(d - 1));
        }
    }
}

#[test]
fn stale_trace_shape_errors_and_non_finite_layer() {
    let mut g = gradient_graphs().remove(0);
    g.initialize(1);
    let x = Tensor::zeros(vec![20, 2]);
    let (_, t) = g.forward(&x, Mode::Training { dropout_seed: 0 }).unwrap();
    g.params_mut()[0][0] += 1.0;
    assert!(matches!(
        g.backward(&t, &Tensor::from_vec(vec![1.0, 1.0])),
        Err(NnError::StaleTrace)
    ));
    assert!(matches!(
        g.forward(&Tensor::zeros(vec![2, 20]), Mode::Inference),
        Err(NnError::Shape(_))
    ));
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());

    let mut b = GraphBuilder::new(vec![1]);
    b.chain(
        "big",
        LayerKind::Dense(Dense {
            weight: vec![1e308],
            ..Dense::new(1, 1)
        }),
    );
    let g = b.finish("inf").unwrap();
    match g.forward(&Tensor::from_vec(vec![1e10]), Mode::Inference) {
        Err(NnError::NonFinite { layer, .. }) => assert_eq!(layer, "big"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn graph_validation_rejects_bad_tags_and_dangling_nodes() {
    let mut b = GraphBuilder::new(vec![4]);
    let a = b.chain("a", dense(4, 4));
    b.add(
        "m",
        LayerKind::Multiply,
        vec![Edge::plain(a), Edge::plain(Source::Input)],
    );
    assert!(matches!(b.finish("x"), Err(NnError::Graph(_))));

    let mut b = GraphBuilder::new(vec![4]);
    b.chain("a", dense(4, 4));
    b.add("b", dense(4, 2), vec![Edge::plain(Source::Input)]);
    assert!(b.finish("x").is_err());

    let mut b = GraphBuilder::new(vec![8, 2]);
    b.chain("c", conv(2, 2, 3, 1, 0));
    assert!(b.finish("rank2 output").is_err());
}

fn tiny_net(seed: u64) -> LayerGraph {
    let mut b = GraphBuilder::new(vec![8, 2]);
    b.chain_init("c", conv(2, 4, 3, 1, 1), Init::HeUniform);
    b.chain("r", LayerKind::Relu);
    b.chain("p", LayerKind::MaxPool1d { size: 2 });
    b.chain_init("fc", dense(16, 3), Init::GlorotUniform);
    let mut g = b.finish("tiny").unwrap();
    g.initialize(seed);
    g
}

fn toy_set(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target = vec![data[0] + data[3], data[5] - data[8], 0.5 * data[11]];
            Example {
                input: Tensor::new(vec![8, 2], data).unwrap(),
                target,
            }
        })
        .collect()
}

#[test]
fn overfits_a_single_example() {
    let mut g = tiny_net(3);
    let one = toy_set(1, 5);
    let cfg = TrainConfig {
        batch_size: 1,
        max_epochs: 400,
        learning_rate: 1e-2,
        output_bias_from_targets: false,
        ..TrainConfig::default()
    };
    let hist = train(&mut g, &one, &one, cfg).unwrap();
    assert!(
        evaluate_mse(&g, &one).unwrap() < 1e-3,
        "{:?}",
        hist.records.last()
    );
}

#[test]
fn zero_targets_with_zero_output_layer_start_at_zero_loss() {
    let mut b = GraphBuilder::new(vec![8, 2]);
    b.chain("c", conv(2, 4, 3, 1, 1));
    b.chain("r", LayerKind::Relu);
    b.chain_init("fc", dense(32, 3), Init::Zeros);
    let mut g = b.finish("z").unwrap();
    g.initialize(2);
    let mut set = toy_set(4, 1);
    set.iter_mut().for_each(|e| e.target = vec![0.0; 3]);
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let hist = train(&mut g, &set, &set, cfg).unwrap();
    assert_eq!(hist.records[0].train_mse, 0.0);
}

#[test]
fn plateau_schedule_halves_exactly_at_patience() {
    let mut s = PlateauSchedule::new(100, 200);
    assert_eq!(s.observe(1.0), PlateauEvent::Improved);
    let mut halvings = Vec::new();
    for epoch in 2..=250 {
        match s.observe(1.0) {
            PlateauEvent::Halved => halvings.push(epoch),
            PlateauEvent::Stop => {
                assert_eq!(epoch, 201);
                break;
            }
            _ => {}
        }
    }
    assert_eq!(halvings, vec![101]);
    let mut s = PlateauSchedule::new(3, 100);
    s.observe(1.0);
    let events: Vec<PlateauEvent> = [2.0, 2.0, 2.0, 0.5, 2.0]
        .iter()
        .map(|v| s.observe(*v))
        .collect();
    assert_eq!(
        events,
        vec![
            PlateauEvent::Stalled,
            PlateauEvent::Stalled,
            PlateauEvent::Halved,
            PlateauEvent::Improved,
            PlateauEvent::Stalled
        ]
    );
}

#[test]
fn learning_rate_in_history_follows_halvings() {
    let mut g = tiny_net(8);
    let (tr, va) = (toy_set(30, 2), toy_set(10, 3));
    let cfg = TrainConfig {
        batch_size: 10,
        max_epochs: 60,
        learning_rate: 0.05,
        lr_patience: 2,
        stop_patience: 1000,
        ..TrainConfig::default()
    };
    let hist = train(&mut g, &tr, &va, cfg).unwrap();
    let mut lr = 0.05;
    for r in &hist.records {
        assert_eq!(r.lr, lr);
        if hist.halvings.contains(&r.epoch) {
            lr *= 0.5;
        }
    }
    assert!(hist.records.windows(2).all(|w| w[1].lr <= w[0].lr));
    let best = hist.best_epoch.unwrap();
    let best_val = hist.records[best - 1].val_mse;
    assert!(hist.records.iter().all(|r| r.val_mse >= best_val));
    assert_eq!(evaluate_mse(&g, &va).unwrap(), best_val);
}

#[test]
fn seeded_training_is_reproducible_and_resumable() {
    let (tr, va) = (toy_set(40, 11), toy_set(10, 12));
    let cfg = TrainConfig {
        batch_size: 8,
        max_epochs: 6,
        learning_rate: 5e-3,
        seed: 77,
        ..TrainConfig::default()
    };
    let run = || {
        let mut g = tiny_net(1);
        let h = train(&mut g, &tr, &va, cfg.clone()).unwrap();
        (g, h)
    };
    let (g1, h1) = run();
    let (g2, h2) = run();
    assert_eq!(h1, h2);
    assert_eq!(g1.params(), g2.params());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ck");
    let mut g = tiny_net(1);
    let mut t = Trainer::new(cfg.clone(), &g).unwrap();
    t.run(&mut g, &tr, &va, Some(3)).unwrap();
    t.save(&g, &path).unwrap();
    let mut g = tiny_net(999);
    let mut t = Trainer::load(&mut g, &path).unwrap();
    assert_eq!(t.epoch, 3);
    t.run(&mut g, &tr, &va, None).unwrap();
    t.restore_best(&mut g);
    assert_eq!(t.history, h1);
    assert_eq!(g.params(), g1.params());
}

#[test]
fn divergence_is_reported() {
    let mut g = tiny_net(1);
    let mut set = toy_set(4, 1);
    set.iter_mut().for_each(|e| e.target = vec![1e200; 3]);
    let cfg = TrainConfig {
        max_epochs: 2,
        output_bias_from_targets: false,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&mut g, &set, &set, cfg),
        Err(NnError::Diverged { .. })
    ));
    let bad = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&mut tiny_net(1), &set, &set, bad),
        Err(NnError::Config(_))
    ));
    assert!(train(
        &mut tiny_net(1),
        &Vec::<Example>::new(),
        &set,
        TrainConfig::default()
    )
    .is_err());
}

#[test]
fn history_csv_round_trips() {
    let mut g = tiny_net(1);
    let (tr, va) = (toy_set(10, 1), toy_set(5, 2));
    let cfg = TrainConfig {
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let hist = train(&mut g, &tr, &va, cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.csv");
    hist.write_csv(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,train_mse,val_mse,lr");
    assert_eq!(LossHistory::read_csv(&p).unwrap(), hist.records);
    std::fs::write(&p, "epoch,loss\n1,2\n").unwrap();
    assert!(LossHistory::read_csv(&p).is_err());
}

#[test]
fn checkpoints_round_trip_and_reject_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ck");
    let g = tiny_net(5);
    save_weights(&g, &path, serde_json::json!({"note": "x"})).unwrap();
    let mut h = tiny_net(6);
    let meta = load_weights(&mut h, &path).unwrap();
    assert_eq!(meta["user"]["note"], "x");
    assert_eq!(meta["init"]["c"], "he_uniform");
    let x = toy_set(1, 9).remove(0).input;
    assert_eq!(g.predict(&x).unwrap(), h.predict(&x).unwrap());

    let mut other = gradient_graphs().remove(0);
    assert!(matches!(
        load_weights(&mut other, &path),
        Err(NnError::FingerprintMismatch)
    ));

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ck");
    std::fs::write(&cut, &bytes[..bytes.len() - 1]).unwrap();
    let mut k = tiny_net(7);
    let before: Vec<Vec<f64>> = k.params().iter().map(|p| p.to_vec()).collect();
    assert!(matches!(
        load_weights(&mut k, &cut),
        Err(NnError::Truncated)
    ));
    let after: Vec<Vec<f64>> = k.params().iter().map(|p| p.to_vec()).collect();
    assert_eq!(before, after);

    let mut v = bytes.clone();
    v[4..8].copy_from_slice(&2u32.to_le_bytes());
    let vp = dir.path().join("v.ck");
    std::fs::write(&vp, &v).unwrap();
    assert!(matches!(
        load_weights(&mut k, &vp),
        Err(NnError::VersionMismatch { found: 2, .. })
    ));

    let mut c = bytes;
    let mid = c.len() / 2;
    c[mid] ^= 0x40;
    let cp = dir.path().join("c.ck");
    std::fs::write(&cp, &c).unwrap();
    assert!(load_weights(&mut k, &cp).is_err());
}
