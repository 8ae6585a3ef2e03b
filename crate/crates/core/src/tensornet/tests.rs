use super::*;
use proptest::prelude::{any, prop_assert, proptest};

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn set(net: &mut QNet, layer: usize, w: &[f64], b: &[f64]) {
    let p = net.params_mut()[layer].as_mut().unwrap();
    p.weight.data.copy_from_slice(w);
    p.bias.data.copy_from_slice(b);
}

#[test]
fn zero_weights_give_zero_q() {
    let mut net = QNet::from_profile(Profile::Tiny, (5, 40, 40), 4, Head::Plain, 3).unwrap();
    for p in net.params_mut().iter_mut().flatten() {
        p.weight.data.fill(0.0);
    }
    let q = net.predict(&random_input(&[2, 5, 40, 40], 1)).unwrap();
    assert_eq!(q.shape, vec![2, 4]);
    assert!(q.data.iter().all(|&v| v == 0.0));
}

#[test]
fn one_by_one_identity_conv() {
    let layers = vec![LayerSpec::Conv { filters: 1, kernel: 1 }, LayerSpec::Dense { units: 9 }];
    let mut net = QNet::new((1, 3, 3), layers, 0).unwrap();
    set(&mut net, 0, &[1.0], &[0.0]);
    let mut eye = vec![0.0; 81];
    for i in 0..9 {
        eye[i * 9 + i] = 1.0;
    }
    set(&mut net, 1, &eye, &[0.0; 9]);
    let x = random_input(&[1, 1, 3, 3], 9);
    assert_eq!(net.predict(&x).unwrap().data, x.data);
}

#[test]
fn hand_computed_toy_net() {
    let layers = vec![
        LayerSpec::Conv { filters: 1, kernel: 2 },
        LayerSpec::Relu,
        LayerSpec::MaxPool,
        LayerSpec::Dense { units: 2 },
    ];
    let mut net = QNet::new((1, 4, 4), layers, 0).unwrap();
    set(&mut net, 0, &[1.0, 1.0, 0.0, 0.0], &[0.0]);
    set(&mut net, 3, &[2.0, -3.0], &[-0.5, 1.0]);
    // x[r][c] = 4r + c - 5; conv gives 8r + 2c - 9 over 3×3, relu then the
    // top-left 2×2 pool window keeps max(0, 0, 0, 1) = 1
    let x = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|i| i as f64 - 5.0).collect()).unwrap();
    assert_eq!(net.predict(&x).unwrap().data, vec![1.5, -2.0]);
    assert_eq!(
        net.shapes(),
        &[
            Shape::Spatial { c: 1, h: 3, w: 3 },
            Shape::Spatial { c: 1, h: 3, w: 3 },
            Shape::Spatial { c: 1, h: 1, w: 1 },
            Shape::Flat(2)
        ]
    );
}

#[test]
fn unbatched_input_is_accepted() {
    let net = QNet::from_profile(Profile::Tiny, (3, 36, 36), 2, Head::Dueling, 1).unwrap();
    let x = random_input(&[3, 36, 36], 2);
    let mut batched = x.clone();
    batched.shape.insert(0, 1);
    assert_eq!(net.predict(&x).unwrap(), net.predict(&batched).unwrap());
}

#[test]
fn shape_mismatch_is_a_dimension_error() {
    let net = QNet::from_profile(Profile::Tiny, (3, 36, 36), 2, Head::Plain, 1).unwrap();
    let err = net.predict(&random_input(&[1, 4, 36, 36], 0)).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
}

#[test]
fn bad_architectures_are_rejected() {
    assert!(QNet::new((1, 4, 4), vec![LayerSpec::Conv { filters: 2, kernel: 5 }, LayerSpec::Dense { units: 1 }], 0).is_err());
    assert!(QNet::new((1, 4, 4), vec![LayerSpec::Relu], 0).is_err());
    assert!(QNet::new(
        (1, 4, 4),
        vec![LayerSpec::Dense { units: 3 }, LayerSpec::Conv { filters: 1, kernel: 1 }, LayerSpec::Dense { units: 1 }],
        0
    )
    .is_err());
}

#[test]
fn zero_output_grad_gives_zero_bundle() {
    let net = QNet::from_profile(Profile::Tiny, (4, 40, 40), 3, Head::Dueling, 5).unwrap();
    let (q, cache) = net.forward(&random_input(&[2, 4, 40, 40], 6)).unwrap();
    let g = net.backward(&cache, &Tensor::zeros(&q.shape)).unwrap();
    assert!(g.is_zero());
    assert_eq!(g.input.unwrap().shape, vec![2, 4, 40, 40]);
}

#[test]
fn dense_closed_form() {
    let mut net = QNet::new((1, 1, 3), vec![LayerSpec::Dense { units: 2 }], 0).unwrap();
    let w = [1.0, -2.0, 0.5, 3.0, 0.0, -1.0];
    set(&mut net, 0, &w, &[0.1, 0.2]);
    let x = Tensor::from_vec(&[1, 1, 1, 3], vec![2.0, -1.0, 4.0]).unwrap();
    let (q, cache) = net.forward(&x).unwrap();
    assert_eq!(q.data, vec![2.0 + 2.0 + 2.0 + 0.1, 6.0 - 4.0 + 0.2]);
    let g = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
    let b = net.backward(&cache, &g).unwrap();
    let (dw, db) = b.params[0].as_ref().unwrap();
    assert_eq!(dw.data, vec![2.0, -1.0, 4.0, 4.0, -2.0, 8.0]);
    assert_eq!(db.data, vec![1.0, 2.0]);
    assert_eq!(b.input.unwrap().data, vec![1.0 + 6.0, -2.0, 0.5 - 2.0]);
}

#[test]
fn maxpool_ties_go_to_first_element() {
    let layers = vec![LayerSpec::MaxPool, LayerSpec::Dense { units: 1 }];
    let mut net = QNet::new((1, 2, 2), layers, 0).unwrap();
    set(&mut net, 1, &[1.0], &[0.0]);
    let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
    let (_, cache) = net.forward(&x).unwrap();
    let g = net.backward(&cache, &Tensor::from_vec(&[1, 1], vec![1.0]).unwrap()).unwrap();
    assert_eq!(g.input.unwrap().data, vec![1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn relu_gradient_at_zero_is_zero() {
    let layers = vec![LayerSpec::Relu, LayerSpec::Dense { units: 1 }];
    let mut net = QNet::new((1, 1, 3), layers, 0).unwrap();
    set(&mut net, 1, &[1.0, 1.0, 1.0], &[0.0]);
    let x = Tensor::from_vec(&[1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
    let (_, cache) = net.forward(&x).unwrap();
    let g = net.backward(&cache, &Tensor::from_vec(&[1, 1], vec![1.0]).unwrap()).unwrap();
    assert_eq!(g.input.unwrap().data, vec![0.0, 0.0, 1.0]);
}

#[test]
fn stale_or_foreign_cache_is_a_usage_error() {
    let mut net = QNet::from_profile(Profile::Tiny, (3, 36, 36), 2, Head::Plain, 1).unwrap();
    let (q, cache) = net.forward(&random_input(&[1, 3, 36, 36], 0)).unwrap();
    let other = net.clone();
    assert!(matches!(other.backward(&cache, &q), Err(Error::Usage(_))));
    let g = net.backward(&cache, &q).unwrap();
    net.apply_gradients(&g).unwrap();
    assert!(matches!(net.backward(&cache, &q), Err(Error::Usage(_))));
}

#[test]
fn backward_params_matches_backward() {
    let net = QNet::from_profile(Profile::Tiny, (5, 40, 40), 4, Head::Dueling, 8).unwrap();
    let (q, cache) = net.forward(&random_input(&[3, 5, 40, 40], 4)).unwrap();
    let g = random_input(&q.shape, 5);
    let full = net.backward(&cache, &g).unwrap();
    let params = net.backward_params(&cache, &g).unwrap();
    assert_eq!(full.params, params.params);
    assert!(params.input.is_none());
}

#[test]
fn small_net_matches_finite_differences() {
    let layers = vec![
        LayerSpec::Conv { filters: 3, kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool,
        LayerSpec::Conv { filters: 4, kernel: 2 },
        LayerSpec::Relu,
        LayerSpec::Dense { units: 6 },
        LayerSpec::Relu,
        LayerSpec::DuelingHead { actions: 3 },
    ];
    let net = QNet::new((2, 9, 9), layers, 11).unwrap();
    let r = grad_check(&net, &random_input(&[2, 2, 9, 9], 12), 1e-5).unwrap();
    assert!(r.passed(1e-4), "{r:?}");
    assert!(r.checked > r.skipped);
}

#[test]
fn linear_net_is_exact() {
    let layers = vec![LayerSpec::Dense { units: 4 }, LayerSpec::Dense { units: 3 }];
    let net = QNet::new((2, 2, 3), layers, 2).unwrap();
    let r = grad_check(&net, &random_input(&[1, 2, 2, 3], 3), 1e-5).unwrap();
    assert!(r.max_relative_error < 1e-9, "{r:?}");
    assert_eq!(r.skipped, 0);
}

#[test]
fn transposed_dense_backward_is_caught() {
    let layers = vec![LayerSpec::Dense { units: 4 }, LayerSpec::Dense { units: 3 }];
    let mut net = QNet::new((2, 2, 3), layers, 2).unwrap();
    net.inject_fault(Some(Fault::TransposedDenseBackward));
    let r = grad_check(&net, &random_input(&[1, 2, 2, 3], 3), 1e-5).unwrap();
    assert!(r.max_relative_error > 1e-2, "{r:?}");
}

#[test]
fn forward_and_backward_are_deterministic() {
    let net = QNet::from_profile(Profile::Tiny, (4, 40, 40), 5, Head::Dueling, 9).unwrap();
    let x = random_input(&[2, 4, 40, 40], 10);
    let run = || {
        let (q, c) = net.forward(&x).unwrap();
        let g = net.backward(&c, &q).unwrap();
        (q, g)
    };
    assert_eq!(run(), run());
    let twin = QNet::from_profile(Profile::Tiny, (4, 40, 40), 5, Head::Dueling, 9).unwrap();
    assert_eq!(twin, net);
}

#[test]
fn dueling_examples() {
    assert_eq!(dueling_combine(0.0, &[1.0, 1.0, 1.0]), vec![0.0, 0.0, 0.0]);
    assert_eq!(dueling_combine(5.0, &[2.0, -2.0, 0.0]), vec![7.0, 3.0, 5.0]);
    let a = Tensor::from_vec(&[2, 2], vec![1.0, 3.0, 0.0, 0.0]).unwrap();
    assert_eq!(dueling_combine_batch(&[1.0, -1.0], &a).unwrap().data, vec![0.0, 2.0, -1.0, -1.0]);
}

#[test]
fn dueling_preserves_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let v = rng.gen_range(-10.0..10.0);
        let a: Vec<f64> = (0..9).map(|_| rng.gen_range(-10.0..10.0)).collect();
        assert_eq!(argmax(&dueling_combine(v, &a)), argmax(&a));
    }
}

#[test]
fn apply_gradients_rejects_non_finite_without_mutating() {
    let mut net = QNet::from_profile(Profile::Tiny, (3, 36, 36), 2, Head::Plain, 1).unwrap();
    let before = net.clone();
    let (q, cache) = net.forward(&random_input(&[1, 3, 36, 36], 0)).unwrap();
    let mut g = net.backward_params(&cache, &q).unwrap();
    let last = g.params.len() - 1;
    g.params[last].as_mut().unwrap().1.data[0] = f64::NAN;
    assert!(matches!(net.apply_gradients(&g), Err(Error::Training(_))));
    assert_eq!(net, before);
}

#[test]
fn training_reduces_a_regression_loss() {
    let layers = vec![LayerSpec::Dense { units: 8 }, LayerSpec::Relu, LayerSpec::Dense { units: 2 }];
    let mut net = QNet::new((1, 2, 2), layers, 4).unwrap();
    net.optimizer.lr = 1e-2;
    let x = random_input(&[8, 1, 2, 2], 1);
    let target = random_input(&[8, 2], 2);
    let loss = |net: &QNet| {
        let q = net.predict(&x).unwrap();
        q.data.iter().zip(&target.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    };
    let start = loss(&net);
    for _ in 0..300 {
        let (q, c) = net.forward(&x).unwrap();
        let g: Vec<f64> = q.data.iter().zip(&target.data).map(|(a, b)| 2.0 * (a - b)).collect();
        let g = net.backward_params(&c, &Tensor::from_vec(&q.shape, g).unwrap()).unwrap();
        net.apply_gradients(&g).unwrap();
    }
    assert!(loss(&net) < 0.25 * start);
    assert_eq!(net.step, 300);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    let mut net = QNet::from_profile(Profile::Tiny, (4, 40, 40), 5, Head::Dueling, 9).unwrap();
    let (q, c) = net.forward(&random_input(&[1, 4, 40, 40], 1)).unwrap();
    let g = net.backward_params(&c, &q).unwrap();
    net.apply_gradients(&g).unwrap();
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, net);
    assert!(back.accumulators().iter().flatten().any(|p| p.weight.data.iter().any(|&v| v > 0.0)));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    assert_eq!(checkpoint::encode(&back), bytes);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let net = QNet::new((1, 2, 2), vec![LayerSpec::Dense { units: 2 }], 0).unwrap();
    let bytes = checkpoint::encode(&net);
    assert!(checkpoint::decode(&bytes).is_ok());
    assert!(matches!(checkpoint::decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(checkpoint::decode(&long), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(checkpoint::decode(&bad), Err(Error::Format(_))));
}

#[test]
fn layer_lines_round_trip() {
    for l in Profile::Paper.layers(9, Head::Dueling) {
        assert_eq!(LayerSpec::parse(&l.to_string()).unwrap(), l);
    }
    assert!(LayerSpec::parse("conv 3").is_err());
}

proptest! {
    #[test]
    fn dueling_ignores_advantage_offset(
        v in -100.0f64..100.0,
        a in proptest::collection::vec(-100.0f64..100.0, 1..10),
        c in -100.0f64..100.0,
    ) {
        let shifted: Vec<f64> = a.iter().map(|x| x + c).collect();
        let q1 = dueling_combine(v, &a);
        let q2 = dueling_combine(v, &shifted);
        for (x, y) in q1.iter().zip(&q2) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn random_small_nets_match_finite_differences(seed in 0u64..1000, dueling in any::<bool>()) {
        let head = if dueling { LayerSpec::DuelingHead { actions: 3 } } else { LayerSpec::Dense { units: 3 } };
        let layers = vec![
            LayerSpec::Conv { filters: 2, kernel: 2 },
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            LayerSpec::Dense { units: 4 },
            LayerSpec::Relu,
            head,
        ];
        let net = QNet::new((2, 6, 6), layers, seed).unwrap();
        let r = grad_check(&net, &random_input(&[1, 2, 6, 6], seed + 1), 1e-5).unwrap();
        prop_assert!(r.max_relative_error < 1e-4, "{:?}", r);
    }
}
