use super::*;
use crate::features::{LagSet, Matrix};
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn shape(strategies: usize, lags: usize, ctx_rows: usize, ctx_lags: usize) -> InputShape {
    InputShape {
        strategies,
        asset_lags: lags,
        context_rows: ctx_rows,
        context_lags: ctx_lags,
    }
}

fn random_obs(s: InputShape, rng: &mut ChaCha8Rng) -> Observation {
    let mut m = |r: usize, c: usize, scale: f64| {
        let rows: Vec<Vec<f64>> = (0..r)
            .map(|_| {
                (0..c)
                    .map(|_| scale * normal(&mut *rng))
                    .collect()
            })
            .collect();
        Matrix::from_rows(&rows)
    };
    let returns = m(s.strategies, s.asset_lags, 1.0);
    let vols = m(s.strategies, s.asset_lags, 1.0);
    let context = m(s.context_rows, s.context_lags, 1.0);
    Observation {
        returns,
        vols,
        context,
    }
}

fn small_config(variant: Variant, strategies: usize) -> NetworkConfig {
    NetworkConfig {
        variant,
        subnet1_channels: vec![3, 4],
        subnet2_channels: vec![2],
        strides: vec![2, 1],
        kernel_sizes: vec![3, 3],
        hidden: 6,
        strategies,
        use_context: true,
    }
}

fn objective(policy: &Policy, params: &PolicyParams, obs: &[Observation], g: &[Vec<f64>]) -> f64 {
    obs.iter()
        .zip(g)
        .map(|(o, gi)| {
            let w = policy.forward(params, o).unwrap();
            w.iter().zip(gi).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum()
}

fn assert_gradient_matches_fd(variant: Variant, seed: u64, use_context: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strategies = 2 + (seed % 3) as usize;
    let lags = 5 + (seed % 3) as usize;
    let s = shape(strategies, lags, 3 + (seed % 2) as usize, 4 + (seed % 3) as usize);
    let cfg = NetworkConfig {
        use_context,
        ..small_config(variant, strategies)
    };
    let policy = Policy::new(cfg, s).unwrap();
    let mut params = policy.init_params(seed);
    // non-zero biases so every path is exercised
    for v in params.values.iter_mut() {
        *v += 0.05 * normal(&mut rng);
    }
    let obs: Vec<Observation> = (0..3).map(|_| random_obs(s, &mut rng)).collect();
    let g: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..strategies).map(|_| normal(&mut rng)).collect())
        .collect();
    let mut tape = Tape::new();
    for o in &obs {
        policy.forward_recorded(&params, o, &mut tape).unwrap();
    }
    let analytic = policy.backward(&params, &tape, &g).unwrap();
    let h = 1e-5;
    for i in 0..params.len() {
        let orig = params.values[i];
        params.values[i] = orig + h;
        let up = objective(&policy, &params, &obs, &g);
        params.values[i] = orig - h;
        let down = objective(&policy, &params, &obs, &g);
        params.values[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let tol = 1e-6f64.max(1e-4 * analytic[i].abs());
        assert!(
            (analytic[i] - fd).abs() <= tol,
            "{variant:?} seed {seed} param {i} ({:?}): analytic {} fd {}",
            policy.layout().locate(i).map(|(s, k)| (s.name.clone(), k)),
            analytic[i],
            fd
        );
    }
}

#[test]
fn gradient_check_convolutional() {
    for seed in 0..12 {
        assert_gradient_matches_fd(Variant::Convolutional, seed, seed % 4 != 3);
    }
}

#[test]
fn gradient_check_recurrent() {
    for seed in 100..112 {
        assert_gradient_matches_fd(Variant::Recurrent, seed, seed % 4 != 3);
    }
}

#[test]
fn init_is_deterministic_with_zero_biases() {
    let policy = Policy::new(NetworkConfig::default(), shape(4, 7, 6, 7)).unwrap();
    let a = policy.init_params(DEFAULT_SEED);
    let b = policy.init_params(DEFAULT_SEED);
    assert_eq!(a, b);
    assert_ne!(a, policy.init_params(DEFAULT_SEED + 1));
    for slot in policy.layout().slots() {
        let vals = a.slot_values(&slot.name).unwrap();
        if slot.name.ends_with("bias") {
            assert!(vals.iter().all(|&v| v == 0.0), "{}", slot.name);
        } else {
            assert!(vals.iter().any(|&v| v != 0.0), "{}", slot.name);
        }
    }
    assert_eq!(DEFAULT_SEED, 12345);
}

#[test]
fn layout_covers_every_index_once() {
    for variant in [Variant::Convolutional, Variant::Recurrent] {
        let cfg = NetworkConfig {
            variant,
            ..Default::default()
        };
        let policy = Policy::new(cfg, shape(4, 7, 6, 7)).unwrap();
        let layout = policy.layout();
        let mut next = 0;
        for s in layout.slots() {
            assert_eq!(s.offset, next);
            next += s.len;
        }
        assert_eq!(next, policy.num_params());
        for i in 0..policy.num_params() {
            assert!(layout.locate(i).is_some());
        }
    }
}

#[test]
fn default_lags_give_expected_layer_shapes() {
    let features = crate::features::FeatureConfig::default();
    assert_eq!(features.asset_lags, LagSet::default());
    let s = InputShape::new(4, 3, &features);
    assert_eq!(s, shape(4, 7, 6, 7));
    let policy = Policy::new(NetworkConfig::default(), s).unwrap();
    // conv0: 2->5, kernel 3 stride 2 over 7 lags -> 3; conv1: 5->10 kernel 3 -> 1
    assert_eq!(policy.layout().slot("subnet1.conv0.weight").unwrap().len, 5 * 2 * 3);
    assert_eq!(policy.layout().slot("subnet1.conv1.weight").unwrap().len, 10 * 5 * 3);
    assert_eq!(policy.layout().slot("subnet2.conv0.weight").unwrap().len, 2 * 6 * 3);
    // merge input: 10 channels x 4 strategies x 1 + 2 channels x 3
    assert_eq!(policy.layout().slot("merge.weight").unwrap().len, (40 + 6) * 16);
}

#[test]
fn softmax_head_properties() {
    let s = shape(4, 7, 6, 7);
    let policy = Policy::new(NetworkConfig::default(), s).unwrap();
    let params = policy.init_params(7);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let o = random_obs(s, &mut rng);
        let w = policy.forward(&params, &o).unwrap();
        assert_eq!(w.len(), 4);
        assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_output_layer_gives_uniform_weights() {
    let s = shape(3, 7, 5, 7);
    let cfg = NetworkConfig {
        strategies: 3,
        ..Default::default()
    };
    let policy = Policy::new(cfg, s).unwrap();
    let mut params = policy.init_params(1);
    params.slot_values_mut("output.weight").unwrap().fill(0.0);
    params.slot_values_mut("output.bias").unwrap().fill(0.0);
    let o = random_obs(s, &mut ChaCha8Rng::seed_from_u64(9));
    let w = policy.forward(&params, &o).unwrap();
    for x in w {
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn adding_constant_to_logits_is_invisible() {
    let s = shape(4, 7, 6, 7);
    let policy = Policy::new(NetworkConfig::default(), s).unwrap();
    let params = policy.init_params(5);
    let mut shifted = params.clone();
    shifted
        .slot_values_mut("output.bias")
        .unwrap()
        .iter_mut()
        .for_each(|b| *b += 3.7);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let o = random_obs(s, &mut rng);
        let a = policy.forward(&params, &o).unwrap();
        let b = policy.forward(&shifted, &o).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn golden_forward_output() {
    let s = shape(4, 7, 6, 7);
    let policy = Policy::new(NetworkConfig::default(), s).unwrap();
    let params = policy.init_params(DEFAULT_SEED);
    let o = random_obs(s, &mut ChaCha8Rng::seed_from_u64(2024));
    let w = policy.forward(&params, &o).unwrap();
    let golden = GOLDEN_CNN;
    for (x, y) in w.iter().zip(golden) {
        assert!((x - y).abs() < 1e-12, "{w:?}");
    }
    let cfg = NetworkConfig {
        variant: Variant::Recurrent,
        ..Default::default()
    };
    let policy = Policy::new(cfg, s).unwrap();
    let params = policy.init_params(DEFAULT_SEED);
    let w = policy.forward(&params, &o).unwrap();
    for (x, y) in w.iter().zip(GOLDEN_RECURRENT) {
        assert!((x - y).abs() < 1e-12, "{w:?}");
    }
}

const GOLDEN_CNN: [f64; 4] = [
    0.24880008150262412,
    0.2497498151551155,
    0.24889658365421488,
    0.2525535196880455,
];
const GOLDEN_RECURRENT: [f64; 4] = [
    0.2505557265445123,
    0.2240103585306967,
    0.26043201913357195,
    0.2650018957912191,
];

#[test]
fn zero_output_gradient_gives_zero_parameter_gradient() {
    let s = shape(3, 7, 5, 7);
    let policy = Policy::new(small_config(Variant::Convolutional, 3), s).unwrap();
    let params = policy.init_params(2);
    let mut tape = Tape::new();
    let o = random_obs(s, &mut ChaCha8Rng::seed_from_u64(1));
    policy.forward_recorded(&params, &o, &mut tape).unwrap();
    let g = policy.backward(&params, &tape, &[vec![0.0; 3]]).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn dead_merge_unit_has_zero_gradient() {
    let s = shape(3, 7, 5, 7);
    let policy = Policy::new(small_config(Variant::Convolutional, 3), s).unwrap();
    let mut params = policy.init_params(2);
    params.slot_values_mut("merge.bias").unwrap()[0] = -1e6;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let mut g = Vec::new();
    for _ in 0..4 {
        policy
            .forward_recorded(&params, &random_obs(s, &mut rng), &mut tape)
            .unwrap();
        g.push(vec![1.0, -2.0, 0.5]);
    }
    let grad = policy.backward(&params, &tape, &g).unwrap();
    let merge = policy.layout().slot("merge.weight").unwrap();
    let inputs = merge.len / 6;
    assert!(grad[merge.offset..merge.offset + inputs].iter().all(|&v| v == 0.0));
    let out = policy.layout().slot("output.weight").unwrap();
    // output weights reading hidden unit 0 see a zero activation
    for o in 0..3 {
        assert_eq!(grad[out.offset + o * 6], 0.0);
    }
}

#[test]
fn backward_requires_recorded_forward() {
    let s = shape(3, 7, 5, 7);
    let policy = Policy::new(small_config(Variant::Recurrent, 3), s).unwrap();
    let params = policy.init_params(0);
    let err = policy.backward(&params, &Tape::new(), &[]).unwrap_err();
    assert!(matches!(err, Error::State(_)));
    let mut tape = Tape::new();
    policy
        .forward_recorded(&params, &random_obs(s, &mut ChaCha8Rng::seed_from_u64(0)), &mut tape)
        .unwrap();
    assert!(matches!(
        policy.backward(&params, &tape, &[]),
        Err(Error::State(_))
    ));
}

#[test]
fn shape_mismatch_is_rejected() {
    let policy = Policy::new(NetworkConfig::default(), shape(4, 7, 6, 7)).unwrap();
    let params = policy.init_params(0);
    let o = random_obs(shape(4, 5, 6, 7), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(policy.forward(&params, &o), Err(Error::Validation(_))));
    assert!(Policy::new(NetworkConfig::default(), shape(3, 7, 6, 7)).is_err());
}

#[test]
fn recurrent_forward_equals_unrolled_steps() {
    let s = shape(3, 6, 4, 5);
    let cfg = small_config(Variant::Recurrent, 3);
    let policy = Policy::new(cfg, s).unwrap();
    let params = policy.init_params(77);
    let (c1, c2) = policy.recurrent_cells().unwrap();
    let c2 = c2.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let o = random_obs(s, &mut rng);
        let (o1, o2) = policy.subnet_outputs(&params, &o).unwrap();
        let mut h = vec![0.0; c1.hidden];
        for a in 0..s.asset_lags {
            let x: Vec<f64> = (0..3)
                .map(|k| o.returns.get(k, a))
                .chain((0..3).map(|k| o.vols.get(k, a)))
                .collect();
            h = c1.step(&params.values, &x, &h);
        }
        assert_eq!(h, o1);
        let mut h = vec![0.0; c2.hidden];
        for a in 0..s.context_lags {
            let x: Vec<f64> = (0..s.context_rows).map(|i| o.context.get(i, a)).collect();
            h = c2.step(&params.values, &x, &h);
        }
        assert_eq!(h, o2.unwrap());
    }
}

#[test]
fn no_context_network_ignores_context() {
    let s = shape(3, 7, 5, 7);
    let cfg = NetworkConfig {
        use_context: false,
        ..small_config(Variant::Convolutional, 3)
    };
    let policy = Policy::new(cfg, s).unwrap();
    assert!(policy.layout().slots().iter().all(|s| !s.name.starts_with("subnet2")));
    let params = policy.init_params(1);
    let mut o = random_obs(s, &mut ChaCha8Rng::seed_from_u64(1));
    let a = policy.forward(&params, &o).unwrap();
    o.context.as_mut_slice().iter_mut().for_each(|v| *v += 10.0);
    assert_eq!(a, policy.forward(&params, &o).unwrap());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    for variant in [Variant::Convolutional, Variant::Recurrent] {
        let cfg = NetworkConfig {
            variant,
            ..Default::default()
        };
        let policy = Policy::new(cfg, shape(4, 7, 6, 7)).unwrap();
        let mut params = policy.init_params(9);
        params.values[0] = 1e-300;
        params.values[1] = -0.1 - 0.2;
        let mut buf = Vec::new();
        write_policy(&mut buf, &policy, &params).unwrap();
        let (p2, params2) = read_policy(buf.as_slice()).unwrap();
        assert_eq!(p2, policy);
        assert!(params
            .values
            .iter()
            .zip(&params2.values)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let policy = Policy::new(NetworkConfig::default(), shape(4, 7, 6, 7)).unwrap();
    let params = policy.init_params(9);
    let mut buf = Vec::new();
    write_policy(&mut buf, &policy, &params).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let truncated: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
    assert!(read_policy(truncated.as_bytes()).is_err());
    let wrong = text.replacen("overlay-rl-policy 1", "overlay-rl-policy 9", 1);
    assert!(read_policy(wrong.as_bytes()).is_err());
}

#[test]
fn non_finite_parameter_names_layer() {
    let policy = Policy::new(NetworkConfig::default(), shape(4, 7, 6, 7)).unwrap();
    let mut params = policy.init_params(9);
    let slot = policy.layout().slot("merge.bias").unwrap().clone();
    params.values[slot.offset + 2] = f64::NAN;
    match params.check_finite() {
        Err(Error::NonFinite { layer, index }) => {
            assert_eq!(layer, "merge.bias");
            assert_eq!(index, 2);
        }
        other => panic!("{other:?}"),
    }
}
