use super::*;
use crate::rng::{stream, Purpose};
use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
use rand::SeedableRng;

fn rng(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

fn random_matrix(rng: &mut StreamRng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect())
}

fn small_config(groups: usize) -> RescalerConfig {
    RescalerConfig {
        input_dim: 5,
        hidden_width: 6,
        num_groups: groups,
        binary_mode: false,
        threshold: 0.5,
    }
}

/// Replaces every tensor with random values so nothing sits at the
/// symmetric initial point.
fn randomized(config: RescalerConfig, seed: u64, scale: f64) -> Rescaler {
    let mut r = rng(seed);
    let mut res = Rescaler::init_uniform(config, &mut r).unwrap();
    for m in &mut res.omega {
        *m = random_matrix(&mut r, m.rows(), m.cols(), scale);
    }
    res
}

#[test]
fn initial_weights_are_exactly_one_half() {
    let res = Rescaler::init_uniform(RescalerConfig::new(19, 2), &mut stream(3, Purpose::Init, 1)).unwrap();
    let mut r = rng(9);
    let a = random_matrix(&mut r, 12, 19, 5.0);
    let b = random_matrix(&mut r, 12, 19, 50.0);
    let groups: Vec<usize> = (0..12).map(|i| i % 2).collect();
    let wa = res.weights(&a, &groups).unwrap();
    let wb = res.weights(&b, &groups).unwrap();
    assert!(wa.iter().all(|&w| w == 0.5));
    assert_eq!(wa, wb);
}

#[test]
fn initial_weights_for_a_single_sample_group() {
    let res = Rescaler::init_uniform(small_config(2), &mut rng(1)).unwrap();
    let x = random_matrix(&mut rng(2), 3, 5, 1.0);
    assert_eq!(res.weights(&x, &[0, 0, 1]).unwrap(), vec![0.5; 3]);
}

#[test]
fn feature_dim_mismatch_is_error() {
    let res = Rescaler::init_uniform(RescalerConfig::new(19, 2), &mut rng(1)).unwrap();
    let x = Matrix::zeros(4, 18);
    assert!(matches!(
        res.weights(&x, &[0; 4]),
        Err(RescalerError::FeatureDim { expected: 19, got: 18 })
    ));
    let x = Matrix::zeros(4, 19);
    assert!(matches!(res.weights(&x, &[0, 0, 2, 0]), Err(RescalerError::GroupOutOfRange { .. })));
}

#[test]
fn identical_features_within_a_class_get_identical_weights() {
    let res = randomized(small_config(2), 4, 1.5);
    let row: Vec<f64> = vec![0.3, -1.0, 2.0, 0.0, 0.7];
    let other: Vec<f64> = vec![1.0, 1.0, -1.0, 0.5, 0.2];
    let x = Matrix::from_rows(&[row.clone(), other.clone(), row.clone(), other, row]);
    let w = res.weights(&x, &[0, 1, 0, 1, 0]).unwrap();
    assert_eq!(w[0], w[2]);
    assert_eq!(w[0], w[4]);
    assert_eq!(w[1], w[3]);
}

#[test]
fn pairs_sum_to_one() {
    let res = randomized(small_config(3), 5, 3.0);
    let x = random_matrix(&mut rng(6), 10, 5, 4.0);
    let groups: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let mut g = Graph::new();
    let om = res.param_nodes(&mut g).unwrap();
    let p = res.pairs_graph(&mut g, &om, &x, &groups).unwrap();
    for r in 0..10 {
        let row = g.value(p).row(r);
        assert!((row[0] + row[1] - 1.0).abs() <= 1e-12);
        assert!(row[0] > 0.0 && row[0] < 1.0);
    }
}

#[test]
fn modifying_one_class_leaves_others_unchanged() {
    let res = randomized(small_config(3), 7, 1.0);
    let x = random_matrix(&mut rng(8), 9, 5, 1.0);
    let groups: Vec<usize> = (0..9).map(|i| i % 3).collect();
    let before = res.weights(&x, &groups).unwrap();
    let mut changed = res.clone();
    for m in changed.group_params_mut(1) {
        *m = m.map(|v| v * 1.7 + 0.1);
    }
    let after = changed.weights(&x, &groups).unwrap();
    for i in 0..9 {
        if groups[i] == 1 {
            assert_ne!(before[i], after[i]);
        } else {
            assert_eq!(before[i], after[i]);
        }
    }
}

#[test]
fn gradients_do_not_cross_classes() {
    let res = randomized(small_config(3), 10, 1.0);
    let x = random_matrix(&mut rng(11), 9, 5, 1.0);
    let groups: Vec<usize> = (0..9).map(|i| i % 3).collect();
    for c in 0..3 {
        let mut g = Graph::new();
        let om = res.param_nodes(&mut g).unwrap();
        let w = res.weights_graph(&mut g, &om, &x, &groups).unwrap();
        // per-sample "losses", zero outside class c
        let l: Vec<f64> = (0..9).map(|i| if groups[i] == c { 1.0 + i as f64 } else { 0.0 }).collect();
        let ln = g.constant(Matrix::column(l)).unwrap();
        let p = g.mul(w, ln).unwrap();
        let root = g.sum(p).unwrap();
        let grads = g.backward(root, &om, false).unwrap();
        for (k, gm) in grads.values().iter().enumerate() {
            let owner = k / PARAMS_PER_GROUP;
            if owner != c {
                assert!(gm.as_slice().iter().all(|&v| v == 0.0), "group {owner} leaked from {c}");
            }
        }
        let own: f64 = (c * PARAMS_PER_GROUP..(c + 1) * PARAMS_PER_GROUP)
            .map(|k| grads.value(k).norm())
            .sum();
        assert!(own > 0.0);
    }
}

fn weighted_loss(res: &Rescaler, x: &Matrix, groups: &[usize], losses: &Matrix) -> f64 {
    let w = res.weights(x, groups).unwrap();
    w.iter().zip(losses.as_slice()).map(|(a, b)| a * b).sum::<f64>() / w.len() as f64
}

#[test]
fn weighted_loss_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let res = randomized(small_config(2), 100 + seed, 0.8);
        let mut r = rng(200 + seed);
        let x = random_matrix(&mut r, 8, 5, 2.0);
        let groups = [0, 1, 0, 1, 0, 0, 1, 1];
        let losses = Matrix::column((0..8).map(|_| r.random_range(0.1..3.0)).collect());

        let mut g = Graph::new();
        let om = res.param_nodes(&mut g).unwrap();
        let w = res.weights_graph(&mut g, &om, &x, &groups).unwrap();
        let ln = g.constant(losses.clone()).unwrap();
        let p = g.mul(w, ln).unwrap();
        let root = g.mean(p).unwrap();
        let grads = g.backward(root, &om, false).unwrap();

        let h = 1e-5;
        let (mut num, mut den, mut total) = (0.0f64, 0.0f64, 0.0f64);
        for (k, gm) in grads.values().iter().enumerate() {
            for e in 0..gm.len() {
                let mut plus = res.clone();
                plus.omega[k].as_mut_slice()[e] += h;
                let mut minus = res.clone();
                minus.omega[k].as_mut_slice()[e] -= h;
                let fd = (weighted_loss(&plus, &x, &groups, &losses)
                    - weighted_loss(&minus, &x, &groups, &losses))
                    / (2.0 * h);
                let a = gm.as_slice()[e];
                num += (a - fd).powi(2);
                den += fd.powi(2);
                total += a.abs();
            }
        }
        let rel = num.sqrt() / den.sqrt().max(1e-12);
        assert!(rel <= 1e-4, "seed {seed}: rel err {rel:e}");
        assert!(total > 0.0);
    }
}

#[test]
fn second_batch_norm_output_is_normalized() {
    let res = randomized(small_config(1), 12, 1.0);
    let x = random_matrix(&mut rng(13), 16, 5, 1.0);
    let mut g = Graph::new();
    let om = res.param_nodes(&mut g).unwrap();
    let xn = g.constant(x).unwrap();
    let h = g.matmul(xn, om[0]).unwrap();
    let h = g.add_row(h, om[1]).unwrap();
    let h = g.batch_norm(h, Some(om[2]), Some(om[3]), BN_EPS).unwrap();
    let h = g.relu(h).unwrap();
    let z = g.matmul(h, om[4]).unwrap();
    let z = g.add_row(z, om[5]).unwrap();
    let raw = g.value(z).clone();
    let n = g.batch_norm(z, None, None, BN_EPS).unwrap();
    let out = g.value(n).clone();
    for c in 0..2 {
        let col: Vec<f64> = (0..16).map(|r| out.get(r, c)).collect();
        let raw_col: Vec<f64> = (0..16).map(|r| raw.get(r, c)).collect();
        let mean = col.iter().sum::<f64>() / 16.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        let rm = raw_col.iter().sum::<f64>() / 16.0;
        let rv = raw_col.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        // eps keeps the variance just under one
        assert!((var - rv / (rv + BN_EPS)).abs() < 1e-12, "var {var}");
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn binary_mode_thresholds_and_passes_gradient_through() {
    assert_eq!(binarize(&[0.4, 0.6], 0.5), vec![0.0, 1.0]);
    assert_eq!(binarize(&[0.5], 0.5), vec![1.0]);

    let mut cfg = small_config(1);
    let soft = randomized(cfg.clone(), 14, 1.0);
    cfg.binary_mode = true;
    let hard = Rescaler {
        config: cfg,
        omega: soft.omega.clone(),
    };
    let x = random_matrix(&mut rng(15), 6, 5, 1.0);
    let groups = [0; 6];
    let losses = Matrix::column(vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);

    let run = |res: &Rescaler| {
        let mut g = Graph::new();
        let om = res.param_nodes(&mut g).unwrap();
        let w = res.applied_weights_graph(&mut g, &om, &x, &groups).unwrap();
        let wv = g.value(w).as_slice().to_vec();
        let ln = g.constant(losses.clone()).unwrap();
        let p = g.mul(w, ln).unwrap();
        let root = g.sum(p).unwrap();
        (wv, g.backward(root, &om, false).unwrap().into_values())
    };
    let (ws, gs) = run(&soft);
    let (wh, gh) = run(&hard);
    assert_eq!(wh, binarize(&ws, 0.5));
    assert_eq!(gs, gh);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let res = randomized(small_config(3), 16, 2.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("omega.txt");
    res.save(&path).unwrap();
    let back = Rescaler::load(&path).unwrap();
    assert_eq!(back, res);
}

#[test]
fn checkpoint_rejects_bad_header_and_shapes() {
    let res = randomized(small_config(1), 17, 1.0);
    let text = res.to_checkpoint_string();
    let wrong_version = text.replacen("storm-rescaler 1", "storm-rescaler 2", 1);
    assert!(matches!(
        Rescaler::from_checkpoint_str(&wrong_version),
        Err(RescalerError::Checkpoint(_))
    ));
    let truncated: String = text.lines().take(9).collect::<Vec<_>>().join("\n");
    assert!(Rescaler::from_checkpoint_str(&truncated).is_err());
    let wrong_shape = text.replacen("tensor group0.l1.bias 1 6", "tensor group0.l1.bias 1 7", 1);
    assert!(Rescaler::from_checkpoint_str(&wrong_shape).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn weights_never_all_collapse(
        seed in any::<u64>(),
        scale in 0.1f64..50.0,
        n in 2usize..20,
    ) {
        let res = randomized(small_config(1), seed, scale);
        let mut r = rng(seed ^ 0x5555);
        let x = random_matrix(&mut r, n, 5, 10.0);
        let w = res.weights(&x, &vec![0; n]).unwrap();
        let top = w.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(top > 1e-3);
        prop_assert!(top >= 0.5 - 1e-9, "max weight {}", top);
    }

    #[test]
    fn adversarial_bn2_scales_cannot_collapse(
        s0 in -1e3f64..1e3,
        s1 in -1e3f64..1e3,
        seed in any::<u64>(),
    ) {
        let mut res = randomized(small_config(1), seed, 1.0);
        res.omega[6] = Matrix::row_vector(vec![s0, s1]);
        res.omega[5] = Matrix::row_vector(vec![-1e6, 1e6]);
        let x = random_matrix(&mut rng(seed ^ 0xABCD), 8, 5, 3.0);
        let w = res.weights(&x, &[0; 8]).unwrap();
        prop_assert!(w.iter().any(|&v| v > 1e-3));
    }
}
