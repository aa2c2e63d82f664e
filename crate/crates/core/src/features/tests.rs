use super::*;
use crate::graph::Matrix;
use crate::models::{ClassifierModel, LabeledSet, ModelConfig, Features};
use crate::rng::{stream, Purpose};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn density(x: f64, m: f64, s: f64) -> f64 {
    let z = (x - m) / s;
    (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

/// Trapezoid over `[min mean - 12 s, max mean + 12 s]` with 10^6 points.
fn trapezoid(m1: f64, s1: f64, m2: f64, s2: f64, f: impl Fn(f64) -> f64) -> f64 {
    let spread = 12.0 * s1.max(s2);
    let lo = m1.min(m2) - spread;
    let hi = m1.max(m2) + spread;
    let n = 1_000_000usize;
    let h = (hi - lo) / (n - 1) as f64;
    let mut acc = 0.0;
    for k in 0..n {
        let x = lo + h * k as f64;
        let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
        acc += w * f(x);
    }
    acc * h
}

fn kl_oracle(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    trapezoid(m1, s1, m2, s2, |x| {
        let z1 = (x - m1) / s1;
        let z2 = (x - m2) / s2;
        let log_ratio = (s2 / s1).ln() - 0.5 * z1 * z1 + 0.5 * z2 * z2;
        density(x, m1, s1) * log_ratio
    })
}

fn ovl_oracle(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    trapezoid(m1, s1, m2, s2, |x| density(x, m1, s1).min(density(x, m2, s2)))
}

#[test]
fn kl_examples() {
    assert_eq!(kl_normal(0.3, 0.7, 0.3, 0.7), 0.0);
    assert!((kl_normal(0.0, 1.0, 1.0, 1.0) - 0.5).abs() < 1e-15);
    let expect = (0.5f64).ln() + 4.0 / 2.0 - 0.5;
    assert!((kl_normal(0.0, 2.0, 0.0, 1.0) - expect).abs() < 1e-15);
    assert!((expect - 0.806_85).abs() < 1e-5);
    assert!((kl_oracle(0.0, 1.0, 1.0, 1.0) - 0.5).abs() < 1e-6);
    assert!((kl_oracle(0.0, 2.0, 0.0, 1.0) - expect).abs() < 1e-6);
}

#[test]
fn ovl_examples() {
    assert_eq!(ovl_normal(0.4, 0.2, 0.4, 0.2), 1.0);
    // 2 * Phi(-0.5)
    let expect = erfc(0.5 / std::f64::consts::SQRT_2);
    assert!((expect - 0.617_08).abs() < 1e-5);
    assert!((ovl_normal(0.0, 1.0, 1.0, 1.0) - expect).abs() < 1e-14);
    assert!((ovl_oracle(0.0, 1.0, 1.0, 1.0) - expect).abs() < 1e-4);
    assert!(ovl_normal(0.0, 1.0, 1e10, 1.0) < 1e-12);
}

#[test]
fn degenerate_stds_are_clamped() {
    assert_eq!(kl_normal(1.0, 0.0, 1.0, 0.0), 0.0);
    assert_eq!(ovl_normal(1.0, 0.0, 1.0, 0.0), 1.0);
    assert!(kl_normal(1.0, 0.0, 2.0, 0.0).is_finite());
    let o = ovl_normal(1.0, 0.0, 1.0 + 1e-7, 0.0);
    assert!((0.0..=1.0).contains(&o));
}

#[test]
fn kl_and_ovl_match_numerical_integration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let m1 = rng.random_range(-3.0..3.0);
        let m2 = rng.random_range(-3.0..3.0);
        let s1 = rng.random_range(0.05..3.0);
        let s2 = rng.random_range(0.05..3.0);
        let kl = kl_normal(m1, s1, m2, s2);
        let ovl = ovl_normal(m1, s1, m2, s2);
        assert!((kl - kl_oracle(m1, s1, m2, s2)).abs() < 1e-6, "kl {m1} {s1} {m2} {s2}");
        assert!((ovl - ovl_oracle(m1, s1, m2, s2)).abs() < 1e-4, "ovl {m1} {s1} {m2} {s2}");
    }
}

proptest! {
    #[test]
    fn kl_nonnegative_ovl_symmetric_and_bounded(
        m1 in -50.0f64..50.0, s1 in 0.0f64..20.0, m2 in -50.0f64..50.0, s2 in 0.0f64..20.0,
    ) {
        prop_assert!(kl_normal(m1, s1, m2, s2) >= 0.0);
        prop_assert_eq!(kl_normal(m1, s1, m1, s1), 0.0);
        let a = ovl_normal(m1, s1, m2, s2);
        let b = ovl_normal(m2, s2, m1, s1);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn memory_keeps_most_recent_entries_in_order(cap in 1usize..10, k in 0usize..40) {
        let mut mem = ClassMemory::new(cap);
        for i in 0..k {
            mem.push(stats(i as f64, 0.0, 0));
            prop_assert!(mem.len() <= cap);
        }
        let kept: Vec<f64> = mem.iter().map(|s| s.loss_mean).collect();
        let expect: Vec<f64> = (k.saturating_sub(cap)..k).map(|i| i as f64).collect();
        prop_assert_eq!(kept, expect);
    }

    #[test]
    fn features_are_finite_for_random_stats(
        raw in proptest::collection::vec((0.0f64..30.0, 0.0f64..5.0, 0.0f64..1.0, 0.0f64..0.5, 0usize..2), 1..40),
        cap in 1usize..16,
    ) {
        let all: Vec<SampleStats> = raw.iter().map(|&(lm, ls, pm, ps, p)| SampleStats {
            loss_mean: lm, loss_std: ls, prob_mean: pm, prob_std: ps, predicted: p, label: 0,
        }).collect();
        let mut fx = FeatureExtractor::new(1, cap, true, GroupSource::Memory, FeatureSet::Full);
        let f = fx.observe(&all).unwrap();
        prop_assert!(f.is_finite());
        for r in 0..f.rows() {
            let v = FeatureVector(f.row(r).try_into().unwrap());
            prop_assert!(v.kl() >= 0.0);
            prop_assert!((0.0..=1.0).contains(&v.ovl()));
            prop_assert!(v.cat() == 0.0 || v.cat() == 1.0);
        }
    }
}

fn stats(loss_mean: f64, loss_std: f64, label: usize) -> SampleStats {
    SampleStats {
        loss_mean,
        loss_std,
        prob_mean: (-loss_mean).exp(),
        prob_std: 0.01,
        predicted: label,
        label,
    }
}

#[test]
fn population_std_of_three_losses() {
    let m = Moments::of([1.0, 2.0, 3.0]);
    assert_eq!(m.mean(), 2.0);
    assert!((m.std() - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert!((m.std() - 0.816_50).abs() < 1e-5);
}

#[test]
fn identical_population_gives_zero_divergence() {
    let s = stats(0.7, 0.2, 1);
    let mut mem = ClassMemory::new(4);
    mem.push(s);
    mem.push(s);
    let f = compute_features(&s, &mem).unwrap();
    assert_eq!(f.kl(), 0.0);
    assert_eq!(f.ovl(), 1.0);
    // group stds: std of means, std of stds (loss and prob)
    for idx in [4, 5, 10, 11, 14, 17] {
        assert_eq!(f.0[idx], 0.0, "index {idx}");
    }
}

#[test]
fn group_loss_mean_and_std() {
    let mut mem = ClassMemory::new(4);
    mem.push(stats(1.0, 0.1, 0));
    mem.push(stats(3.0, 0.1, 0));
    let f = compute_features(&stats(1.0, 0.1, 0), &mem).unwrap();
    assert_eq!(f.0[0], 1.0);
    assert_eq!(f.0[1], 2.0);
    assert_eq!(f.0[4], 1.0);
}

#[test]
fn cat_flag_tracks_agreement() {
    let mut mem = ClassMemory::new(2);
    let mut s = stats(0.5, 0.1, 1);
    mem.push(s);
    assert_eq!(compute_features(&s, &mem).unwrap().cat(), 1.0);
    s.predicted = 0;
    assert_eq!(compute_features(&s, &mem).unwrap().cat(), 0.0);
}

#[test]
fn empty_memory_is_error() {
    let mem = ClassMemory::new(2);
    assert!(matches!(compute_features(&stats(0.1, 0.0, 3), &mem), Err(FeatureError::EmptyMemory(3))));
}

#[test]
fn single_entry_cold_start() {
    let s = stats(0.9, 0.3, 0);
    let g = GroupStats::from_entries([s].iter()).unwrap();
    assert_eq!(g.loss_mean, (0.9, 0.0));
    assert_eq!(g.loss_std, (0.3, 0.0));
}

fn toy_batch() -> (ClassifierModel, crate::models::Batch) {
    let mut model = ClassifierModel::new(ModelConfig::linear(3, 2, 0.2), &mut stream(1, Purpose::Init, 0)).unwrap();
    model.theta[0] = Matrix::from_vec(3, 2, vec![0.5, -0.5, 0.2, 0.1, -0.3, 0.4]);
    let set = LabeledSet::new(
        vec![10, 11, 12],
        vec![
            Features::Dense(vec![1.0, 2.0, 0.5]),
            Features::Dense(vec![-1.0, 0.3, 0.5]),
            Features::Dense(vec![0.2, -0.7, 1.5]),
        ],
        vec![0, 1, 1],
    );
    let b = set.full_batch();
    (model, b)
}

#[test]
fn single_pass_has_zero_std() {
    let (model, b) = toy_batch();
    let s = stochastic_passes(&model, &model.theta, &b, 1, &mut stream(1, Purpose::FeatureDropout, 0)).unwrap();
    assert!(s.iter().all(|x| x.loss_std == 0.0 && x.prob_std == 0.0));
    assert!(matches!(
        stochastic_passes(&model, &model.theta, &b, 0, &mut stream(1, Purpose::FeatureDropout, 0)),
        Err(FeatureError::NoPasses)
    ));
}

#[test]
fn no_dropout_passes_match_deterministic_forward() {
    let (mut model, b) = toy_batch();
    model.config.dropout_rate = 0.0;
    let s = stochastic_passes(&model, &model.theta, &b, 3, &mut stream(1, Purpose::FeatureDropout, 0)).unwrap();
    let p = model.forward(&b.x, None).unwrap();
    for (i, st) in s.iter().enumerate() {
        assert_eq!(st.loss_std, 0.0);
        assert_eq!(st.prob_std, 0.0);
        assert_eq!(st.prob_mean, p.get(i, b.labels[i]));
        assert_eq!(st.loss_mean, -p.get(i, b.labels[i]).ln());
    }
}

#[test]
fn dropout_passes_vary() {
    let (model, b) = toy_batch();
    let s = stochastic_passes(&model, &model.theta, &b, 5, &mut stream(1, Purpose::FeatureDropout, 0)).unwrap();
    assert!(s.iter().any(|x| x.loss_std > 0.0));
    assert!(s.iter().all(|x| (0.0..=1.0).contains(&x.prob_mean)));
}

#[test]
fn class_separation_and_group_sources() {
    let batch = vec![stats(0.2, 0.1, 0), stats(1.5, 0.2, 1), stats(0.4, 0.1, 0)];
    let mut sep = FeatureExtractor::new(2, 8, true, GroupSource::Memory, FeatureSet::Full);
    let f = sep.observe(&batch).unwrap();
    assert_eq!(sep.memory(0).len(), 2);
    assert_eq!(sep.memory(1).len(), 1);
    // class-1 sample is its own group
    assert_eq!(f.get(1, 1), 1.5);
    assert!((f.get(0, 1) - 0.3).abs() < 1e-15);

    let mut joint = FeatureExtractor::new(2, 8, false, GroupSource::Memory, FeatureSet::Full);
    let f = joint.observe(&batch).unwrap();
    assert_eq!(joint.num_groups(), 1);
    assert!((f.get(1, 1) - 0.7).abs() < 1e-15);

    // batch source ignores older memory contents
    let mut by_batch = FeatureExtractor::new(2, 8, true, GroupSource::Batch, FeatureSet::Full);
    by_batch.observe(&[stats(9.0, 0.1, 0)]).unwrap();
    let f = by_batch.observe(&batch).unwrap();
    assert!((f.get(0, 1) - 0.3).abs() < 1e-15);

    let loss_only = FeatureExtractor::new(2, 8, true, GroupSource::Memory, FeatureSet::LossOnly);
    let f = loss_only.featurize(&batch).unwrap();
    assert_eq!(f.cols(), 1);
    assert_eq!(f.as_slice(), &[0.2, 1.5, 0.4]);
}
