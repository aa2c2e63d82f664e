//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Criteria 4 and 5 need the public SMS spam and Youtube comment corpora in
//! `STORM_DATA_DIR`. Without them they print NOT RUN, unless
//! `STORM_REQUIRE_DATASETS` is set, which turns a missing file into FAIL.

use std::process::ExitCode;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};
use storm_core::data::{generate_synthetic, inject_uniform_noise, SyntheticConfig};
use storm_core::experiment::{
    data_dir, load_raw, prepare_folds, preset, run_fold, ExperimentSpec, FoldResult,
};
use storm_core::features::{kl_normal, ovl_normal};
use storm_core::graph::Matrix;
use storm_core::models::{Batch, Features, LabeledSet, ModelConfig};
use storm_core::optim::OptimizerKind;
use storm_core::rng::{stream, Purpose};
use storm_core::trainer::{Mode, Trainer, TrainerConfig};

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

// ---------- criterion 1: meta-gradient against finite differences ----------

fn tiny_set(rng: &mut impl Rng, id0: u64) -> LabeledSet {
    let labels = vec![0, 1, 0, 1];
    let feats = labels
        .iter()
        .map(|&y| {
            let c = if y == 0 { -1.0 } else { 1.0 };
            Features::Dense(vec![c + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        })
        .collect();
    LabeledSet::new((id0..id0 + 4).collect(), feats, labels)
}

fn tiny_config(seed: u64) -> TrainerConfig {
    TrainerConfig {
        mode: Mode::Storm,
        seed,
        batch_size: 4,
        theta_optimizer: OptimizerKind::Sgd,
        theta_lr: 0.5,
        inner_lr: 0.5,
        rescale_meta_loss: false,
        use_outer_grad: false,
        rescaler_hidden: 4,
        ..TrainerConfig::default()
    }
}

/// Meta loss at the unrolled parameters as a function of ω, evaluated by
/// forward computation only.
fn meta_loss_at(cfg: &TrainerConfig, theta: &[Matrix], omega: &[Matrix], train: &Batch, val: &Batch) -> f64 {
    let mut t = Trainer::new(cfg.clone(), ModelConfig::linear(2, 2, 0.3)).unwrap();
    t.model.theta = theta.to_vec();
    t.rescaler.omega = omega.to_vec();
    let mut u = t.begin_unroll().unwrap();
    t.inner_step(&mut u, train).unwrap();
    t.meta_gradients(&mut u, val).unwrap().meta_loss
}

fn criterion_1() -> Outcome {
    let instances = 20;
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut rng = stream(1000 + k, Purpose::Synthetic, 0);
        let train = tiny_set(&mut rng, 0).full_batch();
        let val = tiny_set(&mut rng, 100).full_batch();
        let cfg = tiny_config(k);
        let mut t = Trainer::new(cfg.clone(), ModelConfig::linear(2, 2, 0.3)).unwrap();
        // the classifier's zero init gives every sample the same statistics
        let jitter = Normal::new(0.0, 0.5).unwrap();
        for m in t.model.theta.iter_mut().chain(&mut t.rescaler.omega) {
            for v in m.as_mut_slice() {
                *v += jitter.sample(&mut rng);
            }
        }
        let theta = t.model.theta.clone();
        let omega = t.rescaler.omega.clone();
        let mut u = t.begin_unroll().unwrap();
        t.inner_step(&mut u, &train).unwrap();
        let analytic = t.meta_gradients(&mut u, &val).unwrap().meta.unwrap();

        let h = 1e-6;
        let (mut diff2, mut norm2) = (0.0, 0.0);
        for (p, g) in analytic.iter().enumerate() {
            for i in 0..g.len() {
                let mut plus = omega.clone();
                plus[p].as_mut_slice()[i] += h;
                let mut minus = omega.clone();
                minus[p].as_mut_slice()[i] -= h;
                let fd = (meta_loss_at(&cfg, &theta, &plus, &train, &val)
                    - meta_loss_at(&cfg, &theta, &minus, &train, &val))
                    / (2.0 * h);
                diff2 += (g.as_slice()[i] - fd).powi(2);
                norm2 += fd * fd;
            }
        }
        if norm2 < 1e-20 {
            return Outcome::Fail(format!("instance {k} has a vanishing meta-gradient"));
        }
        worst = worst.max(diff2.sqrt() / norm2.sqrt());
    }
    verdict(
        worst <= 1e-3,
        format!("{instances} instances, worst relative error {worst:.2e} (tolerance 1e-3)"),
    )
}

// ---------- criterion 2: KL and OVL against numerical integration ----------

fn density(x: f64, m: f64, s: f64) -> f64 {
    let z = (x - m) / s;
    (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn kl_quadrature(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    let (a, b) = (m1 - 14.0 * s1, m1 + 14.0 * s1);
    simpson(
        |x| {
            let z1 = (x - m1) / s1;
            let z2 = (x - m2) / s2;
            density(x, m1, s1) * ((s2 / s1).ln() - 0.5 * z1 * z1 + 0.5 * z2 * z2)
        },
        a,
        b,
        200_000,
    )
}

fn ovl_quadrature(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    let a = (m1 - 14.0 * s1).min(m2 - 14.0 * s2);
    let b = (m1 + 14.0 * s1).max(m2 + 14.0 * s2);
    simpson(|x| density(x, m1, s1).min(density(x, m2, s2)), a, b, 400_000)
}

fn criterion_2() -> Outcome {
    let mut rng = stream(2, Purpose::Synthetic, 0);
    let (mut kl_err, mut ovl_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let m1 = rng.random_range(-3.0..3.0);
        let m2 = rng.random_range(-3.0..3.0);
        let s1 = rng.random_range(0.2..3.0);
        let s2 = rng.random_range(0.2..3.0);
        kl_err = kl_err.max((kl_normal(m1, s1, m2, s2) - kl_quadrature(m1, s1, m2, s2)).abs());
        ovl_err = ovl_err.max((ovl_normal(m1, s1, m2, s2) - ovl_quadrature(m1, s1, m2, s2)).abs());
    }
    let phi = StatNormal::new(0.0, 1.0).unwrap().cdf(-0.5);
    let kl_ref = (kl_normal(0.0, 1.0, 1.0, 1.0) - 0.5).abs();
    let ovl_ref = (ovl_normal(0.0, 1.0, 1.0, 1.0) - 2.0 * phi).abs();
    verdict(
        kl_err <= 1e-6 && ovl_err <= 1e-4 && kl_ref <= 1e-12 && ovl_ref <= 1e-12,
        format!(
            "100 draws, max |KL err| {kl_err:.1e} (tol 1e-6), max |OVL err| {ovl_err:.1e} (tol 1e-4); \
             closed-form references off by {kl_ref:.1e} and {ovl_ref:.1e}"
        ),
    )
}

// ---------- criterion 3: frozen uniform rescaler reduces to plain training ----------

fn criterion_3() -> Outcome {
    let cfg = SyntheticConfig {
        samples: 400,
        dim: 10,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&cfg, &mut stream(3, Purpose::Synthetic, 0)).unwrap();
    let set = LabeledSet::noisy(&ds.samples);
    let model = ModelConfig::linear(10, 2, 0.1);
    let base = TrainerConfig {
        seed: 3,
        batch_size: 8,
        ..TrainerConfig::default()
    };
    let mut plain = Trainer::new(
        TrainerConfig {
            mode: Mode::None,
            ..base.clone()
        },
        model.clone(),
    )
    .unwrap();
    let mut storm = Trainer::new(
        TrainerConfig {
            mode: Mode::Storm,
            freeze_rescaler: true,
            weight_scale: 2.0,
            ..base
        },
        model,
    )
    .unwrap();
    let steps = 50;
    for s in 0..steps {
        let idx: Vec<usize> = (0..8).map(|i| (s * 8 + i) % set.len()).collect();
        let batch = set.batch(&idx);
        for t in [&mut plain, &mut storm] {
            let mut u = t.begin_unroll().unwrap();
            t.inner_step(&mut u, &batch).unwrap();
        }
        let same = plain.model.theta.iter().zip(&storm.model.theta).all(|(a, b)| {
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if !same {
            return Outcome::Fail(format!("trajectories diverge at step {s}"));
        }
    }
    Outcome::Pass(format!("{steps} steps bit-identical"))
}

// ---------- criteria 4 and 5: real-corpus reproduction ----------

struct Paired {
    storm: Vec<f64>,
    none: Vec<f64>,
}

impl Paired {
    fn means(&self) -> (f64, f64) {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (mean(&self.storm), mean(&self.none))
    }
}

fn mean_over_folds(results: &[FoldResult]) -> f64 {
    results.iter().map(|f| f.headline).sum::<f64>() / results.len() as f64
}

/// Headline metric of STORM and of unweighted training per seed, in percent.
fn run_paired(spec: &ExperimentSpec) -> Result<Paired, String> {
    let raw = load_raw(spec, &data_dir()).map_err(|e| e.to_string())?;
    let mut out = Paired {
        storm: Vec::new(),
        none: Vec::new(),
    };
    for &seed in &spec.seeds {
        let folds = prepare_folds(spec, raw.as_ref(), seed).map_err(|e| e.to_string())?;
        for (mode, dst) in [(Mode::Storm, &mut out.storm), (Mode::None, &mut out.none)] {
            let rs = folds
                .iter()
                .map(|f| run_fold(spec, mode, f, seed).map(|r| r.result))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            dst.push(100.0 * mean_over_folds(&rs));
        }
    }
    Ok(out)
}

fn corpus(name: &str) -> Result<ExperimentSpec, Outcome> {
    let spec = preset(name).unwrap();
    let path = data_dir().join(&spec.dataset.path);
    if path.exists() {
        return Ok(spec);
    }
    let msg = format!("{} not found (set STORM_DATA_DIR)", path.display());
    if std::env::var_os("STORM_REQUIRE_DATASETS").is_some() {
        Err(Outcome::Fail(msg))
    } else {
        Err(Outcome::NotRun(msg))
    }
}

fn criterion_4() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for (name, base_ref, storm_ref, min_gap) in [("sms-30", 63.6, 82.3, 9.0), ("sms-10", 76.9, 88.1, 5.0)] {
        let spec = match corpus(name) {
            Ok(s) => s,
            Err(o) => return o,
        };
        let p = match run_paired(&spec) {
            Ok(p) => p,
            Err(e) => return Outcome::Fail(e),
        };
        let (s, b) = p.means();
        ok &= (b - base_ref).abs() <= 6.0 && (s - storm_ref).abs() <= 6.0 && s - b >= min_gap;
        details.push(format!("{name}: F1 storm {s:.1} vs none {b:.1} (refs {storm_ref} / {base_ref} ± 6, gap ≥ {min_gap})"));
    }
    verdict(ok, details.join("; "))
}

fn criterion_5() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for name in ["youtube-30", "youtube-0"] {
        let spec = match corpus(name) {
            Ok(s) => s,
            Err(o) => return o,
        };
        let p = match run_paired(&spec) {
            Ok(p) => p,
            Err(e) => return Outcome::Fail(e),
        };
        let (s, b) = p.means();
        if name == "youtube-30" {
            ok &= s > b;
        } else {
            ok &= (s - b).abs() <= 1.5;
        }
        details.push(format!("{name}: accuracy storm {s:.1} vs none {b:.1}"));
    }
    verdict(ok, details.join("; "))
}

// ---------- criteria 6 to 9: synthetic regime ----------

struct Synthetic {
    storm: Vec<FoldResult>,
    none: Vec<FoldResult>,
    no_meta: Vec<FoldResult>,
    no_rescale: Vec<FoldResult>,
}

fn run_preset(name: &str, mode: Mode) -> Vec<FoldResult> {
    let spec = preset(name).unwrap();
    let mut out = Vec::new();
    for &seed in &spec.seeds {
        let folds = prepare_folds(&spec, None, seed).unwrap();
        for f in &folds {
            out.push(run_fold(&spec, mode, f, seed).unwrap().result);
        }
    }
    out
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_6(s: &Synthetic) -> Outcome {
    let acc_s = mean(s.storm.iter().map(|r| r.accuracy));
    let acc_n = mean(s.none.iter().map(|r| r.accuracy));
    let mut auc_ok = true;
    let mut aucs = Vec::new();
    for r in &s.storm {
        let (first, last) = match (r.auc_by_epoch.first(), r.auc_by_epoch.last()) {
            (Some(Some(a)), Some(Some(b))) => (*a, *b),
            _ => return Outcome::Fail("missing AUC".into()),
        };
        auc_ok &= last > 0.7 && last > first;
        aucs.push(format!("{first:.3}→{last:.3}"));
    }
    verdict(
        acc_s > acc_n && auc_ok,
        format!(
            "{} seeds, accuracy storm {acc_s:.4} vs none {acc_n:.4}; AUC first→final per seed [{}]",
            s.storm.len(),
            aucs.join(", ")
        ),
    )
}

fn criterion_7(s: &Synthetic) -> Outcome {
    let mut ok = true;
    let mut gaps = Vec::new();
    for r in &s.storm {
        let (first, last) = match (r.gap_by_epoch.first(), r.gap_by_epoch.last()) {
            (Some(Some(a)), Some(Some(b))) => (*a, *b),
            _ => return Outcome::Fail("missing weight gap".into()),
        };
        ok &= last > 0.0 && last > first;
        gaps.push(format!("{first:.3}→{last:.3}"));
    }
    verdict(ok, format!("clean − noisy weight, first→final epoch per seed [{}]", gaps.join(", ")))
}

fn criterion_8(s: &Synthetic) -> Outcome {
    let noisy_s = mean(s.storm.iter().map(|r| r.ece_noisy));
    let noisy_n = mean(s.none.iter().map(|r| r.ece_noisy));
    let clean_s = mean(s.storm.iter().map(|r| r.ece_clean));
    let clean_n = mean(s.none.iter().map(|r| r.ece_clean));
    verdict(
        noisy_s > noisy_n && clean_s < clean_n,
        format!(
            "ECE vs noisy labels storm {noisy_s:.4} > none {noisy_n:.4}; vs clean labels storm {clean_s:.4} < none {clean_n:.4}"
        ),
    )
}

fn criterion_9(s: &Synthetic) -> Outcome {
    let full = mean(s.storm.iter().map(|r| r.accuracy));
    let a = mean(s.no_meta.iter().map(|r| r.accuracy));
    let b = mean(s.no_rescale.iter().map(|r| r.accuracy));
    verdict(
        a < full && b < full,
        format!("accuracy storm {full:.4}, w/o meta learning {a:.4}, w/o meta loss rescaling {b:.4}"),
    )
}

// ---------- criterion 10: exact noise injection ----------

fn criterion_10() -> Outcome {
    let n = 1000;
    let mut rng = stream(10, Purpose::Synthetic, 0);
    let clean: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let mut details = Vec::new();
    for (k, rate) in [0.1, 0.2, 0.3, 0.4].into_iter().enumerate() {
        let (noisy, mask) = inject_uniform_noise(&clean, 3, rate, &mut stream(10, Purpose::Noise, k as u64)).unwrap();
        let count = mask.iter().filter(|&&m| m).count();
        let expected = (rate * n as f64).round() as usize;
        let flipped = (0..n).all(|i| mask[i] == (noisy[i] != clean[i]));
        if count != expected || !flipped {
            return Outcome::Fail(format!("rate {rate}: {count} flips, expected {expected}"));
        }
        details.push(format!("{rate}: {count}"));
    }
    Outcome::Pass(format!("flip counts {}", details.join(", ")))
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let synthetic = Synthetic {
        storm: run_preset("synthetic-30-storm", Mode::Storm),
        none: run_preset("synthetic-30-none", Mode::None),
        no_meta: run_preset("synthetic-30-no-meta-learning", Mode::Storm),
        no_rescale: run_preset("synthetic-30-no-meta-rescaling", Mode::Storm),
    };
    let results = [
        ("meta-gradient matches finite differences", criterion_1()),
        ("KL and OVL match numerical integration", criterion_2()),
        ("frozen uniform rescaler reduces to plain training", criterion_3()),
        ("SMS reproduction", criterion_4()),
        ("Youtube reproduction", criterion_5()),
        ("synthetic accuracy and noise-detection AUC", criterion_6(&synthetic)),
        ("clean-minus-noisy weight gap grows", criterion_7(&synthetic)),
        ("calibration against noisy and clean labels", criterion_8(&synthetic)),
        ("ablations score below full model", criterion_9(&synthetic)),
        ("noise injection is exact", criterion_10()),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::NotRun(d) => ("NOT RUN", d),
        };
        println!("criterion {:>2} [{tag}] {name}: {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
