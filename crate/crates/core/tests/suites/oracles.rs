//! Closed-form examples of the losses and rank statistics, and the
//! regional-update invariant of synthesis.

use dfnas_core::consistency::{spearman_rho, Rho};
use dfnas_core::model::{Architecture, LayerSpec, Model};
use dfnas_core::rng::rng_for;
use dfnas_core::synthesis::{feature_stat_loss, init_batch, regional_step, SynthesisConfig, TeacherStats};
use dfnas_core::tape::{channel_moments, softmax_rows, Tape};
use dfnas_core::Tensor;
use rand::Rng as _;

fn close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: got {a}, expected {b}");
}

fn scalar(f: impl FnOnce(&mut Tape) -> dfnas_core::Var) -> f64 {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).item() as f64
}

pub fn total_variation_examples() {
    let constant = Tensor::full(&[2, 3, 4, 5], 0.7);
    close(scalar(|t| {
        let x = t.constant(constant.clone());
        t.total_variation(x).unwrap()
    }), 0.0, 1e-6, "tv of a constant image");
    let hand = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    close(scalar(|t| {
        let x = t.constant(hand.clone());
        t.total_variation(x).unwrap()
    }), 10.0, 1e-6, "tv of [[0,1],[2,3]]");
    let mut rng = rng_for(2, "oracles/tv", 0);
    for _ in 0..20 {
        let data: Vec<f32> = (0..2 * 3 * 4 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(&[2, 3, 4, 4], data).unwrap();
        let c: f32 = rng.random_range(-3.0..3.0);
        let base = dfnas_core::tape::total_variation(&x).unwrap();
        let scaled = dfnas_core::tape::total_variation(&x.map(|v| v * c)).unwrap();
        close(scaled, (c as f64).powi(2) * base, 1e-6 * (1.0 + scaled.abs()), "tv homogeneity");
    }
}

pub fn cross_entropy_examples() {
    let ce = |logits: &[f32], target: &[f32], c: usize| {
        let l = Tensor::new(&[logits.len() / c, c], logits.to_vec()).unwrap();
        let y = Tensor::new(&[target.len() / c, c], target.to_vec()).unwrap();
        scalar(|t| {
            let x = t.constant(l);
            t.cross_entropy_soft(x, &y).unwrap()
        })
    };
    let expected = (1.0 + (-20.0f64).exp()).ln();
    close(ce(&[10.0, -10.0], &[1.0, 0.0], 2), expected, 1e-6, "ce of a confident correct prediction");
    assert!(ce(&[20.0, -20.0], &[1.0, 0.0], 2) <= ce(&[10.0, -10.0], &[1.0, 0.0], 2));
    close(ce(&[0.0; 4], &[0.25; 4], 4), 4f64.ln(), 1e-6, "ce of uniform logits and target");
    let mut rng = rng_for(2, "oracles/ce-grad", 0);
    for _ in 0..20 {
        let c = rng.random_range(2..7);
        let logits: Vec<f32> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let raw: Vec<f32> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f32 = raw.iter().sum();
        let target: Vec<f32> = raw.iter().map(|v| v / s).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, c], logits.clone()).unwrap());
        let loss = tape.cross_entropy_soft(x, &Tensor::new(&[1, c], target.clone()).unwrap()).unwrap();
        let grads = tape.backward(loss).unwrap();
        let p = softmax_rows(&logits, c);
        for k in 0..c {
            close(grads.get(x).unwrap().data()[k] as f64, (p[k] - target[k]) as f64, 1e-6, "ce gradient identity");
        }
    }
}

pub fn kl_divergence_examples() {
    let kl = |logits: &[f32], p: &[f32], c: usize| {
        let l = Tensor::new(&[logits.len() / c, c], logits.to_vec()).unwrap();
        let y = Tensor::new(&[p.len() / c, c], p.to_vec()).unwrap();
        scalar(|t| {
            let x = t.constant(l);
            t.kl_divergence(x, &y).unwrap()
        })
    };
    close(kl(&[0.0, 0.0], &[1.0, 0.0], 2), 2f64.ln(), 1e-6, "kl([1,0] || uniform)");
    let mut rng = rng_for(2, "oracles/kl", 0);
    for _ in 0..1000 {
        let c = rng.random_range(2..8);
        let logits: Vec<f32> = (0..c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let own = softmax_rows(&logits, c);
        close(kl(&logits, &own, c), 0.0, 1e-6, "kl against its own softmax");
        let raw: Vec<f32> = (0..c).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
        let s: f32 = raw.iter().sum();
        if s > 0.0 {
            let p: Vec<f32> = raw.iter().map(|v| v / s).collect();
            assert!(kl(&logits, &p, c) >= -1e-7, "kl must be non-negative");
        }
    }
}

/// Two input channels passed through an identity 1×1 conv into one BN layer.
fn probe_model(mean: [f32; 2], var: [f32; 2]) -> Model {
    let arch = Architecture {
        id: "probe".into(),
        input: (2, 2, 2),
        layers: vec![
            LayerSpec::ConvBnRelu {
                out_channels: 2,
                kernel: 1,
                stride: 1,
            },
            LayerSpec::GlobalPool,
            LayerSpec::Classifier { classes: 2 },
        ],
    };
    let mut m = Model::build(&arch, 0).unwrap();
    m.blocks[0].params[0].value = Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let bn = m.blocks[0].bn.as_mut().unwrap();
    bn.mean = mean.to_vec();
    bn.var = var.to_vec();
    m
}

pub fn feature_stat_examples() {
    let constant = Tensor::new(&[1, 2, 2, 2], vec![3.0, 3.0, 3.0, 3.0, 4.0, 4.0, 4.0, 4.0]).unwrap();
    close(
        feature_stat_loss(&probe_model([0.0, 0.0], [0.0, 0.0]), &constant).unwrap() as f64,
        5.0,
        1e-6,
        "stored mean [0,0] vs batch mean [3,4]",
    );
    let mut rng = rng_for(2, "oracles/feat", 0);
    for _ in 0..20 {
        let data: Vec<f32> = (0..3 * 2 * 2 * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::new(&[3, 2, 2, 2], data).unwrap();
        let (m, v) = channel_moments(&x);
        let matched = probe_model([m[0] as f32, m[1] as f32], [v[0] as f32, v[1] as f32]);
        close(feature_stat_loss(&matched, &x).unwrap() as f64, 0.0, 1e-6, "matched statistics");
        let other = probe_model([rng.random_range(-1.0..1.0), 0.5], [rng.random_range(0.1..2.0), 1.0]);
        assert!(feature_stat_loss(&other, &x).unwrap() >= 0.0);
    }
}

/// Average ranks by counting, then Pearson correlation of the ranks.
fn brute_force_rho(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let below = v.iter().filter(|&&b| b < a).count() as f64;
                let equal = v.iter().filter(|&&b| b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

pub fn spearman_examples() {
    let rho = |a: &[f64], b: &[f64]| spearman_rho(a, b).unwrap();
    assert_eq!(rho(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]), Rho::Value(1.0));
    assert_eq!(rho(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]), Rho::Value(-1.0));
    close(rho(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).value().unwrap(), 0.5, 1e-12, "(1,2,3) vs (1,3,2)");
    assert_eq!(rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Rho::Degenerate);
    let mut rng = rng_for(2, "oracles/spearman", 0);
    for _ in 0..1000 {
        let n = rng.random_range(2..=8);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        match (rho(&xs, &ys), brute_force_rho(&xs, &ys)) {
            (Rho::Value(a), Some(b)) => close(a, b, 1e-12, "spearman vs brute force"),
            (Rho::Degenerate, None) => {}
            (a, b) => panic!("spearman {a:?} vs brute force {b:?} on {xs:?} / {ys:?}"),
        }
        let distinct: Vec<f64> = (0..n).map(|i| i as f64 + rng.random_range(0.0..0.5)).collect();
        let mut shuffled = distinct.clone();
        for i in (1..n).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let d2: f64 = (0..n).map(|i| (distinct[i].floor() - shuffled[i].floor()).powi(2)).sum();
        let nf = n as f64;
        let closed = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        close(rho(&distinct, &shuffled).value().unwrap(), closed, 1e-12, "no-ties closed form");
    }
}

/// Random small teacher and a 40×40 canvas with a 32×32 crop.
pub fn regional_update_invariant() {
    let teacher = Model::build(&Architecture::registered("student", 10).unwrap(), 3).unwrap();
    let stats = TeacherStats::read(&teacher).unwrap();
    let cfg = SynthesisConfig {
        batch_size: 2,
        seed: 11,
        ..SynthesisConfig::default()
    };
    let mut state = init_batch(&cfg, &[1, 7], 10, 0).unwrap();
    for i in 0..1000 {
        let before = state.canvas.clone();
        let (region, _) = regional_step(&mut state, &teacher, &stats, &cfg, i).unwrap();
        let (n, c, h, w) = before.nchw().unwrap();
        for plane in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    if !region.contains(y, x) {
                        let k = (plane * h + y) * w + x;
                        assert_eq!(
                            before.data()[k].to_bits(),
                            state.canvas.data()[k].to_bits(),
                            "step {i}: pixel ({y},{x}) outside {region:?} changed"
                        );
                    }
                }
            }
        }
        if i % 100 == 0 {
            state.reset_optimizer(&cfg);
        }
    }
    let whole = cfg.clone().whole_image();
    let mut state = init_batch(&whole, &[2], 10, 1).unwrap();
    for i in 0..50 {
        let (region, _) = regional_step(&mut state, &teacher, &stats, &whole, i).unwrap();
        assert_eq!((region.top, region.left), (0, 0), "canvas equal to crop forces offset 0");
    }
}

#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("total_variation", total_variation_examples),
    ("cross_entropy_soft", cross_entropy_examples),
    ("kl_divergence", kl_divergence_examples),
    ("feature_stat_loss", feature_stat_examples),
    ("spearman_rho", spearman_examples),
];
