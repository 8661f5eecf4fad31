//! Finite-difference checks of every tape primitive and composite loss.
//!
//! The analytic gradients come from the tape; the numeric ones from central
//! differences of independent naive `f64` forward implementations.

use dfnas_core::rng::{rng_for, Rng};
use dfnas_core::tape::{BnMode, Tape, Var, BN_EPS};
use dfnas_core::Tensor;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

const H: f64 = 1e-3;
const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-6;
const SHAPES: u64 = 20;
const MAX_PROBES: usize = 48;

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Values at least `gap` apart in a random order, so kinks stay out of reach of `H`.
fn spaced(shape: &[usize], gap: f32, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let data = idx.iter().map(|&k| (k as f32 - n as f32 / 2.0 + 0.5) * gap).collect();
    Tensor::new(shape, data).unwrap()
}

fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    normal(shape, rng).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

fn probs(rows: usize, cols: usize, zeros: bool, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut row: Vec<f64> = (0..cols)
            .map(|_| if zeros && rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.05..1.0) })
            .collect();
        if row.iter().all(|&v| v == 0.0) {
            row[0] = 1.0;
        }
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| (v / s) as f32));
    }
    Tensor::new(&[rows, cols], data).unwrap()
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Checks `d/dinputs Σ op(inputs)·R` for a fixed random `R`.
fn check<T, O>(name: &str, inputs: &[Tensor], tape_op: T, oracle: O, rng: &mut Rng)
where
    T: Fn(&mut Tape, &[Var]) -> Var,
    O: Fn(&[Vec<f64>]) -> Vec<f64>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = tape_op(&mut tape, &vars);
    let out = tape.value(y).clone();
    let weights: Vec<f64> = (0..out.len()).map(|_| rng.random_range(0.5..1.5)).collect();
    let base: Vec<Vec<f64>> = inputs.iter().map(to_f64).collect();
    let expected = oracle(&base);
    assert_eq!(expected.len(), out.len(), "{name}: oracle output length");
    for (i, (&a, &b)) in out.data().iter().zip(&expected).enumerate() {
        assert!(
            (a as f64 - b).abs() <= 1e-4 * (1.0 + b.abs()),
            "{name}: forward element {i}: tape {a} vs oracle {b}"
        );
    }
    let r = tape.constant(Tensor::new(out.shape(), weights.iter().map(|&v| v as f32).collect()).unwrap());
    let weighted = tape.mul(y, r).unwrap();
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).unwrap();
    let objective = |xs: &[Vec<f64>]| oracle(xs).iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap_or_else(|| panic!("{name}: no gradient for input {k}"));
        assert_eq!(analytic.shape(), input.shape(), "{name}: gradient shape of input {k}");
        let probes: Vec<usize> = if input.len() <= MAX_PROBES {
            (0..input.len()).collect()
        } else {
            (0..MAX_PROBES).map(|_| rng.random_range(0..input.len())).collect()
        };
        for e in probes {
            let mut xs = base.clone();
            xs[k][e] = base[k][e] + H;
            let up = objective(&xs);
            xs[k][e] = base[k][e] - H;
            let down = objective(&xs);
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[e] as f64;
            let scale = a.abs().max(numeric.abs());
            let ok = if scale < ABS_FLOOR {
                (a - numeric).abs() < ABS_FLOOR
            } else {
                (a - numeric).abs() / scale < REL_TOL
            };
            assert!(
                ok,
                "{name}: input {k} shape {:?} element {e}: analytic {a} vs numeric {numeric}",
                input.shape()
            );
        }
    }
}

fn dims(rng: &mut Rng) -> (usize, usize, usize, usize) {
    (
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(2..=6),
        rng.random_range(2..=6),
    )
}

fn conv_oracle(x: &[f64], w: &[f64], b: Option<&[f64]>, xs: [usize; 4], o: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
    let [n, c, h, wd] = xs;
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (wd + 2 * p - k) / s + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for bi in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bi * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn depthwise_oracle(x: &[f64], w: &[f64], b: Option<&[f64]>, xs: [usize; 4], k: usize, s: usize, p: usize) -> Vec<f64> {
    let [n, c, h, wd] = xs;
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (wd + 2 * p - k) / s + 1;
    let mut out = vec![0.0; n * c * ho * wo];
    for bi in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[ch]);
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += x[((bi * c + ch) * h + iy as usize) * wd + ix as usize] * w[(ch * k + ky) * k + kx];
                        }
                    }
                    out[((bi * c + ch) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn moments(x: &[f64], [n, c, h, w]: [usize; 4]) -> (Vec<f64>, Vec<f64>) {
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals = || (0..n).flat_map(move |b| (0..h * w).map(move |i| ((b * c + ch) * h * w) + i));
        mean[ch] = vals().map(|i| x[i]).sum::<f64>() / m;
        var[ch] = vals().map(|i| (x[i] - mean[ch]).powi(2)).sum::<f64>() / m;
    }
    (mean, var)
}

fn bn_oracle(x: &[f64], g: &[f64], b: &[f64], xs: [usize; 4], stats: Option<(&[f64], &[f64])>) -> Vec<f64> {
    let [_, c, h, w] = xs;
    let (mean, var) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => moments(x, xs),
    };
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / (h * w)) % c;
            g[ch] * (v - mean[ch]) / (var[ch] + BN_EPS as f64).sqrt() + b[ch]
        })
        .collect()
}

fn log_softmax_oracle(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter().map(move |v| v - lse).collect::<Vec<_>>()
        })
        .collect()
}

fn tv_oracle(x: &[f64], [n, c, h, w]: [usize; 4]) -> f64 {
    let mut t = 0.0;
    for p in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                let v = x[(p * h + i) * w + j];
                if i + 1 < h {
                    t += (x[(p * h + i + 1) * w + j] - v).powi(2);
                }
                if j + 1 < w {
                    t += (x[(p * h + i) * w + j + 1] - v).powi(2);
                }
            }
        }
    }
    t
}

fn stat_distance_oracle(x: &[f64], xs: [usize; 4], rm: &[f64], rv: &[f64]) -> f64 {
    let (mean, var) = moments(x, xs);
    let dm = mean.iter().zip(rm).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let dv = var.iter().zip(rv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    dm + dv
}

fn shape4(t: &Tensor) -> [usize; 4] {
    let (n, c, h, w) = t.nchw().unwrap();
    [n, c, h, w]
}

pub fn dense() {
    let mut rng = rng_for(1, "gradcheck/dense", 0);
    for _ in 0..SHAPES {
        let (n, f, u) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
        let inputs = [normal(&[n, f], &mut rng), normal(&[u, f], &mut rng), normal(&[u], &mut rng)];
        check(
            "dense",
            &inputs,
            |t, v| t.dense(v[0], v[1], Some(v[2])).unwrap(),
            |xs| {
                let mut out = vec![0.0; n * u];
                for i in 0..n {
                    for j in 0..u {
                        out[i * u + j] = xs[2][j] + (0..f).map(|k| xs[0][i * f + k] * xs[1][j * f + k]).sum::<f64>();
                    }
                }
                out
            },
            &mut rng,
        );
    }
}

pub fn conv2d() {
    let mut rng = rng_for(1, "gradcheck/conv2d", 0);
    for _ in 0..SHAPES {
        let (n, c, h, w) = dims(&mut rng);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let s = rng.random_range(1..=2);
        let p = k / 2;
        let o = rng.random_range(1..=3);
        let bias = rng.random_bool(0.5);
        let mut inputs = vec![normal(&[n, c, h, w], &mut rng), normal(&[o, c, k, k], &mut rng)];
        if bias {
            inputs.push(normal(&[o], &mut rng));
        }
        let xs = [n, c, h, w];
        check(
            "conv2d",
            &inputs,
            |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), s, p).unwrap(),
            |a| conv_oracle(&a[0], &a[1], a.get(2).map(|b| b.as_slice()), xs, o, k, s, p),
            &mut rng,
        );
    }
}

pub fn depthwise_conv2d() {
    let mut rng = rng_for(1, "gradcheck/depthwise", 0);
    for _ in 0..SHAPES {
        let (n, c, h, w) = dims(&mut rng);
        let k = [1, 3][rng.random_range(0..2)];
        let s = rng.random_range(1..=2);
        let p = k / 2;
        let inputs = [normal(&[n, c, h, w], &mut rng), normal(&[c, 1, k, k], &mut rng), normal(&[c], &mut rng)];
        let xs = [n, c, h, w];
        check(
            "depthwise_conv2d",
            &inputs,
            |t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]), s, p).unwrap(),
            |a| depthwise_oracle(&a[0], &a[1], Some(&a[2]), xs, k, s, p),
            &mut rng,
        );
    }
}

pub fn relu() {
    let mut rng = rng_for(1, "gradcheck/relu", 0);
    for _ in 0..SHAPES {
        let (n, c, h, w) = dims(&mut rng);
        let inputs = [away_from_zero(&[n, c, h, w], &mut rng)];
        check(
            "relu",
            &inputs,
            |t, v| t.relu(v[0]),
            |a| a[0].iter().map(|v| v.max(0.0)).collect(),
            &mut rng,
        );
    }
}

pub fn max_pool2x2() {
    let mut rng = rng_for(1, "gradcheck/maxpool", 0);
    for _ in 0..SHAPES {
        let (n, c, h, w) = dims(&mut rng);
        let inputs = [spaced(&[n, c, h, w], 0.01, &mut rng)];
        check(
            "max_pool2x2",
            &inputs,
            |t, v| t.max_pool2x2(v[0]).unwrap(),
            |a| {
                let (ho, wo) = (h / 2, w / 2);
                let mut out = Vec::new();
                for p in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let at = |dy: usize, dx: usize| a[0][(p * h + 2 * oy + dy) * w + 2 * ox + dx];
                            out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
                        }
                    }
                }
                out
            },
            &mut rng,
        );
    }
}

pub fn global_avg_pool() {
    let mut rng = rng_for(1, "gradcheck/gap", 0);
    for _ in 0..SHAPES {
        let (n, c, h, w) = dims(&mut rng);
        let inputs = [normal(&[n, c, h, w], &mut rng)];
        check(
            "global_avg_pool",
            &inputs,
            |t, v| t.global_avg_pool(v[0]).unwrap(),
            |a| a[0].chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect(),
            &mut rng,
        );
    }
}

pub fn batchnorm2d_train() {
    let mut rng = rng_for(1, "gradcheck/bn-train", 0);
    for _ in 0..SHAPES {
        let (n, c, h, w) = dims(&mut rng);
        let n = n.max(2);
        let inputs = [
            normal(&[n, c, h, w], &mut rng),
            normal(&[c], &mut rng),
            normal(&[c], &mut rng),
        ];
        let xs = [n, c, h, w];
        let (rm, rv) = (vec![0.0f32; c], vec![1.0f32; c]);
        check(
            "batchnorm2d/train",
            &inputs,
            |t, v| t.batchnorm2d(v[0], v[1], v[2], &rm, &rv, BnMode::Train).unwrap().0,
            |a| bn_oracle(&a[0], &a[1], &a[2], xs, None),
            &mut rng,
        );
    }
}

pub fn batchnorm2d_eval() {
    let mut rng = rng_for(1, "gradcheck/bn-eval", 0);
    for _ in 0..SHAPES {
        let (n, c, h, w) = dims(&mut rng);
        let inputs = [
            normal(&[n, c, h, w], &mut rng),
            normal(&[c], &mut rng),
            normal(&[c], &mut rng),
        ];
        let rm: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rv: Vec<f32> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
        let (rm64, rv64) = (
            rm.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            rv.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        );
        let xs = [n, c, h, w];
        check(
            "batchnorm2d/eval",
            &inputs,
            |t, v| t.batchnorm2d(v[0], v[1], v[2], &rm, &rv, BnMode::Eval).unwrap().0,
            |a| bn_oracle(&a[0], &a[1], &a[2], xs, Some((&rm64, &rv64))),
            &mut rng,
        );
    }
}

pub fn softmax_and_log_softmax() {
    let mut rng = rng_for(1, "gradcheck/softmax", 0);
    for _ in 0..SHAPES {
        let (r, c) = (rng.random_range(1..=4), rng.random_range(2..=7));
        let inputs = [normal(&[r, c], &mut rng)];
        check(
            "softmax",
            &inputs,
            |t, v| t.softmax(v[0]).unwrap(),
            |a| log_softmax_oracle(&a[0], c).iter().map(|v| v.exp()).collect(),
            &mut rng,
        );
        check(
            "log_softmax",
            &inputs,
            |t, v| t.log_softmax(v[0]).unwrap(),
            |a| log_softmax_oracle(&a[0], c),
            &mut rng,
        );
    }
}

pub fn elementwise() {
    let mut rng = rng_for(1, "gradcheck/elementwise", 0);
    for _ in 0..SHAPES {
        let (n, c, h, w) = dims(&mut rng);
        let shape = [n, c, h, w];
        let inputs = [normal(&shape, &mut rng), normal(&shape, &mut rng)];
        check(
            "add",
            &inputs,
            |t, v| t.add(v[0], v[1]).unwrap(),
            |a| a[0].iter().zip(&a[1]).map(|(p, q)| p + q).collect(),
            &mut rng,
        );
        check(
            "mul",
            &inputs,
            |t, v| t.mul(v[0], v[1]).unwrap(),
            |a| a[0].iter().zip(&a[1]).map(|(p, q)| p * q).collect(),
            &mut rng,
        );
        let f: f32 = rng.random_range(-2.0..2.0);
        check(
            "scale",
            &inputs[..1],
            |t, v| t.scale(v[0], f),
            |a| a[0].iter().map(|v| v * f as f64).collect(),
            &mut rng,
        );
        check("sum", &inputs[..1], |t, v| t.sum(v[0]), |a| vec![a[0].iter().sum()], &mut rng);
    }
}

pub fn crop_and_pad() {
    let mut rng = rng_for(1, "gradcheck/crop", 0);
    for _ in 0..SHAPES {
        let (n, c, h, w) = dims(&mut rng);
        let (ch, cw) = (rng.random_range(1..=h), rng.random_range(1..=w));
        let (top, left) = (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw));
        let inputs = [normal(&[n, c, h, w], &mut rng)];
        check(
            "crop",
            &inputs,
            |t, v| t.crop(v[0], top, left, ch, cw).unwrap(),
            |a| {
                let mut out = Vec::new();
                for p in 0..n * c {
                    for y in top..top + ch {
                        for x in left..left + cw {
                            out.push(a[0][(p * h + y) * w + x]);
                        }
                    }
                }
                out
            },
            &mut rng,
        );
        let pad = rng.random_range(0..=2);
        check(
            "pad",
            &inputs,
            |t, v| t.pad(v[0], pad).unwrap(),
            |a| {
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let mut out = vec![0.0; n * c * ph * pw];
                for p in 0..n * c {
                    for y in 0..h {
                        for x in 0..w {
                            out[(p * ph + y + pad) * pw + x + pad] = a[0][(p * h + y) * w + x];
                        }
                    }
                }
                out
            },
            &mut rng,
        );
    }
}

pub fn select_row_and_mixture() {
    let mut rng = rng_for(1, "gradcheck/mixture", 0);
    for _ in 0..SHAPES {
        let (r, c) = (rng.random_range(1..=4), rng.random_range(1..=6));
        let row = rng.random_range(0..r);
        check(
            "select_row",
            &[normal(&[r, c], &mut rng)],
            |t, v| t.select_row(v[0], row).unwrap(),
            |a| a[0][row * c..(row + 1) * c].to_vec(),
            &mut rng,
        );
        let (n, ch, h, w) = dims(&mut rng);
        let k = rng.random_range(1..=4);
        let mut inputs: Vec<Tensor> = (0..k).map(|_| normal(&[n, ch, h, w], &mut rng)).collect();
        inputs.push(normal(&[k], &mut rng));
        check(
            "mixture",
            &inputs,
            |t, v| t.mixture(&v[..k], v[k]).unwrap(),
            |a| {
                (0..a[0].len())
                    .map(|i| (0..k).map(|j| a[k][j] * a[j][i]).sum())
                    .collect()
            },
            &mut rng,
        );
    }
}

pub fn total_variation() {
    let mut rng = rng_for(1, "gradcheck/tv", 0);
    for _ in 0..SHAPES {
        let (n, c, h, w) = dims(&mut rng);
        let inputs = [normal(&[n, c, h, w], &mut rng)];
        let xs = shape4(&inputs[0]);
        check(
            "total_variation",
            &inputs,
            |t, v| t.total_variation(v[0]).unwrap(),
            |a| vec![tv_oracle(&a[0], xs)],
            &mut rng,
        );
    }
}

pub fn cross_entropy_soft_and_kl() {
    let mut rng = rng_for(1, "gradcheck/ce", 0);
    for _ in 0..SHAPES {
        let (r, c) = (rng.random_range(1..=5), rng.random_range(2..=8));
        let targets = probs(r, c, true, &mut rng);
        let tgt = to_f64(&targets);
        let inputs = [normal(&[r, c], &mut rng)];
        check(
            "cross_entropy_soft",
            &inputs,
            |t, v| t.cross_entropy_soft(v[0], &targets).unwrap(),
            |a| {
                let ls = log_softmax_oracle(&a[0], c);
                vec![-ls.iter().zip(&tgt).map(|(l, p)| l * p).sum::<f64>() / r as f64]
            },
            &mut rng,
        );
        check(
            "kl_divergence",
            &inputs,
            |t, v| t.kl_divergence(v[0], &targets).unwrap(),
            |a| {
                let ls = log_softmax_oracle(&a[0], c);
                let kl: f64 = ls
                    .iter()
                    .zip(&tgt)
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(l, &p)| p * (p.ln() - l))
                    .sum();
                vec![kl / r as f64]
            },
            &mut rng,
        );
    }
}

pub fn channel_stat_distance() {
    let mut rng = rng_for(1, "gradcheck/stat", 0);
    for _ in 0..SHAPES {
        let (n, c, h, w) = dims(&mut rng);
        let inputs = [normal(&[n, c, h, w], &mut rng)];
        let rm: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rv: Vec<f32> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
        let (rm64, rv64): (Vec<f64>, Vec<f64>) = (rm.iter().map(|&v| v as f64).collect(), rv.iter().map(|&v| v as f64).collect());
        let xs = [n, c, h, w];
        check(
            "channel_stat_distance",
            &inputs,
            |t, v| t.channel_stat_distance(v[0], &rm, &rv).unwrap(),
            |a| vec![stat_distance_oracle(&a[0], xs, &rm64, &rv64)],
            &mut rng,
        );
    }
}

/// The synthesis objective on a crop: CE + λ·TV + μ·stat distance of a conv-BN feature map.
pub fn composite_synthesis_loss() {
    let mut rng = rng_for(1, "gradcheck/composite", 0);
    for _ in 0..SHAPES {
        let (n, c, h, w) = dims(&mut rng);
        let n = n.max(2);
        let classes = rng.random_range(2..=5);
        let o = rng.random_range(1..=3);
        let conv_w = normal(&[o, c, 3, 3], &mut rng);
        let fc = normal(&[classes, o], &mut rng);
        let targets = probs(n, classes, false, &mut rng);
        let (lt, lf): (f32, f32) = (rng.random_range(0.01..0.5), rng.random_range(0.1..2.0));
        let rm: Vec<f32> = (0..o).map(|_| rng.random_range(-0.5..0.5)).collect();
        let rv: Vec<f32> = (0..o).map(|_| rng.random_range(0.5..2.0)).collect();
        let inputs = [normal(&[n, c, h, w], &mut rng)];
        let xs = [n, c, h, w];
        let (cw, fw, tg) = (to_f64(&conv_w), to_f64(&fc), to_f64(&targets));
        let (rm64, rv64): (Vec<f64>, Vec<f64>) = (rm.iter().map(|&v| v as f64).collect(), rv.iter().map(|&v| v as f64).collect());
        check(
            "synthesis objective",
            &inputs,
            |t, v| {
                let wv = t.constant(conv_w.clone());
                let fv = t.constant(fc.clone());
                let feat = t.conv2d(v[0], wv, None, 1, 1).unwrap();
                let stat = t.channel_stat_distance(feat, &rm, &rv).unwrap();
                let pooled = t.global_avg_pool(feat).unwrap();
                let logits = t.dense(pooled, fv, None).unwrap();
                let ce = t.cross_entropy_soft(logits, &targets).unwrap();
                let tv = t.total_variation(v[0]).unwrap();
                let tv = t.scale(tv, lt);
                let stat = t.scale(stat, lf);
                let s = t.add(ce, tv).unwrap();
                t.add(s, stat).unwrap()
            },
            |a| {
                let feat = conv_oracle(&a[0], &cw, None, xs, o, 3, 1, 1);
                let fs = [n, o, h, w];
                let pooled: Vec<f64> = feat.chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
                let logits: Vec<f64> = (0..n)
                    .flat_map(|i| {
                        let pooled = &pooled;
                        let fw = &fw;
                        (0..classes).map(move |j| (0..o).map(|k| pooled[i * o + k] * fw[j * o + k]).sum::<f64>())
                    })
                    .collect();
                let ls = log_softmax_oracle(&logits, classes);
                let ce = -ls.iter().zip(&tg).map(|(l, p)| l * p).sum::<f64>() / n as f64;
                vec![ce + lt as f64 * tv_oracle(&a[0], xs) + lf as f64 * stat_distance_oracle(&feat, fs, &rm64, &rv64)]
            },
            &mut rng,
        );
    }
}

/// Distillation loss through a conv-BN-gate-pool-dense student, checked on the weights.
pub fn composite_distillation_loss() {
    let mut rng = rng_for(1, "gradcheck/distill", 0);
    for _ in 0..SHAPES {
        let (n, c, h, w) = dims(&mut rng);
        let n = n.max(2);
        let classes = rng.random_range(2..=5);
        let o = rng.random_range(1..=3);
        let x = normal(&[n, c, h, w], &mut rng);
        let gate = normal(&[n, o, h, w], &mut rng).map(|v| 1.0 + 0.5 * v.tanh());
        let targets = probs(n, classes, true, &mut rng);
        let xs = [n, c, h, w];
        let (xv, gv, tg) = (to_f64(&x), to_f64(&gate), to_f64(&targets));
        let inputs = [
            normal(&[o, c, 3, 3], &mut rng),
            normal(&[o], &mut rng).map(|v| 1.0 + 0.3 * v),
            normal(&[o], &mut rng),
            normal(&[classes, o], &mut rng),
            normal(&[classes], &mut rng),
        ];
        check(
            "distillation objective",
            &inputs,
            |t, v| {
                let xi = t.constant(x.clone());
                let feat = t.conv2d(xi, v[0], None, 1, 1).unwrap();
                let (bn, _) = t
                    .batchnorm2d(feat, v[1], v[2], &vec![0.0; o], &vec![1.0; o], BnMode::Train)
                    .unwrap();
                let gi = t.constant(gate.clone());
                let bn = t.mul(bn, gi).unwrap();
                let pooled = t.global_avg_pool(bn).unwrap();
                let logits = t.dense(pooled, v[3], Some(v[4])).unwrap();
                t.kl_divergence(logits, &targets).unwrap()
            },
            |a| {
                let feat = conv_oracle(&xv, &a[0], None, xs, o, 3, 1, 1);
                let bn: Vec<f64> = bn_oracle(&feat, &a[1], &a[2], [n, o, h, w], None)
                    .iter()
                    .zip(&gv)
                    .map(|(a, b)| a * b)
                    .collect();
                let pooled: Vec<f64> = bn.chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
                let mut logits = Vec::new();
                for i in 0..n {
                    for j in 0..classes {
                        logits.push(a[4][j] + (0..o).map(|k| pooled[i * o + k] * a[3][j * o + k]).sum::<f64>());
                    }
                }
                let ls = log_softmax_oracle(&logits, classes);
                let kl: f64 = ls
                    .iter()
                    .zip(&tg)
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(l, &p)| p * (p.ln() - l))
                    .sum();
                vec![kl / n as f64]
            },
            &mut rng,
        );
    }
}

/// Every check, by name.
#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("dense", dense),
    ("conv2d", conv2d),
    ("depthwise_conv2d", depthwise_conv2d),
    ("relu", relu),
    ("max_pool2x2", max_pool2x2),
    ("global_avg_pool", global_avg_pool),
    ("batchnorm2d_train", batchnorm2d_train),
    ("batchnorm2d_eval", batchnorm2d_eval),
    ("softmax_and_log_softmax", softmax_and_log_softmax),
    ("elementwise", elementwise),
    ("crop_and_pad", crop_and_pad),
    ("select_row_and_mixture", select_row_and_mixture),
    ("total_variation", total_variation),
    ("cross_entropy_soft_and_kl", cross_entropy_soft_and_kl),
    ("channel_stat_distance", channel_stat_distance),
    ("composite_synthesis_loss", composite_synthesis_loss),
    ("composite_distillation_loss", composite_distillation_loss),
];
