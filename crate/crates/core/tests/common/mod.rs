//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use ggpfn::infer::{pr_curve, PrPoint};
use ggpfn::{ops, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Same-padded 2D convolution, six nested loops.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [c, h, wd] = x.shape()[..] else { panic!() };
    let [k, _, kh, kw] = w.shape()[..] else { panic!() };
    let mut out = vec![0.0; k * h * wd];
    for ko in 0..k {
        for y in 0..h {
            for xo in 0..wd {
                let mut acc = b.data()[ko];
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = y as isize + ky as isize - (kh / 2) as isize;
                            let ix = xo as isize + kx as isize - (kw / 2) as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.data()[((ko * c + ci) * kh + ky) * kw + kx]
                                * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(ko * h + y) * wd + xo] = acc;
            }
        }
    }
    Tensor::new(vec![k, h, wd], out).unwrap()
}

/// Depth-valid, H/W same-padded 3D convolution, seven nested loops.
pub fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [c, d, h, wd] = x.shape()[..] else { panic!() };
    let [k, _, kd, kh, kw] = w.shape()[..] else { panic!() };
    let od = d + 1 - kd;
    let mut out = vec![0.0; k * od * h * wd];
    for ko in 0..k {
        for z in 0..od {
            for y in 0..h {
                for xo in 0..wd {
                    let mut acc = b.data()[ko];
                    for ci in 0..c {
                        for dz in 0..kd {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = y as isize + ky as isize - (kh / 2) as isize;
                                    let ix = xo as isize + kx as isize - (kw / 2) as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[(((ko * c + ci) * kd + dz) * kh + ky) * kw + kx]
                                        * x.data()[((ci * d + z + dz) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[((ko * od + z) * h + y) * wd + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![k, od, h, wd], out).unwrap()
}

/// 3×3, stride 2, padding 1.
pub fn naive_conv2d_stride2(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [c, h, wd] = x.shape()[..] else { panic!() };
    let k = w.shape()[0];
    let (oh, ow) = (h.div_ceil(2), wd.div_ceil(2));
    let mut out = vec![0.0; k * oh * ow];
    for ko in 0..k {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[ko];
                for ci in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = ((2 * oy + ky) as isize - 1, (2 * ox + kx) as isize - 1);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.data()[((ko * c + ci) * 3 + ky) * 3 + kx]
                                * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(ko * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![k, oh, ow], out).unwrap()
}

/// 2×2 stride-2 transposed convolution as an explicit scatter.
pub fn naive_transposed(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [c, h, wd] = x.shape()[..] else { panic!() };
    let k = w.shape()[1];
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = vec![0.0; k * oh * ow];
    for ko in 0..k {
        out[ko * oh * ow..][..oh * ow].fill(b.data()[ko]);
    }
    for ci in 0..c {
        for y in 0..h {
            for xo in 0..wd {
                let v = x.data()[(ci * h + y) * wd + xo];
                for ko in 0..k {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            out[(ko * oh + 2 * y + dy) * ow + 2 * xo + dx] +=
                                w.data()[((ci * k + ko) * 2 + dy) * 2 + dx] * v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![k, oh, ow], out).unwrap()
}

/// Precision/recall by counting at each threshold.
pub fn naive_pr(v: &[f32], gt: &[u8], n: usize) -> Vec<PrPoint> {
    let positives = gt.iter().filter(|&&g| g != 0).count();
    (0..n)
        .map(|i| {
            let threshold = (i + 1) as f64 / (n + 1) as f64;
            let (mut tp, mut pred) = (0usize, 0usize);
            for (&p, &g) in v.iter().zip(gt) {
                if p as f64 >= threshold {
                    pred += 1;
                    tp += (g != 0) as usize;
                }
            }
            let precision = if pred == 0 { 1.0 } else { tp as f64 / pred as f64 };
            let recall = tp as f64 / positives as f64;
            let f_score = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            PrPoint { threshold, precision, recall, f_score }
        })
        .collect()
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `max |a − b| / max(1, |b|)`.
pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

fn odd(rng: &mut impl Rng) -> usize {
    [1, 3, 5][rng.random_range(0..3)]
}

/// Worst relative error of each operator against its reference over
/// `instances` random problems: `(name, error)`.
pub fn oracle_errors(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    for _ in 0..instances {
        let (c, k) = (rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let tape = Tape::new();

        let (kh, kw) = (odd(&mut rng), odd(&mut rng));
        let x = random_tensor(&[c, h, w], &mut rng);
        let wt = random_tensor(&[k, c, kh, kw], &mut rng);
        let b = random_tensor(&[k], &mut rng);
        let got = ops::conv2d(tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone())).unwrap();
        worst[0] = worst[0].max(rel_err(&got.value(), &naive_conv2d(&x, &wt, &b)));

        let kd = odd(&mut rng);
        let d = kd + rng.random_range(0..4);
        let x = random_tensor(&[c, d, h, w], &mut rng);
        let wt = random_tensor(&[k, c, kd, kh, kw], &mut rng);
        let got =
            ops::conv3d_dvalid(tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone())).unwrap();
        worst[1] = worst[1].max(rel_err(&got.value(), &naive_conv3d(&x, &wt, &b)));

        let x = random_tensor(&[c, h, w], &mut rng);
        let wt = random_tensor(&[c, k, 2, 2], &mut rng);
        let got = ops::transposed_conv2d(tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()))
            .unwrap();
        worst[2] = worst[2].max(rel_err(&got.value(), &naive_transposed(&x, &wt, &b)));

        let wt = random_tensor(&[k, c, 3, 3], &mut rng);
        let got =
            ops::conv2d_stride2(tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone())).unwrap();
        worst[3] = worst[3].max(rel_err(&got.value(), &naive_conv2d_stride2(&x, &wt, &b)));

        let n = rng.random_range(1..200);
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut gt: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
        gt[0] = 1;
        let nt = rng.random_range(1..20);
        let (a, e) = (pr_curve(&v, &gt, nt).unwrap(), naive_pr(&v, &gt, nt));
        for (p, q) in a.iter().zip(&e) {
            for (x, y) in
                [(p.threshold, q.threshold), (p.precision, q.precision), (p.recall, q.recall), (p.f_score, q.f_score)]
            {
                worst[4] = worst[4].max((x - y).abs() / y.abs().max(1.0));
            }
        }
    }
    ["conv2d", "conv3d_dvalid", "transposed_conv2d", "conv2d_stride2", "pr_curve"].into_iter().zip(worst).collect()
}
