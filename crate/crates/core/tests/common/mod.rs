//! Finite-difference gradient checks and brute-force oracles shared by the
//! integration tests and the acceptance runner.
#![allow(dead_code)]

use akhcrnet_core::layers::{
    batchnorm_backward, batchnorm_forward_train, conv2d_backward, conv2d_forward, dense_backward, dense_forward,
    dropout, dropout_backward, maxpool_backward, maxpool_forward, relu, relu_backward, BatchNormParams, ConvParams,
    DenseParams, Mode, PoolGeometry,
};
use akhcrnet_core::metrics::{precision_recall_f1, ConfusionMatrix};
use akhcrnet_core::model::{backward, forward, ArchConfig, Model};
use akhcrnet_core::objective::loss_and_logit_grad;
use akhcrnet_core::params::ParamStore;
use akhcrnet_core::preprocess::{bilinear_resize, Grid};
use akhcrnet_core::rng::{seeded_rng, SeededRng};
use akhcrnet_core::tensor::Tensor;
use rand::Rng;

/// Central-difference step in f64.
pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which an error counts as absolute rather than relative.
pub const REL_FLOOR: f64 = 1e-6;

pub fn uniform(rng: &mut SeededRng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform on `(−hi, −lo) ∪ (lo, hi)`, keeping ReLU inputs off the kink.
pub fn away_from_zero(rng: &mut SeededRng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(dims, data).unwrap()
}

/// Largest elementwise `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of `x`.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.dims());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    out
}

/// `Σ r ⊙ y`, the scalar probe through which layer outputs are checked.
pub fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Worst relative error seen over a suite of random instances.
#[derive(Debug, Clone, Copy)]
pub struct Outcome {
    pub instances: usize,
    pub worst: f64,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            instances: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, errors: &[f64]) {
        self.instances += 1;
        for &e in errors {
            self.worst = self.worst.max(e);
        }
    }
}

pub fn conv_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = seeded_rng(seed);
    let mut out = Outcome::new();
    for _ in 0..instances {
        let k = [1, 3, 5][rng.random_range(0..3)];
        let (n, h, w) = (rng.random_range(1..3), rng.random_range(2..6), rng.random_range(2..6));
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let x = uniform(&mut rng, &[n, h, w, cin], -1.0, 1.0);
        let p = ConvParams {
            kernel: uniform(&mut rng, &[k, k, cin, cout], -1.0, 1.0),
            bias: uniform(&mut rng, &[cout], -1.0, 1.0),
        };
        let r = uniform(&mut rng, &[n, h, w, cout], -1.0, 1.0);
        let g = conv2d_backward(&x, &p, &r, true).unwrap();
        let nx = numeric_grad(&x, |x| project(&conv2d_forward(x, &p).unwrap(), &r));
        let nk = numeric_grad(&p.kernel, |k| {
            let q = ConvParams {
                kernel: k.clone(),
                bias: p.bias.clone(),
            };
            project(&conv2d_forward(&x, &q).unwrap(), &r)
        });
        let nb = numeric_grad(&p.bias, |b| {
            let q = ConvParams {
                kernel: p.kernel.clone(),
                bias: b.clone(),
            };
            project(&conv2d_forward(&x, &q).unwrap(), &r)
        });
        out.record(&[
            rel_error(g.input.as_ref().unwrap(), &nx),
            rel_error(&g.kernel, &nk),
            rel_error(&g.bias, &nb),
        ]);
    }
    out
}

pub fn dense_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = seeded_rng(seed);
    let mut out = Outcome::new();
    for _ in 0..instances {
        let (n, fi, fo) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..7));
        let x = uniform(&mut rng, &[n, fi], -1.0, 1.0);
        let p = DenseParams {
            weight: uniform(&mut rng, &[fi, fo], -1.0, 1.0),
            bias: uniform(&mut rng, &[fo], -1.0, 1.0),
        };
        let r = uniform(&mut rng, &[n, fo], -1.0, 1.0);
        let g = dense_backward(&x, &p, &r).unwrap();
        let nx = numeric_grad(&x, |x| project(&dense_forward(x, &p).unwrap(), &r));
        let nw = numeric_grad(&p.weight, |w| {
            let q = DenseParams {
                weight: w.clone(),
                bias: p.bias.clone(),
            };
            project(&dense_forward(&x, &q).unwrap(), &r)
        });
        let nb = numeric_grad(&p.bias, |b| {
            let q = DenseParams {
                weight: p.weight.clone(),
                bias: b.clone(),
            };
            project(&dense_forward(&x, &q).unwrap(), &r)
        });
        out.record(&[rel_error(&g.input, &nx), rel_error(&g.weight, &nw), rel_error(&g.bias, &nb)]);
    }
    out
}

pub fn batchnorm_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = seeded_rng(seed);
    let mut out = Outcome::new();
    for i in 0..instances {
        let c = rng.random_range(1..4);
        let dims: Vec<usize> = if i % 2 == 0 {
            vec![rng.random_range(2..4), rng.random_range(1..4), rng.random_range(1..4), c]
        } else {
            vec![rng.random_range(2..6), c]
        };
        let x = uniform(&mut rng, &dims, -2.0, 2.0);
        let mut p = BatchNormParams::<f64>::new(c);
        p.gamma = uniform(&mut rng, &[c], 0.5, 1.5);
        p.beta = uniform(&mut rng, &[c], -0.5, 0.5);
        let r = uniform(&mut rng, &dims, -1.0, 1.0);
        let (_, cache) = batchnorm_forward_train(&x, &p).unwrap();
        let g = batchnorm_backward(&cache, &p.gamma, &r).unwrap();
        let nx = numeric_grad(&x, |x| project(&batchnorm_forward_train(x, &p).unwrap().0, &r));
        let ng = numeric_grad(&p.gamma, |gm| {
            let mut q = p.clone();
            q.gamma = gm.clone();
            project(&batchnorm_forward_train(&x, &q).unwrap().0, &r)
        });
        let nb = numeric_grad(&p.beta, |bt| {
            let mut q = p.clone();
            q.beta = bt.clone();
            project(&batchnorm_forward_train(&x, &q).unwrap().0, &r)
        });
        out.record(&[rel_error(&g.input, &nx), rel_error(&g.gamma, &ng), rel_error(&g.beta, &nb)]);
    }
    out
}

pub fn maxpool_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = seeded_rng(seed);
    let mut out = Outcome::new();
    for i in 0..instances {
        let geom = if i % 2 == 0 { PoolGeometry::HALVING } else { PoolGeometry::SAME_3X3 };
        let dims = [rng.random_range(1..3), rng.random_range(2..7), rng.random_range(2..7), rng.random_range(1..3)];
        // Distinct values spaced far beyond the FD step, so no window has a
        // near-tie that a perturbation could flip.
        let n: usize = dims.iter().product();
        let mut vals: Vec<f64> = (0..n).map(|k| k as f64 * 0.01).collect();
        for k in (1..n).rev() {
            vals.swap(k, rng.random_range(0..=k));
        }
        let x = Tensor::from_vec(&dims, vals).unwrap();
        let (y, map) = maxpool_forward(&x, geom).unwrap();
        let r = uniform(&mut rng, y.dims(), -1.0, 1.0);
        let g = maxpool_backward(&map, &r).unwrap();
        let nx = numeric_grad(&x, |x| project(&maxpool_forward(x, geom).unwrap().0, &r));
        out.record(&[rel_error(&g, &nx)]);
    }
    out
}

pub fn relu_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = seeded_rng(seed);
    let mut out = Outcome::new();
    for _ in 0..instances {
        let dims = [rng.random_range(1..4), rng.random_range(1..6)];
        let x = away_from_zero(&mut rng, &dims, 0.01, 2.0);
        let r = uniform(&mut rng, &dims, -1.0, 1.0);
        let g = relu_backward(&x, &r).unwrap();
        let nx = numeric_grad(&x, |x| project(&relu(x), &r));
        out.record(&[rel_error(&g, &nx)]);
    }
    out
}

pub fn dropout_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = seeded_rng(seed);
    let mut out = Outcome::new();
    for i in 0..instances {
        let dims = [rng.random_range(1..4), rng.random_range(2..9)];
        let x = uniform(&mut rng, &dims, -1.0, 1.0);
        let r = uniform(&mut rng, &dims, -1.0, 1.0);
        let mask_seed = seed * 1000 + i as u64;
        let rate = [0.25, 0.5, 0.75][i % 3];
        // Re-seeding per evaluation fixes the mask.
        let run = |x: &Tensor<f64>| dropout(x, rate, Mode::Train, &mut seeded_rng(mask_seed)).unwrap();
        let (_, mask) = run(&x);
        let g = dropout_backward(mask.as_ref(), &r).unwrap();
        let nx = numeric_grad(&x, |x| project(&run(x).0, &r));
        out.record(&[rel_error(&g, &nx)]);
    }
    out
}

pub fn softmax_cce_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = seeded_rng(seed);
    let mut out = Outcome::new();
    let empty = ParamStore::<f64>::new();
    let cfg = akhcrnet_core::objective::LossConfig::unregularized();
    for _ in 0..instances {
        let (n, c) = (rng.random_range(1..5), rng.random_range(2..8));
        let logits = uniform(&mut rng, &[n, c], -4.0, 4.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (_, g) = loss_and_logit_grad(&logits, &labels, &empty, &cfg).unwrap();
        let nl = numeric_grad(&logits, |s| loss_and_logit_grad(s, &labels, &empty, &cfg).unwrap().0.total);
        out.record(&[rel_error(&g, &nl)]);
    }
    out
}

/// End-to-end check of every parameter of the reduced network, λ > 0,
/// dropout mask fixed by re-seeding.
pub fn reduced_model_suite(instances: usize, seed: u64) -> Outcome {
    let mut out = Outcome::new();
    for i in 0..instances {
        let s = seed + i as u64;
        let model = Model::<f64>::new(&ArchConfig::reduced_clone(), s).unwrap();
        let mut rng = seeded_rng(s ^ 0xabc);
        let n = 4;
        let [h, w, c] = ArchConfig::reduced_clone().input;
        let x = uniform(&mut rng, &[n, h, w, c], 0.0, 1.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..model.graph.classes())).collect();
        let cfg = model.graph.loss_config(1e-3);
        let drop_seed = s + 77;

        let (_, cache) = forward(&model.graph, &model.store, &x, Mode::Train, &mut seeded_rng(drop_seed)).unwrap();
        let (_, grads) = backward(&model.graph, &model.store, &cache, &labels, &cfg).unwrap();
        let loss_at = |store: &ParamStore<f64>| {
            let (_, cache) = forward(&model.graph, store, &x, Mode::Train, &mut seeded_rng(drop_seed)).unwrap();
            backward(&model.graph, store, &cache, &labels, &cfg).unwrap().0.total
        };
        let names: Vec<String> = model.store.params().map(|(k, _)| k.to_string()).collect();
        let mut errors = Vec::new();
        for name in names {
            let p = model.store.param(&name).unwrap().clone();
            let mut store = model.store.clone();
            let numeric = numeric_grad(&p, |v| {
                store.set_param(&name, v.clone()).unwrap();
                loss_at(&store)
            });
            errors.push(rel_error(grads.get(&name).unwrap(), &numeric));
        }
        out.record(&errors);
    }
    out
}

pub fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [m, k] = a.rows_cols().unwrap();
    let [_, n] = b.rows_cols().unwrap();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    Tensor::from_vec(&[m, n], out).unwrap()
}

/// Direct seven-loop same-padded convolution.
pub fn naive_conv(x: &Tensor<f64>, kernel: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let [n, h, w, cin] = x.nhwc().unwrap();
    let [kh, kw, _, cout] = kernel.nhwc().unwrap();
    let mut out = Tensor::<f64>::zeros(&[n, h, w, cout]);
    for b in 0..n {
        for y in 0..h {
            for xo in 0..w {
                for co in 0..cout {
                    let mut acc = bias.data()[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for ci in 0..cin {
                                let iy = y as isize + ky as isize - (kh / 2) as isize;
                                let ix = xo as isize + kx as isize - (kw / 2) as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.get(&[b, iy as usize, ix as usize, ci]).unwrap()
                                        * kernel.get(&[ky, kx, ci, co]).unwrap();
                                }
                            }
                        }
                    }
                    let off = out.shape().offset(&[b, y, xo, co]).unwrap();
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst relative deviation of f32 conv from the f64 oracle.
pub fn conv_oracle_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let k = [1, 3, 5][rng.random_range(0..3)];
        let dims = [rng.random_range(1..4), rng.random_range(1..10), rng.random_range(1..10), rng.random_range(1..9)];
        let cout = rng.random_range(1..9);
        let x = uniform(&mut rng, &dims, -1.0, 1.0);
        let kernel = uniform(&mut rng, &[k, k, dims[3], cout], -1.0, 1.0);
        let bias = uniform(&mut rng, &[cout], -1.0, 1.0);
        let want = naive_conv(&x, &kernel, &bias);
        let p = ConvParams {
            kernel: kernel.cast::<f32>(),
            bias: bias.cast::<f32>(),
        };
        let got = conv2d_forward(&x.cast::<f32>(), &p).unwrap().cast::<f64>();
        // f32 inputs are rounded copies of the oracle's; compare on the
        // scale of the largest output.
        let scale = want.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(max_abs_diff(got.data(), want.data()) / scale);
    }
    worst
}

/// Worst relative deviation of matmul from the triple loop, both in f64.
pub fn matmul_oracle_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (m, k, n) = (rng.random_range(1..70), rng.random_range(1..70), rng.random_range(1..70));
        let a = uniform(&mut rng, &[m, k], -1.0, 1.0);
        let b = uniform(&mut rng, &[k, n], -1.0, 1.0);
        let want = naive_matmul(&a, &b);
        let got = a.matmul(&b).unwrap();
        let scale = want.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(max_abs_diff(got.data(), want.data()) / scale);
    }
    worst
}

/// Resizes random affine fields `a + b·x + c·y` and compares against the
/// field evaluated at the align-corners sample positions.
/// Single-precision GEMM against the triple loop run in f64 on the same
/// (already f32-representable) inputs.
pub fn matmul_f32_oracle_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (m, k, n) = (rng.random_range(1..70), rng.random_range(1..70), rng.random_range(1..70));
        let a = uniform(&mut rng, &[m, k], -1.0, 1.0).cast::<f32>();
        let b = uniform(&mut rng, &[k, n], -1.0, 1.0).cast::<f32>();
        let want = naive_matmul(&a.cast::<f64>(), &b.cast::<f64>());
        let got = a.matmul(&b).unwrap().cast::<f64>();
        let scale = want.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(max_abs_diff(got.data(), want.data()) / scale);
    }
    worst
}

pub fn bilinear_affine_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (w, h) = (rng.random_range(2..40), rng.random_range(2..40));
        let (ow, oh) = (rng.random_range(2..40), rng.random_range(2..40));
        let (a, b, c) = (rng.random_range(0.0..100.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let field = |x: f64, y: f64| a + b * x + c * y;
        let values = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| field(x as f64, y as f64)).collect();
        let grid = Grid::new(w, h, values).unwrap();
        let out = bilinear_resize(&grid, ow, oh).unwrap();
        for yo in 0..oh {
            for xo in 0..ow {
                let sx = xo as f64 * (w - 1) as f64 / (ow - 1) as f64;
                let sy = yo as f64 * (h - 1) as f64 / (oh - 1) as f64;
                worst = worst.max((out.at(xo, yo) - field(sx, sy)).abs());
            }
        }
    }
    worst
}

/// Largest deviation of a same-size resize from its input.
pub fn bilinear_identity_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (w, h) = (rng.random_range(1..30), rng.random_range(1..30));
        let values: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect();
        let grid = Grid::new(w, h, values.clone()).unwrap();
        let out = bilinear_resize(&grid, w, h).unwrap();
        worst = worst.max(max_abs_diff(&out.values, &values));
    }
    worst
}

/// Compares the confusion-matrix report against per-sample counting on
/// random label vectors. Returns the number of mismatching quantities.
pub fn metrics_bruteforce_suite(instances: usize, len: usize, seed: u64) -> usize {
    let mut rng = seeded_rng(seed);
    let mut mismatches = 0;
    for _ in 0..instances {
        let n = rng.random_range(2..90);
        let truth: Vec<usize> = (0..len).map(|_| rng.random_range(0..n)).collect();
        // Mostly-correct predictions, so every regime of the formulas shows up.
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.random::<f64>() < 0.7 { t } else { rng.random_range(0..n) })
            .collect();
        let cm = ConfusionMatrix::from_labels(&truth, &pred, n).unwrap();
        let report = precision_recall_f1(&cm);
        let mut correct = 0;
        for c in 0..n {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (&t, &p) in truth.iter().zip(&pred) {
                match (t == c, p == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            let m = report.classes[c];
            mismatches += [
                m.precision == precision,
                m.recall == recall,
                m.f1 == f1,
                m.support == tp + fn_,
            ]
            .iter()
            .filter(|ok| !**ok)
            .count();
            correct += tp;
        }
        if report.accuracy != correct as f64 / len as f64 {
            mismatches += 1;
        }
    }
    mismatches
}
