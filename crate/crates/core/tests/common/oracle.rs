//! Direct nested-loop and enumeration reference implementations.

use amae_core::tensor::Tensor;

/// Cross-correlation of `[Ci, H, W, D]` with `[Co, Ci, k, k, k]`, zero padding.
pub fn conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (ci_n, h, wd, d) = (xs[0], xs[1], xs[2], xs[3]);
    let (co_n, k) = (ws[0], ws[2]);
    let o = |n: usize| (n + 2 * pad - k) / stride + 1;
    let (oh, ow, od) = (o(h), o(wd), o(d));
    let mut out = vec![0.0; co_n * oh * ow * od];
    for co in 0..co_n {
        for i in 0..oh {
            for j in 0..ow {
                for l in 0..od {
                    let mut acc = b[co];
                    for ci in 0..ci_n {
                        for a in 0..k {
                            for bb in 0..k {
                                for c in 0..k {
                                    let ih = (i * stride + a) as isize - pad as isize;
                                    let iw = (j * stride + bb) as isize - pad as isize;
                                    let id = (l * stride + c) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || id < 0 || ih >= h as isize || iw >= wd as isize || id >= d as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((ci * h + ih as usize) * wd + iw as usize) * d + id as usize];
                                    let wv = w.data()[(((co * ci_n + ci) * k + a) * k + bb) * k + c];
                                    acc += xv * wv;
                                }
                            }
                        }
                    }
                    out[((co * oh + i) * ow + j) * od + l] = acc;
                }
            }
        }
    }
    Tensor::new(vec![co_n, oh, ow, od], out).unwrap()
}

/// Transposed convolution with kernel == stride, `[Ci, Co, s, s, s]` weights.
pub fn conv_transpose3d(x: &Tensor<f64>, w: &Tensor<f64>, s: usize) -> Tensor<f64> {
    let (cin, n) = (x.shape()[0], x.shape()[1]);
    let cout = w.shape()[1];
    let m = n * s;
    let mut out = vec![0.0; cout * m * m * m];
    for ci in 0..cin {
        for co in 0..cout {
            for i in 0..n {
                for j in 0..n {
                    for l in 0..n {
                        for a in 0..s {
                            for b in 0..s {
                                for c in 0..s {
                                    let xv = x.data()[((ci * n + i) * n + j) * n + l];
                                    let wv = w.data()[(((ci * cout + co) * s + a) * s + b) * s + c];
                                    out[((co * m + i * s + a) * m + j * s + b) * m + l * s + c] += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, m, m, m], out).unwrap()
}

/// `x w^T + b` with `w` laid out `[out, in]`.
pub fn linear(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let (n, fi) = (x.shape()[0], x.shape()[1]);
    let fo = w.shape()[0];
    let mut out = vec![0.0; n * fo];
    for i in 0..n {
        for o in 0..fo {
            let mut acc = b[o];
            for f in 0..fi {
                acc += x.data()[i * fi + f] * w.data()[o * fi + f];
            }
            out[i * fo + o] = acc;
        }
    }
    out
}

/// Multi-head scaled dot-product attention, heads split along columns.
pub fn attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize) -> Vec<f64> {
    let (t, e) = (q.shape()[0], q.shape()[1]);
    let dh = e / heads;
    let mut out = vec![0.0; t * e];
    for h in 0..heads {
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| (0..dh).map(|c| q.data()[i * e + h * dh + c] * k.data()[j * e + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for c in 0..dh {
                out[i * e + h * dh + c] = (0..t).map(|j| ex[j] / z * v.data()[j * e + h * dh + c]).sum();
            }
        }
    }
    out
}

/// Dice from explicit index sets; two empty masks score 1.
pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    let pa: Vec<usize> = (0..a.len()).filter(|i| a[*i]).collect();
    let pb: Vec<usize> = (0..b.len()).filter(|i| b[*i]).collect();
    if pa.is_empty() && pb.is_empty() {
        return 1.0;
    }
    let inter = pa.iter().filter(|i| pb.contains(i)).count();
    2.0 * inter as f64 / (pa.len() + pb.len()) as f64
}

/// Scalar AdamW on `f(x) = (x - 3)^2`, returning the iterate after each step.
pub fn adamw_quadratic(x0: f64, lr: f64, wd: f64, steps: i32) -> Vec<f64> {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = 2.0 * (x - 3.0);
        x *= 1.0 - lr * wd;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - f64::powi(b1, t));
        let vh = v / (1.0 - f64::powi(b2, t));
        x -= lr * mh / (vh.sqrt() + eps);
        out.push(x);
    }
    out
}

/// Two-sided signed-rank p by enumerating all `2^n` sign patterns.
pub fn wilcoxon_enumerate(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len();
    let mut le = 0u64;
    for mask in 0u64..(1 << n) {
        let t: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if t <= w + 1e-9 {
            le += 1;
        }
    }
    (2.0 * le as f64 / (1u64 << n) as f64).min(1.0)
}
