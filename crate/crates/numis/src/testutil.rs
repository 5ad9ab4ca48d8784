//! Test support: finite-difference gradient oracles and 64-bit reference
//! computations, kept independent of the tensor engine's own backward rules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random values in [-2, 2], untracked.
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random values in [-2, 2], tracked for gradients.
pub fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let t = rand_tensor(rng, shape);
    Tensor::param(shape, t.to_vec()).unwrap()
}

pub fn promote(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Central finite differences of `f` at `x` with step `h` per coordinate.
pub fn central_diff<F: FnMut(&[f32]) -> f64>(x: &[f32], h: f32, mut f: F) -> Vec<f64> {
    let mut grad = vec![0.0f64; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h as f64);
    }
    grad
}

/// Maximum elementwise relative error between analytic f32 gradients and a
/// finite-difference estimate; small denominators are floored so that
/// near-zero gradients are compared absolutely.
pub fn max_rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| {
            let denom = (a as f64).abs().max(n.abs()).max(1e-2);
            ((a as f64) - n).abs() / denom
        })
        .fold(0.0, f64::max)
}

/// Straight-line f64 reference implementations used as oracles.
pub mod reference {
    pub fn softmax_f64(x: &[f64]) -> Vec<f64> {
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = e.iter().sum();
        e.into_iter().map(|v| v / sum).collect()
    }

    pub fn matmul_f64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[i * k + l] * b[l * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    /// Multi-head self-attention, written straight-line in f64.
    ///
    /// `x` is `n x d_model`; per-head projections are column blocks of the
    /// combined `wq`/`wk`/`wv` (`d_model x d_model`), output projected by
    /// `wo` (`d_model x d_model`). Biases omitted to match the model.
    pub fn msa_f64(
        x: &[f64],
        wq: &[f64],
        wk: &[f64],
        wv: &[f64],
        wo: &[f64],
        n: usize,
        d_model: usize,
        heads: usize,
    ) -> Vec<f64> {
        let dh = d_model / heads;
        let q = matmul_f64(x, wq, n, d_model, d_model);
        let k = matmul_f64(x, wk, n, d_model, d_model);
        let v = matmul_f64(x, wv, n, d_model, d_model);
        let mut concat = vec![0.0f64; n * d_model];
        for h in 0..heads {
            for i in 0..n {
                // attention logits of row i against all rows, this head's block
                let mut logits = vec![0.0f64; n];
                for j in 0..n {
                    let mut dot = 0.0;
                    for t in 0..dh {
                        dot += q[i * d_model + h * dh + t] * k[j * d_model + h * dh + t];
                    }
                    logits[j] = dot / (dh as f64).sqrt();
                }
                let w = softmax_f64(&logits);
                for t in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += w[j] * v[j * d_model + h * dh + t];
                    }
                    concat[i * d_model + h * dh + t] = acc;
                }
            }
        }
        matmul_f64(&concat, wo, n, d_model, d_model)
    }

    pub fn sigmoid_f64(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Layer normalization over rows of length `d`, epsilon 1e-5.
    pub fn layer_norm_f64(x: &[f64], gain: &[f64], bias: &[f64], d: usize) -> Vec<f64> {
        let rows = x.len() / d;
        let mut out = vec![0.0f64; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + 1e-5).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * istd * gain[j] + bias[j];
            }
        }
        out
    }

    /// Zero-padded strided convolution over `[C, H, W]` in f64.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_f64(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        c: usize,
        h: usize,
        wd: usize,
        o: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0f64; o * oh * ow];
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[ic * h * wd + iy as usize * wd + ix as usize]
                                    * w[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    pub fn max_pool_f64(x: &[f64], c: usize, h: usize, w: usize, size: usize) -> Vec<f64> {
        let (oh, ow) = (h / size, w / size);
        let mut out = vec![f64::NEG_INFINITY; c * oh * ow];
        for ic in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ky in 0..size {
                        for kx in 0..size {
                            let v = x[ic * h * w + (oy * size + ky) * w + ox * size + kx];
                            let o = &mut out[(ic * oh + oy) * ow + ox];
                            if v > *o {
                                *o = v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn cross_entropy_f64(logits: &[f64], class: usize) -> f64 {
        let p = softmax_f64(logits);
        -p[class].ln()
    }

    pub fn bce_f64(p: &[f64], y: &[f64], w: &[f64], eps: f64) -> f64 {
        let n = p.len() as f64;
        p.iter()
            .zip(y.iter())
            .zip(w.iter())
            .map(|((&p, &y), &w)| {
                let pc = p.clamp(eps, 1.0 - eps);
                -(w * y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n
    }
}
