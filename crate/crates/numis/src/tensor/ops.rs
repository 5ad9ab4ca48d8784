//! Differentiable tensor operations.
//!
//! Each op computes its forward value eagerly and registers a backward rule
//! that accumulates into the parents' gradients. Reductions (matmul inner
//! products, row sums, means) run in f64.

use super::{Tensor, TensorError};

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    check_same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x + y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, parents| {
            parents[0].accumulate_grad(g);
            parents[1].accumulate_grad(g);
        }),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    check_same_shape("sub", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x - y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, parents| {
            parents[0].accumulate_grad(g);
            let neg: Vec<f32> = g.iter().map(|v| -v).collect();
            parents[1].accumulate_grad(&neg);
        }),
    ))
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    check_same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x * y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            let ga: Vec<f32> = g.iter().zip(b.data().iter()).map(|(g, y)| g * y).collect();
            let gb: Vec<f32> = g.iter().zip(a.data().iter()).map(|(g, x)| g * x).collect();
            a.accumulate_grad(&ga);
            b.accumulate_grad(&gb);
        }),
    ))
}

pub fn scale(a: &Tensor, c: f32) -> Tensor {
    let data = a.data().iter().map(|x| x * c).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g, parents| {
            let ga: Vec<f32> = g.iter().map(|v| v * c).collect();
            parents[0].accumulate_grad(&ga);
        }),
    )
}

/// Adds a `[d]` bias to every length-`d` trailing vector of `x`.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let d = *x.shape().last().unwrap();
    if bias.shape() != [d] {
        return Err(TensorError::ShapeMismatch {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let bd = bias.to_vec();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + bd[i % d])
        .collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone(), bias.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(g);
            let mut gb = vec![0.0f64; d];
            for (i, v) in g.iter().enumerate() {
                gb[i % d] += *v as f64;
            }
            let gb: Vec<f32> = gb.into_iter().map(|v| v as f32).collect();
            parents[1].accumulate_grad(&gb);
        }),
    ))
}

/// Raw matrix product with f64 accumulation: (m x k) . (k x n).
fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += a[i * k + l] as f64 * b[l * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

fn transpose_raw(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let data = mm(&a.data(), &b.data(), m, k, n);
    Ok(Tensor::from_op(
        vec![m, n],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            // dL/da = g . b^T ; dL/db = a^T . g
            let bt = transpose_raw(&b.data(), k, n);
            let ga = mm(g, &bt, m, n, k);
            a.accumulate_grad(&ga);
            let at = transpose_raw(&a.data(), m, k);
            let gb = mm(&at, g, k, m, n);
            b.accumulate_grad(&gb);
        }),
    ))
}

pub fn transpose(a: &Tensor) -> Result<Tensor, TensorError> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(TensorError::InvalidShape {
            op: "transpose",
            shape: s.to_vec(),
            reason: "expects a matrix".into(),
        });
    }
    let (m, n) = (s[0], s[1]);
    let data = transpose_raw(&a.data(), m, n);
    Ok(Tensor::from_op(
        vec![n, m],
        data,
        vec![a.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(&transpose_raw(g, n, m));
        }),
    ))
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor, TensorError> {
    let numel: usize = shape.iter().product();
    if numel != a.numel() {
        return Err(TensorError::InvalidShape {
            op: "reshape",
            shape: shape.to_vec(),
            reason: format!("cannot view {} elements as {:?}", a.numel(), shape),
        });
    }
    Ok(Tensor::from_op(
        shape.to_vec(),
        a.to_vec(),
        vec![a.clone()],
        Box::new(|g, parents| parents[0].accumulate_grad(g)),
    ))
}

pub fn relu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|&x| x.max(0.0)).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|g, parents| {
            let x = parents[0].data();
            let ga: Vec<f32> = g
                .iter()
                .zip(x.iter())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            drop(x);
            parents[0].accumulate_grad(&ga);
        }),
    )
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

/// GELU via the tanh approximation (deviation from the exact erf form <= 1e-3).
pub fn gelu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|&x| gelu_scalar(x as f64) as f32).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|g, parents| {
            let x = parents[0].data();
            let ga: Vec<f32> = g
                .iter()
                .zip(x.iter())
                .map(|(g, &xf)| {
                    let x = xf as f64;
                    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                    let t = u.tanh();
                    let sech2 = 1.0 - t * t;
                    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                    let d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * du;
                    (*g as f64 * d) as f32
                })
                .collect();
            drop(x);
            parents[0].accumulate_grad(&ga);
        }),
    )
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a
        .data()
        .iter()
        .map(|&x| (1.0 / (1.0 + (-x as f64).exp())) as f32)
        .collect();
    let saved = data.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g, parents| {
            let ga: Vec<f32> = g
                .iter()
                .zip(saved.iter())
                .map(|(g, &s)| g * s * (1.0 - s))
                .collect();
            parents[0].accumulate_grad(&ga);
        }),
    )
}

/// Row-wise softmax with per-row max subtraction for stability.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor, TensorError> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(TensorError::InvalidShape {
            op: "softmax_rows",
            shape: s.to_vec(),
            reason: "expects a matrix".into(),
        });
    }
    let (m, n) = (s[0], s[1]);
    let x = a.to_vec();
    let mut data = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        let mut e = vec![0.0f64; n];
        for j in 0..n {
            e[j] = (row[j] as f64 - max).exp();
            sum += e[j];
        }
        for j in 0..n {
            data[i * n + j] = (e[j] / sum) as f32;
        }
    }
    let saved = data.clone();
    Ok(Tensor::from_op(
        vec![m, n],
        data,
        vec![a.clone()],
        Box::new(move |g, parents| {
            let mut ga = vec![0.0f32; m * n];
            for i in 0..m {
                let s = &saved[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let dot: f64 = s
                    .iter()
                    .zip(gr.iter())
                    .map(|(&s, &g)| s as f64 * g as f64)
                    .sum();
                for j in 0..n {
                    ga[i * n + j] = (s[j] as f64 * (gr[j] as f64 - dot)) as f32;
                }
            }
            parents[0].accumulate_grad(&ga);
        }),
    ))
}

/// Per-vector normalization over the last axis, then affine gain/bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    const EPS: f64 = 1e-5;
    let d = *x.shape().last().unwrap();
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let rows = x.numel() / d;
    let xd = x.to_vec();
    let gd = gain.to_vec();
    let bd = bias.to_vec();
    let mut data = vec![0.0f32; xd.len()];
    let mut xhat = vec![0.0f32; xd.len()];
    let mut inv_std = vec![0.0f64; rows];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var: f64 = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let istd = 1.0 / (var + EPS).sqrt();
        inv_std[r] = istd;
        for j in 0..d {
            let h = (row[j] as f64 - mean) * istd;
            xhat[r * d + j] = h as f32;
            data[r * d + j] = (h * gd[j] as f64 + bd[j] as f64) as f32;
        }
    }
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |g, parents| {
            let mut gx = vec![0.0f32; xhat.len()];
            let mut ggain = vec![0.0f64; d];
            let mut gbias = vec![0.0f64; d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut mean_gy = 0.0f64;
                let mut mean_gyh = 0.0f64;
                for j in 0..d {
                    let gy = gr[j] as f64 * gd[j] as f64;
                    mean_gy += gy;
                    mean_gyh += gy * hr[j] as f64;
                    ggain[j] += gr[j] as f64 * hr[j] as f64;
                    gbias[j] += gr[j] as f64;
                }
                mean_gy /= d as f64;
                mean_gyh /= d as f64;
                for j in 0..d {
                    let gy = gr[j] as f64 * gd[j] as f64;
                    gx[r * d + j] =
                        ((gy - mean_gy - hr[j] as f64 * mean_gyh) * inv_std[r]) as f32;
                }
            }
            parents[0].accumulate_grad(&gx);
            let ggain: Vec<f32> = ggain.into_iter().map(|v| v as f32).collect();
            let gbias: Vec<f32> = gbias.into_iter().map(|v| v as f32).collect();
            parents[1].accumulate_grad(&ggain);
            parents[2].accumulate_grad(&gbias);
        }),
    ))
}

pub fn sum_all(a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().map(|&v| v as f64).sum();
    Tensor::from_op(
        vec![1],
        vec![s as f32],
        vec![a.clone()],
        Box::new(|g, parents| {
            let ga = vec![g[0]; parents[0].numel()];
            parents[0].accumulate_grad(&ga);
        }),
    )
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.numel();
    let s: f64 = a.data().iter().map(|&v| v as f64).sum();
    Tensor::from_op(
        vec![1],
        vec![(s / n as f64) as f32],
        vec![a.clone()],
        Box::new(move |g, parents| {
            let ga = vec![g[0] / n as f32; n];
            parents[0].accumulate_grad(&ga);
        }),
    )
}

/// Select row `i` of a matrix as a `[1, d]` tensor.
pub fn row(a: &Tensor, i: usize) -> Result<Tensor, TensorError> {
    let s = a.shape();
    if s.len() != 2 || i >= s[0] {
        return Err(TensorError::InvalidShape {
            op: "row",
            shape: s.to_vec(),
            reason: format!("row {} out of range", i),
        });
    }
    let d = s[1];
    let data = a.data()[i * d..(i + 1) * d].to_vec();
    Ok(Tensor::from_op(
        vec![1, d],
        data,
        vec![a.clone()],
        Box::new(move |g, parents| {
            let mut ga = vec![0.0f32; parents[0].numel()];
            ga[i * d..(i + 1) * d].copy_from_slice(g);
            parents[0].accumulate_grad(&ga);
        }),
    ))
}

/// Vertical concatenation of two matrices with equal column counts.
pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(TensorError::ShapeMismatch {
            op: "concat_rows",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (m, n, d) = (sa[0], sb[0], sa[1]);
    let mut data = a.to_vec();
    data.extend_from_slice(&b.data());
    Ok(Tensor::from_op(
        vec![m + n, d],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(&g[..m * d]);
            parents[1].accumulate_grad(&g[m * d..]);
        }),
    ))
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor, TensorError> {
    assert!(!parts.is_empty());
    let m = parts[0].shape()[0];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        if s.len() != 2 || s[0] != m {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape().to_vec(),
                rhs: s.to_vec(),
            });
        }
        widths.push(s[1]);
    }
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0f32; m * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pd = p.data();
        for r in 0..m {
            data[r * total + off..r * total + off + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
        }
        off += w;
    }
    let widths_b = widths.clone();
    Ok(Tensor::from_op(
        vec![m, total],
        data,
        parts.to_vec(),
        Box::new(move |g, parents| {
            let mut off = 0;
            for (p, &w) in parents.iter().zip(&widths_b) {
                let mut gp = vec![0.0f32; m * w];
                for r in 0..m {
                    gp[r * w..(r + 1) * w]
                        .copy_from_slice(&g[r * total + off..r * total + off + w]);
                }
                p.accumulate_grad(&gp);
                off += w;
            }
        }),
    ))
}

/// Slice columns `[start, start+width)` of a matrix.
pub fn slice_cols(a: &Tensor, start: usize, width: usize) -> Result<Tensor, TensorError> {
    let s = a.shape();
    if s.len() != 2 || start + width > s[1] {
        return Err(TensorError::InvalidShape {
            op: "slice_cols",
            shape: s.to_vec(),
            reason: format!("columns {}..{} out of range", start, start + width),
        });
    }
    let (m, n) = (s[0], s[1]);
    let mut data = vec![0.0f32; m * width];
    {
        let ad = a.data();
        for r in 0..m {
            data[r * width..(r + 1) * width]
                .copy_from_slice(&ad[r * n + start..r * n + start + width]);
        }
    }
    Ok(Tensor::from_op(
        vec![m, width],
        data,
        vec![a.clone()],
        Box::new(move |g, parents| {
            let mut ga = vec![0.0f32; m * n];
            for r in 0..m {
                ga[r * n + start..r * n + start + width]
                    .copy_from_slice(&g[r * width..(r + 1) * width]);
            }
            parents[0].accumulate_grad(&ga);
        }),
    ))
}

/// softmax(q.k^T / sqrt(d_k)) . v
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor, TensorError> {
    let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
        return Err(TensorError::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: sq.to_vec(),
            rhs: sk.to_vec(),
        });
    }
    let d_k = sq[1];
    let logits = scale(&matmul(q, &transpose(k)?)?, 1.0 / (d_k as f32).sqrt());
    let weights = softmax_rows(&logits)?;
    matmul(&weights, v)
}

/// Attention weights alone (row-stochastic matrix), for diagnostics and tests.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor, TensorError> {
    let d_k = q.shape()[1];
    let logits = scale(&matmul(q, &transpose(k)?)?, 1.0 / (d_k as f32).sqrt());
    softmax_rows(&logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_diff, max_rel_err, rand_param, rand_tensor, rng};

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i2, &a).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![0.0; 4]).unwrap();
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{}", msg);
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut r = rng(3);
        let a = rand_param(&mut r, &[3, 4]);
        let b = rand_param(&mut r, &[4, 2]);
        let loss = sum_all(&mul(&matmul(&a, &b).unwrap(), &matmul(&a, &b).unwrap()).unwrap());
        loss.backward().unwrap();

        let bd = b.to_vec();
        let fd_a = central_diff(&a.to_vec(), 1e-3, |p| {
            let a = Tensor::from_vec(&[3, 4], p.to_vec()).unwrap();
            let b = Tensor::from_vec(&[4, 2], bd.clone()).unwrap();
            let c = matmul(&a, &b).unwrap();
            sum_all(&mul(&c, &c).unwrap()).item() as f64
        });
        assert!(max_rel_err(&a.grad().unwrap(), &fd_a) < 1e-3);

        let ad = a.to_vec();
        let fd_b = central_diff(&b.to_vec(), 1e-3, |p| {
            let a = Tensor::from_vec(&[3, 4], ad.clone()).unwrap();
            let b = Tensor::from_vec(&[4, 2], p.to_vec()).unwrap();
            let c = matmul(&a, &b).unwrap();
            sum_all(&mul(&c, &c).unwrap()).item() as f64
        });
        assert!(max_rel_err(&b.grad().unwrap(), &fd_b) < 1e-3);
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_no_overflow_on_large_logits() {
        let x = Tensor::from_vec(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let s = softmax_rows(&x).unwrap().to_vec();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!(s[0] > 0.999 && s[1] < 1e-3);
    }

    #[test]
    fn softmax_matches_f64_reference() {
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmax_rows(&x).unwrap().to_vec();
        let expect = crate::testutil::reference::softmax_f64(&[1.0, 2.0, 3.0]);
        for (a, e) in s.iter().zip(expect.iter()) {
            assert!((*a as f64 - e).abs() < 1e-6);
        }
        let sum: f32 = s.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn attention_single_row_returns_v() {
        let q = Tensor::from_vec(&[1, 3], vec![0.3, -0.2, 0.9]).unwrap();
        let k = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let v = Tensor::from_vec(&[1, 2], vec![5.0, -7.0]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(out.to_vec(), vec![5.0, -7.0]);
    }

    #[test]
    fn attention_two_by_two_direct_evaluation() {
        let q = Tensor::from_vec(&[2, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        let k = q.clone();
        let v = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = attention_weights(&q, &k).unwrap().to_vec();
        // logits/sqrt(2): diag 100/sqrt(2), off-diag 0
        let z = 100.0f64 / 2.0f64.sqrt();
        let p = 1.0 / (1.0 + (-z).exp());
        assert!((w[0] as f64 - p).abs() < 1e-6);
        assert!(w[0] > 0.999 && w[1] < 0.001);
        for r in 0..2 {
            let sum: f32 = w[r * 2..r * 2 + 2].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        let out = scaled_dot_attention(&q, &k, &v).unwrap().to_vec();
        assert!((out[0] as f64 - p).abs() < 1e-3);
    }

    #[test]
    fn attention_zero_query_is_uniform_column_mean() {
        let q = Tensor::from_vec(&[3, 2], vec![0.0; 6]).unwrap();
        let k = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.3, 0.3]).unwrap();
        let v = Tensor::from_vec(&[3, 2], vec![3.0, 0.0, 0.0, 3.0, 3.0, 3.0]).unwrap();
        let w = attention_weights(&q, &k).unwrap().to_vec();
        for x in &w {
            assert!((x - 1.0 / 3.0).abs() < 1e-6);
        }
        let out = scaled_dot_attention(&q, &k, &v).unwrap().to_vec();
        for x in out {
            assert!((x - 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_rows_in_convex_hull_of_v() {
        // 1-D values: each output element must lie within [min(v), max(v)]
        let mut r = rng(11);
        for _ in 0..50 {
            let q = rand_tensor(&mut r, &[4, 3]);
            let k = rand_tensor(&mut r, &[4, 3]);
            let v = rand_tensor(&mut r, &[4, 1]);
            let vd = v.to_vec();
            let lo = vd.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = vd.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let out = scaled_dot_attention(&q, &k, &v).unwrap().to_vec();
            for x in out {
                assert!(x >= lo - 1e-5 && x <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn layer_norm_constant_vector_collapses_to_bias() {
        let x = Tensor::from_vec(&[1, 4], vec![3.0; 4]).unwrap();
        let gain = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        let bias = Tensor::from_vec(&[4], vec![0.0; 4]).unwrap();
        let y = layer_norm(&x, &gain, &bias).unwrap().to_vec();
        for v in y {
            assert!(v.abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_two_values_by_hand() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 3.0]).unwrap();
        let gain = Tensor::from_vec(&[2], vec![1.0; 2]).unwrap();
        let bias = Tensor::from_vec(&[2], vec![0.0; 2]).unwrap();
        let y = layer_norm(&x, &gain, &bias).unwrap().to_vec();
        assert!((y[0] + 1.0).abs() < 1e-4 && (y[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut r = rng(5);
        let x = rand_param(&mut r, &[2, 5]);
        let gain = rand_param(&mut r, &[5]);
        let bias = rand_param(&mut r, &[5]);
        let loss = sum_all(&mul(
            &layer_norm(&x, &gain, &bias).unwrap(),
            &layer_norm(&x, &gain, &bias).unwrap(),
        )
        .unwrap());
        loss.backward().unwrap();

        // f64 oracle: independent straight-line layer norm
        let gd = crate::testutil::promote(&gain.to_vec());
        let bd = crate::testutil::promote(&bias.to_vec());
        let fd = central_diff(&x.to_vec(), 1e-3, |p| {
            let y = crate::testutil::reference::layer_norm_f64(
                &crate::testutil::promote(p),
                &gd,
                &bd,
                5,
            );
            y.iter().map(|v| v * v).sum()
        });
        assert!(max_rel_err(&x.grad().unwrap(), &fd) < 1e-3);
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn gelu_values() {
        let x = Tensor::from_vec(&[2], vec![0.0, 3.0]).unwrap();
        let y = gelu(&x).to_vec();
        assert_eq!(y[0], 0.0);
        // tanh approximation evaluated at 64 bits
        let expect = gelu_scalar(3.0);
        assert!((expect - 2.9964).abs() < 1e-4);
        assert!((y[1] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_and_softmax_gradients_match_finite_differences() {
        let mut r = rng(9);
        let x = rand_param(&mut r, &[3, 4]);
        let loss = {
            let s = softmax_rows(&sigmoid(&x)).unwrap();
            sum_all(&mul(&s, &s).unwrap())
        };
        loss.backward().unwrap();
        let fd = central_diff(&x.to_vec(), 1e-3, |p| {
            use crate::testutil::reference::{sigmoid_f64, softmax_f64};
            let xp = crate::testutil::promote(p);
            let mut total = 0.0;
            for r in 0..3 {
                let row: Vec<f64> = xp[r * 4..(r + 1) * 4].iter().map(|&v| sigmoid_f64(v)).collect();
                let s = softmax_f64(&row);
                total += s.iter().map(|v| v * v).sum::<f64>();
            }
            total
        });
        assert!(max_rel_err(&x.grad().unwrap(), &fd) < 1e-3);
    }
}
