//! 2D convolution and max pooling over `[C, H, W]` tensors.

use super::{Tensor, TensorError};

/// Convolution of a `[C, H, W]` input with `[O, C, kh, kw]` filters.
///
/// Zero padding of `pad` pixels on every side, square stride.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, TensorError> {
    let si = input.shape().to_vec();
    let sw = weight.shape().to_vec();
    if si.len() != 3 || sw.len() != 4 || si[0] != sw[1] || bias.shape() != [sw[0]] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: si,
            rhs: sw,
        });
    }
    let (c, h, w) = (si[0], si[1], si[2]);
    let (o, kh, kw) = (sw[0], sw[2], sw[3]);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(TensorError::InvalidShape {
            op: "conv2d",
            shape: si,
            reason: format!("kernel {}x{} larger than padded input", kh, kw),
        });
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;

    let xd = input.to_vec();
    let wd = weight.to_vec();
    let bd = bias.to_vec();
    let mut out = vec![0.0f32; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bd[oc] as f64;
                for ic in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xd[ic * h * w + iy as usize * w + ix as usize] as f64
                                * wd[((oc * c + ic) * kh + ky) * kw + kx] as f64;
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }

    Ok(Tensor::from_op(
        vec![o, oh, ow],
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, parents| {
            let xd = parents[0].to_vec();
            let wd = parents[1].to_vec();
            let mut gx = vec![0.0f32; c * h * w];
            let mut gw = vec![0.0f64; o * c * kh * kw];
            let mut gb = vec![0.0f64; o];
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[(oc * oh + oy) * ow + ox];
                        gb[oc] += go as f64;
                        for ic in 0..c {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ic * h * w + iy as usize * w + ix as usize;
                                    let wi = ((oc * c + ic) * kh + ky) * kw + kx;
                                    gx[xi] += go * wd[wi];
                                    gw[wi] += go as f64 * xd[xi] as f64;
                                }
                            }
                        }
                    }
                }
            }
            parents[0].accumulate_grad(&gx);
            let gw: Vec<f32> = gw.into_iter().map(|v| v as f32).collect();
            parents[1].accumulate_grad(&gw);
            let gb: Vec<f32> = gb.into_iter().map(|v| v as f32).collect();
            parents[2].accumulate_grad(&gb);
        }),
    ))
}

/// Non-overlapping max pooling over `[C, H, W]`; trailing pixels that do not
/// fill a window are dropped.
pub fn max_pool2d(input: &Tensor, size: usize) -> Result<Tensor, TensorError> {
    let si = input.shape().to_vec();
    if si.len() != 3 || si[1] < size || si[2] < size {
        return Err(TensorError::InvalidShape {
            op: "max_pool2d",
            shape: si,
            reason: format!("cannot pool with window {}", size),
        });
    }
    let (c, h, w) = (si[0], si[1], si[2]);
    let (oh, ow) = (h / size, w / size);
    let xd = input.to_vec();
    let mut out = vec![0.0f32; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    for ic in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..size {
                    for kx in 0..size {
                        let i = ic * h * w + (oy * size + ky) * w + ox * size + kx;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out[(ic * oh + oy) * ow + ox] = best;
                argmax[(ic * oh + oy) * ow + ox] = best_i;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![c, oh, ow],
        out,
        vec![input.clone()],
        Box::new(move |g, parents| {
            let mut gx = vec![0.0f32; c * h * w];
            for (gi, &xi) in argmax.iter().enumerate() {
                gx[xi] += g[gi];
            }
            parents[0].accumulate_grad(&gx);
        }),
    ))
}
