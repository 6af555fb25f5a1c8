//! Pooling and nearest-neighbour upsampling.

use super::Tensor;
use crate::error::{Error, Result};

/// Bin `j` of an axis of length `l` pooled to `t` outputs covers
/// `floor(j*l/t) .. ceil((j+1)*l/t) - 1`.
fn bin(j: usize, l: usize, t: usize) -> (usize, usize) {
    let start = j * l / t;
    let end = ((j + 1) * l).div_ceil(t);
    (start, end)
}

/// Mean-pool each spatial axis to a fixed output extent. The output does not
/// depend on the input length beyond the bin partition, which is what makes
/// the downstream architecture signal-length independent.
pub fn adaptive_avg_pool(input: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Geometry(format!(
            "adaptive_avg_pool: expected 4-D input, got {:?}",
            s
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (th, tw) = target;
    if th < 1 || tw < 1 {
        return Err(Error::InvalidConfig("pool target extents must be >= 1".into()));
    }
    if th > h || tw > w {
        return Err(Error::InvalidConfig(format!(
            "pool target ({},{}) exceeds input ({},{})",
            th, tw, h, w
        )));
    }
    let mut out = vec![0.0; b * c * th * tw];
    {
        let x = input.data();
        for bc in 0..b * c {
            for oh in 0..th {
                let (h0, h1) = bin(oh, h, th);
                for ow in 0..tw {
                    let (w0, w1) = bin(ow, w, tw);
                    let mut acc = 0.0;
                    for hi in h0..h1 {
                        let row = bc * h * w + hi * w;
                        acc += x[row + w0..row + w1].iter().sum::<f64>();
                    }
                    out[bc * th * tw + oh * tw + ow] =
                        acc / ((h1 - h0) * (w1 - w0)) as f64;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![b, c, th, tw],
        out,
        vec![input.clone()],
        move |g, parents| {
            let mut dx = vec![0.0; parents[0].len()];
            for bc in 0..b * c {
                for oh in 0..th {
                    let (h0, h1) = bin(oh, h, th);
                    for ow in 0..tw {
                        let (w0, w1) = bin(ow, w, tw);
                        let share = g[bc * th * tw + oh * tw + ow]
                            / ((h1 - h0) * (w1 - w0)) as f64;
                        for hi in h0..h1 {
                            let row = bc * h * w + hi * w;
                            for wi in w0..w1 {
                                dx[row + wi] += share;
                            }
                        }
                    }
                }
            }
            parents[0].accumulate_grad(&dx);
        },
    ))
}

/// Repeat each element `scale` times along each spatial axis; the gradient
/// sums over each repeat group.
pub fn upsample_nearest(input: &Tensor, scale: (usize, usize)) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Geometry(format!(
            "upsample_nearest: expected 4-D input, got {:?}",
            s
        )));
    }
    if scale.0 < 1 || scale.1 < 1 {
        return Err(Error::InvalidConfig("upsample scale must be >= 1".into()));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h * scale.0, w * scale.1);
    let mut out = vec![0.0; b * c * oh * ow];
    {
        let x = input.data();
        for bc in 0..b * c {
            for hi in 0..oh {
                let src_row = bc * h * w + (hi / scale.0) * w;
                let dst_row = bc * oh * ow + hi * ow;
                for wi in 0..ow {
                    out[dst_row + wi] = x[src_row + wi / scale.1];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![b, c, oh, ow],
        out,
        vec![input.clone()],
        move |g, parents| {
            let mut dx = vec![0.0; parents[0].len()];
            for bc in 0..b * c {
                for hi in 0..oh {
                    let src_row = bc * h * w + (hi / scale.0) * w;
                    let g_row = bc * oh * ow + hi * ow;
                    for wi in 0..ow {
                        dx[src_row + wi / scale.1] += g[g_row + wi];
                    }
                }
            }
            parents[0].accumulate_grad(&dx);
        },
    ))
}

/// Per-channel mean over all spatial positions: (B,C,H,W) -> (B,C).
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Geometry(format!(
            "global_avg_pool: expected 4-D input, got {:?}",
            s
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h * w == 0 {
        return Err(Error::InvalidInput("global_avg_pool: empty spatial axes".into()));
    }
    let plane = h * w;
    let mut out = vec![0.0; b * c];
    {
        let x = input.data();
        for bc in 0..b * c {
            out[bc] = x[bc * plane..(bc + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
    }
    Ok(Tensor::from_op(
        vec![b, c],
        out,
        vec![input.clone()],
        move |g, parents| {
            let mut dx = vec![0.0; parents[0].len()];
            for bc in 0..b * c {
                let share = g[bc] / plane as f64;
                for v in dx[bc * plane..(bc + 1) * plane].iter_mut() {
                    *v += share;
                }
            }
            parents[0].accumulate_grad(&dx);
        },
    ))
}
