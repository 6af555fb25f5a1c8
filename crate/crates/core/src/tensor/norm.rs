//! Batch normalization and inverted dropout.

use super::Tensor;
use crate::error::{Error, Result};
use rand::Rng;
use std::cell::RefCell;

/// Whether stochastic layers are active and which statistics batch norm uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics for batch normalization. Initialized to
/// mean 0, variance 1, so an eval pass before any training uses the
/// identity statistics.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Per-channel batch normalization on a (B,C,H,W) tensor. Train mode
/// normalizes by batch statistics and folds them into the running estimates;
/// eval mode normalizes by the running estimates.
pub fn batch_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RefCell<RunningStats>,
    mode: Mode,
    epsilon: f64,
    momentum: f64,
) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Geometry(format!(
            "batch_norm: expected 4-D input, got {:?}",
            s
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Geometry(format!(
            "batch_norm: scale/shift length {}/{} for {} channels",
            gamma.len(),
            beta.len(),
            c
        )));
    }
    let n_per_ch = b * h * w;
    if n_per_ch == 0 {
        return Err(Error::InvalidInput("batch_norm: empty batch".into()));
    }
    let plane = h * w;

    let (mean, var) = match mode {
        Mode::Train => {
            let x = input.data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut sum = 0.0;
                for bi in 0..b {
                    let off = (bi * c + ci) * plane;
                    sum += x[off..off + plane].iter().sum::<f64>();
                }
                let m = sum / n_per_ch as f64;
                let mut sq = 0.0;
                for bi in 0..b {
                    let off = (bi * c + ci) * plane;
                    sq += x[off..off + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[ci] = m;
                var[ci] = sq / n_per_ch as f64;
            }
            {
                let mut rs = running.borrow_mut();
                for ci in 0..c {
                    rs.mean[ci] = (1.0 - momentum) * rs.mean[ci] + momentum * mean[ci];
                    rs.var[ci] = (1.0 - momentum) * rs.var[ci] + momentum * var[ci];
                }
            }
            (mean, var)
        }
        Mode::Eval => {
            let rs = running.borrow();
            (rs.mean.clone(), rs.var.clone())
        }
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let gdat = gamma.data_clone();
    let bdat = beta.data_clone();
    let mut out = vec![0.0; b * c * plane];
    {
        let x = input.data();
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for k in 0..plane {
                    out[off + k] = gdat[ci] * (x[off + k] - mean[ci]) * inv_std[ci] + bdat[ci];
                }
            }
        }
    }

    Ok(Tensor::from_op(
        vec![b, c, h, w],
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        move |g, parents| {
            let x = parents[0].data_clone();
            let gdat = parents[1].data_clone();
            let mut dx = vec![0.0; x.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let nf = n_per_ch as f64;
            for ci in 0..c {
                // Per-channel reductions over the batch and spatial axes.
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for bi in 0..b {
                    let off = (bi * c + ci) * plane;
                    for k in 0..plane {
                        let xhat = (x[off + k] - mean[ci]) * inv_std[ci];
                        sum_g += g[off + k];
                        sum_gx += g[off + k] * xhat;
                    }
                }
                dbeta[ci] = sum_g;
                dgamma[ci] = sum_gx;
                match mode {
                    Mode::Train => {
                        let mg = sum_g / nf;
                        let mgx = sum_gx / nf;
                        for bi in 0..b {
                            let off = (bi * c + ci) * plane;
                            for k in 0..plane {
                                let xhat = (x[off + k] - mean[ci]) * inv_std[ci];
                                dx[off + k] = gdat[ci]
                                    * inv_std[ci]
                                    * (g[off + k] - mg - xhat * mgx);
                            }
                        }
                    }
                    Mode::Eval => {
                        let scale = gdat[ci] * inv_std[ci];
                        for bi in 0..b {
                            let off = (bi * c + ci) * plane;
                            for k in 0..plane {
                                dx[off + k] = scale * g[off + k];
                            }
                        }
                    }
                }
            }
            parents[0].accumulate_grad(&dx);
            parents[1].accumulate_grad(&dgamma);
            parents[2].accumulate_grad(&dbeta);
        },
    ))
}

/// Inverted dropout: train mode zeroes each element with probability `p` and
/// scales survivors by 1/(1-p); eval mode is the identity.
pub fn dropout<R: Rng>(input: &Tensor, p: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!(
            "dropout probability must be in [0,1), got {}",
            p
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return input.reshape(&input.shape());
    }
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let mask: Vec<f64> = (0..input.len())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
        .collect();
    let data: Vec<f64> = input
        .data()
        .iter()
        .zip(&mask)
        .map(|(x, m)| x * m)
        .collect();
    Ok(Tensor::from_op(
        input.shape(),
        data,
        vec![input.clone()],
        move |g, parents| {
            let d: Vec<f64> = g.iter().zip(&mask).map(|(gi, m)| gi * m).collect();
            parents[0].accumulate_grad(&d);
        },
    ))
}
