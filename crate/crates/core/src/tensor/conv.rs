//! Convolution kernels (cross-correlation) and the affine layer.

use super::Tensor;
use crate::error::{Error, Result};

/// Spatial padding policy. `Same` preserves extents at stride 1 by
/// zero-padding `k-1` positions split floor/ceil around the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

fn pad_amounts(k: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => (0, 0),
        Padding::Same => {
            let total = k - 1;
            (total / 2, total - total / 2)
        }
    }
}

/// Zero-pad the spatial axes of a (B,C,H,W) buffer.
fn pad4(
    src: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    ph: (usize, usize),
    pw: (usize, usize),
) -> (Vec<f64>, usize, usize) {
    let hp = h + ph.0 + ph.1;
    let wp = w + pw.0 + pw.1;
    if ph == (0, 0) && pw == (0, 0) {
        return (src.to_vec(), hp, wp);
    }
    let mut out = vec![0.0; b * c * hp * wp];
    for bc in 0..b * c {
        for row in 0..h {
            let s = bc * h * w + row * w;
            let d = bc * hp * wp + (row + ph.0) * wp + pw.0;
            out[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    (out, hp, wp)
}

/// Crop a padded-gradient buffer back to the original extents, accumulating.
fn crop4(
    padded: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    ph0: usize,
    pw0: usize,
    hp: usize,
    wp: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        for row in 0..h {
            let s = bc * hp * wp + (row + ph0) * wp + pw0;
            let d = bc * h * w + row * w;
            out[d..d + w].copy_from_slice(&padded[s..s + w]);
        }
    }
    out
}

fn check_spatial(input: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Geometry(format!(
            "expected 4-D (B,C,H,W) input, got {:?}",
            s
        )));
    }
    if s.iter().any(|&e| e == 0) {
        return Err(Error::InvalidInput(format!("zero-sized axis in {:?}", s)));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// 2-D cross-correlation. Weight layout is (Cout, Cin, KH, KW); bias, when
/// present, has one entry per output channel.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    padding: Padding,
    stride: (usize, usize),
) -> Result<Tensor> {
    let (b, cin, h, w) = check_spatial(input)?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[1] != cin {
        return Err(Error::Geometry(format!(
            "conv2d: weight {:?} does not match {} input channels",
            ws, cin
        )));
    }
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    if padding == Padding::Same && stride != (1, 1) {
        return Err(Error::InvalidConfig(
            "same padding requires stride 1".into(),
        ));
    }
    let (ph, pw) = (pad_amounts(kh, padding), pad_amounts(kw, padding));
    let (hp, wp) = (h + ph.0 + ph.1, w + pw.0 + pw.1);
    if kh > hp || kw > wp {
        return Err(Error::Geometry(format!(
            "conv2d: kernel ({},{}) exceeds padded input ({},{})",
            kh, kw, hp, wp
        )));
    }
    let oh = (hp - kh) / stride.0 + 1;
    let ow = (wp - kw) / stride.1 + 1;

    let (xp, _, _) = pad4(&input.data(), b, cin, h, w, ph, pw);
    let wdat = weight.data_clone();
    let bdat = bias.map(|t| t.data_clone());
    if let Some(ref bd) = bdat {
        if bd.len() != cout {
            return Err(Error::Geometry(format!(
                "conv2d: bias length {} for {} output channels",
                bd.len(),
                cout
            )));
        }
    }

    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            let base_b = bdat.as_ref().map_or(0.0, |bd| bd[co]);
            for ohi in 0..oh {
                let orow = ((bi * cout + co) * oh + ohi) * ow;
                for owi in 0..ow {
                    let mut acc = base_b;
                    for ci in 0..cin {
                        for khi in 0..kh {
                            let xrow = ((bi * cin + ci) * hp + ohi * stride.0 + khi) * wp
                                + owi * stride.1;
                            let wrow = ((co * cin + ci) * kh + khi) * kw;
                            let xs = &xp[xrow..xrow + kw];
                            let wsl = &wdat[wrow..wrow + kw];
                            acc += xs.iter().zip(wsl).map(|(x, k)| x * k).sum::<f64>();
                        }
                    }
                    out[orow + owi] = acc;
                }
            }
        }
    }

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        vec![b, cout, oh, ow],
        out,
        parents,
        move |g, parents| {
            let x = parents[0].data_clone();
            let wdat = parents[1].data_clone();
            let (xp, _, _) = pad4(&x, b, cin, h, w, ph, pw);
            let mut dxp = vec![0.0; xp.len()];
            let mut dw = vec![0.0; wdat.len()];
            let mut db = vec![0.0; cout];
            for bi in 0..b {
                for co in 0..cout {
                    for ohi in 0..oh {
                        let orow = ((bi * cout + co) * oh + ohi) * ow;
                        for owi in 0..ow {
                            let go = g[orow + owi];
                            if go == 0.0 {
                                continue;
                            }
                            db[co] += go;
                            for ci in 0..cin {
                                for khi in 0..kh {
                                    let xrow = ((bi * cin + ci) * hp + ohi * stride.0 + khi)
                                        * wp
                                        + owi * stride.1;
                                    let wrow = ((co * cin + ci) * kh + khi) * kw;
                                    for kwi in 0..kw {
                                        dxp[xrow + kwi] += wdat[wrow + kwi] * go;
                                        dw[wrow + kwi] += xp[xrow + kwi] * go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let dx = crop4(&dxp, b, cin, h, w, ph.0, pw.0, hp, wp);
            parents[0].accumulate_grad(&dx);
            parents[1].accumulate_grad(&dw);
            if has_bias {
                parents[2].accumulate_grad(&db);
            }
        },
    ))
}

/// Depth-wise 2-D convolution: output channel `c*multiplier + d` depends
/// only on input channel `c`. Weight layout is (C, multiplier, KH, KW).
pub fn depthwise_conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    padding: Padding,
) -> Result<Tensor> {
    let (b, c, h, w) = check_spatial(input)?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[0] != c {
        return Err(Error::Geometry(format!(
            "depthwise_conv2d: weight {:?} does not match {} channels",
            ws, c
        )));
    }
    let (mult, kh, kw) = (ws[1], ws[2], ws[3]);
    if mult < 1 {
        return Err(Error::InvalidConfig("depth multiplier must be >= 1".into()));
    }
    let (ph, pw) = (pad_amounts(kh, padding), pad_amounts(kw, padding));
    let (hp, wp) = (h + ph.0 + ph.1, w + pw.0 + pw.1);
    if kh > hp || kw > wp {
        return Err(Error::Geometry(format!(
            "depthwise_conv2d: kernel ({},{}) exceeds padded input ({},{})",
            kh, kw, hp, wp
        )));
    }
    let oh = hp - kh + 1;
    let ow = wp - kw + 1;
    let cout = c * mult;

    let (xp, _, _) = pad4(&input.data(), b, c, h, w, ph, pw);
    let wdat = weight.data_clone();
    let bdat = bias.map(|t| t.data_clone());
    if let Some(ref bd) = bdat {
        if bd.len() != cout {
            return Err(Error::Geometry(format!(
                "depthwise_conv2d: bias length {} for {} output channels",
                bd.len(),
                cout
            )));
        }
    }

    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for ci in 0..c {
            for di in 0..mult {
                let co = ci * mult + di;
                let base_b = bdat.as_ref().map_or(0.0, |bd| bd[co]);
                for ohi in 0..oh {
                    let orow = ((bi * cout + co) * oh + ohi) * ow;
                    for owi in 0..ow {
                        let mut acc = base_b;
                        for khi in 0..kh {
                            let xrow = ((bi * c + ci) * hp + ohi + khi) * wp + owi;
                            let wrow = ((ci * mult + di) * kh + khi) * kw;
                            acc += xp[xrow..xrow + kw]
                                .iter()
                                .zip(&wdat[wrow..wrow + kw])
                                .map(|(x, k)| x * k)
                                .sum::<f64>();
                        }
                        out[orow + owi] = acc;
                    }
                }
            }
        }
    }

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        vec![b, cout, oh, ow],
        out,
        parents,
        move |g, parents| {
            let x = parents[0].data_clone();
            let wdat = parents[1].data_clone();
            let (xp, _, _) = pad4(&x, b, c, h, w, ph, pw);
            let mut dxp = vec![0.0; xp.len()];
            let mut dw = vec![0.0; wdat.len()];
            let mut db = vec![0.0; cout];
            for bi in 0..b {
                for ci in 0..c {
                    for di in 0..mult {
                        let co = ci * mult + di;
                        for ohi in 0..oh {
                            let orow = ((bi * cout + co) * oh + ohi) * ow;
                            for owi in 0..ow {
                                let go = g[orow + owi];
                                if go == 0.0 {
                                    continue;
                                }
                                db[co] += go;
                                for khi in 0..kh {
                                    let xrow = ((bi * c + ci) * hp + ohi + khi) * wp + owi;
                                    let wrow = ((ci * mult + di) * kh + khi) * kw;
                                    for kwi in 0..kw {
                                        dxp[xrow + kwi] += wdat[wrow + kwi] * go;
                                        dw[wrow + kwi] += xp[xrow + kwi] * go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let dx = crop4(&dxp, b, c, h, w, ph.0, pw.0, hp, wp);
            parents[0].accumulate_grad(&dx);
            parents[1].accumulate_grad(&dw);
            if has_bias {
                parents[2].accumulate_grad(&db);
            }
        },
    ))
}

/// Affine map y = x W^T + b on a (B, n) input; weight layout is (m, n).
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let xs = input.shape();
    let ws = weight.shape();
    if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
        return Err(Error::Geometry(format!(
            "linear: input {:?} vs weight {:?}",
            xs, ws
        )));
    }
    let (b, n, m) = (xs[0], xs[1], ws[0]);
    let bdat = bias.map(|t| t.data_clone());
    if let Some(ref bd) = bdat {
        if bd.len() != m {
            return Err(Error::Geometry(format!(
                "linear: bias length {} for {} outputs",
                bd.len(),
                m
            )));
        }
    }
    let mut out = vec![0.0; b * m];
    {
        let x = input.data();
        let wd = weight.data();
        for bi in 0..b {
            for mi in 0..m {
                let mut acc = bdat.as_ref().map_or(0.0, |bd| bd[mi]);
                let xr = &x[bi * n..(bi + 1) * n];
                let wr = &wd[mi * n..(mi + 1) * n];
                acc += xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
                out[bi * m + mi] = acc;
            }
        }
    }
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        vec![b, m],
        out,
        parents,
        move |g, parents| {
            let x = parents[0].data_clone();
            let wd = parents[1].data_clone();
            let mut dx = vec![0.0; b * n];
            let mut dw = vec![0.0; m * n];
            let mut db = vec![0.0; m];
            for bi in 0..b {
                for mi in 0..m {
                    let go = g[bi * m + mi];
                    if go == 0.0 {
                        continue;
                    }
                    db[mi] += go;
                    for ni in 0..n {
                        dx[bi * n + ni] += wd[mi * n + ni] * go;
                        dw[mi * n + ni] += x[bi * n + ni] * go;
                    }
                }
            }
            parents[0].accumulate_grad(&dx);
            parents[1].accumulate_grad(&dw);
            if has_bias {
                parents[2].accumulate_grad(&db);
            }
        },
    ))
}
