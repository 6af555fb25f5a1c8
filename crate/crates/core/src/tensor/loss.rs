//! Score fusion and the cross-entropy training loss.

use super::Tensor;
use crate::error::{Error, Result};

/// Pairwise softmax fusion of a temporal score (B,T) and a channel score
/// (B,P) on their common (B,P,1,T) grid:
/// `w[b,p,t] = e^{s_t[b,t]} / (e^{s_t[b,t]} + e^{s_c[b,p]})`.
/// The complement weight is `1 - w`. Stabilized by subtracting the pairwise
/// max before exponentiation.
pub fn pair_softmax(s_tfs: &Tensor, s_cfs: &Tensor) -> Result<Tensor> {
    let st = s_tfs.shape();
    let sc = s_cfs.shape();
    if st.len() != 2 || sc.len() != 2 || st[0] != sc[0] {
        return Err(Error::Geometry(format!(
            "pair_softmax: temporal score {:?} vs channel score {:?}",
            st, sc
        )));
    }
    let (b, t, p) = (st[0], st[1], sc[1]);
    if s_tfs.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("temporal feature score".into()));
    }
    if s_cfs.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("channel feature score".into()));
    }
    let mut out = vec![0.0; b * p * t];
    {
        let a = s_tfs.data();
        let c = s_cfs.data();
        for bi in 0..b {
            for pi in 0..p {
                let cv = c[bi * p + pi];
                for ti in 0..t {
                    let av = a[bi * t + ti];
                    let m = av.max(cv);
                    let ea = (av - m).exp();
                    let ec = (cv - m).exp();
                    out[(bi * p + pi) * t + ti] = ea / (ea + ec);
                }
            }
        }
    }
    let weights = out.clone();
    Ok(Tensor::from_op(
        vec![b, p, 1, t],
        out,
        vec![s_tfs.clone(), s_cfs.clone()],
        move |g, parents| {
            let mut da = vec![0.0; b * t];
            let mut dc = vec![0.0; b * p];
            for bi in 0..b {
                for pi in 0..p {
                    for ti in 0..t {
                        let idx = (bi * p + pi) * t + ti;
                        let w = weights[idx];
                        let local = g[idx] * w * (1.0 - w);
                        da[bi * t + ti] += local;
                        dc[bi * p + pi] -= local;
                    }
                }
            }
            parents[0].accumulate_grad(&da);
            parents[1].accumulate_grad(&dc);
        },
    ))
}

/// Softmax over logits then mean negative log-likelihood over the batch,
/// computed through the log-sum-exp identity. Gradient is
/// (softmax - one-hot)/B.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Geometry(format!(
            "cross_entropy: expected (B,M) logits, got {:?}",
            s
        )));
    }
    let (b, m) = (s[0], s[1]);
    if labels.len() != b {
        return Err(Error::InvalidInput(format!(
            "cross_entropy: {} labels for batch of {}",
            labels.len(),
            b
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::InvalidInput(format!(
            "cross_entropy: label {} out of range for {} classes",
            bad, m
        )));
    }
    let mut loss = 0.0;
    let mut probs = vec![0.0; b * m];
    {
        let x = logits.data();
        for bi in 0..b {
            let row = &x[bi * m..(bi + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[bi * m + k] = e;
                z += e;
            }
            for v in probs[bi * m..(bi + 1) * m].iter_mut() {
                *v /= z;
            }
            loss += mx + z.ln() - row[labels[bi]];
        }
    }
    loss /= b as f64;
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![logits.clone()],
        move |g, parents| {
            let mut d = vec![0.0; b * m];
            for bi in 0..b {
                for k in 0..m {
                    let onehot = if labels[bi] == k { 1.0 } else { 0.0 };
                    d[bi * m + k] = g[0] * (probs[bi * m + k] - onehot) / b as f64;
                }
            }
            parents[0].accumulate_grad(&d);
        },
    ))
}

/// Per-row softmax probabilities of (B,M) logits, outside the graph.
/// Evaluation-side helper for metrics that need probability rows.
pub fn softmax_rows(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Geometry(format!(
            "softmax_rows: expected (B,M) logits, got {:?}",
            s
        )));
    }
    let (b, m) = (s[0], s[1]);
    let x = logits.data();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let row = &x[bi * m..(bi + 1) * m];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.push(exps.into_iter().map(|e| e / z).collect());
    }
    Ok(out)
}
