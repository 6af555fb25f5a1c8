//! Classification metrics: confusion matrix, accuracy, macro F-measure,
//! Cohen's kappa, one-vs-rest ROC-AUC, and the paired t-test.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Rows are true classes, columns predicted.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    /// Unweighted mean of per-class F1, with 0/0 defined as 0.
    pub f_measure: f64,
    pub kappa: f64,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
    /// Kappa is undefined when chance agreement is 1.
    pub kappa_defined: bool,
    /// One-vs-rest AUC per class; NaN-free only when both outcomes occur.
    pub auc_per_class: Option<Vec<f64>>,
    pub auc_macro: Option<f64>,
}

/// Build the confusion matrix and the threshold-free scores from predicted
/// classes. When probability rows are supplied the prediction is their
/// argmax and per-class AUC is filled in.
pub fn evaluate(
    probabilities: Option<&[Vec<f64>]>,
    predictions: Option<&[usize]>,
    labels: &[usize],
    classes: usize,
) -> Result<EvalReport> {
    let predicted: Vec<usize> = match (probabilities, predictions) {
        (Some(probs), _) => {
            if probs.len() != labels.len() {
                return Err(Error::InvalidInput(format!(
                    "{} probability rows for {} labels",
                    probs.len(),
                    labels.len()
                )));
            }
            for row in probs {
                if row.len() != classes {
                    return Err(Error::InvalidInput(format!(
                        "probability row of {} entries for {} classes",
                        row.len(),
                        classes
                    )));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidInput(format!(
                        "probability row sums to {s}, expected 1"
                    )));
                }
            }
            probs.iter().map(|row| argmax(row)).collect()
        }
        (None, Some(preds)) => {
            if preds.len() != labels.len() {
                return Err(Error::InvalidInput(format!(
                    "{} predictions for {} labels",
                    preds.len(),
                    labels.len()
                )));
            }
            preds.to_vec()
        }
        (None, None) => {
            return Err(Error::InvalidInput(
                "evaluate: need probabilities or predictions".into(),
            ))
        }
    };
    if let Some(&bad) = predicted.iter().chain(labels).find(|&&v| v >= classes) {
        return Err(Error::InvalidInput(format!(
            "class index {bad} out of range for {classes} classes"
        )));
    }

    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in labels.iter().zip(&predicted) {
        confusion[t][p] += 1;
    }
    let total = labels.len();
    let trace: usize = (0..classes).map(|k| confusion[k][k]).sum();
    let accuracy = trace as f64 / total as f64;

    let mut f_sum = 0.0;
    for k in 0..classes {
        let tp = confusion[k][k] as f64;
        let fp: f64 = (0..classes).filter(|&r| r != k).map(|r| confusion[r][k] as f64).sum();
        let fn_: f64 = (0..classes).filter(|&c| c != k).map(|c| confusion[k][c] as f64).sum();
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        f_sum += f1;
    }
    let f_measure = f_sum / classes as f64;

    let kappa = cohen_kappa(&confusion)?;

    let (auc_per_class, auc_macro) = match probabilities {
        Some(probs) => {
            let per = roc_auc_ovr(probs, labels, classes)?;
            let macro_mean = per.iter().sum::<f64>() / per.len() as f64;
            (Some(per), Some(macro_mean))
        }
        None => (None, None),
    };

    Ok(EvalReport {
        confusion,
        accuracy,
        f_measure,
        kappa: kappa.kappa,
        observed_agreement: kappa.observed,
        expected_agreement: kappa.expected,
        kappa_defined: kappa.defined,
        auc_per_class,
        auc_macro,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub struct Kappa {
    pub kappa: f64,
    pub observed: f64,
    pub expected: f64,
    /// False when chance agreement is 1, which leaves kappa undefined
    /// (value is NaN in that case).
    pub defined: bool,
}

/// Chance-corrected agreement: kappa = (P_o - P_e) / (1 - P_e), with
/// P_o = trace/total and P_e the marginal product sum.
pub fn cohen_kappa(confusion: &[Vec<usize>]) -> Result<Kappa> {
    let m = confusion.len();
    if m == 0 || confusion.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidInput("confusion matrix must be square".into()));
    }
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::InvalidInput("confusion matrix is empty".into()));
    }
    let tf = total as f64;
    let observed = (0..m).map(|k| confusion[k][k] as f64).sum::<f64>() / tf;
    let mut expected = 0.0;
    for k in 0..m {
        let row: usize = confusion[k].iter().sum();
        let col: usize = confusion.iter().map(|r| r[k]).sum();
        expected += row as f64 * col as f64 / (tf * tf);
    }
    if (1.0 - expected).abs() < 1e-15 {
        return Ok(Kappa {
            kappa: f64::NAN,
            observed,
            expected,
            defined: false,
        });
    }
    Ok(Kappa {
        kappa: (observed - expected) / (1.0 - expected),
        observed,
        expected,
        defined: true,
    })
}

/// One-vs-rest AUC per class via the Mann-Whitney rank statistic with
/// midrank tie handling.
pub fn roc_auc_ovr(probabilities: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    if probabilities.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} probability rows for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(classes);
    for k in 0..classes {
        let scores: Vec<f64> = probabilities.iter().map(|r| r[k]).collect();
        let positives: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        out.push(binary_auc(&scores, &positives)?);
    }
    Ok(out)
}

/// AUC of a binary ranking problem from scores, midranks for ties.
pub fn binary_auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput(
            "AUC undefined: a class never occurs as positive or negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Midranks over tied score groups.
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = positives
        .iter()
        .zip(&ranks)
        .filter(|(&p, _)| p)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// ROC points (false positive rate, true positive rate) at every distinct
/// score threshold, for CSV export.
pub fn roc_points(scores: &[f64], positives: &[bool]) -> Vec<(f64, f64)> {
    let n_pos = positives.iter().filter(|&&p| p).count() as f64;
    let n_neg = positives.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg.max(1.0), tp as f64 / n_pos.max(1.0)));
    }
    points
}

#[derive(Debug, Clone, Serialize)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    pub dof: usize,
    /// True when the paired differences have zero variance, which leaves
    /// the statistic undefined.
    pub degenerate: bool,
}

/// Two-sided paired t-test on equal-length samples.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput(
            "paired t-test needs equal-length samples of n >= 2".into(),
        ));
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Ok(TTestResult {
            t: f64::NAN,
            p: f64::NAN,
            dof: n - 1,
            degenerate: true,
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let p = student_t_two_sided_p(t, (n - 1) as f64);
    Ok(TTestResult {
        t,
        p,
        dof: n - 1,
        degenerate: false,
    })
}

/// Two-sided p-value of the Student t distribution via the regularized
/// incomplete beta function: p = I_{nu/(nu+t^2)}(nu/2, 1/2).
pub fn student_t_two_sided_p(t: f64, dof: f64) -> f64 {
    let x = dof / (dof + t * t);
    regularized_incomplete_beta(dof / 2.0, 0.5, x)
}

/// ln Gamma(x) by the Lanczos approximation (g = 7, n = 9 coefficients).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (std::f64::consts::TAU).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta function I_x(a, b) via the Lentz continued
/// fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-30;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let mf = m as f64;
        let num = mf * (b - mf) * x / ((qam + 2.0 * mf) * (a + 2.0 * mf));
        d = 1.0 + num * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + num / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let num = -(a + mf) * (qab + mf) * x / ((a + 2.0 * mf) * (qap + 2.0 * mf));
        d = 1.0 + num * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + num / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
