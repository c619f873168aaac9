//! Paired Wilcoxon signed-rank test and Holm–Bonferroni step-down correction.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of nonzero differences for which the null distribution is enumerated exactly.
pub const EXACT_MAX_N: usize = 12;
pub const MIN_NONZERO: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub labels: (String, String),
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Sum of ranks of positive differences `a − b`.
    pub w_plus: f64,
    /// min(W+, W−).
    pub statistic: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub method: PMethod,
}

/// Average ranks (1-based) of `|d|`; returns ranks in input order and the tie-group sizes.
fn midranks(abs: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&i, &j| abs[i].total_cmp(&abs[j]));
    let mut ranks = vec![0.0; abs.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && abs[order[j]] == abs[order[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

/// Exact two-sided p-value of W+ under the sign-flip null, counting over all 2ⁿ sign patterns.
///
/// Midranks are multiples of 1/2, so the distribution is tabulated over doubled ranks.
pub fn exact_p_value(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w = (2.0 * w_plus).round() as usize;
    let all = 2f64.powi(ranks.len() as i32);
    let lower: u64 = counts[..=w].iter().sum();
    let upper: u64 = counts[w..].iter().sum();
    (2.0 * lower.min(upper) as f64 / all).min(1.0)
}

fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Two-sided normal approximation with tie-corrected variance and no continuity correction.
pub fn normal_p_value(n: usize, ties: &[usize], w_plus: f64) -> f64 {
    let n = n as f64;
    let mean = n * (n + 1.0) / 4.0;
    let tie: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w_plus - mean) / var.sqrt();
    (2.0 * normal_sf(z.abs())).min(1.0)
}

/// Two-sided signed-rank test on `a − b`, zero differences dropped.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<PairedComparison> {
    wilcoxon_labeled(a, b, ("A", "B"))
}

pub fn wilcoxon_labeled(a: &[f64], b: &[f64], labels: (&str, &str)) -> Result<PairedComparison> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "paired lists differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Validation("paired values must be finite".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&v| v != 0.0).collect();
    let n = d.len();
    if n < MIN_NONZERO {
        return Err(Error::InsufficientData(format!(
            "{n} nonzero paired differences, at least {MIN_NONZERO} needed"
        )));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = midranks(&abs);
    // an empty f64 sum is -0.0
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum::<f64>() + 0.0;
    let w_minus = n as f64 * (n as f64 + 1.0) / 2.0 - w_plus;
    let (p_value, method) = if n <= EXACT_MAX_N {
        (exact_p_value(&ranks, w_plus), PMethod::Exact)
    } else {
        (normal_p_value(n, &ties, w_plus), PMethod::Normal)
    };
    Ok(PairedComparison {
        labels: (labels.0.to_string(), labels.1.to_string()),
        a: a.to_vec(),
        b: b.to_vec(),
        w_plus,
        statistic: w_plus.min(w_minus),
        p_value,
        n_effective: n,
        method,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResult {
    pub alpha: f64,
    /// Input order.
    pub p_values: Vec<f64>,
    /// α/(m−i+1) for the i-th smallest p, ascending order.
    pub thresholds: Vec<f64>,
    /// Input positions in ascending-p order.
    pub order: Vec<usize>,
    /// Input order.
    pub reject: Vec<bool>,
}

pub fn holm_bonferroni(p_values: &[f64], alpha: f64) -> Result<CorrectionResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Validation(format!("alpha {alpha} outside (0, 1)")));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Validation(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    // stable sort: equal p-values keep input order
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]));
    let thresholds: Vec<f64> = (0..m).map(|i| alpha / (m - i) as f64).collect();
    let mut reject = vec![false; m];
    for (i, &k) in order.iter().enumerate() {
        if p_values[k] <= thresholds[i] {
            reject[k] = true;
        } else {
            break;
        }
    }
    Ok(CorrectionResult {
        alpha,
        p_values: p_values.to_vec(),
        thresholds,
        order,
        reject,
    })
}

/// Table of comparisons with raw and Holm-adjusted decisions.
pub fn comparison_table(cmps: &[PairedComparison], alpha: f64) -> Result<String> {
    let ps: Vec<f64> = cmps.iter().map(|c| c.p_value).collect();
    let holm = holm_bonferroni(&ps, alpha)?;
    let mut s = String::from("model_a,model_b,n_effective,W,p_value,method,raw_reject,holm_reject\n");
    for (c, &h) in cmps.iter().zip(&holm.reject) {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6e},{},{},{}",
            c.labels.0,
            c.labels.1,
            c.n_effective,
            c.statistic,
            c.p_value,
            if c.method == PMethod::Exact { "exact" } else { "normal" },
            c.p_value <= alpha,
            h
        );
    }
    Ok(s)
}
