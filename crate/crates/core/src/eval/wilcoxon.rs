//! Two-sided paired Wilcoxon signed-rank test.
//!
//! Absolute differences are ranked with midranks for ties. Up to
//! [`EXACT_MAX_N`] non-zero differences the null distribution of `W+` is
//! computed exactly by dynamic programming over doubled ranks (equivalent to
//! enumerating all `2^n` sign assignments); above that a normal approximation
//! with tie and continuity corrections is used.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EXACT_MAX_N: usize = 20;

/// Differences closer than this (relative to their magnitude) count as ties;
/// smaller absolute differences count as zero.
const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Normal,
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Number of non-zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_value: f64,
    pub method: Method,
}

impl WilcoxonResult {
    pub fn degenerate(&self) -> bool {
        self.method == Method::Degenerate
    }
}

/// Non-zero differences `b - a` with their midranks.
pub fn signed_ranks(a: &[f64], b: &[f64]) -> Result<Vec<(f64, f64)>> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("no paired scores".into()));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).filter(|d| d.abs() > TIE_TOL).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract("non-finite score difference"));
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let mut out = Vec::with_capacity(d.len());
    let mut i = 0;
    while i < d.len() {
        let mut j = i + 1;
        while j < d.len() && (d[j].abs() - d[i].abs()) <= TIE_TOL * d[i].abs().max(1.0) {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        out.extend(d[i..j].iter().map(|x| (*x, mid)));
        i = j;
    }
    Ok(out)
}

fn sums(ranks: &[(f64, f64)]) -> (f64, f64) {
    let wp = ranks.iter().filter(|(d, _)| *d > 0.0).map(|(_, r)| r).sum();
    let wm = ranks.iter().filter(|(d, _)| *d < 0.0).map(|(_, r)| r).sum();
    (wp, wm)
}

/// `min(1, 2 P(W+ <= w))` under the exact null, `w = min(W+, W-)`.
pub fn exact_p(ranks: &[f64], w: f64) -> f64 {
    // Doubled midranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut count = vec![0f64; max + 1];
    count[0] = 1.0;
    let mut reach = 0;
    for r in &doubled {
        for s in (0..=reach).rev() {
            if count[s] != 0.0 {
                count[s + r] += count[s];
            }
        }
        reach += r;
    }
    let limit = (2.0 * w).round() as usize;
    let tail: f64 = count[..=limit.min(max)].iter().sum();
    let total = 2f64.powi(ranks.len() as i32);
    (2.0 * tail / total).min(1.0)
}

/// Normal approximation with tie and continuity corrections.
pub fn normal_p(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut tie = 0.0;
    let mut i = 0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|r| **r == sorted[i]).count();
        let t = j as f64;
        tie += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Paired test of `b` against `a`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let sr = signed_ranks(a, b)?;
    if sr.is_empty() {
        return Ok(WilcoxonResult {
            n: 0,
            w_plus: 0.0,
            w_minus: 0.0,
            statistic: 0.0,
            p_value: 1.0,
            method: Method::Degenerate,
        });
    }
    let (w_plus, w_minus) = sums(&sr);
    let statistic = w_plus.min(w_minus);
    let ranks: Vec<f64> = sr.iter().map(|(_, r)| *r).collect();
    let (p_value, method) = if sr.len() <= EXACT_MAX_N {
        (exact_p(&ranks, statistic), Method::Exact)
    } else {
        (normal_p(&ranks, statistic), Method::Normal)
    };
    Ok(WilcoxonResult { n: sr.len(), w_plus, w_minus, statistic, p_value, method })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_positive_differences() {
        let r = wilcoxon_signed_rank(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((r.w_plus, r.w_minus, r.statistic), (6.0, 0.0, 0.0));
        assert!((r.p_value - 0.25).abs() < 1e-15);
    }

    #[test]
    fn all_equal_is_degenerate() {
        let r = wilcoxon_signed_rank(&[0.3, 0.4], &[0.3, 0.4]).unwrap();
        assert!(r.degenerate());
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn ties_get_midranks() {
        let sr = signed_ranks(&[0.0; 4], &[1.0, -1.0, 2.0, 3.0]).unwrap();
        let ranks: Vec<f64> = sr.iter().map(|x| x.1).collect();
        assert_eq!(ranks, vec![1.5, 1.5, 3.0, 4.0]);
    }
}
