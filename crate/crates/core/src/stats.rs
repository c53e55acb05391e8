//! Exact paired sign test.
//!
//! Pairs whose difference is within [`TIE_TOLERANCE`] are dropped. The p-value
//! is the one-sided binomial tail `P(X >= w | n, 1/2)` where `w` is the win
//! count of whichever side wins more often.

use std::collections::BTreeMap;
use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIE_TOLERANCE: f64 = 1e-12;

/// Threshold below which a sign-test result counts as significant.
pub const SIGNIFICANCE_LEVEL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn flip(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub p_value: f64,
    pub n_effective: usize,
    pub wins_a: usize,
    pub wins_b: usize,
    /// `None` on an exact split (including `n_effective == 0`).
    pub winner: Option<Side>,
}

impl SignTest {
    pub fn significant(&self) -> bool {
        self.winner.is_some() && self.p_value < SIGNIFICANCE_LEVEL
    }
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if n <= 53 {
        // the count of outcomes and 2^n are both exact in f64
        let mut c: u64 = 1;
        let mut hits: u64 = 0;
        for i in 0..=n as u64 {
            if i as usize >= k {
                hits += c;
            }
            c = c * (n as u64 - i) / (i + 1);
        }
        return hits as f64 / (1u64 << n) as f64;
    }
    // log C(n, i) - n ln 2, accumulated from i = k upward
    let ln2 = std::f64::consts::LN_2;
    let mut ln_c = ln_choose(n, k);
    let mut terms = Vec::with_capacity(n - k + 1);
    for i in k..=n {
        terms.push(ln_c - n as f64 * ln2);
        if i < n {
            ln_c += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        }
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    (max + sum.ln()).exp().min(1.0)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Sign test over two equally long score vectors, paired by position.
pub fn paired_sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("sign test needs at least one pair"));
    }
    let (mut wins_a, mut wins_b) = (0, 0);
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        if d > TIE_TOLERANCE {
            wins_a += 1;
        } else if d < -TIE_TOLERANCE {
            wins_b += 1;
        }
    }
    let n = wins_a + wins_b;
    let (winner, lead) = match wins_a.cmp(&wins_b) {
        std::cmp::Ordering::Greater => (Some(Side::A), wins_a),
        std::cmp::Ordering::Less => (Some(Side::B), wins_b),
        std::cmp::Ordering::Equal => (None, wins_a),
    };
    let p_value = if n == 0 { 1.0 } else { binomial_upper_tail(n, lead) };
    Ok(SignTest {
        p_value,
        n_effective: n,
        wins_a,
        wins_b,
        winner,
    })
}

/// Sign test over scores keyed by case id; every key must appear on both sides.
pub fn paired_sign_test_keyed<K: Ord + Debug>(
    a: &BTreeMap<K, f64>,
    b: &BTreeMap<K, f64>,
) -> Result<SignTest> {
    if let Some(k) = a.keys().find(|k| !b.contains_key(*k)) {
        return Err(Error::invalid(format!("case {k:?} has no paired score")));
    }
    if let Some(k) = b.keys().find(|k| !a.contains_key(*k)) {
        return Err(Error::invalid(format!("case {k:?} has no paired score")));
    }
    let xs: Vec<f64> = a.values().copied().collect();
    let ys: Vec<f64> = b.values().copied().collect();
    paired_sign_test(&xs, &ys)
}
