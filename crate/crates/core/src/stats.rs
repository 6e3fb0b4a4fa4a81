//! Paired nonparametric comparison: two-sided Wilcoxon signed-rank test
//! with the exact null distribution for small samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WilcoxonMethod {
    /// Full enumeration of the 2^n sign assignments.
    Exact,
    /// Normal approximation with tie correction.
    NormalApprox,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_nonzero: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// min(W+, W-), the conventional reported statistic.
    pub statistic: f64,
    pub p_value: f64,
    pub significant: bool,
    pub method: WilcoxonMethod,
}

/// Largest n for which the exact distribution is enumerated.
pub const EXACT_ENUMERATION_LIMIT: usize = 12;

/// Two-sided Wilcoxon signed-rank test on paired differences.
///
/// Zero differences are dropped. Ranks of |d| use average ranks for ties.
/// For n <= 12 the p-value is computed by enumerating all sign
/// assignments: p = min(1, 2 * min(P(W+ <= w), P(W+ >= w))). Beyond that, a
/// normal approximation with tie correction is used.
pub fn wilcoxon_signed_rank(paired_diffs: &[f64], alpha: f64) -> Result<WilcoxonResult> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("wilcoxon", format!("alpha {alpha} outside [0, 1]")));
    }
    let nonzero: Vec<f64> = paired_diffs.iter().copied().filter(|d| *d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::DegenerateStatistic {
            detail: "all paired differences are zero".into(),
        });
    }
    if nonzero.len() < 5 {
        return Err(Error::invalid(
            "wilcoxon",
            format!(
                "needs at least 5 nonzero paired differences, got {} (the test has no power below that)",
                nonzero.len()
            ),
        ));
    }
    let n = nonzero.len();

    // Average ranks of |d|, doubled so ties stay integral.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| nonzero[a].abs().partial_cmp(&nonzero[b].abs()).unwrap());
    let mut rank2 = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nonzero[order[j + 1]].abs() == nonzero[order[i]].abs() {
            j += 1;
        }
        // Positions i..=j share the average rank ((i+1) + (j+1)) / 2.
        let avg2 = (i as u64 + 1) + (j as u64 + 1);
        for &idx in &order[i..=j] {
            rank2[idx] = avg2;
        }
        i = j + 1;
    }

    let w_plus2: u64 = nonzero
        .iter()
        .zip(&rank2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let total2: u64 = rank2.iter().sum();
    let w_minus2 = total2 - w_plus2;

    let (p_value, method) = if n <= EXACT_ENUMERATION_LIMIT {
        (exact_two_sided_p(&rank2, w_plus2), WilcoxonMethod::Exact)
    } else {
        (normal_two_sided_p(&nonzero, w_plus2), WilcoxonMethod::NormalApprox)
    };

    Ok(WilcoxonResult {
        n_nonzero: n,
        w_plus: w_plus2 as f64 / 2.0,
        w_minus: w_minus2 as f64 / 2.0,
        statistic: (w_plus2.min(w_minus2)) as f64 / 2.0,
        p_value,
        significant: p_value < alpha,
        method,
    })
}

fn exact_two_sided_p(rank2: &[u64], w_obs2: u64) -> f64 {
    let n = rank2.len();
    let total = 1u64 << n;
    let mut count_le = 0u64;
    let mut count_ge = 0u64;
    for mask in 0..total {
        let mut w2 = 0u64;
        for (bit, r) in rank2.iter().enumerate() {
            if mask >> bit & 1 == 1 {
                w2 += r;
            }
        }
        if w2 <= w_obs2 {
            count_le += 1;
        }
        if w2 >= w_obs2 {
            count_ge += 1;
        }
    }
    let tail = count_le.min(count_ge) as f64 / total as f64;
    (2.0 * tail).min(1.0)
}

fn normal_two_sided_p(nonzero: &[f64], w_plus2: u64) -> f64 {
    let n = nonzero.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    // Tie correction: subtract sum(t^3 - t)/48 over tie groups.
    let mut sorted: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w_plus2 as f64 / 2.0 - mean) / var.sqrt();
    let phi = 0.5 * (1.0 + libm::erf(z.abs() / std::f64::consts::SQRT_2));
    (2.0 * (1.0 - phi)).clamp(0.0, 1.0)
}

/// Median of a slice (midpoint convention for even lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}
