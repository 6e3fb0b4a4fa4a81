//! Shared oracles for the integration suites. Everything here is an
//! independent reference path: no production code is reused beyond the
//! basic Tensor container.

use vitlab_core::tensor::Tensor;

/// Largest eigenvalue of a^T a via cyclic Jacobi rotations, then sqrt.
/// Brute-force spectral-norm oracle for small matrices.
pub fn jacobi_spectral_norm(a: &Tensor) -> f64 {
    let (m, n) = (a.rows(), a.cols());
    // b = a^T a, n x n symmetric PSD.
    let mut b = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for r in 0..m {
                acc += a.at(r, i) * a.at(r, j);
            }
            b[i][j] = acc;
        }
    }
    if n == 1 {
        return b[0][0].max(0.0).sqrt();
    }
    for _sweep in 0..200 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(b[i][j].abs());
            }
        }
        let scale = (0..n).map(|i| b[i][i].abs()).fold(0.0f64, f64::max);
        if off <= 1e-14 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if b[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (b[q][q] - b[p][p]) / (2.0 * b[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let bkp = b[k][p];
                    let bkq = b[k][q];
                    b[k][p] = c * bkp - s * bkq;
                    b[k][q] = s * bkp + c * bkq;
                }
                for k in 0..n {
                    let bpk = b[p][k];
                    let bqk = b[q][k];
                    b[p][k] = c * bpk - s * bqk;
                    b[q][k] = s * bpk + c * bqk;
                }
            }
        }
    }
    (0..n).map(|i| b[i][i]).fold(0.0f64, f64::max).max(0.0).sqrt()
}

/// Exact two-sided signed-rank p-value by recursive enumeration with float
/// ranks; independent of the production bitmask path.
pub fn wilcoxon_exact_oracle(diffs: &[f64]) -> f64 {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| nz[a].abs().partial_cmp(&nz[b].abs()).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nz[idx[j + 1]].abs() == nz[idx[i]].abs() {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &ii in &idx[i..=j] {
            ranks[ii] = avg;
        }
        i = j + 1;
    }
    let w_obs: f64 = nz
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    fn walk(ranks: &[f64], acc: f64, w_obs: f64, le: &mut u64, ge: &mut u64) {
        match ranks.split_first() {
            None => {
                if acc <= w_obs + 1e-9 {
                    *le += 1;
                }
                if acc >= w_obs - 1e-9 {
                    *ge += 1;
                }
            }
            Some((r, rest)) => {
                walk(rest, acc, w_obs, le, ge);
                walk(rest, acc + r, w_obs, le, ge);
            }
        }
    }
    let (mut le, mut ge) = (0u64, 0u64);
    walk(&ranks, 0.0, w_obs, &mut le, &mut ge);
    let total = (1u64 << n) as f64;
    (2.0 * (le.min(ge) as f64) / total).min(1.0)
}
