//! Dense matrix arithmetic, norms, softmax and the norm lemmas the
//! smoothness bounds rest on.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{NormKind, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Base seed for power-iteration start vectors; mixed with the operator
/// shape so different shapes get independent but reproducible starts.
const POWER_ITER_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

pub const SPECTRAL_TOL_DEFAULT: f64 = 1e-10;
pub const SPECTRAL_MAX_ITERS_DEFAULT: usize = 10_000;

/// Relative slack for the norm-lemma inequalities; dominates rounding noise
/// (~1e-15) without masking real violations.
pub const NORM_LEMMA_SLACK: f64 = 1e-10;

/// splitmix64 step, used to derive reproducible sub-seeds.
pub fn mix_seed(base: u64, salts: &[u64]) -> u64 {
    let mut z = base;
    for &s in salts {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(s);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Matrix product with a fixed summation order (i, p, j loops), so results
/// are bit-reproducible for a given build. Large products run row-parallel;
/// rows are disjoint, so the output is identical to the sequential path.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions disagree: {m}x{ka} vs {kb}x{n}"),
        ));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let work = m * n * ka;
    let chunk_rows = if work >= (1 << 20) { 8 } else { m.max(1) };
    let a_data = a.data();
    let b_data = b.data();
    parallel::for_each_row_chunk(out.data_mut(), n, chunk_rows, |chunk_idx, slice| {
        let row0 = chunk_idx * chunk_rows;
        for (local, out_row) in slice.chunks_mut(n).enumerate() {
            let i = row0 + local;
            let a_row = &a_data[i * ka..(i + 1) * ka];
            for (p, &aip) in a_row.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let b_row = &b_data[p * n..(p + 1) * n];
                for (o, &bpj) in out_row.iter_mut().zip(b_row) {
                    *o += aip * bpj;
                }
            }
        }
    });
    Ok(out)
}

/// y = a * x for a matrix a and vector x.
pub fn matvec(a: &Tensor, x: &[f64]) -> Vec<f64> {
    let (m, k) = (a.rows(), a.cols());
    assert_eq!(k, x.len(), "matvec dimension mismatch");
    let mut y = vec![0.0; m];
    for i in 0..m {
        let row = a.row(i);
        let mut acc = 0.0;
        for (ap, xp) in row.iter().zip(x) {
            acc += ap * xp;
        }
        y[i] = acc;
    }
    y
}

/// y = a^T * x.
pub fn matvec_t(a: &Tensor, x: &[f64]) -> Vec<f64> {
    let (m, k) = (a.rows(), a.cols());
    assert_eq!(m, x.len(), "matvec_t dimension mismatch");
    let mut y = vec![0.0; k];
    for i in 0..m {
        let row = a.row(i);
        let xi = x[i];
        if xi == 0.0 {
            continue;
        }
        for (yj, ap) in y.iter_mut().zip(row) {
            *yj += ap * xi;
        }
    }
    y
}

/// sqrt of the sum of squared entries.
pub fn frobenius_norm(a: &Tensor) -> f64 {
    a.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn euclidean_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Spectral norm estimate from power iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest singular value via power iteration on a^T a.
///
/// The start vector is deterministic (seed mixed with the shape). Converged
/// when successive estimates differ by less than `tol * estimate`. A
/// non-converged result is still returned, flagged.
pub fn spectral_norm(a: &Tensor, tol: f64, max_iters: usize) -> Result<SpectralNorm> {
    if !a.is_matrix() {
        return Err(Error::shape("spectral_norm", format!("{:?}", a.shape())));
    }
    let (m, n) = (a.rows(), a.cols());
    // Power iteration is undefined on the zero operator; short-circuit.
    if a.data().iter().all(|&v| v == 0.0) {
        if tol <= 0.0 {
            return Err(Error::invalid("spectral_norm", format!("tol must be > 0, got {tol}")));
        }
        if max_iters == 0 {
            return Err(Error::invalid("spectral_norm", "max_iters must be >= 1"));
        }
        return Ok(SpectralNorm { value: 0.0, iterations: 0, converged: true });
    }
    power_iteration(
        |v| matvec(a, v),
        |u| matvec_t(a, u),
        n,
        m,
        tol,
        max_iters,
        mix_seed(POWER_ITER_SEED, &[m as u64, n as u64]),
    )
}

pub fn spectral_norm_default(a: &Tensor) -> Result<SpectralNorm> {
    spectral_norm(a, SPECTRAL_TOL_DEFAULT, SPECTRAL_MAX_ITERS_DEFAULT)
}

/// Spectral norm of `scale * q^T k` without materializing the product.
///
/// Used for attention score maps A = Q^T K / sqrt(k), whose explicit d x d
/// form is large while q and k are thin.
pub fn spectral_norm_product(q: &Tensor, k: &Tensor, scale: f64, tol: f64, max_iters: usize) -> Result<SpectralNorm> {
    if q.rows() != k.rows() {
        return Err(Error::shape(
            "spectral_norm_product",
            format!("{:?} vs {:?}", q.shape(), k.shape()),
        ));
    }
    let (dq, dk) = (q.cols(), k.cols());
    power_iteration(
        |v| {
            let t = matvec(k, v);
            let mut u = matvec_t(q, &t);
            for x in &mut u {
                *x *= scale;
            }
            u
        },
        |u| {
            let t = matvec(q, u);
            let mut v = matvec_t(k, &t);
            for x in &mut v {
                *x *= scale;
            }
            v
        },
        dk,
        dq,
        tol,
        max_iters,
        mix_seed(POWER_ITER_SEED, &[q.rows() as u64, dq as u64, dk as u64, 7]),
    )
}

fn power_iteration(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    apply_t: impl Fn(&[f64]) -> Vec<f64>,
    in_dim: usize,
    _out_dim: usize,
    tol: f64,
    max_iters: usize,
    seed: u64,
) -> Result<SpectralNorm> {
    if tol <= 0.0 {
        return Err(Error::invalid("spectral_norm", format!("tol must be > 0, got {tol}")));
    }
    if max_iters == 0 {
        return Err(Error::invalid("spectral_norm", "max_iters must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..in_dim).map(|_| rng.gen::<f64>() - 0.5).collect();
    let vnorm = euclidean_norm(&v);
    if vnorm == 0.0 || in_dim == 0 {
        return Ok(SpectralNorm { value: 0.0, iterations: 0, converged: true });
    }
    for x in &mut v {
        *x /= vnorm;
    }
    let mut estimate = 0.0f64;
    for it in 1..=max_iters {
        let u = apply(&v);
        let sigma = euclidean_norm(&u);
        // Zero operator (or v in its null space with nothing left to find).
        if sigma == 0.0 {
            return Ok(SpectralNorm { value: 0.0, iterations: it, converged: true });
        }
        let w = apply_t(&u);
        let wnorm = euclidean_norm(&w);
        if wnorm == 0.0 {
            return Ok(SpectralNorm { value: sigma, iterations: it, converged: true });
        }
        v = w;
        for x in &mut v {
            *x /= wnorm;
        }
        if it > 1 && (sigma - estimate).abs() < tol * sigma.max(f64::MIN_POSITIVE) {
            return Ok(SpectralNorm { value: sigma, iterations: it, converged: true });
        }
        estimate = sigma;
    }
    Ok(SpectralNorm { value: estimate, iterations: max_iters, converged: false })
}

/// Norm of a tensor under the requested kind. Spectral uses default power
/// iteration settings; InfVector/Euclidean expect the data as a flat vector.
pub fn norm(a: &Tensor, kind: NormKind) -> Result<f64> {
    match kind {
        NormKind::Frobenius => Ok(frobenius_norm(a)),
        NormKind::Spectral => Ok(spectral_norm_default(a)?.value),
        NormKind::InfVector => Ok(inf_norm(a.data())),
        NormKind::Euclidean => Ok(euclidean_norm(a.data())),
    }
}

/// Row-wise softmax with max subtraction, so large scores cannot overflow.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    assert!(a.is_matrix(), "softmax_rows needs a matrix");
    let (m, n) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let row = a.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let out_row = out.row_mut(i);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

pub fn softmax_vec(u: &[f64]) -> Vec<f64> {
    let max = u.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
    let mut out: Vec<f64> = u.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Verdicts for the three Frobenius/spectral product inequalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormLemmaVerdict {
    /// |ab|_F <= |a|_F |b|_F
    pub frob_frob: bool,
    /// |ab|_F <= |a|_2 |b|_F
    pub spec_frob: bool,
    /// |ab|_F <= |a|_F |b|_2
    pub frob_spec: bool,
}

impl NormLemmaVerdict {
    pub fn all_hold(&self) -> bool {
        self.frob_frob && self.spec_frob && self.frob_spec
    }
}

/// Evaluates the three product inequalities with a relative slack of 1e-10.
pub fn check_norm_lemma(a: &Tensor, b: &Tensor) -> Result<NormLemmaVerdict> {
    let ab = matmul(a, b)?;
    let lhs = frobenius_norm(&ab);
    let af = frobenius_norm(a);
    let bf = frobenius_norm(b);
    let a2 = spectral_norm_default(a)?.value;
    let b2 = spectral_norm_default(b)?.value;
    let ok = |rhs: f64| lhs <= rhs * (1.0 + NORM_LEMMA_SLACK) + f64::MIN_POSITIVE;
    Ok(NormLemmaVerdict {
        frob_frob: ok(af * bf),
        spec_frob: ok(a2 * bf),
        frob_spec: ok(af * b2),
    })
}

/// |softmax(u) - softmax(v)| / |u - v| for distinct vectors.
///
/// The softmax theorem asserts this never exceeds 1/2.
pub fn softmax_lipschitz_witness(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(
            "softmax_lipschitz_witness",
            format!("{} vs {}", u.len(), v.len()),
        ));
    }
    let diff: f64 = u
        .iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if diff == 0.0 {
        return Err(Error::DegeneratePair { distance: 0.0, min_discrepancy: f64::MIN_POSITIVE });
    }
    let su = softmax_vec(u);
    let sv = softmax_vec(v);
    let num: f64 = su
        .iter()
        .zip(&sv)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / diff)
}
