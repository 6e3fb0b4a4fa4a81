//! Evaluation of the four plasticity upper bounds: the LayerNorm bound
//! |gamma|_inf / sigma, the linear-layer spectral bound |W|_2, the
//! restricted-ball attention bound, and its tighter total-energy variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    inf_norm, mix_seed, spectral_norm, spectral_norm_product, SpectralNorm,
    SPECTRAL_MAX_ITERS_DEFAULT, SPECTRAL_TOL_DEFAULT,
};
use crate::model::forward::slice_rows;
use crate::model::params::{names, ComponentKind, ParameterStore, ALL_KINDS};
use crate::model::{DimLabel, TokenSequence, ViTConfig};
use crate::tensor::Tensor;

/// Constants consumed by the bound formulas.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Sequence length.
    pub n: usize,
    /// Token ball radius for the restricted-ball attention bound.
    pub r: f64,
    /// Minimal per-position token standard deviation for the LN bound.
    pub sigma_min: f64,
    /// Spectral norm of the patch-embedding map (tighter bound only).
    pub alpha: f64,
    /// Total image energy cap (tighter bound only).
    pub energy: f64,
}

/// Power-iteration settings used for all spectral norms in a report.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PowerIterSettings {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for PowerIterSettings {
    fn default() -> Self {
        PowerIterSettings {
            tol: SPECTRAL_TOL_DEFAULT,
            max_iters: SPECTRAL_MAX_ITERS_DEFAULT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Proposition {
    LayerNormBound,
    LinearSpectralBound,
    AttentionBallBound,
    AttentionEnergyBound,
}

/// Per-head constants entering an attention bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadTerm {
    pub o_spectral: f64,
    pub v_spectral: f64,
    pub a_spectral: f64,
    /// This head's contribution to the total.
    pub term: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteBound {
    pub layer: usize,
    pub kind: ComponentKind,
    pub value: f64,
    pub proposition: Proposition,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gamma_inf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub weight_spectral: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub heads: Vec<HeadTerm>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub schema_version: u32,
    pub inputs: BoundInputs,
    /// R = alpha * sqrt(energy), recorded when the tighter bound is used.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub energy_radius: Option<f64>,
    pub sites: Vec<SiteBound>,
    pub kind_means: Vec<(ComponentKind, f64)>,
    pub ranking: Vec<ComponentKind>,
}

pub const BOUND_SCHEMA_VERSION: u32 = 1;

impl BoundReport {
    pub fn site(&self, layer: usize, kind: ComponentKind) -> Option<&SiteBound> {
        self.sites.iter().find(|s| s.layer == layer && s.kind == kind)
    }

    pub fn kind_mean(&self, kind: ComponentKind) -> f64 {
        self.kind_means
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, m)| *m)
            .unwrap_or(f64::NAN)
    }
}

/// LayerNorm bound: |gamma|_inf / sigma.
pub fn ln_bound(gamma: &Tensor, sigma_min: f64) -> Result<f64> {
    if sigma_min <= 0.0 {
        return Err(Error::AssumptionViolation {
            op: "ln_bound",
            detail: format!("sigma_min must be > 0, got {sigma_min}"),
        });
    }
    Ok(inf_norm(gamma.data()) / sigma_min)
}

/// Linear-layer bound: the spectral norm of the weight matrix.
pub fn fc_bound(w: &Tensor, settings: PowerIterSettings) -> Result<f64> {
    Ok(spectral_norm(w, settings.tol, settings.max_iters)?.value)
}

/// Per-head weights of one attention layer (each k x d, output map d x k).
pub struct HeadWeights {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub o: Tensor,
}

/// Extracts per-head weight blocks from the fused qkv / output maps.
pub fn head_weights(params: &ParameterStore, layer: usize, num_heads: usize) -> Vec<HeadWeights> {
    let qkv = params.tensor(&names::qkv_weight(layer));
    let out = params.tensor(&names::attn_out_weight(layer));
    let d = out.rows();
    let k = d / num_heads;
    (0..num_heads)
        .map(|h| {
            let q = slice_rows(qkv, h * k, k);
            let key = slice_rows(qkv, d + h * k, k);
            let v = slice_rows(qkv, 2 * d + h * k, k);
            // Column block h of the output map.
            let mut o = Tensor::zeros(&[d, k]);
            for r in 0..d {
                for c in 0..k {
                    *o.at_mut(r, c) = out.at(r, h * k + c);
                }
            }
            HeadWeights { q, k: key, v, o }
        })
        .collect()
}

fn head_spectral(h: &HeadWeights, settings: PowerIterSettings) -> Result<(f64, f64, f64)> {
    let k_dim = h.q.rows() as f64;
    let o = spectral_norm(&h.o, settings.tol, settings.max_iters)?.value;
    let v = spectral_norm(&h.v, settings.tol, settings.max_iters)?.value;
    // |A|_2 with A = Q^T K / sqrt(k), iterated without forming A.
    let a = spectral_norm_product(&h.q, &h.k, 1.0 / k_dim.sqrt(), settings.tol, settings.max_iters)?.value;
    Ok((o, v, a))
}

/// Restricted-ball attention bound:
/// sum_h |O^h|_2 |V^h|_2 sqrt(3n + (12n + 3) r^4 |A^h|_2^2).
pub fn mha_bound(
    heads: &[HeadWeights],
    n: usize,
    r: f64,
    settings: PowerIterSettings,
) -> Result<(f64, Vec<HeadTerm>)> {
    if r < 0.0 {
        return Err(Error::invalid("mha_bound", "radius must be >= 0"));
    }
    if n == 0 {
        return Err(Error::invalid("mha_bound", "sequence length must be >= 1"));
    }
    let nf = n as f64;
    let mut total = 0.0;
    let mut terms = Vec::with_capacity(heads.len());
    for h in heads {
        let (o, v, a) = head_spectral(h, settings)?;
        let term = o * v * (3.0 * nf + (12.0 * nf + 3.0) * r.powi(4) * a * a).sqrt();
        total += term;
        terms.push(HeadTerm {
            o_spectral: o,
            v_spectral: v,
            a_spectral: a,
            term,
        });
    }
    Ok((total, terms))
}

/// Tighter total-energy bound:
/// sum_h |O^h|_2 |V^h|_2 (sqrt(n) + alpha^2 E |A^h|_2).
pub fn mha_bound_tighter(
    heads: &[HeadWeights],
    n: usize,
    alpha: f64,
    energy: f64,
    settings: PowerIterSettings,
) -> Result<(f64, Vec<HeadTerm>)> {
    if alpha < 0.0 || energy < 0.0 {
        return Err(Error::invalid("mha_bound_tighter", "alpha and energy must be >= 0"));
    }
    let nf = n as f64;
    let mut total = 0.0;
    let mut terms = Vec::with_capacity(heads.len());
    for h in heads {
        let (o, v, a) = head_spectral(h, settings)?;
        let term = o * v * (nf.sqrt() + alpha * alpha * energy * a);
        total += term;
        terms.push(HeadTerm {
            o_spectral: o,
            v_spectral: v,
            a_spectral: a,
            term,
        });
    }
    Ok((total, terms))
}

/// Single-head restricted-ball Lipschitz bound:
/// sqrt(3) |V|_2 sqrt(|A|_2^2 r^4 (4n + 1) + n).
pub fn attention_lipschitz_per_head(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n: usize,
    r: f64,
    settings: PowerIterSettings,
) -> Result<f64> {
    if r < 0.0 {
        return Err(Error::invalid("attention_lipschitz_per_head", "radius must be >= 0"));
    }
    let k_dim = q.rows() as f64;
    let v2 = spectral_norm(v, settings.tol, settings.max_iters)?.value;
    let a = spectral_norm_product(q, k, 1.0 / k_dim.sqrt(), settings.tol, settings.max_iters)?.value;
    let nf = n as f64;
    Ok(3.0f64.sqrt() * v2 * (a * a * r.powi(4) * (4.0 * nf + 1.0) + nf).sqrt())
}

/// Evaluates every site's bound. When `tighter` is set, attention sites use
/// the total-energy bound instead of the restricted-ball one.
pub fn evaluate_all_bounds(
    cfg: &ViTConfig,
    params: &ParameterStore,
    inputs: &BoundInputs,
    tighter: bool,
    settings: PowerIterSettings,
) -> Result<BoundReport> {
    cfg.validate()?;
    // One task per layer, merged in layer order.
    let per_layer: Vec<Result<Vec<SiteBound>>> = crate::parallel::map_indexed(cfg.num_layers, |layer| {
        let mut layer_sites = Vec::with_capacity(ALL_KINDS.len());
        for kind in ALL_KINDS {
            let site = match kind {
                ComponentKind::Ln1 | ComponentKind::Ln2 => {
                    let gamma = params.tensor(&names::ln_gamma(layer, kind == ComponentKind::Ln2));
                    let value = ln_bound(gamma, inputs.sigma_min)?;
                    SiteBound {
                        layer,
                        kind,
                        value,
                        proposition: Proposition::LayerNormBound,
                        gamma_inf: Some(inf_norm(gamma.data())),
                        weight_spectral: None,
                        heads: Vec::new(),
                    }
                }
                ComponentKind::Fc1 | ComponentKind::Fc2 => {
                    let w = params.tensor(&names::fc_weight(layer, kind == ComponentKind::Fc2));
                    let value = fc_bound(w, settings)?;
                    SiteBound {
                        layer,
                        kind,
                        value,
                        proposition: Proposition::LinearSpectralBound,
                        gamma_inf: None,
                        weight_spectral: Some(value),
                        heads: Vec::new(),
                    }
                }
                ComponentKind::Mha => {
                    let heads = head_weights(params, layer, cfg.num_heads);
                    let (value, terms, prop) = if tighter {
                        let (v, t) =
                            mha_bound_tighter(&heads, inputs.n, inputs.alpha, inputs.energy, settings)?;
                        (v, t, Proposition::AttentionEnergyBound)
                    } else {
                        let (v, t) = mha_bound(&heads, inputs.n, inputs.r, settings)?;
                        (v, t, Proposition::AttentionBallBound)
                    };
                    SiteBound {
                        layer,
                        kind,
                        value,
                        proposition: prop,
                        gamma_inf: None,
                        weight_spectral: None,
                        heads: terms,
                    }
                }
            };
            layer_sites.push(site);
        }
        Ok(layer_sites)
    });
    let mut sites = Vec::with_capacity(cfg.num_layers * ALL_KINDS.len());
    for layer_sites in per_layer {
        sites.extend(layer_sites?);
    }
    let mut kind_means = Vec::with_capacity(ALL_KINDS.len());
    for kind in ALL_KINDS {
        let vals: Vec<f64> = sites.iter().filter(|s| s.kind == kind).map(|s| s.value).collect();
        let mean = if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        kind_means.push((kind, mean));
    }
    let mut ranking: Vec<ComponentKind> = ALL_KINDS.to_vec();
    ranking.sort_by(|a, b| {
        let ma = kind_means.iter().find(|(k, _)| k == a).unwrap().1;
        let mb = kind_means.iter().find(|(k, _)| k == b).unwrap().1;
        mb.partial_cmp(&ma).unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(BoundReport {
        schema_version: BOUND_SCHEMA_VERSION,
        inputs: *inputs,
        energy_radius: tighter.then(|| inputs.alpha * inputs.energy.sqrt()),
        sites,
        kind_means,
        ranking,
    })
}

/// Minimal per-position token standard deviation over a probe sample,
/// floored at 1e-6, plus the observed (min, max) spread.
pub fn estimate_sigma_min(sequences: &[TokenSequence]) -> Result<(f64, (f64, f64))> {
    if sequences.is_empty() {
        return Err(Error::DatasetTooSmall {
            detail: "sigma estimation needs at least one sequence".into(),
        });
    }
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for seq in sequences {
        let (d, n) = (seq.dim(), seq.len());
        for j in 0..n {
            let mut mean = 0.0;
            for r in 0..d {
                mean += seq.tokens.at(r, j);
            }
            mean /= d as f64;
            let mut var = 0.0;
            for r in 0..d {
                let c = seq.tokens.at(r, j) - mean;
                var += c * c;
            }
            var /= d as f64;
            let sd = var.sqrt();
            lo = lo.min(sd);
            hi = hi.max(sd);
        }
    }
    Ok((lo.max(1e-6), (lo, hi)))
}

/// Spectral norm of the patch-embedding map.
pub fn embedding_alpha(params: &ParameterStore, settings: PowerIterSettings) -> Result<f64> {
    Ok(spectral_norm(params.tensor(names::EMBED_WEIGHT), settings.tol, settings.max_iters)?.value)
}

/// Maximal total energy (sum of squared intensities) over a set of images.
pub fn max_energy(images: &[Tensor]) -> f64 {
    images
        .iter()
        .map(|img| img.data().iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Assumption-enforcing pair constructions for Monte-Carlo bound checks.
/// Assumptions are enforced by construction (projection, stat equalization)
/// rather than by filtering, so samples are never starved.
pub mod verify {
    use super::*;

    /// Pairs sharing exact per-position mean and standard deviation, as the
    /// LayerNorm bound assumes. Targets are drawn per position once. The
    /// measure is over distinct pairs, so coincident draws are resampled
    /// (at d = 2 a stat-pinned token has just two possible values and
    /// collisions are common).
    pub fn equal_stats_pair(d: usize, n: usize, seed: u64) -> (TokenSequence, TokenSequence) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x57A7]));
        let mus: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            })
            .collect();
        let sigmas: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.5 + z.abs()
            })
            .collect();
        let make = |rng: &mut ChaCha8Rng| -> TokenSequence {
            let mut t = Tensor::from_fn(&[d, n], |_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            });
            for j in 0..n {
                let mut mean = 0.0;
                for r in 0..d {
                    mean += t.at(r, j);
                }
                mean /= d as f64;
                let mut var = 0.0;
                for r in 0..d {
                    let c = t.at(r, j) - mean;
                    var += c * c;
                }
                var /= d as f64;
                let s = sigmas[j] / var.sqrt();
                for r in 0..d {
                    let v = (t.at(r, j) - mean) * s + mus[j];
                    *t.at_mut(r, j) = v;
                }
            }
            TokenSequence::new(t, DimLabel::ModelDim).expect("finite")
        };
        let x = make(&mut rng);
        for _ in 0..1000 {
            let y = make(&mut rng);
            let dist = crate::linalg::frobenius_norm(&x.tokens.sub(&y.tokens).expect("same shape"));
            if dist >= 1e-6 * crate::linalg::frobenius_norm(&x.tokens).max(1.0) {
                return (x, y);
            }
        }
        unreachable!("stat-equalized construction kept colliding");
    }

    /// Pairs with every token projected onto the ball of radius r.
    pub fn ball_pair(d: usize, n: usize, r: f64, seed: u64) -> (TokenSequence, TokenSequence) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xBA11]));
        let mut make = || -> TokenSequence {
            let mut t = Tensor::from_fn(&[d, n], |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            });
            for j in 0..n {
                let mut norm2 = 0.0;
                for row in 0..d {
                    norm2 += t.at(row, j) * t.at(row, j);
                }
                let norm = norm2.sqrt();
                if norm > r && norm > 0.0 {
                    let f = r / norm;
                    for row in 0..d {
                        *t.at_mut(row, j) *= f;
                    }
                }
            }
            TokenSequence::new(t, DimLabel::ModelDim).expect("finite")
        };
        (make(), make())
    }

    /// Pairs of token sequences obtained by clipping random images to a
    /// total energy cap and embedding them with the pure linear map (no
    /// bias, no CLS, no positions), as the energy bound assumes.
    pub fn energy_pair(
        embed: &Tensor,
        channels: usize,
        image_size: usize,
        patch_size: usize,
        energy: f64,
        seed: u64,
    ) -> (TokenSequence, TokenSequence) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xE6E6]));
        let g = image_size / patch_size;
        let mut make = || -> TokenSequence {
            let mut img = Tensor::from_fn(&[channels, image_size, image_size], |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            });
            let total: f64 = img.data().iter().map(|v| v * v).sum();
            if total > energy && total > 0.0 {
                let f = (energy / total).sqrt();
                for v in img.data_mut() {
                    *v *= f;
                }
            }
            let d = embed.rows();
            let n = g * g;
            let mut t = Tensor::zeros(&[d, n]);
            let data = img.data();
            let mut idx = 0usize;
            for gy in 0..g {
                for gx in 0..g {
                    let mut patch = Vec::with_capacity(patch_size * patch_size * channels);
                    for c in 0..channels {
                        for py in 0..patch_size {
                            let y = gy * patch_size + py;
                            let base = c * image_size * image_size + y * image_size + gx * patch_size;
                            patch.extend_from_slice(&data[base..base + patch_size]);
                        }
                    }
                    for r in 0..d {
                        let mut acc = 0.0;
                        for (w, v) in embed.row(r).iter().zip(&patch) {
                            acc += w * v;
                        }
                        *t.at_mut(r, idx) = acc;
                    }
                    idx += 1;
                }
            }
            TokenSequence::new(t, DimLabel::ModelDim).expect("finite")
        };
        (make(), make())
    }
}

/// Convenience: the spectral norm result for a stand-alone tensor with the
/// report's settings (used by CLI diagnostics).
pub fn spectral_with(t: &Tensor, settings: PowerIterSettings) -> Result<SpectralNorm> {
    spectral_norm(t, settings.tol, settings.max_iters)
}
