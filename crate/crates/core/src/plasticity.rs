//! Monte-Carlo estimation of component plasticity: the expected ratio
//! |f(x) - f(y)|_F / |x - y|_F over random distinct input pairs, per
//! component site, with per-kind means and the resulting ranking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, matmul, mix_seed};
use crate::model::forward::{embed_image, encode, layer_norm, multi_head_attention, MhaWeights};
use crate::model::params::{names, ComponentKind, ParameterStore, ALL_KINDS};
use crate::model::{DimLabel, TokenSequence, ViTConfig};
use crate::parallel;
use crate::tensor::Tensor;

/// How probe inputs reach each component.
///
/// EmbeddingLevel feeds post-embedding sequences to every component (the
/// second feedforward layer via the zero-padding lift). InSitu pairs the
/// component's actual traced inputs from forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeMode {
    EmbeddingLevel,
    InSitu,
}

/// Where probe sequences come from.
#[derive(Debug, Clone)]
pub enum ProbeSource {
    /// Images embedded with the model under study.
    Images(Vec<Tensor>),
    /// Synthetic token sequences with exact zero mean and unit variance per
    /// token; `seq_len` tokens of the model dimension.
    UnitVarianceTokens { count: usize, seq_len: usize },
}

/// Pairing configuration: x is drawn from `source_a`, y from `source_b`,
/// index-matched after independent shuffles (shorter source cycles). Pairs
/// closer than `min_discrepancy` are rejected and resampled.
#[derive(Debug, Clone)]
pub struct PairSampler {
    pub source_a: ProbeSource,
    pub source_b: ProbeSource,
    pub num_pairs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Defaults to 1e-8 * sqrt(d * n) when unset.
    pub min_discrepancy: Option<f64>,
}

impl PairSampler {
    pub fn unit_variance(count: usize, seq_len: usize, num_pairs: usize, seed: u64) -> Self {
        PairSampler {
            source_a: ProbeSource::UnitVarianceTokens { count, seq_len },
            source_b: ProbeSource::UnitVarianceTokens { count, seq_len },
            num_pairs,
            batch_size: 32,
            seed,
            min_discrepancy: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Contracting,
    Amplifying,
}

/// Per-site estimate: raw rate-of-change samples (capped), mean and
/// standard error, and the contraction/amplification regime.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteStats {
    pub layer: usize,
    pub kind: ComponentKind,
    pub samples: Vec<f64>,
    pub total_samples: usize,
    pub mean: f64,
    pub std_error: f64,
    pub regime: Regime,
}

/// Raw samples beyond this cap are summarized, not serialized.
pub const RAW_SAMPLE_CAP: usize = 10_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSummary {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlasticityReport {
    pub schema_version: u32,
    pub model: ModelSummary,
    pub mode: ProbeMode,
    pub seed: u64,
    pub num_pairs: usize,
    pub min_discrepancy: f64,
    pub sites: Vec<SiteStats>,
    /// Mean over depth per component kind, in ALL_KINDS order.
    pub kind_means: Vec<(ComponentKind, f64)>,
    /// The five kinds sorted by decreasing mean plasticity.
    pub ranking: Vec<ComponentKind>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl PlasticityReport {
    pub fn kind_mean(&self, kind: ComponentKind) -> f64 {
        self.kind_means
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, m)| *m)
            .unwrap_or(f64::NAN)
    }

    pub fn site(&self, layer: usize, kind: ComponentKind) -> Option<&SiteStats> {
        self.sites.iter().find(|s| s.layer == layer && s.kind == kind)
    }
}

/// Zero-pads each token from R^d into the first d coordinates of R^{4d}.
/// Norm-preserving by construction.
pub fn lift_to_hidden(x: &TokenSequence) -> Result<TokenSequence> {
    if x.dim_label != DimLabel::ModelDim {
        return Err(Error::invalid(
            "lift_to_hidden",
            "sequence is already in the hidden dimension",
        ));
    }
    let (d, n) = (x.dim(), x.len());
    let mut out = Tensor::zeros(&[4 * d, n]);
    for r in 0..d {
        out.row_mut(r).copy_from_slice(x.tokens.row(r));
    }
    TokenSequence::new(out, DimLabel::HiddenDim)
}

/// Per-sequence radius sqrt((1/n) sum_i |x_i|^2), averaged over sequences.
pub fn compute_radius(sequences: &[TokenSequence]) -> f64 {
    if sequences.is_empty() {
        return 0.0;
    }
    let total: f64 = sequences
        .iter()
        .map(|s| frobenius_norm(&s.tokens) / (s.len() as f64).sqrt())
        .sum();
    total / sequences.len() as f64
}

/// Evaluates one component in isolation, in the bias-free form the
/// rate-of-change analysis is stated for (bias terms cancel in
/// f(x) - f(y); the attention analysis assumes the pure map).
pub fn evaluate_component(
    cfg: &ViTConfig,
    params: &ParameterStore,
    layer: usize,
    kind: ComponentKind,
    x: &TokenSequence,
) -> Result<TokenSequence> {
    match kind {
        ComponentKind::Ln1 => layer_norm(
            params.tensor(&names::ln_gamma(layer, false)),
            params.tensor(&names::ln_beta(layer, false)),
            cfg.ln_eps,
            x,
        ),
        ComponentKind::Ln2 => layer_norm(
            params.tensor(&names::ln_gamma(layer, true)),
            params.tensor(&names::ln_beta(layer, true)),
            cfg.ln_eps,
            x,
        ),
        ComponentKind::Mha => {
            let w = MhaWeights::from_store(params, layer, cfg.num_heads, false);
            multi_head_attention(&w, x)
        }
        ComponentKind::Fc1 => {
            let out = matmul(params.tensor(&names::fc_weight(layer, false)), &x.tokens)?;
            TokenSequence::new(out, DimLabel::HiddenDim)
        }
        ComponentKind::Fc2 => {
            let w2 = params.tensor(&names::fc_weight(layer, true));
            if x.dim() != w2.cols() {
                return Err(Error::shape(
                    "evaluate_component",
                    format!("FC2 expects {} rows, got {}", w2.cols(), x.dim()),
                ));
            }
            let out = matmul(w2, &x.tokens)?;
            TokenSequence::new(out, DimLabel::ModelDim)
        }
    }
}

/// One rate-of-change sample for a component site on a pair of sequences.
pub fn rate_of_change(
    cfg: &ViTConfig,
    params: &ParameterStore,
    layer: usize,
    kind: ComponentKind,
    x: &TokenSequence,
    y: &TokenSequence,
    min_discrepancy: f64,
) -> Result<f64> {
    let denom = frobenius_norm(&x.tokens.sub(&y.tokens)?);
    if denom < min_discrepancy {
        return Err(Error::DegeneratePair {
            distance: denom,
            min_discrepancy,
        });
    }
    let fx = evaluate_component(cfg, params, layer, kind, x)?;
    let fy = evaluate_component(cfg, params, layer, kind, y)?;
    Ok(frobenius_norm(&fx.tokens.sub(&fy.tokens)?) / denom)
}

pub fn default_min_discrepancy(d: usize, n: usize) -> f64 {
    1e-8 * ((d * n) as f64).sqrt()
}

fn unit_variance_sequence(d: usize, n: usize, rng: &mut ChaCha8Rng) -> TokenSequence {
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
        let s = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for r in 0..d {
            let v = (t.at(r, j) - mean) * s;
            *t.at_mut(r, j) = v;
        }
    }
    TokenSequence::new(t, DimLabel::ModelDim).expect("finite by construction")
}

fn materialize_source(
    cfg: &ViTConfig,
    params: &ParameterStore,
    source: &ProbeSource,
    seed: u64,
    side: u64,
) -> Result<Vec<TokenSequence>> {
    match source {
        ProbeSource::Images(images) => {
            if images.is_empty() {
                return Err(Error::DatasetTooSmall {
                    detail: "probe source holds no images".into(),
                });
            }
            let out: Vec<Result<TokenSequence>> =
                parallel::map_indexed(images.len(), |i| embed_image(cfg, params, &images[i]));
            out.into_iter().collect()
        }
        ProbeSource::UnitVarianceTokens { count, seq_len } => {
            if *count == 0 {
                return Err(Error::DatasetTooSmall {
                    detail: "probe source configured with zero sequences".into(),
                });
            }
            Ok((0..*count)
                .map(|i| {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(mix_seed(seed, &[side, i as u64, 0x70_6b]));
                    unit_variance_sequence(cfg.embed_dim, *seq_len, &mut rng)
                })
                .collect())
        }
    }
}

fn sample_pair_indices(
    probes_a: &[TokenSequence],
    probes_b: &[TokenSequence],
    num_pairs: usize,
    seed: u64,
    min_disc: f64,
) -> Result<Vec<(usize, usize)>> {
    let (la, lb) = (probes_a.len(), probes_b.len());
    let mut accepted = Vec::with_capacity(num_pairs);
    const MAX_ROUNDS: u64 = 100;
    for round in 0..MAX_ROUNDS {
        let mut perm_a: Vec<usize> = (0..la).collect();
        let mut perm_b: Vec<usize> = (0..lb).collect();
        let mut rng_a = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[1, round]));
        let mut rng_b = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[2, round]));
        perm_a.shuffle(&mut rng_a);
        perm_b.shuffle(&mut rng_b);
        for k in 0..la.max(lb) {
            let (ia, ib) = (perm_a[k % la], perm_b[k % lb]);
            let dist = frobenius_norm(&probes_a[ia].tokens.sub(&probes_b[ib].tokens)?);
            if dist >= min_disc {
                accepted.push((ia, ib));
                if accepted.len() == num_pairs {
                    return Ok(accepted);
                }
            }
        }
    }
    Err(Error::DatasetTooSmall {
        detail: format!(
            "could not assemble {num_pairs} distinct pairs from {la} x {lb} probes \
             (min discrepancy {min_disc:.3e})"
        ),
    })
}

/// Rate for a linear map applied to the pair difference; exact for FC sites
/// and cheaper than two full evaluations.
fn linear_rate(weight: &Tensor, first_cols: Option<usize>, diff: &Tensor, denom: f64) -> Result<f64> {
    let w = match first_cols {
        Some(c) => {
            // Equivalent to applying the full map to the zero-padded lift.
            let mut sub = Tensor::zeros(&[weight.rows(), c]);
            for r in 0..weight.rows() {
                sub.row_mut(r).copy_from_slice(&weight.row(r)[..c]);
            }
            sub
        }
        None => weight.clone(),
    };
    Ok(frobenius_norm(&matmul(&w, diff)?) / denom)
}

/// Estimates plasticity for every (layer, component) site.
///
/// Deterministic given the sampler seed: pair evaluation may run in
/// parallel but results merge in pair-index order.
pub fn estimate_plasticity(
    cfg: &ViTConfig,
    params: &ParameterStore,
    sampler: &PairSampler,
    mode: ProbeMode,
) -> Result<PlasticityReport> {
    cfg.validate()?;
    if sampler.num_pairs == 0 {
        return Err(Error::invalid("estimate_plasticity", "num_pairs must be >= 1"));
    }
    let probes_a = materialize_source(cfg, params, &sampler.source_a, sampler.seed, 0xA)?;
    let probes_b = materialize_source(cfg, params, &sampler.source_b, sampler.seed, 0xB)?;
    let d = probes_a[0].dim();
    let n_tokens = probes_a[0].len();
    let min_disc = sampler
        .min_discrepancy
        .unwrap_or_else(|| default_min_discrepancy(d, n_tokens));
    let pairs = sample_pair_indices(&probes_a, &probes_b, sampler.num_pairs, sampler.seed, min_disc)?;

    // Traces are only needed in situ; one traced encode per distinct probe.
    let traces_a;
    let traces_b;
    match mode {
        ProbeMode::InSitu => {
            let run = |probes: &[TokenSequence]| -> Result<Vec<_>> {
                let v: Vec<Result<_>> = parallel::map_indexed(probes.len(), |i| {
                    Ok(encode(cfg, params, &probes[i], true)?.1.expect("trace requested"))
                });
                v.into_iter().collect()
            };
            traces_a = Some(run(&probes_a)?);
            traces_b = Some(run(&probes_b)?);
        }
        ProbeMode::EmbeddingLevel => {
            traces_a = None;
            traces_b = None;
        }
    }

    let mut sites = Vec::with_capacity(cfg.num_layers * ALL_KINDS.len());
    for layer in 0..cfg.num_layers {
        for kind in ALL_KINDS {
            let rates: Vec<Result<f64>> = parallel::map_indexed(pairs.len(), |p| {
                let (ia, ib) = pairs[p];
                match mode {
                    ProbeMode::EmbeddingLevel => {
                        let x = &probes_a[ia];
                        let y = &probes_b[ib];
                        let diff = x.tokens.sub(&y.tokens)?;
                        let denom = frobenius_norm(&diff);
                        match kind {
                            ComponentKind::Fc1 => linear_rate(
                                params.tensor(&names::fc_weight(layer, false)),
                                None,
                                &diff,
                                denom,
                            ),
                            ComponentKind::Fc2 => linear_rate(
                                params.tensor(&names::fc_weight(layer, true)),
                                Some(d),
                                &diff,
                                denom,
                            ),
                            _ => rate_of_change(cfg, params, layer, kind, x, y, min_disc),
                        }
                    }
                    ProbeMode::InSitu => {
                        let ta = traces_a.as_ref().unwrap();
                        let tb = traces_b.as_ref().unwrap();
                        let x = &ta[ia][layer];
                        let y = &tb[ib][layer];
                        let pick = |l: &crate::model::LayerActivations| match kind {
                            ComponentKind::Ln1 => l.ln1_input.clone(),
                            ComponentKind::Mha => l.mha_input.clone(),
                            ComponentKind::Ln2 => l.ln2_input.clone(),
                            ComponentKind::Fc1 => l.fc1_input.clone(),
                            ComponentKind::Fc2 => l.fc2_input.clone(),
                        };
                        rate_of_change(cfg, params, layer, kind, &pick(x), &pick(y), min_disc)
                    }
                }
            });
            let rates: Vec<f64> = rates.into_iter().collect::<Result<_>>()?;
            sites.push(site_stats(layer, kind, rates));
        }
    }

    let mut kind_means = Vec::with_capacity(ALL_KINDS.len());
    for kind in ALL_KINDS {
        let of_kind: Vec<f64> = sites
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.mean)
            .collect();
        let mean = if of_kind.is_empty() {
            f64::NAN
        } else {
            of_kind.iter().sum::<f64>() / of_kind.len() as f64
        };
        kind_means.push((kind, mean));
    }
    let mut ranking: Vec<ComponentKind> = ALL_KINDS.to_vec();
    ranking.sort_by(|a, b| {
        let ma = kind_means.iter().find(|(k, _)| k == a).unwrap().1;
        let mb = kind_means.iter().find(|(k, _)| k == b).unwrap().1;
        mb.partial_cmp(&ma).unwrap_or(std::cmp::Ordering::Equal)
    });

    Ok(PlasticityReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model: ModelSummary {
            embed_dim: cfg.embed_dim,
            num_heads: cfg.num_heads,
            num_layers: cfg.num_layers,
            seq_len: cfg.seq_len(),
        },
        mode,
        seed: sampler.seed,
        num_pairs: sampler.num_pairs,
        min_discrepancy: min_disc,
        sites,
        kind_means,
        ranking,
    })
}

fn site_stats(layer: usize, kind: ComponentKind, rates: Vec<f64>) -> SiteStats {
    let count = rates.len();
    let mean = rates.iter().sum::<f64>() / count as f64;
    let var = if count > 1 {
        rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (count as f64 - 1.0)
    } else {
        0.0
    };
    let std_error = (var / count as f64).sqrt();
    let regime = if mean > 1.0 {
        Regime::Amplifying
    } else {
        Regime::Contracting
    };
    let mut samples = rates;
    samples.truncate(RAW_SAMPLE_CAP);
    SiteStats {
        layer,
        kind,
        samples,
        total_samples: count,
        mean,
        std_error,
        regime,
    }
}

/// Unit-variance probe construction shared with tests and the CLI.
pub fn unit_variance_probes(d: usize, n: usize, count: usize, seed: u64) -> Vec<TokenSequence> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xA, i as u64, 0x70_6b]));
            unit_variance_sequence(d, n, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{init_params, InitScheme};

    fn scaled_identity_params(cfg: &ViTConfig, c: f64) -> ParameterStore {
        // Identity-like weights: FC1 = c [I; 0], FC2 = c [I | 0], per-head
        // V = c R_h and O = R_h^T so attention on one token is c * x, LN
        // gamma = c * 1. Q = K = 0.
        let d = cfg.embed_dim;
        let mut params = init_params(cfg, InitScheme::TruncNormal { std: 0.0 }, 0);
        for layer in 0..cfg.num_layers {
            *params.tensor_mut(&names::ln_gamma(layer, false)) = Tensor::from_fn(&[d], |_| c);
            *params.tensor_mut(&names::ln_gamma(layer, true)) = Tensor::from_fn(&[d], |_| c);
            let mut qkv = Tensor::zeros(&[3 * d, d]);
            for r in 0..d {
                *qkv.at_mut(2 * d + r, r) = c;
            }
            *params.tensor_mut(&names::qkv_weight(layer)) = qkv;
            *params.tensor_mut(&names::attn_out_weight(layer)) = Tensor::eye(d);
            let mut w1 = Tensor::zeros(&[4 * d, d]);
            for r in 0..d {
                *w1.at_mut(r, r) = c;
            }
            *params.tensor_mut(&names::fc_weight(layer, false)) = w1;
            let mut w2 = Tensor::zeros(&[d, 4 * d]);
            for r in 0..d {
                *w2.at_mut(r, r) = c;
            }
            *params.tensor_mut(&names::fc_weight(layer, true)) = w2;
        }
        params
    }

    #[test]
    fn lift_preserves_norm_and_zero() {
        let x = TokenSequence::new(
            Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.5]).unwrap(),
            DimLabel::ModelDim,
        )
        .unwrap();
        let lifted = lift_to_hidden(&x).unwrap();
        assert_eq!(lifted.dim(), 8);
        assert_eq!(lifted.dim_label, DimLabel::HiddenDim);
        assert_eq!(frobenius_norm(&lifted.tokens), frobenius_norm(&x.tokens));
        let zero = TokenSequence::new(Tensor::zeros(&[2, 3]), DimLabel::ModelDim).unwrap();
        assert!(lift_to_hidden(&zero).unwrap().tokens.data().iter().all(|&v| v == 0.0));
        assert!(lift_to_hidden(&lifted).is_err());
    }

    #[test]
    fn fc2_rate_uses_first_d_input_columns() {
        // On lifted pairs only the first d columns of W2's input space act.
        let cfg = ViTConfig {
            image_size: 16,
            patch_size: 8,
            channels: 3,
            embed_dim: 2,
            num_heads: 1,
            num_layers: 1,
            num_classes: 2,
            ln_eps: 1e-12,
            seed: 0,
        };
        let params = init_params(&cfg, InitScheme::TruncNormal { std: 0.3 }, 1);
        let w2 = params.tensor(&names::fc_weight(0, true)).clone();
        let x = TokenSequence::new(
            Tensor::from_vec(&[2, 2], vec![0.4, -1.0, 2.0, 0.3]).unwrap(),
            DimLabel::ModelDim,
        )
        .unwrap();
        let y = TokenSequence::new(
            Tensor::from_vec(&[2, 2], vec![-0.7, 0.1, 0.9, -0.2]).unwrap(),
            DimLabel::ModelDim,
        )
        .unwrap();
        let rate = rate_of_change(
            &cfg,
            &params,
            0,
            ComponentKind::Fc2,
            &lift_to_hidden(&x).unwrap(),
            &lift_to_hidden(&y).unwrap(),
            1e-12,
        )
        .unwrap();
        // Direct algebra: |W2[:, :2] (x - y)|_F / |x - y|_F.
        let diff = x.tokens.sub(&y.tokens).unwrap();
        let mut sub = Tensor::zeros(&[2, 2]);
        for r in 0..2 {
            sub.row_mut(r).copy_from_slice(&w2.row(r)[..2]);
        }
        let expect = frobenius_norm(&matmul(&sub, &diff).unwrap()) / frobenius_norm(&diff);
        assert!((rate - expect).abs() < 1e-14);
    }

    #[test]
    fn ln_with_zero_gamma_has_zero_rate() {
        let cfg = ViTConfig::tiny(4);
        let mut params = init_params(&cfg, InitScheme::TruncNormal { std: 0.02 }, 2);
        *params.tensor_mut(&names::ln_gamma(0, false)) = Tensor::zeros(&[cfg.embed_dim]);
        let probes = unit_variance_probes(cfg.embed_dim, 5, 2, 3);
        let rate = rate_of_change(
            &cfg,
            &params,
            0,
            ComponentKind::Ln1,
            &probes[0],
            &probes[1],
            1e-12,
        )
        .unwrap();
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn degenerate_pair_rejected() {
        let cfg = ViTConfig::tiny(4);
        let params = init_params(&cfg, InitScheme::TruncNormal { std: 0.02 }, 4);
        let probes = unit_variance_probes(cfg.embed_dim, 5, 1, 5);
        let err = rate_of_change(
            &cfg,
            &params,
            0,
            ComponentKind::Fc1,
            &probes[0],
            &probes[0],
            1e-8,
        );
        assert!(matches!(err, Err(Error::DegeneratePair { .. })));
    }

    #[test]
    fn scaled_identity_sites_report_scale() {
        // Single-token probes: every site acts as c * identity (LN up to
        // the eps factor), so estimated plasticity is |c|.
        let c = 1.75;
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 8,
            channels: 3,
            embed_dim: 6,
            num_heads: 2,
            num_layers: 2,
            num_classes: 2,
            ln_eps: 1e-12,
            seed: 0,
        };
        let params = scaled_identity_params(&cfg, c);
        let sampler = PairSampler::unit_variance(6, 1, 8, 7);
        let report = estimate_plasticity(&cfg, &params, &sampler, ProbeMode::EmbeddingLevel).unwrap();
        for site in &report.sites {
            assert!(
                (site.mean - c).abs() < 1e-9,
                "{} layer {} mean {}",
                site.kind,
                site.layer,
                site.mean
            );
        }
    }

    #[test]
    fn fc1_scale_equivariance() {
        let cfg = ViTConfig::tiny(4);
        let mut params = init_params(&cfg, InitScheme::MatchedScale, 6);
        let sampler = PairSampler::unit_variance(6, 17, 6, 8);
        let r1 = estimate_plasticity(&cfg, &params, &sampler, ProbeMode::EmbeddingLevel).unwrap();
        for layer in 0..cfg.num_layers {
            let name = names::fc_weight(layer, false);
            let scaled = params.tensor(&name).scale(3.0);
            *params.tensor_mut(&name) = scaled;
        }
        let r2 = estimate_plasticity(&cfg, &params, &sampler, ProbeMode::EmbeddingLevel).unwrap();
        for layer in 0..cfg.num_layers {
            let a = r1.site(layer, ComponentKind::Fc1).unwrap().mean;
            let b = r2.site(layer, ComponentKind::Fc1).unwrap().mean;
            assert!((b - 3.0 * a).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn report_is_deterministic_and_ranked() {
        let cfg = ViTConfig::tiny(4);
        let params = init_params(&cfg, InitScheme::MatchedScale, 9);
        let sampler = PairSampler::unit_variance(5, 17, 4, 10);
        let a = estimate_plasticity(&cfg, &params, &sampler, ProbeMode::EmbeddingLevel).unwrap();
        let b = estimate_plasticity(&cfg, &params, &sampler, ProbeMode::EmbeddingLevel).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        // Ranking is a permutation of the five kinds.
        let mut kinds = a.ranking.clone();
        kinds.sort();
        let mut all = ALL_KINDS.to_vec();
        all.sort();
        assert_eq!(kinds, all);
        // All samples non-negative and finite.
        for s in &a.sites {
            assert!(s.samples.iter().all(|r| r.is_finite() && *r >= 0.0));
        }
    }

    #[test]
    fn toy_matched_scale_ordering() {
        let cfg = ViTConfig::tiny(4);
        let params = init_params(&cfg, InitScheme::MatchedScale, 11);
        let sampler = PairSampler::unit_variance(8, 17, 8, 12);
        let report = estimate_plasticity(&cfg, &params, &sampler, ProbeMode::EmbeddingLevel).unwrap();
        let ln1 = report.kind_mean(ComponentKind::Ln1);
        let ln2 = report.kind_mean(ComponentKind::Ln2);
        let fc1 = report.kind_mean(ComponentKind::Fc1);
        let fc2 = report.kind_mean(ComponentKind::Fc2);
        let mha = report.kind_mean(ComponentKind::Mha);
        assert!(ln1 < 1.0 && ln2 < 1.0, "LN sites contract: {ln1} {ln2}");
        let fc_min = fc1.min(fc2);
        let top = mha.max(fc1.max(fc2));
        assert!(ln1.max(ln2) < fc_min, "LN below FC");
        assert!(fc_min <= top);
    }

    #[test]
    fn doubling_pairs_stays_within_three_stderr() {
        let cfg = ViTConfig::tiny(4);
        let params = init_params(&cfg, InitScheme::MatchedScale, 13);
        let s1 = PairSampler::unit_variance(16, 17, 8, 14);
        let s2 = PairSampler::unit_variance(32, 17, 16, 14);
        let r1 = estimate_plasticity(&cfg, &params, &s1, ProbeMode::EmbeddingLevel).unwrap();
        let r2 = estimate_plasticity(&cfg, &params, &s2, ProbeMode::EmbeddingLevel).unwrap();
        for (a, b) in r1.sites.iter().zip(&r2.sites) {
            let tol = 3.0 * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt().max(1e-12);
            assert!(
                (a.mean - b.mean).abs() <= tol,
                "{} layer {}: {} vs {} (tol {tol})",
                a.kind,
                a.layer,
                a.mean,
                b.mean
            );
        }
    }

    #[test]
    fn insitu_mode_runs() {
        let cfg = ViTConfig::tiny(4);
        let params = init_params(&cfg, InitScheme::TruncNormal { std: 0.05 }, 15);
        let sampler = PairSampler::unit_variance(4, 17, 3, 16);
        let report = estimate_plasticity(&cfg, &params, &sampler, ProbeMode::InSitu).unwrap();
        assert_eq!(report.sites.len(), 5 * cfg.num_layers);
        for s in &report.sites {
            assert!(s.samples.iter().all(|r| r.is_finite() && *r >= 0.0));
        }
    }

    #[test]
    fn radius_examples() {
        // Constant token norm 19.4.
        let d = 4;
        let n = 6;
        let mut t = Tensor::zeros(&[d, n]);
        for j in 0..n {
            *t.at_mut(0, j) = 19.4;
        }
        let seq = TokenSequence::new(t, DimLabel::ModelDim).unwrap();
        assert!((compute_radius(&[seq]) - 19.4).abs() < 1e-12);
        let zero = TokenSequence::new(Tensor::zeros(&[d, n]), DimLabel::ModelDim).unwrap();
        assert_eq!(compute_radius(&[zero]), 0.0);
        // Scalar-loop oracle on a random sequence.
        let probes = unit_variance_probes(5, 7, 1, 17);
        let mut acc = 0.0;
        for j in 0..7 {
            let mut norm2 = 0.0;
            for r in 0..5 {
                norm2 += probes[0].tokens.at(r, j).powi(2);
            }
            acc += norm2;
        }
        let oracle = (acc / 7.0).sqrt();
        assert!((compute_radius(&probes[..1]) - oracle).abs() <= 1e-12 * oracle);
    }
}
