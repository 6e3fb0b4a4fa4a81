use crate::error::{Error, Result};
use crate::linalg::{matmul, softmax_rows};
use crate::model::config::ViTConfig;
use crate::model::params::{names, ParameterStore};
use crate::model::{ActivationTrace, DimLabel, LayerActivations, TokenSequence};
use crate::tensor::Tensor;

/// Exact GeLU, x * Phi(x) with the erf form.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// d/dx gelu(x) = Phi(x) + x * phi(x).
pub fn gelu_derivative(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

/// Splits an image [C, S, S] into flattened patches, channel-major within a
/// patch, patches in row-major grid order. Equivalent to a stride-P
/// convolution with the embedding weights.
pub fn image_to_patches(cfg: &ViTConfig, image: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    if image.shape() != [c, s, s] {
        return Err(Error::shape(
            "image_to_patches",
            format!("expected [{c}, {s}, {s}], got {:?}", image.shape()),
        ));
    }
    let g = cfg.grid();
    let data = image.data();
    let mut patches = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            let mut patch = Vec::with_capacity(cfg.patch_dim());
            for ch in 0..c {
                for py in 0..p {
                    let y = gy * p + py;
                    let base = ch * s * s + y * s + gx * p;
                    patch.extend_from_slice(&data[base..base + p]);
                }
            }
            patches.push(patch);
        }
    }
    Ok(patches)
}

/// Patch-embeds an image: linear map on flattened patches, CLS prepended,
/// positional embeddings added.
pub fn embed_image(cfg: &ViTConfig, params: &ParameterStore, image: &Tensor) -> Result<TokenSequence> {
    let patches = image_to_patches(cfg, image)?;
    let d = cfg.embed_dim;
    let n = cfg.seq_len();
    let e = params.tensor(names::EMBED_WEIGHT);
    let e_bias = params.tensor(names::EMBED_BIAS);
    let cls = params.tensor(names::CLS_TOKEN);
    let pos = params.tensor(names::POS_EMBED);
    if e.shape() != [d, cfg.patch_dim()] {
        return Err(Error::shape(
            "embed_image",
            format!("embedding weight {:?}", e.shape()),
        ));
    }
    let mut x = Tensor::zeros(&[d, n]);
    for r in 0..d {
        *x.at_mut(r, 0) = cls.data()[r];
    }
    for (idx, patch) in patches.iter().enumerate() {
        for r in 0..d {
            let mut acc = e_bias.data()[r];
            let row = e.row(r);
            for (w, v) in row.iter().zip(patch) {
                acc += w * v;
            }
            *x.at_mut(r, idx + 1) = acc;
        }
    }
    for r in 0..d {
        for j in 0..n {
            *x.at_mut(r, j) += pos.at(r, j);
        }
    }
    TokenSequence::new(x, DimLabel::ModelDim)
}

/// Per-token LayerNorm: gamma * (x - mean) / sqrt(var + eps) + beta, with
/// population variance over the feature dimension.
pub fn layer_norm(gamma: &Tensor, beta: &Tensor, eps: f64, x: &TokenSequence) -> Result<TokenSequence> {
    let d = x.dim();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma {} / beta {} vs d {}", gamma.len(), beta.len(), d),
        ));
    }
    let (normalized, _) = layer_norm_stats(eps, &x.tokens);
    let n = x.len();
    let mut out = Tensor::zeros(&[d, n]);
    for r in 0..d {
        let g = gamma.data()[r];
        let b = beta.data()[r];
        for j in 0..n {
            *out.at_mut(r, j) = g * normalized.at(r, j) + b;
        }
    }
    TokenSequence::new(out, x.dim_label)
}

/// Returns per-token normalized values and 1/sqrt(var + eps) per token.
pub(crate) fn layer_norm_stats(eps: f64, x: &Tensor) -> (Tensor, Vec<f64>) {
    let (d, n) = (x.rows(), x.cols());
    let mut normalized = Tensor::zeros(&[d, n]);
    let mut inv_std = vec![0.0; n];
    for j in 0..n {
        let mut mean = 0.0;
        for r in 0..d {
            mean += x.at(r, j);
        }
        mean /= d as f64;
        let mut var = 0.0;
        for r in 0..d {
            let c = x.at(r, j) - mean;
            var += c * c;
        }
        var /= d as f64;
        let s = 1.0 / (var + eps).sqrt();
        inv_std[j] = s;
        for r in 0..d {
            *normalized.at_mut(r, j) = (x.at(r, j) - mean) * s;
        }
    }
    (normalized, inv_std)
}

/// Multi-head self-attention weights for one layer. Biases are optional so
/// the bias-free form of the smoothness analysis can reuse the same code.
pub struct MhaWeights<'a> {
    pub qkv_weight: &'a Tensor,
    pub qkv_bias: Option<&'a Tensor>,
    pub out_weight: &'a Tensor,
    pub out_bias: Option<&'a Tensor>,
    pub num_heads: usize,
}

impl<'a> MhaWeights<'a> {
    pub fn from_store(params: &'a ParameterStore, layer: usize, num_heads: usize, with_bias: bool) -> Self {
        MhaWeights {
            qkv_weight: params.tensor(&names::qkv_weight(layer)),
            qkv_bias: with_bias.then(|| params.tensor(&names::qkv_bias(layer))),
            out_weight: params.tensor(&names::attn_out_weight(layer)),
            out_bias: with_bias.then(|| params.tensor(&names::attn_out_bias(layer))),
            num_heads,
        }
    }
}

pub(crate) fn add_col_bias(x: &mut Tensor, bias: &Tensor) {
    let (d, n) = (x.rows(), x.cols());
    debug_assert_eq!(bias.len(), d);
    for r in 0..d {
        let b = bias.data()[r];
        for j in 0..n {
            *x.at_mut(r, j) += b;
        }
    }
}

pub(crate) fn slice_rows(x: &Tensor, start: usize, count: usize) -> Tensor {
    let n = x.cols();
    let mut out = Tensor::zeros(&[count, n]);
    out.data_mut()
        .copy_from_slice(&x.data()[start * n..(start + count) * n]);
    out
}

/// Intermediates of one attention evaluation, reused by the backward pass.
pub(crate) struct MhaCache {
    pub qkv: Tensor,
    /// Row-softmaxed score matrices, one per head.
    pub attn: Vec<Tensor>,
    /// Concatenated per-head context, [d, n].
    pub context: Tensor,
}

pub(crate) fn mha_forward(w: &MhaWeights, x: &Tensor) -> Result<(Tensor, MhaCache)> {
    let d = x.rows();
    let n = x.cols();
    let h = w.num_heads;
    if !d.is_multiple_of(h) {
        return Err(Error::shape("multi_head_attention", format!("d {d} not divisible by H {h}")));
    }
    let k = d / h;
    if w.qkv_weight.shape() != [3 * d, d] || w.out_weight.shape() != [d, d] {
        return Err(Error::shape(
            "multi_head_attention",
            format!("qkv {:?}, out {:?}", w.qkv_weight.shape(), w.out_weight.shape()),
        ));
    }
    let scale = 1.0 / (k as f64).sqrt();
    let mut qkv = matmul(w.qkv_weight, x)?;
    if let Some(b) = w.qkv_bias {
        add_col_bias(&mut qkv, b);
    }
    let mut context = Tensor::zeros(&[d, n]);
    let mut attn = Vec::with_capacity(h);
    for head in 0..h {
        let q = slice_rows(&qkv, head * k, k);
        let key = slice_rows(&qkv, d + head * k, k);
        let v = slice_rows(&qkv, 2 * d + head * k, k);
        let scores = matmul(&q.t(), &key)?.scale(scale);
        let s = softmax_rows(&scores);
        // Output token i is sum_j S[i][j] * (V x_j): context = (Vx) S^T.
        let ctx = matmul(&v, &s.t())?;
        for a in 0..k {
            let dst = context.row_mut(head * k + a);
            dst.copy_from_slice(ctx.row(a));
        }
        attn.push(s);
    }
    let mut out = matmul(w.out_weight, &context)?;
    if let Some(b) = w.out_bias {
        add_col_bias(&mut out, b);
    }
    Ok((out, MhaCache { qkv, attn, context }))
}

/// Multi-head self-attention on a token sequence.
pub fn multi_head_attention(w: &MhaWeights, x: &TokenSequence) -> Result<TokenSequence> {
    let (out, _) = mha_forward(w, &x.tokens)?;
    TokenSequence::new(out, x.dim_label)
}

/// Two-layer feedforward with exact GeLU: W2 gelu(W1 x + b1) + b2.
pub fn feedforward(
    w1: &Tensor,
    b1: Option<&Tensor>,
    w2: &Tensor,
    b2: Option<&Tensor>,
    x: &TokenSequence,
) -> Result<TokenSequence> {
    let mut hidden = matmul(w1, &x.tokens)?;
    if let Some(b) = b1 {
        add_col_bias(&mut hidden, b);
    }
    for v in hidden.data_mut() {
        *v = gelu(*v);
    }
    let mut out = matmul(w2, &hidden)?;
    if let Some(b) = b2 {
        add_col_bias(&mut out, b);
    }
    TokenSequence::new(out, x.dim_label)
}

/// One encoder block: x + MHA(LN1(x)), then x + FFN(LN2(x)).
fn block_forward(
    cfg: &ViTConfig,
    params: &ParameterStore,
    layer: usize,
    x: &TokenSequence,
    trace: Option<&mut Vec<LayerActivations>>,
) -> Result<TokenSequence> {
    let ln1_out = layer_norm(
        params.tensor(&names::ln_gamma(layer, false)),
        params.tensor(&names::ln_beta(layer, false)),
        cfg.ln_eps,
        x,
    )?;
    let mha_w = MhaWeights::from_store(params, layer, cfg.num_heads, true);
    let attn_out = multi_head_attention(&mha_w, &ln1_out)?;
    let mid = TokenSequence::new(x.tokens.add(&attn_out.tokens)?, x.dim_label)?;

    let ln2_out = layer_norm(
        params.tensor(&names::ln_gamma(layer, true)),
        params.tensor(&names::ln_beta(layer, true)),
        cfg.ln_eps,
        &mid,
    )?;
    let mut fc2_input = matmul(params.tensor(&names::fc_weight(layer, false)), &ln2_out.tokens)?;
    add_col_bias(&mut fc2_input, params.tensor(&names::fc_bias(layer, false)));
    for v in fc2_input.data_mut() {
        *v = gelu(*v);
    }
    let mut ffn_out = matmul(params.tensor(&names::fc_weight(layer, true)), &fc2_input)?;
    add_col_bias(&mut ffn_out, params.tensor(&names::fc_bias(layer, true)));
    let out = TokenSequence::new(mid.tokens.add(&ffn_out)?, mid.dim_label)?;

    if let Some(acc) = trace {
        acc.push(LayerActivations {
            ln1_input: x.clone(),
            mha_input: ln1_out,
            ln2_input: mid,
            fc1_input: ln2_out,
            fc2_input: TokenSequence::new(fc2_input, DimLabel::HiddenDim)?,
        });
    }
    Ok(out)
}

/// Classification logits for the CLS token after the output norm.
fn head_forward(cfg: &ViTConfig, params: &ParameterStore, x: &TokenSequence) -> Result<Tensor> {
    let d = cfg.embed_dim;
    let cls: Vec<f64> = (0..d).map(|r| x.tokens.at(r, 0)).collect();
    let cls_t = Tensor::from_vec(&[d, 1], cls)?;
    let cls_seq = TokenSequence::new(cls_t, DimLabel::ModelDim)?;
    let normed = layer_norm(
        params.tensor(names::HEAD_NORM_GAMMA),
        params.tensor(names::HEAD_NORM_BETA),
        cfg.ln_eps,
        &cls_seq,
    )?;
    let mut logits = matmul(params.tensor(names::HEAD_WEIGHT), &normed.tokens)?;
    let bias = params.tensor(names::HEAD_BIAS);
    for (i, v) in logits.data_mut().iter_mut().enumerate() {
        *v += bias.data()[i];
    }
    Tensor::from_vec(&[cfg.num_classes], logits.into_data())
}

/// Runs the block stack on a token sequence. With `trace`, captures each
/// component's input along the way.
pub fn encode(
    cfg: &ViTConfig,
    params: &ParameterStore,
    x0: &TokenSequence,
    trace: bool,
) -> Result<(TokenSequence, Option<Vec<LayerActivations>>)> {
    let mut layers = trace.then(Vec::new);
    let mut x = x0.clone();
    for layer in 0..cfg.num_layers {
        x = block_forward(cfg, params, layer, &x, layers.as_mut())?;
    }
    Ok((x, layers))
}

/// Full forward pass. With `trace`, captures each component's input.
pub fn forward(
    cfg: &ViTConfig,
    params: &ParameterStore,
    image: &Tensor,
    trace: bool,
) -> Result<(Tensor, Option<ActivationTrace>)> {
    cfg.validate()?;
    let embedded = embed_image(cfg, params, image)?;
    let (x, layers) = encode(cfg, params, &embedded, trace)?;
    let logits = head_forward(cfg, params, &x)?;
    let trace_out = layers.map(|layers| ActivationTrace {
        post_embedding: embedded,
        final_tokens: x,
        layers,
    });
    Ok((logits, trace_out))
}
