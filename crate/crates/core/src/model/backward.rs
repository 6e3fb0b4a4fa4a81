//! Reverse-mode gradients through every component, hand-derived against the
//! forward definitions and checked by central finite differences.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::matmul;
use crate::model::config::ViTConfig;
use crate::model::forward::{
    add_col_bias, gelu, gelu_derivative, image_to_patches, layer_norm_stats, mha_forward, slice_rows,
    MhaCache, MhaWeights,
};
use crate::model::params::{names, ParameterStore};
use crate::parallel;
use crate::tensor::Tensor;

/// Gradient map keyed by parameter name; holds only trainable entries.
pub type GradStore = BTreeMap<String, Tensor>;

struct LnCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    mha_in: Tensor,
    mha: MhaCache,
    ln2: LnCache,
    fc1_in: Tensor,
    hidden_pre: Tensor,
    hidden_act: Tensor,
}

struct ExampleCache {
    patches: Vec<Vec<f64>>,
    blocks: Vec<BlockCache>,
    head_in_normalized: Vec<f64>,
    head_inv_std: f64,
    logits: Vec<f64>,
}

fn ln_forward(gamma: &Tensor, beta: &Tensor, eps: f64, x: &Tensor) -> (Tensor, LnCache) {
    let (normalized, inv_std) = layer_norm_stats(eps, x);
    let (d, n) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[d, n]);
    for r in 0..d {
        let g = gamma.data()[r];
        let b = beta.data()[r];
        for j in 0..n {
            *out.at_mut(r, j) = g * normalized.at(r, j) + b;
        }
    }
    (out, LnCache { normalized, inv_std })
}

/// LayerNorm backward for column tokens. Returns d_input and accumulates
/// gamma/beta gradients.
fn ln_backward(
    gamma: &Tensor,
    cache: &LnCache,
    d_out: &Tensor,
    d_gamma: &mut Tensor,
    d_beta: &mut Tensor,
) -> Tensor {
    let (d, n) = (d_out.rows(), d_out.cols());
    let mut d_in = Tensor::zeros(&[d, n]);
    for r in 0..d {
        let mut gsum = 0.0;
        let mut bsum = 0.0;
        for j in 0..n {
            let g = d_out.at(r, j);
            gsum += g * cache.normalized.at(r, j);
            bsum += g;
        }
        d_gamma.data_mut()[r] += gsum;
        d_beta.data_mut()[r] += bsum;
    }
    let dd = d as f64;
    for j in 0..n {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for r in 0..d {
            let g = d_out.at(r, j) * gamma.data()[r];
            m1 += g;
            m2 += g * cache.normalized.at(r, j);
        }
        m1 /= dd;
        m2 /= dd;
        let s = cache.inv_std[j];
        for r in 0..d {
            let g = d_out.at(r, j) * gamma.data()[r];
            *d_in.at_mut(r, j) = s * (g - m1 - cache.normalized.at(r, j) * m2);
        }
    }
    d_in
}

fn row_sums(x: &Tensor) -> Tensor {
    let m = x.rows();
    let mut out = Tensor::zeros(&[m]);
    for r in 0..m {
        out.data_mut()[r] = x.row(r).iter().sum();
    }
    out
}

fn forward_example(cfg: &ViTConfig, params: &ParameterStore, image: &Tensor) -> Result<ExampleCache> {
    let d = cfg.embed_dim;
    let n = cfg.seq_len();
    let patches = image_to_patches(cfg, image)?;
    let e = params.tensor(names::EMBED_WEIGHT);
    let e_bias = params.tensor(names::EMBED_BIAS);
    let mut x = Tensor::zeros(&[d, n]);
    for r in 0..d {
        *x.at_mut(r, 0) = params.tensor(names::CLS_TOKEN).data()[r];
    }
    for (idx, patch) in patches.iter().enumerate() {
        for r in 0..d {
            let mut acc = e_bias.data()[r];
            for (w, v) in e.row(r).iter().zip(patch) {
                acc += w * v;
            }
            *x.at_mut(r, idx + 1) = acc;
        }
    }
    let pos = params.tensor(names::POS_EMBED);
    for r in 0..d {
        for j in 0..n {
            *x.at_mut(r, j) += pos.at(r, j);
        }
    }

    let mut blocks = Vec::with_capacity(cfg.num_layers);
    for layer in 0..cfg.num_layers {
        let (ln1_out, ln1) = ln_forward(
            params.tensor(&names::ln_gamma(layer, false)),
            params.tensor(&names::ln_beta(layer, false)),
            cfg.ln_eps,
            &x,
        );
        let w = MhaWeights::from_store(params, layer, cfg.num_heads, true);
        let (attn_out, mha) = mha_forward(&w, &ln1_out)?;
        let mid = x.add(&attn_out)?;

        let (ln2_out, ln2) = ln_forward(
            params.tensor(&names::ln_gamma(layer, true)),
            params.tensor(&names::ln_beta(layer, true)),
            cfg.ln_eps,
            &mid,
        );
        let mut hidden_pre = matmul(params.tensor(&names::fc_weight(layer, false)), &ln2_out)?;
        add_col_bias(&mut hidden_pre, params.tensor(&names::fc_bias(layer, false)));
        let mut hidden_act = hidden_pre.clone();
        for v in hidden_act.data_mut() {
            *v = gelu(*v);
        }
        let mut ffn_out = matmul(params.tensor(&names::fc_weight(layer, true)), &hidden_act)?;
        add_col_bias(&mut ffn_out, params.tensor(&names::fc_bias(layer, true)));
        let out = mid.add(&ffn_out)?;

        blocks.push(BlockCache {
            ln1,
            mha_in: ln1_out,
            mha,
            ln2,
            fc1_in: ln2_out,
            hidden_pre,
            hidden_act,
        });
        x = out;
    }

    // Head: output norm on the CLS token, then the linear classifier.
    let cls: Vec<f64> = (0..d).map(|r| x.at(r, 0)).collect();
    let mean = cls.iter().sum::<f64>() / d as f64;
    let var = cls.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv_std = 1.0 / (var + cfg.ln_eps).sqrt();
    let hg = params.tensor(names::HEAD_NORM_GAMMA);
    let hb = params.tensor(names::HEAD_NORM_BETA);
    let normalized: Vec<f64> = cls.iter().map(|v| (v - mean) * inv_std).collect();
    let y: Vec<f64> = normalized
        .iter()
        .enumerate()
        .map(|(r, v)| hg.data()[r] * v + hb.data()[r])
        .collect();
    let hw = params.tensor(names::HEAD_WEIGHT);
    let hbias = params.tensor(names::HEAD_BIAS);
    let logits: Vec<f64> = (0..cfg.num_classes)
        .map(|c| {
            let mut acc = hbias.data()[c];
            for r in 0..d {
                acc += hw.at(c, r) * y[r];
            }
            acc
        })
        .collect();

    // Blocks hold everything needed for the reverse sweep except the final
    // stream, which is recomputable from mid + ffn; keep x implicitly by
    // storing it in the last block? The reverse sweep only needs x through
    // the head, handled via the CLS stats above, and d_x propagation which
    // starts at zero except the CLS column.
    Ok(ExampleCache {
        patches,
        blocks,
        head_in_normalized: normalized,
        head_inv_std: inv_std,
        logits,
    })
}

fn add_grad(map: &mut BTreeMap<String, Tensor>, name: &str, delta: Tensor) {
    match map.get_mut(name) {
        Some(t) => t.axpy(1.0, &delta),
        None => {
            map.insert(name.to_string(), delta);
        }
    }
}

fn backward_example(
    cfg: &ViTConfig,
    params: &ParameterStore,
    cache: &ExampleCache,
    d_logits: &[f64],
) -> Result<BTreeMap<String, Tensor>> {
    let d = cfg.embed_dim;
    let n = cfg.seq_len();
    let heads = cfg.num_heads;
    let k = cfg.head_dim();
    let scale = 1.0 / (k as f64).sqrt();
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();

    // Head: logits = W (gamma * nrm + beta) + bias.
    let hw = params.tensor(names::HEAD_WEIGHT);
    let head_gamma = params.tensor(names::HEAD_NORM_GAMMA);
    let head_beta = params.tensor(names::HEAD_NORM_BETA);
    let mut d_hw = Tensor::zeros(&[cfg.num_classes, d]);
    let mut d_hb = Tensor::zeros(&[cfg.num_classes]);
    let mut d_y = vec![0.0; d];
    for c in 0..cfg.num_classes {
        let g = d_logits[c];
        d_hb.data_mut()[c] = g;
        for r in 0..d {
            let y = head_gamma.data()[r] * cache.head_in_normalized[r] + head_beta.data()[r];
            *d_hw.at_mut(c, r) = g * y;
            d_y[r] += hw.at(c, r) * g;
        }
    }
    add_grad(&mut grads, names::HEAD_WEIGHT, d_hw);
    add_grad(&mut grads, names::HEAD_BIAS, d_hb);

    // Output norm on the CLS token.
    let hg = params.tensor(names::HEAD_NORM_GAMMA);
    let mut d_hg = Tensor::zeros(&[d]);
    let mut d_hbeta = Tensor::zeros(&[d]);
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for r in 0..d {
        d_hg.data_mut()[r] = d_y[r] * cache.head_in_normalized[r];
        d_hbeta.data_mut()[r] = d_y[r];
        let g = d_y[r] * hg.data()[r];
        m1 += g;
        m2 += g * cache.head_in_normalized[r];
    }
    m1 /= d as f64;
    m2 /= d as f64;
    add_grad(&mut grads, names::HEAD_NORM_GAMMA, d_hg);
    add_grad(&mut grads, names::HEAD_NORM_BETA, d_hbeta);

    // Gradient on the token stream after the last block: zero except CLS.
    let mut d_x = Tensor::zeros(&[d, n]);
    for r in 0..d {
        let g = d_y[r] * hg.data()[r];
        *d_x.at_mut(r, 0) = cache.head_inv_std * (g - m1 - cache.head_in_normalized[r] * m2);
    }

    // Blocks in reverse.
    for layer in (0..cfg.num_layers).rev() {
        let bc = &cache.blocks[layer];

        // FFN branch: out = mid + W2 gelu(W1 ln2(mid) + b1) + b2.
        let w2 = params.tensor(&names::fc_weight(layer, true));
        let d_ffn_out = &d_x;
        let d_w2 = matmul(d_ffn_out, &bc.hidden_act.t())?;
        let d_b2 = row_sums(d_ffn_out);
        let mut d_pre = matmul(&w2.t(), d_ffn_out)?;
        for (g, pre) in d_pre.data_mut().iter_mut().zip(bc.hidden_pre.data()) {
            *g *= gelu_derivative(*pre);
        }
        let w1 = params.tensor(&names::fc_weight(layer, false));
        let d_w1 = matmul(&d_pre, &bc.fc1_in.t())?;
        let d_b1 = row_sums(&d_pre);
        let d_fc1_in = matmul(&w1.t(), &d_pre)?;
        add_grad(&mut grads, &names::fc_weight(layer, true), d_w2);
        add_grad(&mut grads, &names::fc_bias(layer, true), d_b2);
        add_grad(&mut grads, &names::fc_weight(layer, false), d_w1);
        add_grad(&mut grads, &names::fc_bias(layer, false), d_b1);

        let gamma2 = params.tensor(&names::ln_gamma(layer, true));
        let mut d_gamma2 = Tensor::zeros(&[d]);
        let mut d_beta2 = Tensor::zeros(&[d]);
        let d_mid_ln = ln_backward(gamma2, &bc.ln2, &d_fc1_in, &mut d_gamma2, &mut d_beta2);
        add_grad(&mut grads, &names::ln_gamma(layer, true), d_gamma2);
        add_grad(&mut grads, &names::ln_beta(layer, true), d_beta2);
        let mut d_mid = d_x.clone();
        d_mid.axpy(1.0, &d_mid_ln);

        // Attention branch: mid = x_in + W_out ctx + b_out.
        let out_w = params.tensor(&names::attn_out_weight(layer));
        let d_attn_out = &d_mid;
        let d_out_w = matmul(d_attn_out, &bc.mha.context.t())?;
        let d_out_b = row_sums(d_attn_out);
        let d_concat = matmul(&out_w.t(), d_attn_out)?;
        add_grad(&mut grads, &names::attn_out_weight(layer), d_out_w);
        add_grad(&mut grads, &names::attn_out_bias(layer), d_out_b);

        let mut d_qkv = Tensor::zeros(&[3 * d, n]);
        for h in 0..heads {
            let d_ctx = slice_rows(&d_concat, h * k, k);
            let s = &bc.mha.attn[h];
            let v_h = slice_rows(&bc.mha.qkv, 2 * d + h * k, k);
            let d_v = matmul(&d_ctx, s)?;
            let d_s = matmul(&d_ctx.t(), &v_h)?;
            // Row softmax backward.
            let mut d_z = Tensor::zeros(&[n, n]);
            for i in 0..n {
                let s_row = s.row(i);
                let ds_row = d_s.row(i);
                let dot: f64 = s_row.iter().zip(ds_row).map(|(a, b)| a * b).sum();
                let dz_row = d_z.row_mut(i);
                for j in 0..n {
                    dz_row[j] = s_row[j] * (ds_row[j] - dot);
                }
            }
            let q_h = slice_rows(&bc.mha.qkv, h * k, k);
            let k_h = slice_rows(&bc.mha.qkv, d + h * k, k);
            let d_q = matmul(&k_h, &d_z.t())?.scale(scale);
            let d_k = matmul(&q_h, &d_z)?.scale(scale);
            for a in 0..k {
                d_qkv.row_mut(h * k + a).copy_from_slice(d_q.row(a));
                d_qkv.row_mut(d + h * k + a).copy_from_slice(d_k.row(a));
                d_qkv.row_mut(2 * d + h * k + a).copy_from_slice(d_v.row(a));
            }
        }
        let qkv_w = params.tensor(&names::qkv_weight(layer));
        let d_qkv_w = matmul(&d_qkv, &bc.mha_in.t())?;
        let d_qkv_b = row_sums(&d_qkv);
        let d_mha_in = matmul(&qkv_w.t(), &d_qkv)?;
        add_grad(&mut grads, &names::qkv_weight(layer), d_qkv_w);
        add_grad(&mut grads, &names::qkv_bias(layer), d_qkv_b);

        let gamma1 = params.tensor(&names::ln_gamma(layer, false));
        let mut d_gamma1 = Tensor::zeros(&[d]);
        let mut d_beta1 = Tensor::zeros(&[d]);
        let d_xin_ln = ln_backward(gamma1, &bc.ln1, &d_mha_in, &mut d_gamma1, &mut d_beta1);
        add_grad(&mut grads, &names::ln_gamma(layer, false), d_gamma1);
        add_grad(&mut grads, &names::ln_beta(layer, false), d_beta1);

        d_x = d_mid;
        d_x.axpy(1.0, &d_xin_ln);
    }

    // Embedding: x0 = [cls | E p_i + b] + pos.
    add_grad(&mut grads, names::POS_EMBED, d_x.clone());
    let mut d_cls = Tensor::zeros(&[d, 1]);
    for r in 0..d {
        *d_cls.at_mut(r, 0) = d_x.at(r, 0);
    }
    add_grad(&mut grads, names::CLS_TOKEN, d_cls);
    let m = cfg.patch_dim();
    let mut d_e = Tensor::zeros(&[d, m]);
    let mut d_eb = Tensor::zeros(&[d]);
    for (idx, patch) in cache.patches.iter().enumerate() {
        for r in 0..d {
            let g = d_x.at(r, idx + 1);
            if g == 0.0 {
                continue;
            }
            d_eb.data_mut()[r] += g;
            let row = d_e.row_mut(r);
            for (er, pv) in row.iter_mut().zip(patch) {
                *er += g * pv;
            }
        }
    }
    add_grad(&mut grads, names::EMBED_WEIGHT, d_e);
    add_grad(&mut grads, names::EMBED_BIAS, d_eb);

    Ok(grads)
}

/// Stable cross-entropy of logits against an integer label.
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Mean cross-entropy over a batch plus gradients for trainable parameters.
///
/// Per-example gradients may be evaluated in parallel; accumulation runs in
/// example order, so the result is independent of scheduling.
pub fn backward(
    cfg: &ViTConfig,
    params: &ParameterStore,
    images: &[Tensor],
    labels: &[usize],
) -> Result<(f64, GradStore)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::invalid(
            "backward",
            format!("batch of {} images vs {} labels", images.len(), labels.len()),
        ));
    }
    for &l in labels {
        if l >= cfg.num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes: cfg.num_classes,
            });
        }
    }
    let per_example: Vec<Result<(f64, BTreeMap<String, Tensor>)>> =
        parallel::map_indexed(images.len(), |i| {
            let cache = forward_example(cfg, params, &images[i])?;
            let loss = cross_entropy_loss(&cache.logits, labels[i]);
            let max = cache.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = cache.logits.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut d_logits: Vec<f64> = exps.iter().map(|e| e / z).collect();
            d_logits[labels[i]] -= 1.0;
            let grads = backward_example(cfg, params, &cache, &d_logits)?;
            Ok((loss, grads))
        });

    let mut total_loss = 0.0;
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for item in per_example {
        let (loss, grads) = item?;
        total_loss += loss;
        for (name, g) in grads {
            add_grad(&mut acc, &name, g);
        }
    }
    let b = images.len() as f64;
    let mut out: GradStore = BTreeMap::new();
    for (name, mut g) in acc {
        if params.get(&name).trainable {
            for v in g.data_mut() {
                *v /= b;
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    op: "backward",
                    detail: format!("gradient of {name}"),
                });
            }
            out.insert(name, g);
        }
    }
    Ok((total_loss / b, out))
}

/// Mean loss and top-1 accuracy over a labeled set.
pub fn accuracy(
    cfg: &ViTConfig,
    params: &ParameterStore,
    images: &[Tensor],
    labels: &[usize],
) -> Result<(f64, f64)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::invalid("accuracy", "empty or mismatched evaluation set"));
    }
    let results: Vec<Result<(f64, bool)>> = parallel::map_indexed(images.len(), |i| {
        let (logits, _) = crate::model::forward::forward(cfg, params, &images[i], false)?;
        let loss = cross_entropy_loss(logits.data(), labels[i]);
        let pred = logits
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(idx, _)| idx)
            .unwrap();
        Ok((loss, pred == labels[i]))
    });
    let mut loss = 0.0;
    let mut hits = 0usize;
    for r in results {
        let (l, hit) = r?;
        loss += l;
        hits += hit as usize;
    }
    Ok((loss / images.len() as f64, hits as f64 / images.len() as f64))
}
