use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::mix_seed;
use crate::model::config::ViTConfig;
use crate::tensor::Tensor;

/// The five per-block components under study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ComponentKind {
    Ln1,
    Mha,
    Ln2,
    Fc1,
    Fc2,
}

pub const ALL_KINDS: [ComponentKind; 5] = [
    ComponentKind::Ln1,
    ComponentKind::Mha,
    ComponentKind::Ln2,
    ComponentKind::Fc1,
    ComponentKind::Fc2,
];

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ComponentKind::Ln1 => "LN1",
            ComponentKind::Mha => "MHA",
            ComponentKind::Ln2 => "LN2",
            ComponentKind::Fc1 => "FC1",
            ComponentKind::Fc2 => "FC2",
        };
        f.write_str(s)
    }
}

impl ComponentKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LN1" => Ok(ComponentKind::Ln1),
            "MHA" => Ok(ComponentKind::Mha),
            "LN2" => Ok(ComponentKind::Ln2),
            "FC1" => Ok(ComponentKind::Fc1),
            "FC2" => Ok(ComponentKind::Fc2),
            other => Err(Error::invalid("ComponentKind", format!("unknown component '{other}'"))),
        }
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Component(ComponentKind),
    Embedding,
    PosEmbed,
    ClsToken,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// Named parameter map with per-entry trainable flags.
///
/// Iteration order is the lexicographic name order (BTreeMap), so every
/// traversal is deterministic.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParameterStore {
    entries: BTreeMap<String, Param>,
}

pub mod names {
    pub const EMBED_WEIGHT: &str = "embed.weight";
    pub const EMBED_BIAS: &str = "embed.bias";
    pub const POS_EMBED: &str = "pos_embed";
    pub const CLS_TOKEN: &str = "cls_token";
    pub const HEAD_NORM_GAMMA: &str = "head.norm.gamma";
    pub const HEAD_NORM_BETA: &str = "head.norm.beta";
    pub const HEAD_WEIGHT: &str = "head.weight";
    pub const HEAD_BIAS: &str = "head.bias";

    pub fn ln_gamma(layer: usize, second: bool) -> String {
        format!("blocks.{layer}.{}.gamma", if second { "ln2" } else { "ln1" })
    }
    pub fn ln_beta(layer: usize, second: bool) -> String {
        format!("blocks.{layer}.{}.beta", if second { "ln2" } else { "ln1" })
    }
    pub fn qkv_weight(layer: usize) -> String {
        format!("blocks.{layer}.attn.qkv.weight")
    }
    pub fn qkv_bias(layer: usize) -> String {
        format!("blocks.{layer}.attn.qkv.bias")
    }
    pub fn attn_out_weight(layer: usize) -> String {
        format!("blocks.{layer}.attn.out.weight")
    }
    pub fn attn_out_bias(layer: usize) -> String {
        format!("blocks.{layer}.attn.out.bias")
    }
    pub fn fc_weight(layer: usize, second: bool) -> String {
        format!("blocks.{layer}.{}.weight", if second { "fc2" } else { "fc1" })
    }
    pub fn fc_bias(layer: usize, second: bool) -> String {
        format!("blocks.{layer}.{}.bias", if second { "fc2" } else { "fc1" })
    }
}

impl ParameterStore {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) {
        let name = name.into();
        debug_assert!(!self.entries.contains_key(&name), "duplicate parameter {name}");
        self.entries.insert(
            name,
            Param {
                tensor,
                trainable: false,
                group,
            },
        );
    }

    pub fn get(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.get(name).tensor
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        for p in self.entries.values_mut() {
            p.trainable = flag;
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn num_scalars_in_group(&self, group: ParamGroup) -> usize {
        self.entries
            .values()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.len())
            .sum()
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Truncated normal (resampled beyond 2 std), gamma = 1, zero biases.
    /// The training default.
    TruncNormal { std: f64 },
    /// Unit forward gain per weight matrix: entries ~ N(0, 1/rows), with
    /// per-head scaling for the fused qkv map, and gamma ~ N(0, 1/d).
    /// Gives every component a comparable output scale and attention score
    /// maps with spectral norm around one, the regime the bound ranking
    /// assumes. The analysis default.
    MatchedScale,
}

pub const TRUNC_NORMAL_STD_DEFAULT: f64 = 0.02;

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn fill(shape: &[usize], rng: &mut ChaCha8Rng, mut gen: impl FnMut(&mut ChaCha8Rng) -> f64) -> Tensor {
    Tensor::from_fn(shape, |_| gen(rng))
}

/// Builds a freshly initialized parameter store for the configuration.
///
/// Every tensor draws from its own seed sub-stream, so the result does not
/// depend on construction order.
pub fn init_params(cfg: &ViTConfig, scheme: InitScheme, seed: u64) -> ParameterStore {
    let d = cfg.embed_dim;
    let n = cfg.seq_len();
    let m = cfg.patch_dim();
    let hd = cfg.hidden_dim();
    let k = cfg.head_dim();
    let classes = cfg.num_classes;

    let mut store = ParameterStore::default();
    let mut stream = 0u64;
    let mut next_rng = || {
        stream += 1;
        ChaCha8Rng::seed_from_u64(mix_seed(seed, &[stream]))
    };

    let weight = |shape: &[usize], rng: &mut ChaCha8Rng| -> Tensor {
        match scheme {
            InitScheme::TruncNormal { std } => fill(shape, rng, |r| trunc_normal(r, std)),
            InitScheme::MatchedScale => {
                let std = 1.0 / (shape[0] as f64).sqrt();
                fill(shape, rng, |r| {
                    let z: f64 = StandardNormal.sample(r);
                    z * std
                })
            }
        }
    };
    // qkv rows span all heads; unit gain per k x d head block.
    let qkv_weight = |shape: &[usize], rng: &mut ChaCha8Rng| -> Tensor {
        match scheme {
            InitScheme::TruncNormal { std } => fill(shape, rng, |r| trunc_normal(r, std)),
            InitScheme::MatchedScale => {
                let std = 1.0 / (k as f64).sqrt();
                fill(shape, rng, |r| {
                    let z: f64 = StandardNormal.sample(r);
                    z * std
                })
            }
        }
    };
    let gamma = |rng: &mut ChaCha8Rng| -> Tensor {
        match scheme {
            InitScheme::TruncNormal { .. } => Tensor::from_fn(&[d], |_| 1.0),
            InitScheme::MatchedScale => {
                let std = 1.0 / (d as f64).sqrt();
                fill(&[d], rng, |r| {
                    let z: f64 = StandardNormal.sample(r);
                    z * std
                })
            }
        }
    };

    store.insert(names::EMBED_WEIGHT, weight(&[d, m], &mut next_rng()), ParamGroup::Embedding);
    store.insert(names::EMBED_BIAS, Tensor::zeros(&[d]), ParamGroup::Embedding);
    store.insert(names::POS_EMBED, weight(&[d, n], &mut next_rng()), ParamGroup::PosEmbed);
    store.insert(names::CLS_TOKEN, weight(&[d, 1], &mut next_rng()), ParamGroup::ClsToken);

    for layer in 0..cfg.num_layers {
        store.insert(
            names::ln_gamma(layer, false),
            gamma(&mut next_rng()),
            ParamGroup::Component(ComponentKind::Ln1),
        );
        store.insert(
            names::ln_beta(layer, false),
            Tensor::zeros(&[d]),
            ParamGroup::Component(ComponentKind::Ln1),
        );
        store.insert(
            names::qkv_weight(layer),
            qkv_weight(&[3 * d, d], &mut next_rng()),
            ParamGroup::Component(ComponentKind::Mha),
        );
        store.insert(
            names::qkv_bias(layer),
            Tensor::zeros(&[3 * d]),
            ParamGroup::Component(ComponentKind::Mha),
        );
        store.insert(
            names::attn_out_weight(layer),
            weight(&[d, d], &mut next_rng()),
            ParamGroup::Component(ComponentKind::Mha),
        );
        store.insert(
            names::attn_out_bias(layer),
            Tensor::zeros(&[d]),
            ParamGroup::Component(ComponentKind::Mha),
        );
        store.insert(
            names::ln_gamma(layer, true),
            gamma(&mut next_rng()),
            ParamGroup::Component(ComponentKind::Ln2),
        );
        store.insert(
            names::ln_beta(layer, true),
            Tensor::zeros(&[d]),
            ParamGroup::Component(ComponentKind::Ln2),
        );
        store.insert(
            names::fc_weight(layer, false),
            weight(&[hd, d], &mut next_rng()),
            ParamGroup::Component(ComponentKind::Fc1),
        );
        store.insert(
            names::fc_bias(layer, false),
            Tensor::zeros(&[hd]),
            ParamGroup::Component(ComponentKind::Fc1),
        );
        store.insert(
            names::fc_weight(layer, true),
            weight(&[d, hd], &mut next_rng()),
            ParamGroup::Component(ComponentKind::Fc2),
        );
        store.insert(
            names::fc_bias(layer, true),
            Tensor::zeros(&[d]),
            ParamGroup::Component(ComponentKind::Fc2),
        );
    }

    store.insert(names::HEAD_NORM_GAMMA, gamma(&mut next_rng()), ParamGroup::Head);
    store.insert(names::HEAD_NORM_BETA, Tensor::zeros(&[d]), ParamGroup::Head);
    store.insert(names::HEAD_WEIGHT, weight(&[classes, d], &mut next_rng()), ParamGroup::Head);
    store.insert(names::HEAD_BIAS, Tensor::zeros(&[classes]), ParamGroup::Head);
    store
}

/// Re-initializes the classification head in place (fresh head protocol).
pub fn reinit_head(cfg: &ViTConfig, store: &mut ParameterStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x4EAD]));
    let w = fill(&[cfg.num_classes, cfg.embed_dim], &mut rng, |r| {
        trunc_normal(r, TRUNC_NORMAL_STD_DEFAULT)
    });
    *store.tensor_mut(names::HEAD_WEIGHT) = w;
    *store.tensor_mut(names::HEAD_BIAS) = Tensor::zeros(&[cfg.num_classes]);
    *store.tensor_mut(names::HEAD_NORM_GAMMA) = Tensor::from_fn(&[cfg.embed_dim], |_| 1.0);
    *store.tensor_mut(names::HEAD_NORM_BETA) = Tensor::zeros(&[cfg.embed_dim]);
}

/// Groups accepted by the parameter counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountGroup {
    Kind(ComponentKind),
    All,
    Head,
}

/// Exact parameter count of the selected group (weights + biases) from the
/// configuration alone.
pub fn count_parameters(cfg: &ViTConfig, group: CountGroup) -> usize {
    let d = cfg.embed_dim;
    let l = cfg.num_layers;
    let per_layer = |kind: ComponentKind| -> usize {
        match kind {
            ComponentKind::Ln1 | ComponentKind::Ln2 => 2 * d,
            ComponentKind::Mha => (3 * d) * d + 3 * d + d * d + d,
            ComponentKind::Fc1 => 4 * d * d + 4 * d,
            ComponentKind::Fc2 => d * 4 * d + d,
        }
    };
    match group {
        CountGroup::Kind(kind) => l * per_layer(kind),
        CountGroup::Head => 2 * d + cfg.num_classes * d + cfg.num_classes,
        CountGroup::All => {
            let body: usize = ALL_KINDS.iter().map(|&kd| l * per_layer(kd)).sum();
            let embed = d * cfg.patch_dim() + d;
            let pos = d * cfg.seq_len();
            let cls = d;
            body + embed + pos + cls + count_parameters(cfg, CountGroup::Head)
        }
    }
}
