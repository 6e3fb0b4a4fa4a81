//! From-scratch vision-transformer encoder with exact forward and reverse
//! passes for every parameter group.

pub mod backward;
pub mod config;
pub mod forward;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use backward::{accuracy, backward, cross_entropy_loss, GradStore};
pub use config::ViTConfig;
pub use forward::{embed_image, feedforward, forward, layer_norm, multi_head_attention, MhaWeights};
pub use params::{
    count_parameters, init_params, reinit_head, ComponentKind, CountGroup, InitScheme, Param,
    ParamGroup, ParameterStore, ALL_KINDS,
};

/// Whether a sequence lives in the model width d or the feedforward hidden
/// width 4d.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DimLabel {
    ModelDim,
    HiddenDim,
}

/// A d x n (or 4d x n) matrix whose columns are tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub dim_label: DimLabel,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, dim_label: DimLabel) -> Result<Self> {
        if !tokens.is_matrix() || tokens.cols() == 0 {
            return Err(Error::shape(
                "TokenSequence",
                format!("expected a non-empty matrix, got {:?}", tokens.shape()),
            ));
        }
        if !tokens.all_finite() {
            return Err(Error::NonFinite {
                op: "TokenSequence",
                detail: "non-finite token entry".into(),
            });
        }
        Ok(TokenSequence { tokens, dim_label })
    }

    /// Token dimensionality (rows).
    pub fn dim(&self) -> usize {
        self.tokens.rows()
    }

    /// Number of tokens (columns).
    pub fn len(&self) -> usize {
        self.tokens.cols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Inputs seen by each component during a traced forward pass.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub ln1_input: TokenSequence,
    pub mha_input: TokenSequence,
    pub ln2_input: TokenSequence,
    pub fc1_input: TokenSequence,
    /// Post-GeLU hidden sequence, 4d x n.
    pub fc2_input: TokenSequence,
}

#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub post_embedding: TokenSequence,
    /// Token stream after the last block.
    pub final_tokens: TokenSequence,
    pub layers: Vec<LayerActivations>,
}

impl ActivationTrace {
    pub fn input_for(&self, layer: usize, kind: ComponentKind) -> &TokenSequence {
        let l = &self.layers[layer];
        match kind {
            ComponentKind::Ln1 => &l.ln1_input,
            ComponentKind::Mha => &l.mha_input,
            ComponentKind::Ln2 => &l.ln2_input,
            ComponentKind::Fc1 => &l.fc1_input,
            ComponentKind::Fc2 => &l.fc2_input,
        }
    }
}
