//! Selective finetuning: exactly one component group trains (plus a fresh
//! classification head), with SGD momentum, gradient clipping, a cosine
//! schedule, gradient-norm and validation tracking, and best-checkpoint
//! selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::dataset::{split_indices, LoadedDataset};
use crate::linalg::mix_seed;
use crate::model::backward::{accuracy, backward, GradStore};
use crate::model::params::{reinit_head, ComponentKind, ParamGroup, ParameterStore};
use crate::model::ViTConfig;
use crate::tensor::Tensor;

/// Which parameters unfreeze during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinetuneGroup {
    Kind(ComponentKind),
    All,
    /// Classification head only: the linear-probing baseline.
    Head,
}

impl std::fmt::Display for FinetuneGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FinetuneGroup::Kind(k) => write!(f, "{k}"),
            FinetuneGroup::All => write!(f, "ALL"),
            FinetuneGroup::Head => write!(f, "HEAD"),
        }
    }
}

impl FinetuneGroup {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ALL" => Ok(FinetuneGroup::All),
            "HEAD" => Ok(FinetuneGroup::Head),
            other => Ok(FinetuneGroup::Kind(ComponentKind::parse(other)?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub group: FinetuneGroup,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub eval_every: usize,
    pub val_fraction: f64,
}

impl FinetuneConfig {
    pub fn new(group: FinetuneGroup, lr: f64, steps: usize, batch_size: usize, seed: u64) -> Self {
        FinetuneConfig {
            group,
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
            steps,
            batch_size,
            clip_norm: 1.0,
            schedule: Schedule::Cosine,
            seed,
            eval_every: 50,
            val_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::invalid("FinetuneConfig", "lr must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("FinetuneConfig", "momentum must be in [0, 1)"));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::invalid("FinetuneConfig", "clip_norm must be > 0"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction == 0.0 {
            return Err(Error::invalid("FinetuneConfig", "val_fraction must be in (0, 1)"));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::invalid(
                "FinetuneConfig",
                "steps, batch_size and eval_every must be >= 1",
            ));
        }
        Ok(())
    }
}

/// Sets trainable flags: the chosen group across all layers, plus the
/// classification head in every configuration (the head is always freshly
/// initialized and trained).
pub fn select_trainable(params: &mut ParameterStore, group: FinetuneGroup) {
    for (_, p) in params.iter_mut() {
        p.trainable = match group {
            FinetuneGroup::All => true,
            FinetuneGroup::Head => p.group == ParamGroup::Head,
            FinetuneGroup::Kind(kind) => {
                p.group == ParamGroup::Head || p.group == ParamGroup::Component(kind)
            }
        };
    }
}

/// Cosine decay without warmup: base * 0.5 * (1 + cos(pi step / total)).
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    assert!(step <= total_steps, "step beyond schedule");
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// Momentum buffers, one per trainable parameter, created lazily.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: BTreeMap<String, Tensor>,
}

/// One SGD step with global-norm clipping. Returns the pre-clip global
/// gradient norm. Clipping rescales every gradient by clip_norm / norm when
/// the norm exceeds the threshold; momentum then integrates the clipped
/// gradient.
pub fn sgd_step(
    params: &mut ParameterStore,
    grads: &GradStore,
    state: &mut SgdState,
    lr_t: f64,
    momentum: f64,
    weight_decay: f64,
    clip_norm: f64,
) -> Result<f64> {
    let mut norm_sq = 0.0;
    for g in grads.values() {
        for v in g.data() {
            norm_sq += v * v;
        }
    }
    let pre_clip = norm_sq.sqrt();
    if !pre_clip.is_finite() {
        return Err(Error::NonFinite {
            op: "sgd_step",
            detail: format!("global gradient norm {pre_clip}"),
        });
    }
    let scale = if pre_clip > clip_norm {
        clip_norm / pre_clip
    } else {
        1.0
    };
    for (name, grad) in grads {
        let entry = params.get(name);
        debug_assert!(entry.trainable, "gradient for frozen parameter {name}");
        let shape = grad.shape().to_vec();
        let velocity = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        let theta = params.tensor_mut(name);
        for ((v, g), t) in velocity
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(theta.data_mut())
        {
            let g_eff = g * scale + weight_decay * *t;
            *v = momentum * *v + g_eff;
            *t -= lr_t * *v;
        }
    }
    Ok(pre_clip)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub schema_version: u32,
    pub group: String,
    pub seed: u64,
    pub base_lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub data_id: String,
    pub trainable_parameters: usize,
    pub step_records: Vec<StepRecord>,
    pub eval_records: Vec<EvalRecord>,
    pub best_eval_index: usize,
    pub final_test_accuracy: f64,
}

pub const TRAINLOG_SCHEMA_VERSION: u32 = 1;

/// Train/test handles for one run; validation splits off the training set.
pub struct FinetuneData<'a> {
    pub train: &'a LoadedDataset,
    pub test: &'a LoadedDataset,
    /// Identifier echoed into the log (e.g. the dataset path).
    pub data_id: String,
}

/// Runs the full selective-finetuning protocol and returns the log plus the
/// best-validation checkpoint.
///
/// Deterministic in (model init, data, config): seeded shuffles, fixed-size
/// batches with the final partial batch dropped, eval every `eval_every`
/// steps and at the last step, best checkpoint by validation accuracy with
/// ties resolved to the earliest.
pub fn run_finetune(
    cfg: &ViTConfig,
    init: &ParameterStore,
    data: &FinetuneData,
    fcfg: &FinetuneConfig,
) -> Result<(TrainLog, ParameterStore)> {
    fcfg.validate()?;
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::DatasetTooSmall {
            detail: "empty train or test split".into(),
        });
    }
    if data.train.num_classes != cfg.num_classes {
        return Err(Error::invalid(
            "run_finetune",
            format!(
                "model expects {} classes, dataset has {}",
                cfg.num_classes, data.train.num_classes
            ),
        ));
    }

    let (train_idx, val_idx) = split_indices(data.train.len(), fcfg.val_fraction, fcfg.seed)?;
    let train = data.train.subset(&train_idx);
    let val = data.train.subset(&val_idx);
    if train.len() < fcfg.batch_size {
        return Err(Error::DatasetTooSmall {
            detail: format!(
                "training split of {} cannot fill a batch of {}",
                train.len(),
                fcfg.batch_size
            ),
        });
    }

    let mut params = init.clone();
    reinit_head(cfg, &mut params, fcfg.seed);
    select_trainable(&mut params, fcfg.group);
    let trainable_parameters = params.num_trainable_scalars();

    let mut state = SgdState::default();
    let mut step_records = Vec::with_capacity(fcfg.steps);
    let mut eval_records = Vec::new();
    let mut best: Option<(usize, f64, ParameterStore)> = None;

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    for step in 0..fcfg.steps {
        // Refill the shuffled index stream when the epoch runs out.
        if cursor + fcfg.batch_size > order.len() {
            let mut fresh: Vec<usize> = (0..train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(fcfg.seed, &[0xE9, epoch]));
            fresh.shuffle(&mut rng);
            order = fresh;
            cursor = 0;
            epoch += 1;
        }
        let batch_idx = &order[cursor..cursor + fcfg.batch_size];
        cursor += fcfg.batch_size;
        let images: Vec<Tensor> = batch_idx.iter().map(|&i| train.images[i].clone()).collect();
        let labels: Vec<usize> = batch_idx.iter().map(|&i| train.labels[i]).collect();

        let lr_t = match fcfg.schedule {
            Schedule::Cosine => cosine_lr(step, fcfg.steps, fcfg.lr),
            Schedule::Constant => fcfg.lr,
        };
        let (loss, grads) = backward(cfg, &params, &images, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                op: "run_finetune",
                detail: format!("training loss at step {step}"),
            });
        }
        let grad_norm = sgd_step(
            &mut params,
            &grads,
            &mut state,
            lr_t,
            fcfg.momentum,
            fcfg.weight_decay,
            fcfg.clip_norm,
        )?;
        step_records.push(StepRecord {
            step,
            lr: lr_t,
            train_loss: loss,
            grad_norm,
        });

        let is_eval = (step + 1) % fcfg.eval_every == 0 || step + 1 == fcfg.steps;
        if is_eval {
            let (val_loss, val_accuracy) = accuracy(cfg, &params, &val.images, &val.labels)?;
            let record = EvalRecord {
                step,
                val_loss,
                val_accuracy,
            };
            let better = match &best {
                None => true,
                Some((_, acc, _)) => val_accuracy > *acc,
            };
            if better {
                best = Some((eval_records.len(), val_accuracy, params.clone()));
            }
            eval_records.push(record);
        }
    }

    let (best_eval_index, _, best_params) = best.expect("at least one eval ran");
    let (_, final_test_accuracy) = accuracy(cfg, &best_params, &data.test.images, &data.test.labels)?;

    let log = TrainLog {
        schema_version: TRAINLOG_SCHEMA_VERSION,
        group: fcfg.group.to_string(),
        seed: fcfg.seed,
        base_lr: fcfg.lr,
        steps: fcfg.steps,
        batch_size: fcfg.batch_size,
        data_id: data.data_id.clone(),
        trainable_parameters,
        step_records,
        eval_records,
        best_eval_index,
        final_test_accuracy,
    };
    Ok((log, best_params))
}

/// Memory accounting for gradients plus optimizer state.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub params: usize,
    pub bytes_per_scalar: usize,
    pub grad_bytes: usize,
    pub optimizer_bytes: usize,
    pub total_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    SgdMomentum,
}

impl MemoryEstimate {
    /// Total in binary megabytes.
    pub fn total_mb(&self) -> f64 {
        self.total_bytes as f64 / (1024.0 * 1024.0)
    }
}

/// Backpropagation stores one gradient per parameter; SGD with momentum
/// keeps one velocity buffer of the same size.
pub fn estimate_memory(
    params_count: usize,
    bytes_per_scalar: usize,
    optimizer: OptimizerKind,
) -> Result<MemoryEstimate> {
    if bytes_per_scalar == 0 {
        return Err(Error::invalid("estimate_memory", "bytes_per_scalar must be positive"));
    }
    let grad_bytes = params_count * bytes_per_scalar;
    let optimizer_bytes = match optimizer {
        OptimizerKind::SgdMomentum => params_count * bytes_per_scalar,
    };
    Ok(MemoryEstimate {
        params: params_count,
        bytes_per_scalar,
        grad_bytes,
        optimizer_bytes,
        total_bytes: grad_bytes + optimizer_bytes,
    })
}

/// Percentage improvement of finetuning accuracy over the probing baseline.
pub fn relative_gain(finetune_acc: f64, probe_acc: f64) -> Result<f64> {
    if probe_acc <= 0.0 {
        return Err(Error::invalid("relative_gain", "probe accuracy must be > 0"));
    }
    Ok(100.0 * (finetune_acc - probe_acc) / probe_acc)
}
