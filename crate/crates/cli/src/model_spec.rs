//! Model resolution for the `--model` flag: `random:<preset>` builds a
//! seeded random model; a path loads a VCKP checkpoint with its config
//! sidecar (`<ckpt>.config.json`).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use vitlab_core::io::checkpoint::load_params;
use vitlab_core::model::{init_params, InitScheme, ParameterStore, ViTConfig};

pub struct ResolvedModel {
    pub cfg: ViTConfig,
    pub params: ParameterStore,
    /// Checkpoint path when loaded from disk (hashed into the manifest).
    pub source_file: Option<PathBuf>,
}

pub fn config_sidecar(ckpt: &Path) -> PathBuf {
    PathBuf::from(format!("{}.config.json", ckpt.display()))
}

pub fn save_config_sidecar(ckpt: &Path, cfg: &ViTConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)?;
    vitlab_core::io::atomic_write(&config_sidecar(ckpt), text.as_bytes())?;
    Ok(())
}

/// `spec` is `random:tiny|base|huge` or a checkpoint path.
pub fn resolve_model(
    spec: &str,
    num_classes: usize,
    init: InitScheme,
    seed: u64,
) -> Result<ResolvedModel> {
    if let Some(preset) = spec.strip_prefix("random:") {
        let mut cfg = ViTConfig::preset(preset, num_classes)
            .with_context(|| format!("resolving model spec '{spec}'"))?;
        cfg.seed = seed;
        let params = init_params(&cfg, init, seed);
        return Ok(ResolvedModel {
            cfg,
            params,
            source_file: None,
        });
    }
    let ckpt = Path::new(spec);
    if !ckpt.exists() {
        bail!("model '{spec}' is neither a random:<preset> spec nor an existing checkpoint");
    }
    let sidecar = config_sidecar(ckpt);
    let text = std::fs::read_to_string(&sidecar).with_context(|| {
        format!(
            "checkpoint config sidecar {} (written alongside every checkpoint this tool produces)",
            sidecar.display()
        )
    })?;
    let cfg: ViTConfig = serde_json::from_str(&text)?;
    cfg.validate().context("checkpoint config sidecar")?;
    let mut params = init_params(&cfg, InitScheme::TruncNormal { std: 0.0 }, 0);
    load_params(ckpt, &mut params).context("loading checkpoint")?;
    Ok(ResolvedModel {
        cfg,
        params,
        source_file: Some(ckpt.to_path_buf()),
    })
}
