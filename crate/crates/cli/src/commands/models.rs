//! Model assembly shared by the training, restoration and pipeline commands.

use std::path::{Path, PathBuf};

use mural_core::config::Config;
use mural_core::denoiser::{Denoiser, DenoiserConfig};
use mural_core::fusion::{
    Collaborators, DenoiserPredictor, DiffuserConfig, DynamicDiffuser, InfluenceSource,
    ScalePredictor,
};
use mural_core::rng::derive_seed;

use crate::util::{CliError, CliResult};

pub const IMG_CHANNELS: usize = 3;

pub fn denoiser_config(cfg: &Config, scale: usize) -> DenoiserConfig {
    DenoiserConfig {
        base_channels: cfg.base_channels,
        depth: cfg.depth,
        heads: cfg.heads,
        head_dim: cfg.head_dim,
        time_embed_dim: cfg.time_embed_dim,
        tag_vocab: cfg.tag_vocab,
        img_channels: IMG_CHANNELS,
        height: scale,
        width: scale,
    }
}

pub fn diffuser_config(cfg: &Config, canonical: usize) -> DiffuserConfig {
    DiffuserConfig {
        channels: cfg.diffuser_channels,
        time_embed_dim: cfg.diffuser_time_embed_dim,
        img_channels: IMG_CHANNELS,
        height: canonical,
        width: canonical,
    }
}

pub fn denoiser_ckpt_path(dir: &Path, scale: usize) -> PathBuf {
    dir.join(format!("denoiser_{scale}.ckpt"))
}

pub fn diffuser_ckpt_path(dir: &Path, scale: usize) -> PathBuf {
    dir.join(format!("diffuser_{scale}.ckpt"))
}

pub fn fdp_path(dir: &Path) -> PathBuf {
    dir.join("fdp.txt")
}

/// Fresh per-scale denoiser with a seed derived from the root seed.
pub fn new_denoiser(cfg: &Config, scale: usize) -> CliResult<Denoiser> {
    Ok(Denoiser::new(
        denoiser_config(cfg, scale),
        derive_seed(cfg.seed, "denoiser-model", scale as u64),
    )?)
}

/// Load every per-scale denoiser; a missing file exits with code 2 and the
/// scale named.
pub fn load_denoisers(dir: &Path, cfg: &Config) -> CliResult<Vec<Denoiser>> {
    let shash = cfg.schedule_hash();
    cfg.scales
        .iter()
        .map(|&scale| {
            let path = denoiser_ckpt_path(dir, scale);
            if !path.exists() {
                return Err(CliError::MissingCheckpoint(format!(
                    "scale {scale} denoiser at {}",
                    path.display()
                )));
            }
            Ok(Denoiser::load(&path, denoiser_config(cfg, scale), shash)?)
        })
        .collect()
}

/// Load the trained diffusers for every scale.
pub fn load_diffusers(dir: &Path, cfg: &Config) -> CliResult<Vec<DynamicDiffuser>> {
    let canonical = *cfg.scales.last().expect("validated nonempty");
    let shash = cfg.schedule_hash();
    cfg.scales
        .iter()
        .map(|&scale| {
            let path = diffuser_ckpt_path(dir, scale);
            if !path.exists() {
                return Err(CliError::MissingCheckpoint(format!(
                    "scale {scale} diffuser at {}",
                    path.display()
                )));
            }
            Ok(DynamicDiffuser::load(
                &path,
                diffuser_config(cfg, canonical),
                shash,
            )?)
        })
        .collect()
}

/// Assemble the fusion ensemble from trained checkpoints.
pub fn build_collaborators(
    denoisers: Vec<Denoiser>,
    influence: InfluenceSource,
) -> CliResult<Collaborators> {
    let predictors: Vec<Box<dyn ScalePredictor>> = denoisers
        .into_iter()
        .map(|model| Box::new(DenoiserPredictor { model, tag: None }) as Box<dyn ScalePredictor>)
        .collect();
    Ok(Collaborators::new(predictors, influence, IMG_CHANNELS)?)
}
