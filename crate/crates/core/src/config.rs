//! Flat `key = value` configuration.
//!
//! Grammar, one binding per line:
//!
//! ```text
//! key = value        # trailing comments allowed
//! ```
//!
//! Keys are identifiers (`[A-Za-z_][A-Za-z0-9_]*`). Values are numbers,
//! booleans (`true`/`false`), quoted strings, bare words, or comma lists of
//! numbers. Blank lines and `#` comment lines are skipped. Unknown keys are
//! rejected with the offending key named.

use crate::diffusion::SigmaMode;
use crate::error::{MuralError, Result};

/// Every tunable of the pipeline with its default.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,

    // diffusion schedule
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
    pub lambda_reward: f64,

    // scales
    pub scales: Vec<usize>,

    // denoiser
    pub base_channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub time_embed_dim: usize,
    pub tag_vocab: usize,

    // denoiser training
    pub learning_rate: f64,
    pub train_steps: usize,
    pub batch_size: usize,

    // dynamic diffusers
    pub diffuser_channels: usize,
    pub diffuser_time_embed_dim: usize,
    pub diffuser_lr: f64,
    pub diffuser_steps: usize,
    pub diffuser_batch: usize,

    // frequency-domain post-processing
    pub fdp_enabled: bool,
    pub fdp_bands: usize,
    pub fdp_fit_steps: usize,

    // metrics
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub color_bins: usize,
    pub econ_raw_edges: bool,

    // synthetic dataset
    pub synth_count: usize,
    pub synth_test_count: usize,
    pub synth_size: usize,
    pub overlap: f64,
    pub black_threshold: f64,
    pub black_fraction_max: f64,

    // reward evaluation
    pub reward_full_rollout: bool,

    // independent chains averaged per restoration
    pub restore_ensemble: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma_mode: SigmaMode::Beta,
            lambda_reward: 1.0,
            scales: vec![16, 32, 64],
            base_channels: 32,
            depth: 2,
            heads: 4,
            head_dim: 8,
            time_embed_dim: 32,
            tag_vocab: 8,
            learning_rate: 1e-4,
            train_steps: 200,
            batch_size: 8,
            diffuser_channels: 8,
            diffuser_time_embed_dim: 16,
            diffuser_lr: 1e-2,
            diffuser_steps: 100,
            diffuser_batch: 8,
            fdp_enabled: true,
            fdp_bands: 8,
            fdp_fit_steps: 300,
            ssim_window: 11,
            ssim_sigma: 1.5,
            color_bins: 32,
            econ_raw_edges: false,
            synth_count: 64,
            synth_test_count: 8,
            synth_size: 64,
            overlap: 0.7,
            black_threshold: 0.02,
            black_fraction_max: 0.05,
            reward_full_rollout: false,
            restore_ensemble: 1,
        }
    }
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| MuralError::Config {
        key: key.into(),
        reason: format!("expected an unsigned integer, got `{v}`"),
    })
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| MuralError::Config {
        key: key.into(),
        reason: format!("expected a count, got `{v}`"),
    })
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| MuralError::Config {
        key: key.into(),
        reason: format!("expected a number, got `{v}`"),
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(MuralError::Config {
            key: key.into(),
            reason: format!("expected true/false, got `{v}`"),
        }),
    }
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_usize(key, s.trim()))
        .collect()
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    if v.len() >= 2 && v.starts_with('"') && v.ends_with('"') {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

impl Config {
    /// Parse a config file's text over the defaults.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(MuralError::Config {
                    key: format!("line {}", lineno + 1),
                    reason: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim();
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_')
                || key.chars().next().is_some_and(|c| c.is_ascii_digit())
            {
                return Err(MuralError::Config {
                    key: key.into(),
                    reason: "keys must be identifiers".into(),
                });
            }
            cfg.set(key, unquote(value))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_u64(key, v)?,
            "T" | "timesteps" => self.timesteps = parse_usize(key, v)?,
            "beta_start" => self.beta_start = parse_f64(key, v)?,
            "beta_end" => self.beta_end = parse_f64(key, v)?,
            "sigma_mode" => self.sigma_mode = SigmaMode::parse(v)?,
            "lambda_reward" => self.lambda_reward = parse_f64(key, v)?,
            "scales" => self.scales = parse_usize_list(key, v)?,
            "base_channels" => self.base_channels = parse_usize(key, v)?,
            "depth" => self.depth = parse_usize(key, v)?,
            "heads" => self.heads = parse_usize(key, v)?,
            "head_dim" => self.head_dim = parse_usize(key, v)?,
            "time_embed_dim" => self.time_embed_dim = parse_usize(key, v)?,
            "tag_vocab" => self.tag_vocab = parse_usize(key, v)?,
            "learning_rate" => self.learning_rate = parse_f64(key, v)?,
            "train_steps" => self.train_steps = parse_usize(key, v)?,
            "batch_size" => self.batch_size = parse_usize(key, v)?,
            "diffuser_channels" => self.diffuser_channels = parse_usize(key, v)?,
            "diffuser_time_embed_dim" => self.diffuser_time_embed_dim = parse_usize(key, v)?,
            "diffuser_lr" => self.diffuser_lr = parse_f64(key, v)?,
            "diffuser_steps" => self.diffuser_steps = parse_usize(key, v)?,
            "diffuser_batch" => self.diffuser_batch = parse_usize(key, v)?,
            "fdp_enabled" => self.fdp_enabled = parse_bool(key, v)?,
            "fdp_bands" => self.fdp_bands = parse_usize(key, v)?,
            "fdp_fit_steps" => self.fdp_fit_steps = parse_usize(key, v)?,
            "ssim_window" => self.ssim_window = parse_usize(key, v)?,
            "ssim_sigma" => self.ssim_sigma = parse_f64(key, v)?,
            "color_bins" => self.color_bins = parse_usize(key, v)?,
            "econ_raw_edges" => self.econ_raw_edges = parse_bool(key, v)?,
            "synth_count" => self.synth_count = parse_usize(key, v)?,
            "synth_test_count" => self.synth_test_count = parse_usize(key, v)?,
            "synth_size" => self.synth_size = parse_usize(key, v)?,
            "overlap" => self.overlap = parse_f64(key, v)?,
            "black_threshold" => self.black_threshold = parse_f64(key, v)?,
            "black_fraction_max" => self.black_fraction_max = parse_f64(key, v)?,
            "reward_full_rollout" => self.reward_full_rollout = parse_bool(key, v)?,
            "restore_ensemble" => self.restore_ensemble = parse_usize(key, v)?,
            _ => {
                return Err(MuralError::Config {
                    key: key.into(),
                    reason: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| -> Result<()> {
            Err(MuralError::Config {
                key: key.into(),
                reason,
            })
        };
        if self.timesteps == 0 {
            return bad("T", "must be >= 1".into());
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad(
                "beta_start",
                format!(
                    "need 0 < beta_start <= beta_end < 1, got ({}, {})",
                    self.beta_start, self.beta_end
                ),
            );
        }
        if self.lambda_reward < 0.0 {
            return bad("lambda_reward", "must be >= 0".into());
        }
        if self.scales.is_empty() {
            return bad("scales", "need at least one scale".into());
        }
        let mut sorted = self.scales.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.scales.len() || sorted != self.scales {
            return bad("scales", "scales must be strictly increasing".into());
        }
        if self.head_dim * self.heads != self.base_channels {
            return bad(
                "head_dim",
                format!(
                    "head_dim x heads must equal base_channels ({} x {} != {})",
                    self.head_dim, self.heads, self.base_channels
                ),
            );
        }
        let div = 1usize << (self.depth + 1);
        for &s in &self.scales {
            if s % div != 0 {
                return bad("scales", format!("scale {s} not divisible by {div}"));
            }
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad("overlap", "must lie in [0, 1)".into());
        }
        if self.fdp_bands == 0 {
            return bad("fdp_bands", "need at least one band".into());
        }
        if self.ssim_window % 2 == 0 || self.ssim_window < 3 {
            return bad("ssim_window", "must be odd and >= 3".into());
        }
        if self.synth_size < *self.scales.last().expect("nonempty") {
            return bad(
                "synth_size",
                "canvas must be at least the finest scale".into(),
            );
        }
        if self.batch_size == 0 || self.diffuser_batch == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if self.restore_ensemble == 0 {
            return bad("restore_ensemble", "must be >= 1".into());
        }
        Ok(())
    }

    /// Canonical single-line rendering; stable across runs.
    pub fn describe(&self) -> String {
        format!(
            "seed={};T={};beta=({},{});sigma={:?};lambda={};scales={:?};denoiser=({},{},{},{},{},{});train=({},{},{});diffuser=({},{},{},{},{});fdp=({},{},{});metrics=({},{},{},{});synth=({},{},{},{},{},{});rollout={};ensemble={}",
            self.seed,
            self.timesteps,
            self.beta_start,
            self.beta_end,
            self.sigma_mode,
            self.lambda_reward,
            self.scales,
            self.base_channels,
            self.depth,
            self.heads,
            self.head_dim,
            self.time_embed_dim,
            self.tag_vocab,
            self.learning_rate,
            self.train_steps,
            self.batch_size,
            self.diffuser_channels,
            self.diffuser_time_embed_dim,
            self.diffuser_lr,
            self.diffuser_steps,
            self.diffuser_batch,
            self.fdp_enabled,
            self.fdp_bands,
            self.fdp_fit_steps,
            self.ssim_window,
            self.ssim_sigma,
            self.color_bins,
            self.econ_raw_edges,
            self.synth_count,
            self.synth_test_count,
            self.synth_size,
            self.overlap,
            self.black_threshold,
            self.black_fraction_max,
            self.reward_full_rollout,
            self.restore_ensemble,
        )
    }

    pub fn hash(&self) -> u64 {
        crate::nn::describe_hash(&self.describe())
    }

    /// Schedule hash used to stamp checkpoints.
    pub fn schedule_hash(&self) -> u64 {
        crate::nn::describe_hash(&crate::denoiser::schedule_describe(
            self.timesteps,
            self.beta_start,
            self.beta_end,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        assert!(Config::default().validate().is_ok());
    }

    #[test]
    fn parses_typical_file() {
        let text = r#"
# smoke configuration
seed = 7
T = 50                  # short chain
beta_start = 0.001
beta_end = 0.2
scales = 16, 32, 64
base_channels = 16
head_dim = 4
lambda_reward = 0.5
sigma_mode = "beta"
fdp_enabled = false
"#;
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.timesteps, 50);
        assert_eq!(cfg.scales, vec![16, 32, 64]);
        assert_eq!(cfg.base_channels, 16);
        assert!(!cfg.fdp_enabled);
        assert_eq!(cfg.lambda_reward, 0.5);
    }

    #[test]
    fn unknown_key_named() {
        let err = Config::parse("lambda_rewrad = 1\n").unwrap_err();
        match err {
            MuralError::Config { key, reason } => {
                assert_eq!(key, "lambda_rewrad");
                assert!(reason.contains("unknown"));
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn bad_values_and_ranges_rejected() {
        assert!(Config::parse("T = zero\n").is_err());
        assert!(Config::parse("beta_start = 0.5\nbeta_end = 0.1\n").is_err());
        assert!(Config::parse("scales = 64, 32\n").is_err());
        assert!(Config::parse("scales = 17\n").is_err()); // not divisible
        assert!(Config::parse("no equals here\n").is_err());
    }

    #[test]
    fn hash_distinguishes_configs() {
        let a = Config::default();
        let mut b = Config::default();
        b.lambda_reward = 0.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), Config::default().hash());
    }
}
