//! Shared CLI plumbing: error-to-exit-code mapping, run manifests, the
//! output-directory lock, and config loading with the `MURAL_SEED` override.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mural_core::config::Config;
use mural_core::MuralError;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error(transparent)]
    Mural(#[from] MuralError),
    #[error("{0}")]
    Msg(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Exit codes: 2 missing checkpoint, 3 invalid config, 4 NaN abort,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingCheckpoint(_) => 2,
            CliError::Mural(MuralError::Config { .. }) => 3,
            CliError::Mural(MuralError::NonFinite { .. })
            | CliError::Mural(MuralError::NonFiniteAtStep { .. }) => 4,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Load a config file (or defaults) and apply the `MURAL_SEED` override.
pub fn load_config(path: Option<&Path>) -> CliResult<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Ok(seed) = std::env::var("MURAL_SEED") {
        cfg.seed = seed.parse().map_err(|_| {
            CliError::Mural(MuralError::Config {
                key: "MURAL_SEED".into(),
                reason: format!("expected an unsigned integer, got `{seed}`"),
            })
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Render a config back to its file format; `Config::parse` round-trips it.
pub fn config_to_text(cfg: &Config) -> String {
    let sigma = match cfg.sigma_mode {
        mural_core::diffusion::SigmaMode::Beta => "beta",
        mural_core::diffusion::SigmaMode::BetaTilde => "beta-tilde",
    };
    let scales: Vec<String> = cfg.scales.iter().map(|s| s.to_string()).collect();
    format!(
        "seed = {}\nT = {}\nbeta_start = {}\nbeta_end = {}\nsigma_mode = {}\nlambda_reward = {}\n\
         scales = {}\nbase_channels = {}\ndepth = {}\nheads = {}\nhead_dim = {}\n\
         time_embed_dim = {}\ntag_vocab = {}\nlearning_rate = {}\ntrain_steps = {}\n\
         batch_size = {}\ndiffuser_channels = {}\ndiffuser_time_embed_dim = {}\n\
         diffuser_lr = {}\ndiffuser_steps = {}\ndiffuser_batch = {}\nfdp_enabled = {}\n\
         fdp_bands = {}\nfdp_fit_steps = {}\nssim_window = {}\nssim_sigma = {}\n\
         color_bins = {}\necon_raw_edges = {}\nsynth_count = {}\nsynth_test_count = {}\n\
         synth_size = {}\noverlap = {}\nblack_threshold = {}\nblack_fraction_max = {}\n\
         reward_full_rollout = {}\nrestore_ensemble = {}\n",
        cfg.seed,
        cfg.timesteps,
        cfg.beta_start,
        cfg.beta_end,
        sigma,
        cfg.lambda_reward,
        scales.join(", "),
        cfg.base_channels,
        cfg.depth,
        cfg.heads,
        cfg.head_dim,
        cfg.time_embed_dim,
        cfg.tag_vocab,
        cfg.learning_rate,
        cfg.train_steps,
        cfg.batch_size,
        cfg.diffuser_channels,
        cfg.diffuser_time_embed_dim,
        cfg.diffuser_lr,
        cfg.diffuser_steps,
        cfg.diffuser_batch,
        cfg.fdp_enabled,
        cfg.fdp_bands,
        cfg.fdp_fit_steps,
        cfg.ssim_window,
        cfg.ssim_sigma,
        cfg.color_bins,
        cfg.econ_raw_edges,
        cfg.synth_count,
        cfg.synth_test_count,
        cfg.synth_size,
        cfg.overlap,
        cfg.black_threshold,
        cfg.black_fraction_max,
        cfg.reward_full_rollout,
        cfg.restore_ensemble,
    )
}

/// FNV-1a of a file's bytes; used for checkpoint hashes in manifests.
pub fn file_digest(path: &Path) -> CliResult<u64> {
    let bytes = fs::read(path)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(h)
}

/// Reproducibility record written at the end of a run. Wall-clock timings
/// are deliberately kept out (they go to `timing.json`) so the manifest is
/// byte-identical across reruns of the same seed.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint_hashes: BTreeMap<String, String>,
    pub output_paths: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &Config) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            config_hash: format!("{:016x}", cfg.hash()),
            seed: cfg.seed,
            checkpoint_hashes: BTreeMap::new(),
            output_paths: Vec::new(),
        }
    }

    pub fn record_checkpoint(&mut self, name: &str, path: &Path) -> CliResult<()> {
        self.checkpoint_hashes
            .insert(name.to_string(), format!("{:016x}", file_digest(path)?));
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        self.output_paths.push(path.display().to_string());
    }

    /// Write atomically: temp file then rename.
    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join("manifest.json");
        let tmp = dir.join(".manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

/// Per-stage wall times; non-reproducible by nature and therefore written
/// next to (not inside) the manifest.
#[derive(Debug, Default, Serialize)]
pub struct Timing {
    pub stages: Vec<(String, f64)>,
}

impl Timing {
    pub fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.stages
            .push((name.to_string(), start.elapsed().as_secs_f64()));
        out
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        fs::write(dir.join("timing.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Exclusive ownership of an output directory for the life of the guard.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> CliResult<DirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Msg(format!(
                "output directory {} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Sorted PNG listing of a directory.
pub fn list_pngs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    files.sort();
    Ok(files)
}
