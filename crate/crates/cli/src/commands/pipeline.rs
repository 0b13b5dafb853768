use std::fs;
use std::path::Path;

use mural_core::config::Config;
use mural_core::contour::ContourMask;
use mural_core::dataset::restoration_contour;
use mural_core::diffusion::NoiseSchedule;
use mural_core::fdp::{apply_filter, fit_filter, FitOptions, RadialFilter};
use mural_core::fusion::{collaborative_sample, composite, Collaborators, InfluenceSource};
use mural_core::image::{read_image, write_image, Image};
use mural_core::metrics::{evaluate_pair, mean_fill, MetricParams, MetricReport};
use mural_core::rng::derive_seed;
use serde::{Deserialize, Serialize};

use super::evaluate::{mean_row, EvalRow};
use crate::util::{CliError, CliResult, RunManifest, Timing};

pub struct Args<'a> {
    pub config: &'a Config,
    pub out: &'a Path,
    pub resume: bool,
    pub stop_after: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PipelineState {
    config_hash: String,
    completed: Vec<String>,
}

impl PipelineState {
    fn load(path: &Path) -> CliResult<Option<PipelineState>> {
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path)?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    fn save(&self, path: &Path) -> CliResult<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

const STAGES: &[&str] = &[
    "synth",
    "crop",
    "train",
    "train-diffusers",
    "fdp-fit",
    "restore",
    "evaluate",
];

/// End-to-end run over synthetic murals: generate data, crop, train the
/// per-scale denoisers, train the diffusers, optionally fit the frequency
/// filter, restore the held-out test set, and score it against the
/// mean-fill baseline.
pub fn run(args: Args<'_>) -> CliResult<()> {
    let cfg = args.config;
    if let Some(stage) = &args.stop_after {
        if !STAGES.contains(&stage.as_str()) {
            return Err(CliError::Msg(format!(
                "unknown stage `{stage}` (expected one of {STAGES:?})"
            )));
        }
    }
    fs::create_dir_all(args.out)?;
    let state_path = args.out.join("state.json");
    let config_hash = format!("{:016x}", cfg.hash());

    let mut state = if args.resume {
        match PipelineState::load(&state_path)? {
            Some(s) => {
                if s.config_hash != config_hash {
                    return Err(CliError::Mural(mural_core::MuralError::Config {
                        key: "resume".into(),
                        reason: format!(
                            "state at {} was produced by config {} but the current config hashes to {config_hash}",
                            state_path.display(),
                            s.config_hash
                        ),
                    }));
                }
                s
            }
            None => PipelineState {
                config_hash: config_hash.clone(),
                completed: Vec::new(),
            },
        }
    } else {
        PipelineState {
            config_hash: config_hash.clone(),
            completed: Vec::new(),
        }
    };

    let mut timing = Timing::default();
    let mut manifest = RunManifest::new("pipeline", cfg);
    let sched = NoiseSchedule::linear_with_sigma(
        cfg.timesteps,
        cfg.beta_start,
        cfg.beta_end,
        cfg.sigma_mode,
    )?;
    let checkpoints = args.out.join("checkpoints");

    for &stage in STAGES {
        if state.completed.iter().any(|s| s == stage) {
            log::info!("stage {stage}: already complete, skipping");
        } else {
            log::info!("stage {stage}: running");
            let result = timing.time(stage, || match stage {
                "synth" => stage_synth(cfg, args.out),
                "crop" => stage_crop(cfg, args.out),
                "train" => stage_train(cfg, args.out),
                "train-diffusers" => stage_train_diffusers(cfg, args.out),
                "fdp-fit" => stage_fdp_fit(cfg, args.out, &sched),
                "restore" => stage_restore(cfg, args.out, &sched),
                "evaluate" => stage_evaluate(cfg, args.out, &mut manifest),
                _ => unreachable!(),
            });
            result.map_err(|e| {
                CliError::Msg(format!("stage {stage} failed: {e}"))
            })?;
            state.completed.push(stage.to_string());
            state.save(&state_path)?;
        }
        if args.stop_after.as_deref() == Some(stage) {
            log::info!("stopping after stage {stage} as requested");
            timing.write(args.out)?;
            return Ok(());
        }
    }

    for &scale in &cfg.scales {
        manifest.record_checkpoint(
            &format!("denoiser_{scale}"),
            &super::models::denoiser_ckpt_path(&checkpoints, scale),
        )?;
        manifest.record_checkpoint(
            &format!("diffuser_{scale}"),
            &super::models::diffuser_ckpt_path(&checkpoints, scale),
        )?;
    }
    manifest.record_output(&args.out.join("report.csv"));
    manifest.record_output(&args.out.join("report.json"));
    manifest.write(args.out)?;
    timing.write(args.out)?;
    Ok(())
}

fn stage_synth(cfg: &Config, out: &Path) -> CliResult<()> {
    super::synth::run(super::synth::Args {
        count: cfg.synth_count,
        seed: cfg.seed,
        size: cfg.synth_size,
        out: &out.join("synth/train"),
        stage: "synth-train",
    })?;
    super::synth::run(super::synth::Args {
        count: cfg.synth_test_count,
        seed: cfg.seed,
        size: cfg.synth_size,
        out: &out.join("synth/test"),
        stage: "synth-test",
    })?;
    Ok(())
}

fn stage_crop(cfg: &Config, out: &Path) -> CliResult<()> {
    super::crop_cmd::run(super::crop_cmd::Args {
        input: &out.join("synth/train"),
        scales: &cfg.scales,
        overlap: cfg.overlap,
        black_threshold: cfg.black_threshold,
        black_fraction_max: cfg.black_fraction_max,
        out: &out.join("patches"),
    })
}

fn stage_train(cfg: &Config, out: &Path) -> CliResult<()> {
    for &scale in &cfg.scales {
        super::train::run(super::train::Args {
            data: &out.join("patches"),
            scale,
            config: cfg,
            out_dir: &out.join("checkpoints"),
        })?;
    }
    Ok(())
}

fn stage_train_diffusers(cfg: &Config, out: &Path) -> CliResult<()> {
    super::train_diffusers::run(super::train_diffusers::Args {
        data: &out.join("patches"),
        checkpoint_dir: &out.join("checkpoints"),
        config: cfg,
        out_dir: &out.join("checkpoints"),
    })
}

/// Assemble the trained ensemble from the pipeline's checkpoint directory.
fn load_collab(cfg: &Config, out: &Path) -> CliResult<Collaborators> {
    let checkpoints = out.join("checkpoints");
    let denoisers = super::models::load_denoisers(&checkpoints, cfg)?;
    let diffusers = super::models::load_diffusers(&checkpoints, cfg)?;
    super::models::build_collaborators(denoisers, InfluenceSource::Learned(diffusers))
}

/// Pixel mean of several same-shape images.
fn average_images(imgs: &[Image]) -> CliResult<Image> {
    let first = &imgs[0];
    let mut acc = vec![0.0; first.data().len()];
    for img in imgs {
        for (a, v) in acc.iter_mut().zip(img.data()) {
            *a += v;
        }
    }
    let n = imgs.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(Image::new(first.height(), first.width(), first.channels(), acc)?)
}

/// The generated (pre-composite) content for one restoration: the mean of
/// `cfg.restore_ensemble` independent chains. Averaging independent samples
/// estimates the posterior mean, trading stochastic texture noise for
/// stability while the residue-anchored strokes stay put.
fn generate_one(
    collab: &Collaborators,
    cfg: &Config,
    sched: &NoiseSchedule,
    damaged: &Image,
    damage: &ContourMask,
    seed: u64,
) -> CliResult<Image> {
    let contour = restoration_contour(damaged, damage, cfg.seed)?;
    let conds = collab.conditions(contour)?;
    let mut samples = Vec::with_capacity(cfg.restore_ensemble);
    for k in 0..cfg.restore_ensemble {
        let chain_seed = derive_seed(seed, "ensemble", k as u64);
        let out = collaborative_sample(collab, &conds, damaged, damage, sched, chain_seed, None)?;
        samples.push(out.generated);
    }
    average_images(&samples)
}

/// One restoration with the trained ensemble (optionally refined by the
/// fitted frequency filter before compositing).
fn restore_one(
    collab: &Collaborators,
    cfg: &Config,
    sched: &NoiseSchedule,
    damaged: &Image,
    damage: &ContourMask,
    filter: Option<&RadialFilter>,
    seed: u64,
) -> CliResult<Image> {
    let generated = generate_one(collab, cfg, sched, damaged, damage, seed)?;
    let refined = match filter {
        Some(f) => apply_filter(&generated, f)?,
        None => generated,
    };
    Ok(composite(damaged, &refined, damage)?)
}

/// Fit the radial filter on composited restorations of a few training
/// murals. The untouched known pixels anchor the fit near the identity, so
/// the learned gains denoise the generated texture instead of flattening
/// everything (a raw-generated fit collapses to an extreme low-pass, since
/// hallucinated content far from the damage only loosely tracks the clean
/// reference).
fn stage_fdp_fit(cfg: &Config, out: &Path, sched: &NoiseSchedule) -> CliResult<()> {
    if !cfg.fdp_enabled {
        log::info!("fdp disabled by config; skipping fit");
        return Ok(());
    }
    let collab = load_collab(cfg, out)?;
    let train_dir = out.join("synth/train");
    let n = cfg.synth_count.min(8);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let damaged = read_image(&train_dir.join(format!("mural_{i:04}_damaged.png")))?;
        let clean = read_image(&train_dir.join(format!("mural_{i:04}_clean.png")))?;
        let damage =
            ContourMask::from_image(&read_image(&train_dir.join(format!("mural_{i:04}_mask.png")))?)?;
        let restored = restore_one(
            &collab,
            cfg,
            sched,
            &damaged,
            &damage,
            None,
            derive_seed(cfg.seed, "fdp-restore", i as u64),
        )?;
        pairs.push((restored, clean));
    }
    let (filter, trace) = fit_filter(
        &pairs,
        FitOptions {
            bands: cfg.fdp_bands,
            steps: cfg.fdp_fit_steps,
            learning_rate: 1.0,
        },
    )?;
    log::info!(
        "fdp fit: loss {:.6} -> {:.6}, gains {:?}",
        trace.first().unwrap_or(&0.0),
        trace.last().unwrap_or(&0.0),
        filter.gains()
    );
    filter.save(&super::models::fdp_path(&out.join("checkpoints")))?;
    Ok(())
}

fn stage_restore(cfg: &Config, out: &Path, sched: &NoiseSchedule) -> CliResult<()> {
    let collab = load_collab(cfg, out)?;
    let filter = if cfg.fdp_enabled {
        Some(RadialFilter::load(&super::models::fdp_path(
            &out.join("checkpoints"),
        ))?)
    } else {
        None
    };
    let test_dir = out.join("synth/test");
    let restored_dir = out.join("restored");
    let baseline_dir = out.join("baseline");
    fs::create_dir_all(&restored_dir)?;
    fs::create_dir_all(&baseline_dir)?;
    for i in 0..cfg.synth_test_count {
        let name = format!("mural_{i:04}.png");
        let damaged = read_image(&test_dir.join(format!("mural_{i:04}_damaged.png")))?;
        let damage =
            ContourMask::from_image(&read_image(&test_dir.join(format!("mural_{i:04}_mask.png")))?)?;
        let restored = restore_one(
            &collab,
            cfg,
            sched,
            &damaged,
            &damage,
            filter.as_ref(),
            derive_seed(cfg.seed, "restore", i as u64),
        )?;
        write_image(&restored, &restored_dir.join(&name))?;
        let baseline = mean_fill(&damaged, &damage)?;
        write_image(&baseline, &baseline_dir.join(&name))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MethodRow {
    file: String,
    method: String,
    #[serde(rename = "SSIM")]
    ssim: f64,
    #[serde(rename = "CCON_chi2")]
    ccon_chi2: f64,
    #[serde(rename = "CCON")]
    ccon: f64,
    #[serde(rename = "TCON_chi2")]
    tcon_chi2: f64,
    #[serde(rename = "TCON")]
    tcon: f64,
    #[serde(rename = "ECON")]
    econ: f64,
}

#[derive(Serialize)]
struct PipelineReport {
    params: MetricParams,
    rows: Vec<MethodRow>,
    summary_restored: EvalRow,
    summary_mean_fill: EvalRow,
}

fn stage_evaluate(cfg: &Config, out: &Path, manifest: &mut RunManifest) -> CliResult<()> {
    let params = MetricParams {
        ssim_window: cfg.ssim_window,
        ssim_sigma: cfg.ssim_sigma,
        color_bins: cfg.color_bins,
        econ_raw_edges: cfg.econ_raw_edges,
    };
    let test_dir = out.join("synth/test");
    let mut rows = Vec::new();
    let mut restored_rows = Vec::new();
    let mut baseline_rows = Vec::new();
    for i in 0..cfg.synth_test_count {
        let name = format!("mural_{i:04}.png");
        let clean = read_image(&test_dir.join(format!("mural_{i:04}_clean.png")))?;
        let damage =
            ContourMask::from_image(&read_image(&test_dir.join(format!("mural_{i:04}_mask.png")))?)?;
        for (method, dir, bucket) in [
            ("restored", "restored", &mut restored_rows),
            ("mean_fill", "baseline", &mut baseline_rows),
        ] {
            let img = read_image(&out.join(dir).join(&name))?;
            let report: MetricReport = evaluate_pair(&img, &clean, Some(&damage), params)?;
            bucket.push(EvalRow::new(name.clone(), &report));
            rows.push(MethodRow {
                file: name.clone(),
                method: method.into(),
                ssim: report.ssim,
                ccon_chi2: report.ccon_chi2,
                ccon: report.ccon_similarity,
                tcon_chi2: report.tcon_chi2,
                tcon: report.tcon_similarity,
                econ: report.econ,
            });
        }
    }

    let mut csv = String::from("file,method,SSIM,CCON_chi2,CCON,TCON_chi2,TCON,ECON\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.file, r.method, r.ssim, r.ccon_chi2, r.ccon, r.tcon_chi2, r.tcon, r.econ
        ));
    }
    fs::write(out.join("report.csv"), csv)?;

    let report = PipelineReport {
        params,
        summary_restored: mean_row(&restored_rows),
        summary_mean_fill: mean_row(&baseline_rows),
        rows,
    };
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let _ = manifest;
    Ok(())
}
