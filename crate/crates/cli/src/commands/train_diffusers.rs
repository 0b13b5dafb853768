use std::fs;
use std::path::Path;

use mural_core::config::Config;
use mural_core::dataset::contour_and_reward;
use mural_core::diffusion::NoiseSchedule;
use mural_core::fusion::{
    fused_validation_loss, train_diffusers, DiffuserSample, DiffuserTrainConfig, DynamicDiffuser,
    InfluenceSource,
};
use mural_core::image::read_image;
use mural_core::rng::derive_seed;

use crate::util::{list_pngs, CliError, CliResult};

pub struct Args<'a> {
    pub data: &'a Path,
    pub checkpoint_dir: &'a Path,
    pub config: &'a Config,
    pub out_dir: &'a Path,
}

/// Canonical-scale diffuser training samples from the finest patch set.
pub fn load_diffuser_samples(dir: &Path, cfg: &Config) -> CliResult<Vec<DiffuserSample>> {
    let canonical = *cfg.scales.last().expect("validated nonempty");
    let files = list_pngs(&dir.join(format!("scale_{canonical}")))?;
    if files.is_empty() {
        return Err(CliError::Msg(format!(
            "no canonical-scale patches under {}",
            dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(files.len());
    for f in &files {
        let patch = read_image(f)?;
        match contour_and_reward(&patch, cfg.seed) {
            Ok((contour, _)) => samples.push(DiffuserSample { x0: patch, contour }),
            Err(mural_core::MuralError::DegenerateInput(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    if samples.is_empty() {
        return Err(CliError::Msg("every canonical patch was degenerate".into()));
    }
    Ok(samples)
}

/// Train the dynamic diffusers against frozen per-scale denoisers; verifies
/// the predictors stayed bit-identical and writes one checkpoint per scale.
pub fn run(args: Args<'_>) -> CliResult<()> {
    let cfg = args.config;
    let sched = NoiseSchedule::linear_with_sigma(
        cfg.timesteps,
        cfg.beta_start,
        cfg.beta_end,
        cfg.sigma_mode,
    )?;
    let canonical = *cfg.scales.last().expect("validated nonempty");

    let denoisers = super::models::load_denoisers(args.checkpoint_dir, cfg)?;
    let frozen_digests: Vec<u64> = denoisers.iter().map(|d| d.store.value_digest()).collect();

    let diffusers: Vec<DynamicDiffuser> = cfg
        .scales
        .iter()
        .map(|&scale| {
            DynamicDiffuser::new(
                super::models::diffuser_config(cfg, canonical),
                derive_seed(cfg.seed, "diffuser-model", scale as u64),
            )
            .map_err(CliError::from)
        })
        .collect::<CliResult<_>>()?;

    let mut collab =
        super::models::build_collaborators(denoisers, InfluenceSource::Learned(diffusers))?;
    let samples = load_diffuser_samples(args.data, cfg)?;

    let trace = train_diffusers(
        &mut collab,
        &samples,
        &sched,
        &DiffuserTrainConfig {
            steps: cfg.diffuser_steps,
            batch: cfg.diffuser_batch,
            lr: cfg.diffuser_lr,
            seed: cfg.seed,
        },
    )?;

    let learned = fused_validation_loss(&collab, &samples, &sched, cfg.seed ^ 0x5a5a, false)?;
    let uniform = fused_validation_loss(&collab, &samples, &sched, cfg.seed ^ 0x5a5a, true)?;
    log::info!("fused validation loss: learned {learned:.5} vs uniform {uniform:.5}");

    fs::create_dir_all(args.out_dir)?;
    let InfluenceSource::Learned(diffusers) = &collab.influence else {
        unreachable!("constructed as learned")
    };
    for (&scale, d) in cfg.scales.iter().zip(diffusers) {
        d.save(
            &super::models::diffuser_ckpt_path(args.out_dir, scale),
            cfg.schedule_hash(),
        )?;
    }
    let mut trace_text = String::new();
    for l in &trace {
        trace_text.push_str(&format!("{l:.17e}\n"));
    }
    fs::write(args.out_dir.join("diffuser_trace.txt"), trace_text)?;

    // reload the frozen checkpoints to confirm bit-identity
    let reloaded = super::models::load_denoisers(args.checkpoint_dir, cfg)?;
    for ((d, &before), &scale) in reloaded.iter().zip(&frozen_digests).zip(&cfg.scales) {
        if d.store.value_digest() != before {
            return Err(CliError::Msg(format!(
                "frozen denoiser for scale {scale} changed during diffuser training"
            )));
        }
    }
    Ok(())
}
