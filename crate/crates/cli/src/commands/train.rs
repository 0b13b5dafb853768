use std::fs;
use std::path::Path;

use mural_core::config::Config;
use mural_core::dataset::contour_and_reward;
use mural_core::denoiser::{reward_full_rollout, train_step, TrainSample};
use mural_core::diffusion::{ConditionSet, NoiseSchedule};
use mural_core::image::read_image;
use mural_core::nn::Adam;
use mural_core::rng;

use crate::util::{config_to_text, list_pngs, CliError, CliResult};

pub struct Args<'a> {
    pub data: &'a Path,
    pub scale: usize,
    pub config: &'a Config,
    pub out_dir: &'a Path,
}

/// Load the kept patches of one scale and derive their conditions.
pub fn load_samples(dir: &Path, scale: usize, cfg: &Config) -> CliResult<Vec<TrainSample>> {
    let scale_dir = dir.join(format!("scale_{scale}"));
    let files = list_pngs(&scale_dir)?;
    if files.is_empty() {
        return Err(CliError::Msg(format!(
            "no patches under {}",
            scale_dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(files.len());
    for f in &files {
        let patch = read_image(f)?;
        if patch.height() != scale || patch.width() != scale {
            return Err(CliError::Msg(format!(
                "{} is {}x{}, expected {scale}x{scale}",
                f.display(),
                patch.height(),
                patch.width()
            )));
        }
        match contour_and_reward(&patch, cfg.seed) {
            Ok((contour, reward)) => samples.push(TrainSample {
                x0: patch,
                cond: ConditionSet::new(contour, None, cfg.lambda_reward)?,
                reward,
            }),
            Err(mural_core::MuralError::DegenerateInput(_)) => {
                log::warn!("skipping degenerate patch {}", f.display());
            }
            Err(e) => return Err(e.into()),
        }
    }
    if samples.is_empty() {
        return Err(CliError::Msg("every patch was degenerate".into()));
    }
    Ok(samples)
}

/// Train one per-scale denoiser and write its checkpoint and loss trace.
pub fn run(args: Args<'_>) -> CliResult<()> {
    let cfg = args.config;
    let sched = NoiseSchedule::linear_with_sigma(
        cfg.timesteps,
        cfg.beta_start,
        cfg.beta_end,
        cfg.sigma_mode,
    )?;
    let samples = load_samples(args.data, args.scale, cfg)?;
    let mut model = super::models::new_denoiser(cfg, args.scale)?;
    let mut adam = Adam::new(&model.store, cfg.learning_rate);
    let mut r = rng::stream(cfg.seed, &format!("train/scale{}", args.scale), 0);

    let mut trace = String::new();
    for step in 0..cfg.train_steps {
        // draw this step's batch indices from the same stream as the noise
        let batch: Vec<TrainSample> = (0..cfg.batch_size)
            .map(|_| samples[rand::Rng::gen_range(&mut r, 0..samples.len())].clone())
            .collect();
        let loss = train_step(&mut model, &batch, &sched, &mut adam, &mut r)?;
        trace.push_str(&format!("{loss:.17e}\n"));
        if step % 50 == 0 || step + 1 == cfg.train_steps {
            log::info!("scale {} step {step}: loss {loss:.5}", args.scale);
        }
        if cfg.reward_full_rollout && step + 1 == cfg.train_steps {
            let sample = &samples[0];
            let loss = reward_full_rollout(
                &model,
                &sample.cond,
                &sample.reward,
                &sched,
                rng::derive_seed(cfg.seed, "rollout", args.scale as u64),
            )?;
            log::info!("scale {} full-rollout reward loss {loss:.5}", args.scale);
        }
    }

    fs::create_dir_all(args.out_dir)?;
    let ckpt = super::models::denoiser_ckpt_path(args.out_dir, args.scale);
    model.save(&ckpt, cfg.schedule_hash())?;
    fs::write(
        args.out_dir.join(format!("train_trace_{}.txt", args.scale)),
        trace,
    )?;
    fs::write(args.out_dir.join("config.used"), config_to_text(cfg))?;
    Ok(())
}
