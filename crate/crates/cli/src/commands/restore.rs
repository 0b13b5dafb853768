use std::fs;
use std::path::Path;

use mural_core::config::Config;
use mural_core::contour::ContourMask;
use mural_core::dataset::restoration_contour;
use mural_core::diffusion::NoiseSchedule;
use mural_core::fdp::{apply_filter, RadialFilter};
use mural_core::fusion::{collaborative_sample, composite, InfluenceSource};
use mural_core::image::{read_image, write_image, Image};
use mural_core::metrics::{evaluate_pair, MetricParams};

use crate::util::{CliError, CliResult, RunManifest, Timing};

/// How the damage mask is obtained.
pub enum MaskSource<'a> {
    Path(&'a Path),
    Auto,
}

pub struct Args<'a> {
    pub input: &'a Path,
    pub mask: MaskSource<'a>,
    pub checkpoint_dir: &'a Path,
    pub config: &'a Config,
    pub seed: u64,
    pub output: &'a Path,
    pub fdp: Option<&'a Path>,
    pub dump_influence: Option<&'a Path>,
    pub reference: Option<&'a Path>,
    pub uniform_fusion: bool,
}

/// Heuristic damage detector for `--mask auto`: bright plaster-like pixels,
/// closed morphologically (radius 2) to absorb thin stroke residue.
pub fn auto_damage_mask(img: &Image) -> ContourMask {
    let gray = img.to_grayscale();
    let (h, w) = (gray.height(), gray.width());
    let bright: Vec<u8> = gray.data().iter().map(|&v| (v > 0.75) as u8).collect();
    let disk = |r: i64| -> Vec<(i64, i64)> {
        let mut offs = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx <= r * r {
                    offs.push((dy, dx));
                }
            }
        }
        offs
    };
    let offsets = disk(2);
    let apply = |src: &[u8], grow: bool| -> Vec<u8> {
        let mut out = vec![0u8; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut hit = !grow;
                for &(dy, dx) in &offsets {
                    let (ny, nx) = (y + dy, x + dx);
                    let v = if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        // outside the frame counts as background
                        0
                    } else {
                        src[ny as usize * w + nx as usize]
                    };
                    if grow && v == 1 {
                        hit = true;
                        break;
                    }
                    if !grow && v == 0 {
                        hit = false;
                        break;
                    }
                }
                out[(y as usize) * w + x as usize] = hit as u8;
            }
        }
        out
    };
    let dilated = apply(&bright, true);
    let closed = apply(&dilated, false);
    ContourMask::new(h, w, closed).expect("morphology preserves shape")
}

/// Full restoration: contour condition from the damaged region, the
/// collaborative reverse chain, optional frequency refinement of the
/// generated content, and compositing that leaves known pixels untouched.
pub fn run(args: Args<'_>) -> CliResult<()> {
    let cfg = args.config;
    let sched = NoiseSchedule::linear_with_sigma(
        cfg.timesteps,
        cfg.beta_start,
        cfg.beta_end,
        cfg.sigma_mode,
    )?;
    let mut timing = Timing::default();
    let mut manifest = RunManifest::new("restore", cfg);

    let damaged = read_image(args.input)?;
    let canonical = *cfg.scales.last().expect("validated nonempty");
    if damaged.height() != canonical || damaged.width() != canonical {
        return Err(CliError::Msg(format!(
            "input is {}x{}, but the trained canonical scale is {canonical}x{canonical}",
            damaged.height(),
            damaged.width()
        )));
    }
    let damage = match args.mask {
        MaskSource::Path(p) => ContourMask::from_image(&read_image(p)?)?,
        MaskSource::Auto => auto_damage_mask(&damaged),
    };

    let denoisers = timing.time("load-checkpoints", || {
        super::models::load_denoisers(args.checkpoint_dir, cfg)
    })?;
    for &scale in &cfg.scales {
        manifest.record_checkpoint(
            &format!("denoiser_{scale}"),
            &super::models::denoiser_ckpt_path(args.checkpoint_dir, scale),
        )?;
    }
    let influence = if args.uniform_fusion {
        InfluenceSource::Uniform
    } else {
        let diffusers = super::models::load_diffusers(args.checkpoint_dir, cfg)?;
        for &scale in &cfg.scales {
            manifest.record_checkpoint(
                &format!("diffuser_{scale}"),
                &super::models::diffuser_ckpt_path(args.checkpoint_dir, scale),
            )?;
        }
        InfluenceSource::Learned(diffusers)
    };
    let collab = super::models::build_collaborators(denoisers, influence)?;

    let contour = restoration_contour(&damaged, &damage, cfg.seed)?;
    let conds = collab.conditions(contour)?;

    // ensemble of independent chains; influence maps recorded on the first
    let mut dumps: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
    let generated = timing.time("sample", || -> CliResult<Image> {
        let mut samples = Vec::with_capacity(cfg.restore_ensemble);
        for k in 0..cfg.restore_ensemble {
            let chain_seed = mural_core::rng::derive_seed(args.seed, "ensemble", k as u64);
            let mut observer_fn = |t: usize, maps: &mural_core::fusion::InfluenceMaps| {
                dumps.push((t, maps.normalized.clone()));
            };
            let observer: Option<mural_core::fusion::InfluenceObserver<'_>> =
                if args.dump_influence.is_some() && k == 0 {
                    Some(&mut observer_fn)
                } else {
                    None
                };
            let out = collaborative_sample(
                &collab, &conds, &damaged, &damage, &sched, chain_seed, observer,
            )?;
            samples.push(out.generated);
        }
        let first = samples[0].clone();
        if samples.len() == 1 {
            return Ok(first);
        }
        let mut acc = vec![0.0; first.data().len()];
        for s in &samples {
            for (a, v) in acc.iter_mut().zip(s.data()) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= samples.len() as f64;
        }
        Ok(Image::new(first.height(), first.width(), first.channels(), acc)?)
    })?;

    let restored = match args.fdp {
        Some(filter_path) => {
            let filter = RadialFilter::load(filter_path)?;
            // refine the generated content, then composite so known pixels
            // stay exactly those of the input
            let refined = apply_filter(&generated, &filter)?;
            composite(&damaged, &refined, &damage)?
        }
        None => composite(&damaged, &generated, &damage)?,
    };

    if let Some(dir) = args.dump_influence {
        fs::create_dir_all(dir)?;
        for (t, maps) in &dumps {
            for (n, m) in maps.iter().enumerate() {
                let img = Image::new(canonical, canonical, 1, m.clone())?;
                let path = dir.join(format!("influence_t{t:04}_scale{n}.png"));
                write_image(&img, &path)?;
            }
        }
    }

    if let Some(parent) = args.output.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_image(&restored, args.output)?;
    manifest.record_output(args.output);

    if let Some(ref_path) = args.reference {
        let reference = read_image(ref_path)?;
        let report = evaluate_pair(
            &restored,
            &reference,
            Some(&damage),
            MetricParams {
                ssim_window: cfg.ssim_window,
                ssim_sigma: cfg.ssim_sigma,
                color_bins: cfg.color_bins,
                econ_raw_edges: cfg.econ_raw_edges,
            },
        )?;
        let metrics_path = args
            .output
            .with_file_name(format!(
                "{}_metrics.json",
                args.output.file_stem().unwrap_or_default().to_string_lossy()
            ));
        fs::write(&metrics_path, serde_json::to_string_pretty(&report)?)?;
        manifest.record_output(&metrics_path);
    }

    let dir = args
        .output
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    manifest.write(dir)?;
    timing.write(dir)?;
    Ok(())
}
