//! `mural`: contour-conditioned multi-scale diffusion restoration.
//!
//! Machine outputs go to files only; logs go to stderr. Every command is
//! deterministic given its config and seed; `MURAL_SEED` overrides the
//! config seed.

mod commands;
mod util;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mural_core::metrics::MetricParams;

use util::{CliError, CliResult, DirLock};

#[derive(Parser)]
#[command(name = "mural", version, about = "Mural restoration pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract the K-means contour mask of an image.
    ExtractContour {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Mark the lighter cluster as foreground instead of the darker one.
        #[arg(long)]
        invert: bool,
        /// Emit an all-zero mask instead of failing on a constant image.
        #[arg(long)]
        allow_degenerate: bool,
        /// Restrict clustering to the 1-pixels of this mask image.
        #[arg(long)]
        region: Option<PathBuf>,
    },
    /// Generate synthetic mural triples (clean, damage mask, damaged).
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// RNG stage label; train and test sets use disjoint labels.
        #[arg(long, default_value = "synth-train")]
        stage: String,
    },
    /// Crop clean murals into overlapping patches at several scales.
    Crop {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated patch sizes.
        #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32, 64])]
        scales: Vec<usize>,
        #[arg(long, default_value_t = 0.7)]
        overlap: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = mural_core::dataset::DEFAULT_BLACK_THRESHOLD)]
        black_threshold: f64,
        #[arg(long, default_value_t = mural_core::dataset::DEFAULT_BLACK_FRACTION_MAX)]
        black_fraction_max: f64,
    },
    /// Train the per-scale noise predictor for one scale.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the dynamic diffusers against frozen per-scale predictors.
    TrainDiffusers {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Restore a damaged mural with the trained ensemble.
    Restore {
        #[arg(long)]
        input: PathBuf,
        /// Damage mask image, or `auto` for the brightness heuristic.
        #[arg(long, default_value = "auto")]
        mask: String,
        #[arg(long)]
        checkpoint_dir: PathBuf,
        /// Config file; defaults to `<checkpoint-dir>/config.used`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the schedule length (must match the trained schedule).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        output: PathBuf,
        /// Radial filter file, or `off`.
        #[arg(long, default_value = "off")]
        fdp: String,
        /// Write per-timestep influence maps as grayscale PNGs here.
        #[arg(long)]
        dump_influence: Option<PathBuf>,
        /// Clean reference; when present a metrics JSON is written too.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Use exact uniform fusion instead of the trained diffusers.
        #[arg(long)]
        uniform_fusion: bool,
    },
    /// Score repaired images against references.
    Evaluate {
        #[arg(long)]
        repaired: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Report path; `.csv` or `.json` selects the format.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 11)]
        ssim_window: usize,
        #[arg(long, default_value_t = 1.5)]
        ssim_sigma: f64,
        #[arg(long, default_value_t = 32)]
        color_bins: usize,
        /// Compare raw edge maps instead of their gradients.
        #[arg(long)]
        econ_raw_edges: bool,
    },
    /// Verify the reverse sampler against an analytic toy distribution.
    OracleCheck {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Full run: synth, crop, train, train diffusers, restore, evaluate.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Skip stages recorded as complete in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop cleanly after the named stage (for staged/interrupted runs).
        #[arg(long)]
        stop_after: Option<String>,
    },
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::ExtractContour {
            input,
            output,
            seed,
            invert,
            allow_degenerate,
            region,
        } => commands::extract_contour::run(commands::extract_contour::Args {
            input: &input,
            output: &output,
            seed,
            invert,
            allow_degenerate,
            region: region.as_deref(),
        }),
        Command::Synth {
            count,
            seed,
            size,
            out,
            stage,
        } => {
            let seed = match std::env::var("MURAL_SEED") {
                Ok(s) => s.parse().map_err(|_| {
                    CliError::Mural(mural_core::MuralError::Config {
                        key: "MURAL_SEED".into(),
                        reason: format!("expected an unsigned integer, got `{s}`"),
                    })
                })?,
                Err(_) => seed,
            };
            let _lock = DirLock::acquire(&out)?;
            commands::synth::run(commands::synth::Args {
                count,
                seed,
                size,
                out: &out,
                stage: &stage,
            })
            .map(|_| ())
        }
        Command::Crop {
            input,
            scales,
            overlap,
            out,
            black_threshold,
            black_fraction_max,
        } => {
            let _lock = DirLock::acquire(&out)?;
            commands::crop_cmd::run(commands::crop_cmd::Args {
                input: &input,
                scales: &scales,
                overlap,
                black_threshold,
                black_fraction_max,
                out: &out,
            })
        }
        Command::Train {
            data,
            scale,
            config,
            out_dir,
        } => {
            let cfg = util::load_config(config.as_deref())?;
            let _lock = DirLock::acquire(&out_dir)?;
            commands::train::run(commands::train::Args {
                data: &data,
                scale,
                config: &cfg,
                out_dir: &out_dir,
            })
        }
        Command::TrainDiffusers {
            data,
            checkpoint_dir,
            config,
            out_dir,
        } => {
            let default_cfg = checkpoint_dir.join("config.used");
            let cfg = util::load_config(
                config
                    .as_deref()
                    .or(Some(default_cfg.as_path()).filter(|p| p.exists())),
            )?;
            let _lock = DirLock::acquire(&out_dir)?;
            commands::train_diffusers::run(commands::train_diffusers::Args {
                data: &data,
                checkpoint_dir: &checkpoint_dir,
                config: &cfg,
                out_dir: &out_dir,
            })
        }
        Command::Restore {
            input,
            mask,
            checkpoint_dir,
            config,
            seed,
            steps,
            output,
            fdp,
            dump_influence,
            reference,
            uniform_fusion,
        } => {
            let default_cfg = checkpoint_dir.join("config.used");
            let mut cfg = util::load_config(
                config
                    .as_deref()
                    .or(Some(default_cfg.as_path()).filter(|p| p.exists())),
            )?;
            if let Some(t) = steps {
                cfg.timesteps = t;
                cfg.validate().map_err(CliError::Mural)?;
            }
            let mask_source = if mask == "auto" {
                commands::restore::MaskSource::Auto
            } else {
                commands::restore::MaskSource::Path(std::path::Path::new(&mask))
            };
            let fdp_path = if fdp == "off" {
                None
            } else {
                Some(std::path::PathBuf::from(&fdp))
            };
            commands::restore::run(commands::restore::Args {
                input: &input,
                mask: mask_source,
                checkpoint_dir: &checkpoint_dir,
                config: &cfg,
                seed,
                output: &output,
                fdp: fdp_path.as_deref(),
                dump_influence: dump_influence.as_deref(),
                reference: reference.as_deref(),
                uniform_fusion,
            })
        }
        Command::Evaluate {
            repaired,
            reference,
            mask,
            out,
            ssim_window,
            ssim_sigma,
            color_bins,
            econ_raw_edges,
        } => commands::evaluate::run(commands::evaluate::Args {
            repaired: &repaired,
            reference: &reference,
            mask: mask.as_deref(),
            out: &out,
            params: MetricParams {
                ssim_window,
                ssim_sigma,
                color_bins,
                econ_raw_edges,
            },
        }),
        Command::OracleCheck {
            spec,
            steps,
            samples,
            seed,
            report,
        } => {
            let r = commands::oracle_check::run(commands::oracle_check::Args {
                spec: &spec,
                steps,
                samples,
                seed,
                report: &report,
            })?;
            if !r.pass {
                return Err(CliError::Msg(format!(
                    "oracle check failed (see {})",
                    report.display()
                )));
            }
            Ok(())
        }
        Command::Pipeline {
            config,
            out,
            resume,
            stop_after,
        } => {
            let cfg = util::load_config(config.as_deref())?;
            let _lock = DirLock::acquire(&out)?;
            commands::pipeline::run(commands::pipeline::Args {
                config: &cfg,
                out: &out,
                resume,
                stop_after,
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
