use std::path::Path;

use mural_core::diffusion::{sample_single, NoiseSchedule};
use mural_core::image::LatentImage;
use mural_core::oracle::{
    oracle_eps_gaussian, oracle_eps_mixture, GaussianSpec, MixtureSpec,
};
use mural_core::rng;
use mural_core::MuralError;
use serde::Serialize;

use crate::util::{CliError, CliResult};

/// Parsed oracle-check spec file (flat `key = value`, same grammar as the
/// main config): `kind = gaussian|mixture`, `height`/`width`/`mean`/
/// `variance` for the Gaussian toy, `components = w:m:s2, ...` for the
/// scalar mixture, plus optional `beta_start`/`beta_end`.
struct OracleSpec {
    kind: String,
    height: usize,
    width: usize,
    mean: f64,
    variance: f64,
    components: Vec<(f64, f64, f64)>,
    beta_start: f64,
    beta_end: f64,
}

fn parse_spec(text: &str) -> CliResult<OracleSpec> {
    let mut spec = OracleSpec {
        kind: String::new(),
        height: 4,
        width: 4,
        mean: 0.0,
        variance: 1.0,
        components: Vec::new(),
        beta_start: 5e-3,
        beta_end: 0.25,
    };
    let bad = |key: &str, reason: String| {
        CliError::Mural(MuralError::Config {
            key: key.into(),
            reason,
        })
    };
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(bad("spec", format!("expected key = value, got `{line}`")));
        };
        let (key, value) = (key.trim(), value.trim().trim_matches('"'));
        match key {
            "kind" => spec.kind = value.to_string(),
            "height" => spec.height = value.parse().map_err(|_| bad(key, value.into()))?,
            "width" => spec.width = value.parse().map_err(|_| bad(key, value.into()))?,
            "mean" => spec.mean = value.parse().map_err(|_| bad(key, value.into()))?,
            "variance" => spec.variance = value.parse().map_err(|_| bad(key, value.into()))?,
            "beta_start" => spec.beta_start = value.parse().map_err(|_| bad(key, value.into()))?,
            "beta_end" => spec.beta_end = value.parse().map_err(|_| bad(key, value.into()))?,
            "components" => {
                for part in value.split(',') {
                    let fields: Vec<&str> = part.trim().split(':').collect();
                    if fields.len() != 3 {
                        return Err(bad(key, format!("expected w:m:s2, got `{part}`")));
                    }
                    let nums: Vec<f64> = fields
                        .iter()
                        .map(|f| f.trim().parse().map_err(|_| bad(key, (*f).into())))
                        .collect::<CliResult<_>>()?;
                    spec.components.push((nums[0], nums[1], nums[2]));
                }
            }
            other => return Err(bad(other, "unknown key".into())),
        }
    }
    Ok(spec)
}

#[derive(Serialize)]
pub struct OracleReport {
    pub kind: String,
    pub steps: usize,
    pub samples: usize,
    pub mean_error: Option<f64>,
    pub mean_limit: Option<f64>,
    pub variance_error: Option<f64>,
    pub variance_limit: Option<f64>,
    pub ks_statistic: Option<f64>,
    pub ks_limit: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Copy)]
pub struct Args<'a> {
    pub spec: &'a Path,
    pub steps: usize,
    pub samples: usize,
    pub seed: u64,
    pub report: &'a Path,
}

/// Reverse-chain statistics against the analytic target for CI gating.
pub fn run(args: Args<'_>) -> CliResult<OracleReport> {
    let spec = parse_spec(&std::fs::read_to_string(args.spec)?)?;
    let sched = NoiseSchedule::linear(args.steps, spec.beta_start, spec.beta_end)?;
    let report = match spec.kind.as_str() {
        "gaussian" => gaussian_report(&spec, &sched, args)?,
        "mixture" => mixture_report(&spec, &sched, args)?,
        other => {
            return Err(CliError::Mural(MuralError::Config {
                key: "kind".into(),
                reason: format!("expected gaussian or mixture, got `{other}`"),
            }))
        }
    };
    std::fs::write(args.report, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn gaussian_report(
    spec: &OracleSpec,
    sched: &NoiseSchedule,
    args: Args<'_>,
) -> CliResult<OracleReport> {
    let mean = LatentImage::constant(spec.height, spec.width, 1, spec.mean)
        .map_err(CliError::Mural)?;
    let gspec = GaussianSpec::new(mean, spec.variance)?;
    let mut r = rng::stream(args.seed, "oracle-check", 0);
    let n = args.samples * spec.height * spec.width;
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..args.samples {
        let x = sample_single(
            |xt, t| oracle_eps_gaussian(xt, t, sched, &gspec),
            sched,
            spec.height,
            spec.width,
            1,
            &mut r,
        )?;
        for (&v, &m) in x.data().iter().zip(gspec.mean.data()) {
            // standardized residual
            let z = (v - m) / spec.variance.sqrt();
            sum += z;
            sum2 += z * z;
        }
    }
    let zmean = sum / n as f64;
    let zvar = sum2 / n as f64 - zmean * zmean;
    let mean_limit = 3.0 / (n as f64).sqrt();
    let var_limit = 3.0 * (2.0 / n as f64).sqrt();
    let pass = zmean.abs() < mean_limit && (zvar - 1.0).abs() < var_limit;
    Ok(OracleReport {
        kind: "gaussian".into(),
        steps: sched.timesteps(),
        samples: args.samples,
        mean_error: Some(zmean.abs()),
        mean_limit: Some(mean_limit),
        variance_error: Some((zvar - 1.0).abs()),
        variance_limit: Some(var_limit),
        ks_statistic: None,
        ks_limit: None,
        pass,
    })
}

fn mixture_report(
    spec: &OracleSpec,
    sched: &NoiseSchedule,
    args: Args<'_>,
) -> CliResult<OracleReport> {
    if spec.components.is_empty() {
        return Err(CliError::Mural(MuralError::Config {
            key: "components".into(),
            reason: "mixture spec needs components".into(),
        }));
    }
    let comps: Vec<(f64, GaussianSpec)> = spec
        .components
        .iter()
        .map(|&(w, m, s2)| {
            GaussianSpec::new(
                LatentImage::constant(1, 1, 1, m).expect("finite"),
                s2,
            )
            .map(|g| (w, g))
        })
        .collect::<mural_core::Result<_>>()?;
    let mix = MixtureSpec::new(comps)?;

    let mut r = rng::stream(args.seed, "oracle-check-mixture", 0);
    let mut samples = Vec::with_capacity(args.samples);
    for _ in 0..args.samples {
        let x = sample_single(
            |xt, t| oracle_eps_mixture(xt, t, sched, &mix),
            sched,
            1,
            1,
            1,
            &mut r,
        )?;
        samples.push(x.data()[0]);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));

    let cdf = |x: f64| -> f64 {
        spec.components
            .iter()
            .map(|&(w, m, s2)| w * 0.5 * (1.0 + erf((x - m) / (2.0 * s2).sqrt())))
            .sum()
    };
    let n = samples.len();
    let mut ks: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let c = cdf(x);
        ks = ks.max(((i + 1) as f64 / n as f64 - c).abs());
        ks = ks.max((c - i as f64 / n as f64).abs());
    }
    let limit = 0.03;
    Ok(OracleReport {
        kind: "mixture".into(),
        steps: sched.timesteps(),
        samples: n,
        mean_error: None,
        mean_limit: None,
        variance_error: None,
        variance_limit: None,
        ks_statistic: Some(ks),
        ks_limit: Some(limit),
        pass: ks < limit,
    })
}

/// Abramowitz-Stegun 7.1.26 rational approximation, |err| < 1.5e-7; far
/// below the KS tolerances used here.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}
