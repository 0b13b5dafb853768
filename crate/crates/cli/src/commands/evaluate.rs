use std::fs;
use std::path::{Path, PathBuf};

use mural_core::contour::ContourMask;
use mural_core::image::read_image;
use mural_core::metrics::{evaluate_pair, MetricParams, MetricReport};
use serde::Serialize;

use crate::util::{CliError, CliResult};

pub struct Args<'a> {
    pub repaired: &'a Path,
    pub reference: &'a Path,
    pub mask: Option<&'a Path>,
    pub out: &'a Path,
    pub params: MetricParams,
}

#[derive(Serialize)]
pub struct EvalRow {
    pub file: String,
    #[serde(rename = "SSIM")]
    pub ssim: f64,
    #[serde(rename = "CCON_chi2")]
    pub ccon_chi2: f64,
    #[serde(rename = "CCON")]
    pub ccon: f64,
    #[serde(rename = "TCON_chi2")]
    pub tcon_chi2: f64,
    #[serde(rename = "TCON")]
    pub tcon: f64,
    #[serde(rename = "ECON")]
    pub econ: f64,
}

impl EvalRow {
    pub fn new(file: String, r: &MetricReport) -> EvalRow {
        EvalRow {
            file,
            ssim: r.ssim,
            ccon_chi2: r.ccon_chi2,
            ccon: r.ccon_similarity,
            tcon_chi2: r.tcon_chi2,
            tcon: r.tcon_similarity,
            econ: r.econ,
        }
    }
}

#[derive(Serialize)]
struct EvalReport {
    params: MetricParams,
    rows: Vec<EvalRow>,
    mean: EvalRow,
}

/// CSV header; the four metric columns carry the table-style names.
pub const CSV_HEADER: &str = "file,SSIM,CCON_chi2,CCON,TCON_chi2,TCON,ECON";

pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.file, r.ssim, r.ccon_chi2, r.ccon, r.tcon_chi2, r.tcon, r.econ
        ));
    }
    out
}

pub fn mean_row(rows: &[EvalRow]) -> EvalRow {
    let n = rows.len().max(1) as f64;
    EvalRow {
        file: "mean".into(),
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        ccon_chi2: rows.iter().map(|r| r.ccon_chi2).sum::<f64>() / n,
        ccon: rows.iter().map(|r| r.ccon).sum::<f64>() / n,
        tcon_chi2: rows.iter().map(|r| r.tcon_chi2).sum::<f64>() / n,
        tcon: rows.iter().map(|r| r.tcon).sum::<f64>() / n,
        econ: rows.iter().map(|r| r.econ).sum::<f64>() / n,
    }
}

/// Pair up repaired/reference (and optional mask) inputs: either three
/// files, or directories matched by file name.
fn collect_pairs(args: &Args<'_>) -> CliResult<Vec<(PathBuf, PathBuf, Option<PathBuf>)>> {
    if args.repaired.is_file() {
        return Ok(vec![(
            args.repaired.to_path_buf(),
            args.reference.to_path_buf(),
            args.mask.map(|m| m.to_path_buf()),
        )]);
    }
    let repaired = crate::util::list_pngs(args.repaired)?;
    if repaired.is_empty() {
        return Err(CliError::Msg(format!(
            "no PNG files under {}",
            args.repaired.display()
        )));
    }
    repaired
        .into_iter()
        .map(|rep| {
            let name = rep.file_name().expect("listed file");
            let reference = args.reference.join(name);
            if !reference.exists() {
                return Err(CliError::Msg(format!(
                    "no reference for {}",
                    rep.display()
                )));
            }
            let mask = match args.mask {
                Some(dir) => {
                    let m = dir.join(name);
                    if !m.exists() {
                        return Err(CliError::Msg(format!("no mask for {}", rep.display())));
                    }
                    Some(m)
                }
                None => None,
            };
            Ok((rep, reference, mask))
        })
        .collect()
}

/// Score every pair and write the report (CSV or JSON by extension).
pub fn run(args: Args<'_>) -> CliResult<()> {
    let pairs = collect_pairs(&args)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for (rep_path, ref_path, mask_path) in &pairs {
        let repaired = read_image(rep_path)?;
        let reference = read_image(ref_path)?;
        let mask = match mask_path {
            Some(p) => Some(ContourMask::from_image(&read_image(p)?)?),
            None => None,
        };
        let report = evaluate_pair(&repaired, &reference, mask.as_ref(), args.params)?;
        rows.push(EvalRow::new(
            rep_path
                .file_name()
                .expect("listed file")
                .to_string_lossy()
                .into_owned(),
            &report,
        ));
    }

    match args.out.extension().and_then(|e| e.to_str()) {
        Some("csv") => {
            let mut csv = rows_to_csv(&rows);
            csv.push_str(&rows_to_csv(std::slice::from_ref(&mean_row(&rows)))[CSV_HEADER.len() + 1..]);
            fs::write(args.out, csv)?;
        }
        Some("json") => {
            let report = EvalReport {
                params: args.params,
                mean: mean_row(&rows),
                rows,
            };
            fs::write(args.out, serde_json::to_string_pretty(&report)?)?;
        }
        _ => {
            return Err(CliError::Msg(format!(
                "report extension must be .csv or .json: {}",
                args.out.display()
            )))
        }
    }
    Ok(())
}
