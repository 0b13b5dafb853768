use std::path::Path;

use mural_core::contour::{extract_contour_region, extract_contour_with, ContourMask, ContourOptions};
use mural_core::image::{read_image, write_image};

use crate::util::CliResult;

pub struct Args<'a> {
    pub input: &'a Path,
    pub output: &'a Path,
    pub seed: u64,
    pub invert: bool,
    pub allow_degenerate: bool,
    pub region: Option<&'a Path>,
}

/// K-means contour extraction; the mask is written as an 8-bit PNG of
/// {0, 255} values.
pub fn run(args: Args<'_>) -> CliResult<()> {
    let img = read_image(args.input)?;
    let opts = ContourOptions {
        invert: args.invert,
        allow_degenerate: args.allow_degenerate,
    };
    let mask = match args.region {
        Some(region_path) => {
            let region = ContourMask::from_image(&read_image(region_path)?)?;
            extract_contour_region(&img, &region, args.seed, opts)?
        }
        None => extract_contour_with(&img, args.seed, opts)?,
    };
    write_image(&mask.to_image(), args.output)?;
    log::info!(
        "contour: {} of {} pixels marked foreground",
        mask.count_ones(),
        mask.data().len()
    );
    Ok(())
}
