use std::fs;
use std::path::Path;

use mural_core::dataset::{crop, filter_invalid, plan_crops};
use mural_core::image::{read_image, write_image};

use crate::util::{CliError, CliResult};

pub struct Args<'a> {
    pub input: &'a Path,
    pub scales: &'a [usize],
    pub overlap: f64,
    pub black_threshold: f64,
    pub black_fraction_max: f64,
    pub out: &'a Path,
}

/// Crop every `*_clean.png` under the input directory at each scale,
/// filtering invalid patches. One manifest line per planned patch.
pub fn run(args: Args<'_>) -> CliResult<()> {
    let mut sources: Vec<_> = fs::read_dir(args.input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .is_some_and(|n| n.to_string_lossy().ends_with("_clean.png"))
        })
        .collect();
    sources.sort();
    if sources.is_empty() {
        return Err(CliError::Msg(format!(
            "no *_clean.png sources under {}",
            args.input.display()
        )));
    }

    fs::create_dir_all(args.out)?;
    let mut manifest = String::from("# source\torigin_y\torigin_x\tscale\tstatus\n");
    for &scale in args.scales {
        let scale_dir = args.out.join(format!("scale_{scale}"));
        fs::create_dir_all(&scale_dir)?;
        for (src_idx, src) in sources.iter().enumerate() {
            let img = read_image(src)?;
            let plan = plan_crops(img.height(), img.width(), scale, args.overlap)?;
            for (y, x) in plan.origins() {
                let patch = crop(&img, y, x, scale)?;
                let name = src.file_name().expect("file").to_string_lossy();
                if filter_invalid(&patch, args.black_threshold, args.black_fraction_max) {
                    let out_name = format!("patch_{src_idx:04}_{y:04}_{x:04}.png");
                    write_image(&patch, &scale_dir.join(&out_name))?;
                    manifest.push_str(&format!("{name}\t{y}\t{x}\t{scale}\tkept\n"));
                } else {
                    manifest.push_str(&format!(
                        "{name}\t{y}\t{x}\t{scale}\trejected:invalid-region\n"
                    ));
                }
            }
        }
    }
    fs::write(args.out.join("crop_manifest.txt"), manifest)?;
    Ok(())
}
