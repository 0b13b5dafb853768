use std::fs;
use std::path::Path;

use mural_core::dataset::{synth_mural, SyntheticMuralSpec};
use mural_core::image::write_image;
use mural_core::rng::derive_seed;
use serde::Serialize;

use crate::util::CliResult;

#[derive(Serialize)]
struct SynthEntry {
    index: usize,
    seed: u64,
    clean: String,
    mask: String,
    damaged: String,
    damage_fraction: f64,
}

pub struct Args<'a> {
    pub count: usize,
    pub seed: u64,
    pub size: usize,
    pub out: &'a Path,
    /// RNG stage label; keeps train and test draws on disjoint streams.
    pub stage: &'a str,
}

/// Emit clean/mask/damaged triples plus a manifest.
pub fn run(args: Args<'_>) -> CliResult<Vec<String>> {
    fs::create_dir_all(args.out)?;
    let mut entries = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let mural_seed = derive_seed(args.seed, args.stage, i as u64);
        let spec = SyntheticMuralSpec::desk(args.size, args.size, mural_seed);
        let m = synth_mural(&spec)?;
        let clean = format!("mural_{i:04}_clean.png");
        let mask = format!("mural_{i:04}_mask.png");
        let damaged = format!("mural_{i:04}_damaged.png");
        write_image(&m.clean, &args.out.join(&clean))?;
        write_image(&m.damage.to_image(), &args.out.join(&mask))?;
        write_image(&m.damaged, &args.out.join(&damaged))?;
        entries.push(SynthEntry {
            index: i,
            seed: mural_seed,
            clean,
            mask,
            damaged,
            damage_fraction: m.damage.fraction_ones(),
        });
    }
    fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&entries)?,
    )?;
    Ok(entries.into_iter().map(|e| e.clean).collect())
}
