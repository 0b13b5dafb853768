//! Patch extraction with heavy overlap, invalid-region filtering, and a
//! procedural mural generator that plays the role of scan data at desk
//! scale: curved strokes over a textured ground, damage blobs and cracks
//! exposing plaster, and faint stroke residue inside the damaged areas.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::contour::{extract_contour, ContourMask, ContourOptions};
use crate::denoiser::TrainSample;
use crate::diffusion::{ConditionSet, SoftContourReward};
use crate::error::{MuralError, Result};
use crate::image::Image;
use crate::rng;

pub const DEFAULT_BLACK_THRESHOLD: f64 = 0.02;
pub const DEFAULT_BLACK_FRACTION_MAX: f64 = 0.05;

// ---------------------------------------------------------------------------
// crop planning
// ---------------------------------------------------------------------------

/// Grid of patch origins with a final edge patch appended for coverage.
#[derive(Debug, Clone)]
pub struct CropPlan {
    pub patch_size: usize,
    pub overlap_fraction: f64,
    pub stride: usize,
    pub origins_y: Vec<usize>,
    pub origins_x: Vec<usize>,
}

impl CropPlan {
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.origins_y
            .iter()
            .flat_map(move |&y| self.origins_x.iter().map(move |&x| (y, x)))
    }

    pub fn len(&self) -> usize {
        self.origins_y.len() * self.origins_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    if *origins.last().expect("at least origin 0") != last {
        origins.push(last);
    }
    origins
}

/// Plan overlapping crops: origins at multiples of
/// `stride = floor(patch * (1 - overlap))`, plus the final edge origin when
/// the grid does not already land there.
pub fn plan_crops(
    height: usize,
    width: usize,
    patch_size: usize,
    overlap_fraction: f64,
) -> Result<CropPlan> {
    if patch_size == 0 || patch_size > height || patch_size > width {
        return Err(MuralError::InvalidParameter(format!(
            "patch {patch_size} does not fit into {height}x{width}"
        )));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(MuralError::InvalidParameter(format!(
            "overlap fraction {overlap_fraction} outside [0, 1)"
        )));
    }
    let stride = ((patch_size as f64 * (1.0 - overlap_fraction)).floor() as usize).max(1);
    Ok(CropPlan {
        patch_size,
        overlap_fraction,
        stride,
        origins_y: axis_origins(height, patch_size, stride),
        origins_x: axis_origins(width, patch_size, stride),
    })
}

/// Copy one patch out of an image.
pub fn crop(img: &Image, y0: usize, x0: usize, size: usize) -> Result<Image> {
    if y0 + size > img.height() || x0 + size > img.width() {
        return Err(MuralError::InvalidParameter(format!(
            "crop {size} at ({y0}, {x0}) leaves a {}x{} image",
            img.height(),
            img.width()
        )));
    }
    let c = img.channels();
    let mut data = Vec::with_capacity(size * size * c);
    for y in y0..y0 + size {
        let row = &img.data()[(y * img.width() + x0) * c..(y * img.width() + x0 + size) * c];
        data.extend_from_slice(row);
    }
    Image::new(size, size, c, data)
}

/// Keep/reject decision for one patch: reject when the fraction of pixels
/// darker than `black_threshold` strictly exceeds `black_fraction_max`.
pub fn filter_invalid(patch: &Image, black_threshold: f64, black_fraction_max: f64) -> bool {
    let gray = patch.to_grayscale();
    let dark = gray.data().iter().filter(|&&v| v < black_threshold).count();
    let fraction = dark as f64 / gray.data().len() as f64;
    fraction <= black_fraction_max
}

// ---------------------------------------------------------------------------
// synthetic murals
// ---------------------------------------------------------------------------

/// Parameters of the procedural mural generator.
#[derive(Debug, Clone)]
pub struct SyntheticMuralSpec {
    pub height: usize,
    pub width: usize,
    /// Stroke ink colors.
    pub palette: Vec<[f64; 3]>,
    /// Painted ground base color.
    pub ground: [f64; 3],
    /// Exposed plaster color inside damaged regions.
    pub plaster: [f64; 3],
    pub stroke_count: (usize, usize),
    pub stroke_width: (f64, f64),
    /// Perpendicular offset scale of the quadratic control point.
    pub stroke_curvature: f64,
    pub texture_amplitude: f64,
    pub damage_fraction: (f64, f64),
    /// Opacity of surviving stroke residue inside damaged regions.
    pub residue_alpha: f64,
    pub seed: u64,
}

impl SyntheticMuralSpec {
    pub fn desk(height: usize, width: usize, seed: u64) -> SyntheticMuralSpec {
        SyntheticMuralSpec {
            height,
            width,
            palette: vec![
                [0.10, 0.08, 0.08],
                [0.30, 0.10, 0.08],
                [0.08, 0.12, 0.30],
            ],
            ground: [0.58, 0.47, 0.34],
            plaster: [0.86, 0.83, 0.78],
            stroke_count: (6, 14),
            stroke_width: (1.0, 2.2),
            stroke_curvature: 0.35,
            texture_amplitude: 0.02,
            damage_fraction: (0.2, 0.6),
            residue_alpha: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.palette.is_empty() {
            return Err(MuralError::InvalidParameter("empty palette".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(MuralError::InvalidParameter(
                "canvas must be at least 8x8".into(),
            ));
        }
        let (lo, hi) = self.damage_fraction;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(MuralError::InvalidParameter(
                "damage fraction range must satisfy 0 < lo < hi < 1".into(),
            ));
        }
        Ok(())
    }
}

/// Output of [`synth_mural`]: the clean painting, the damage mask, the
/// damaged observation, and the generator's own stroke raster (ground
/// truth for contour-recovery checks).
#[derive(Debug, Clone)]
pub struct SynthMural {
    pub clean: Image,
    pub damage: ContourMask,
    pub damaged: Image,
    pub strokes: ContourMask,
}

/// Smooth low-frequency texture field from a few seeded sinusoids.
struct TextureField {
    waves: Vec<(f64, f64, f64)>,
    amplitude: f64,
}

impl TextureField {
    fn new(rng: &mut ChaCha8Rng, amplitude: f64) -> TextureField {
        let waves = (0..4)
            .map(|_| {
                (
                    rng.gen_range(0.15..0.8),
                    rng.gen_range(0.15..0.8),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        TextureField { waves, amplitude }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        let mut v = 0.0;
        for &(a, b, phase) in &self.waves {
            v += (a * y as f64 + b * x as f64 + phase).sin();
        }
        self.amplitude * v / self.waves.len() as f64
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn stamp_disk(mask: &mut [u8], h: usize, w: usize, cy: f64, cx: f64, r: f64) {
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let y1 = ((cy + r).ceil().min(h as f64 - 1.0)) as usize;
    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let x1 = ((cx + r).ceil().min(w as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= r * r {
                mask[y * w + x] = 1;
            }
        }
    }
}

/// Render one synthetic mural triple. Fully deterministic in the spec seed.
pub fn synth_mural(spec: &SyntheticMuralSpec) -> Result<SynthMural> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut r = rng::stream(spec.seed, "synth-mural", 0);

    // painted ground with low-frequency texture
    let ground_tex = TextureField::new(&mut r, spec.texture_amplitude);
    let mut clean = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let t = ground_tex.at(y, x);
            for c in 0..3 {
                clean[(y * w + x) * 3 + c] = clamp01(spec.ground[c] + t);
            }
        }
    }

    // curved strokes stamped as disks along quadratic Bezier paths
    let mut strokes = vec![0u8; h * w];
    let mut stroke_color_idx = vec![0usize; h * w];
    let n_strokes = r.gen_range(spec.stroke_count.0..=spec.stroke_count.1);
    let diag = ((h * h + w * w) as f64).sqrt();
    for _ in 0..n_strokes {
        let (y0, x0) = (r.gen_range(0.0..h as f64), r.gen_range(0.0..w as f64));
        let (y1, x1) = (r.gen_range(0.0..h as f64), r.gen_range(0.0..w as f64));
        let (my, mx) = ((y0 + y1) / 2.0, (x0 + x1) / 2.0);
        let (dy, dx) = (y1 - y0, x1 - x0);
        let len = (dy * dy + dx * dx).sqrt().max(1.0);
        let bend = r.gen_range(-spec.stroke_curvature..spec.stroke_curvature) * len;
        // perpendicular offset of the control point
        let (cy, cx) = (my - dx / len * bend, mx + dy / len * bend);
        let width = r.gen_range(spec.stroke_width.0..=spec.stroke_width.1);
        let color = r.gen_range(0..spec.palette.len());
        let steps = (2.0 * len.max(diag / 8.0)) as usize;
        let mut disk = vec![0u8; h * w];
        for s in 0..=steps {
            let u = s as f64 / steps as f64;
            let v = 1.0 - u;
            let py = v * v * y0 + 2.0 * v * u * cy + u * u * y1;
            let px = v * v * x0 + 2.0 * v * u * cx + u * u * x1;
            stamp_disk(&mut disk, h, w, py, px, width / 2.0);
        }
        for (i, &d) in disk.iter().enumerate() {
            if d == 1 {
                strokes[i] = 1;
                stroke_color_idx[i] = color;
            }
        }
    }
    for (i, &s) in strokes.iter().enumerate() {
        if s == 1 {
            let col = spec.palette[stroke_color_idx[i]];
            let t = ground_tex.at(i / w, i % w) * 0.5;
            for c in 0..3 {
                clean[i * 3 + c] = clamp01(col[c] + t);
            }
        }
    }

    // damage mask: blobs plus cracks, grown to a target coverage
    let target = r.gen_range(
        spec.damage_fraction.0 + 0.05..spec.damage_fraction.1 - 0.05,
    );
    let mut damage = vec![0u8; h * w];
    let frac = |m: &[u8]| m.iter().filter(|&&v| v == 1).count() as f64 / (h * w) as f64;
    let mut guard = 0;
    while frac(&damage) < target && guard < 400 {
        guard += 1;
        if guard % 4 == 0 {
            // crack: a jittered walk of thin disks
            let mut py = r.gen_range(0.0..h as f64);
            let mut px = r.gen_range(0.0..w as f64);
            let mut dir = r.gen_range(0.0..std::f64::consts::TAU);
            for _ in 0..(h + w) {
                stamp_disk(&mut damage, h, w, py, px, r.gen_range(0.6..1.3));
                dir += r.gen_range(-0.5..0.5);
                py += dir.sin();
                px += dir.cos();
                if py < 0.0 || px < 0.0 || py >= h as f64 || px >= w as f64 {
                    break;
                }
            }
        } else {
            // flaking blob
            let cy = r.gen_range(0.0..h as f64);
            let cx = r.gen_range(0.0..w as f64);
            let ry = r.gen_range(h as f64 / 12.0..h as f64 / 4.0);
            stamp_disk(&mut damage, h, w, cy, cx, ry);
        }
    }

    // damaged observation: plaster with faint stroke residue
    let plaster_tex = TextureField::new(&mut r, spec.texture_amplitude * 0.5);
    let mut damaged = clean.clone();
    for i in 0..h * w {
        if damage[i] == 1 {
            let t = plaster_tex.at(i / w, i % w);
            for c in 0..3 {
                let base = clamp01(spec.plaster[c] + t);
                damaged[i * 3 + c] = if strokes[i] == 1 {
                    let ink = spec.palette[stroke_color_idx[i]][c];
                    clamp01((1.0 - spec.residue_alpha) * base + spec.residue_alpha * ink)
                } else {
                    base
                };
            }
        }
    }

    Ok(SynthMural {
        clean: Image::new(h, w, 3, clean)?,
        damage: ContourMask::new(h, w, damage)?,
        damaged: Image::new(h, w, 3, damaged)?,
        strokes: ContourMask::new(h, w, strokes)?,
    })
}

// ---------------------------------------------------------------------------
// training-set assembly
// ---------------------------------------------------------------------------

/// Why a planned patch was left out of the training set.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub enum PatchRejection {
    InvalidRegion,
    DegenerateContour,
}

/// One manifest row of the cropping pipeline.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PatchRecord {
    pub source: usize,
    pub origin_y: usize,
    pub origin_x: usize,
    pub scale: usize,
    pub kept: bool,
    pub rejection: Option<PatchRejection>,
}

/// Crop clean murals at one scale, filter invalid patches, and derive each
/// patch's contour condition and reward proxy.
pub fn prepare_training_patches(
    murals: &[SynthMural],
    scale: usize,
    overlap: f64,
    lambda: f64,
    seed: u64,
) -> Result<(Vec<TrainSample>, Vec<PatchRecord>)> {
    let mut samples = Vec::new();
    let mut records = Vec::new();
    for (source, mural) in murals.iter().enumerate() {
        let plan = plan_crops(mural.clean.height(), mural.clean.width(), scale, overlap)?;
        for (y, x) in plan.origins() {
            let patch = crop(&mural.clean, y, x, scale)?;
            let mut record = PatchRecord {
                source,
                origin_y: y,
                origin_x: x,
                scale,
                kept: false,
                rejection: None,
            };
            if !filter_invalid(&patch, DEFAULT_BLACK_THRESHOLD, DEFAULT_BLACK_FRACTION_MAX) {
                record.rejection = Some(PatchRejection::InvalidRegion);
                records.push(record);
                continue;
            }
            match contour_and_reward(&patch, seed) {
                Ok((contour, reward)) => {
                    samples.push(TrainSample {
                        x0: patch,
                        cond: ConditionSet::new(contour, None, lambda)?,
                        reward,
                    });
                    record.kept = true;
                    records.push(record);
                }
                Err(MuralError::DegenerateInput(_)) => {
                    record.rejection = Some(PatchRejection::DegenerateContour);
                    records.push(record);
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok((samples, records))
}

/// Contour condition of a clean patch plus the matching soft reward
/// (threshold at the midpoint of the two cluster centroid luminances).
pub fn contour_and_reward(patch: &Image, seed: u64) -> Result<(ContourMask, SoftContourReward)> {
    let dim = patch.channels();
    let points: Vec<f64> = patch.data().to_vec();
    let result = crate::contour::kmeans(
        &points,
        dim,
        2,
        seed,
        crate::contour::KMEANS_DEFAULT_MAX_ITER,
        crate::contour::KMEANS_DEFAULT_TOL,
    )?;
    let lum = |c: &[f64]| -> f64 {
        if c.len() == 3 {
            crate::image::LUMA_R * c[0] + crate::image::LUMA_G * c[1] + crate::image::LUMA_B * c[2]
        } else {
            c[0]
        }
    };
    let (l0, l1) = (lum(&result.centroids[0]), lum(&result.centroids[1]));
    let contour = extract_contour(patch, seed)?;
    Ok((
        contour,
        SoftContourReward::from_centroid_luminances(l0.min(l1), l0.max(l1)),
    ))
}

/// Contour condition extracted from the *damaged* observation, restricted
/// to the damaged region (the generation-time counterpart of
/// [`contour_and_reward`]).
pub fn damaged_contour(damaged: &Image, damage: &ContourMask, seed: u64) -> Result<ContourMask> {
    crate::contour::extract_contour_region(damaged, damage, seed, ContourOptions::default())
}

/// Restoration-time condition over the whole frame: stroke contours of the
/// intact region united with the faint residue contours inside the damage.
/// Each region is clustered separately (one 2-means over the mixed
/// plaster/paint population would split paint from plaster instead of
/// strokes from ground), which keeps the condition distributed like the
/// clean-patch contours the predictors trained on.
pub fn restoration_contour(
    damaged: &Image,
    damage: &ContourMask,
    seed: u64,
) -> Result<ContourMask> {
    let opts = ContourOptions {
        allow_degenerate: true,
        ..Default::default()
    };
    let residue = crate::contour::extract_contour_region(damaged, damage, seed, opts)?;
    let known = crate::contour::extract_contour_region(damaged, &damage.invert(), seed, opts)?;
    let union: Vec<u8> = residue
        .data()
        .iter()
        .zip(known.data())
        .map(|(&a, &b)| a | b)
        .collect();
    ContourMask::new(damaged.height(), damaged.width(), union)
}
