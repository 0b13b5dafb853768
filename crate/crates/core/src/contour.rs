//! Contour extraction from damaged regions.
//!
//! Murals rarely lose a region to blank plaster; faint stroke outlines
//! usually survive. A 2-cluster K-means over raw pixel colors separates
//! those strokes from the ground, and the darker cluster becomes the
//! conditioning mask for generation.

use crate::error::{MuralError, Result};
use crate::image::Image;

pub const KMEANS_DEFAULT_TOL: f64 = 1e-6;
pub const KMEANS_DEFAULT_MAX_ITER: usize = 100;

/// Outcome of Lloyd's algorithm.
#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// Cluster centers, sorted ascending by lexicographic color order.
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per input point.
    pub assignments: Vec<usize>,
    /// Final clustering objective (sum of squared distances to assigned centers).
    pub objective: f64,
    /// Lloyd iterations performed.
    pub iterations: usize,
    /// Objective recorded after every assignment step; nonincreasing.
    pub objective_trace: Vec<f64>,
}

/// Binary per-pixel mask; 1 marks a foreground contour stroke.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ContourMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(MuralError::shape(
                format!("{height}x{width}"),
                format!("{} mask values", data.len()),
            ));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(MuralError::InvalidParameter(
                "mask values must be 0 or 1".into(),
            ));
        }
        Ok(ContourMask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ContourMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn fraction_ones(&self) -> f64 {
        self.count_ones() as f64 / self.data.len() as f64
    }

    /// Render as a single-channel image of 0.0 / 1.0 values.
    pub fn to_image(&self) -> Image {
        Image::new(
            self.height,
            self.width,
            1,
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("mask values are 0/1")
    }

    /// Threshold a grayscale image at 0.5 into a mask.
    pub fn from_image(img: &Image) -> Result<Self> {
        let gray = img.to_grayscale();
        ContourMask::new(
            gray.height(),
            gray.width(),
            gray.data().iter().map(|&v| (v >= 0.5) as u8).collect(),
        )
    }

    pub fn invert(&self) -> ContourMask {
        ContourMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Nearest-neighbor resampling; binary values are preserved exactly.
    pub fn resample_nearest(&self, height: usize, width: usize) -> Result<ContourMask> {
        let img = crate::image::resample(
            &self.to_image(),
            height,
            width,
            crate::image::ResampleMode::Nearest,
        )?;
        ContourMask::new(
            height,
            width,
            img.data().iter().map(|&v| (v >= 0.5) as u8).collect(),
        )
    }

    /// Intersection-over-union against another mask of the same shape.
    pub fn iou(&self, other: &ContourMask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a == 1 && b == 1) as usize;
            union += (a == 1 || b == 1) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

fn count_distinct(points: &[f64], dim: usize) -> usize {
    let mut seen = std::collections::HashSet::new();
    for p in points.chunks_exact(dim) {
        let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        seen.insert(key);
    }
    seen.len()
}

/// Farthest-point seeding, made canonical in the data rather than in the
/// pixel ordering: the first seed is the point farthest from the data mean,
/// later seeds maximize distance to the chosen set, ties resolve toward the
/// lexicographically smaller color. This keeps results invariant under
/// pixel-order permutation. Seeds are sorted ascending before Lloyd so
/// assignment tie-breaking (lower index wins) is canonical too.
fn seed_centroids(points: &[f64], dim: usize, k: usize) -> Vec<Vec<f64>> {
    let n = points.len() / dim;
    let mut mean = vec![0.0; dim];
    for p in points.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let pick = |score: &dyn Fn(&[f64]) -> f64| -> Vec<f64> {
        let mut best: Option<(&[f64], f64)> = None;
        for p in points.chunks_exact(dim) {
            let s = score(p);
            match best {
                None => best = Some((p, s)),
                Some((bp, bs)) => {
                    if s > bs || (s == bs && lex_less(p, bp)) {
                        best = Some((p, s));
                    }
                }
            }
        }
        best.expect("nonempty points").0.to_vec()
    };

    centroids.push(pick(&|p| dist2(p, &mean)));
    while centroids.len() < k {
        let chosen = centroids.clone();
        centroids.push(pick(&|p| {
            chosen
                .iter()
                .map(|c| dist2(p, c))
                .fold(f64::INFINITY, f64::min)
        }));
    }
    centroids.sort_by(|a, b| {
        a.partial_cmp(b)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    centroids
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn objective_ordered(
    points: &[f64],
    dim: usize,
    centroids: &[Vec<f64>],
    assign: &[usize],
    order: &[usize],
) -> f64 {
    order
        .iter()
        .map(|&i| dist2(&points[i * dim..(i + 1) * dim], &centroids[assign[i]]))
        .sum()
}

/// Lloyd's algorithm over flat `points` of `dim`-sized color vectors.
///
/// Deterministic given `seed`; results are independent of point order. Stops
/// when assignments stabilize, centroid movement drops below `tol`, or
/// `max_iter` is reached. An emptied cluster is reseeded at the point
/// farthest from its assigned centroid.
pub fn kmeans(
    points: &[f64],
    dim: usize,
    k: usize,
    _seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansResult> {
    if points.is_empty() || dim == 0 {
        return Err(MuralError::DegenerateInput("empty pixel list".into()));
    }
    if points.len() % dim != 0 {
        return Err(MuralError::shape(
            format!("multiple of dim {dim}"),
            format!("{} values", points.len()),
        ));
    }
    if k < 1 || max_iter < 1 || tol < 0.0 {
        return Err(MuralError::InvalidParameter(
            "need k >= 1, max_iter >= 1, tol >= 0".into(),
        ));
    }
    let distinct = count_distinct(points, dim);
    if k > distinct {
        return Err(MuralError::DegenerateInput(format!(
            "k = {k} exceeds {distinct} distinct pixel value(s)"
        )));
    }

    let n = points.len() / dim;
    // Accumulation order is canonical in the data, not in the pixel order,
    // so results are exactly invariant under input permutation.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        points[a * dim..(a + 1) * dim]
            .partial_cmp(&points[b * dim..(b + 1) * dim])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut centroids = seed_centroids(points, dim, k);
    let mut assign: Vec<usize> = points.chunks_exact(dim).map(|p| nearest(&centroids, p)).collect();
    let mut trace = vec![objective_ordered(points, dim, &centroids, &assign, &order)];
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;

        // Update step: means of assigned points.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for &i in &order {
            let p = &points[i * dim..(i + 1) * dim];
            let a = assign[i];
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut new_centroids = centroids.clone();
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed at the point farthest from its assigned centroid.
                let mut far: Option<(&[f64], f64)> = None;
                for &i in &order {
                    let p = &points[i * dim..(i + 1) * dim];
                    let d = dist2(p, &centroids[assign[i]]);
                    if far.map_or(true, |(_, bd)| d > bd) {
                        far = Some((p, d));
                    }
                }
                new_centroids[c] = far.expect("nonempty points").0.to_vec();
            } else {
                for (nc, s) in new_centroids[c].iter_mut().zip(&sums[c]) {
                    *nc = s / counts[c] as f64;
                }
            }
        }

        let movement = centroids
            .iter()
            .zip(&new_centroids)
            .map(|(a, b)| dist2(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = new_centroids;

        let new_assign: Vec<usize> =
            points.chunks_exact(dim).map(|p| nearest(&centroids, p)).collect();
        trace.push(objective_ordered(points, dim, &centroids, &new_assign, &order));
        let stable = new_assign == assign;
        assign = new_assign;
        if stable || movement < tol {
            break;
        }
    }

    let objective = *trace.last().expect("trace has the initial entry");
    debug_assert_eq!(assign.len(), n);
    Ok(KMeansResult {
        centroids,
        assignments: assign,
        objective,
        iterations,
        objective_trace: trace,
    })
}

/// Options for [`extract_contour_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ContourOptions {
    /// Return an all-zero mask instead of an error on a constant image.
    pub allow_degenerate: bool,
    /// Label the *lighter* cluster as foreground instead of the darker one.
    pub invert: bool,
}

fn centroid_luminance(c: &[f64]) -> f64 {
    if c.len() == 3 {
        crate::image::LUMA_R * c[0] + crate::image::LUMA_G * c[1] + crate::image::LUMA_B * c[2]
    } else {
        c[0]
    }
}

/// Extract the contour mask of an image: every pixel is one sample for a
/// K=2 clustering and the cluster with the darker centroid luminance becomes
/// the foreground (ties toward the smaller cluster).
pub fn extract_contour(img: &Image, seed: u64) -> Result<ContourMask> {
    extract_contour_with(img, seed, ContourOptions::default())
}

pub fn extract_contour_with(img: &Image, seed: u64, opts: ContourOptions) -> Result<ContourMask> {
    let region: Vec<usize> = (0..img.height() * img.width()).collect();
    extract_contour_indices(img, &region, seed, opts)
}

/// Contour extraction restricted to the pixels where `region` is 1; the
/// returned mask is zero elsewhere. This is the form used on damaged areas,
/// where only the missing region's faint strokes should drive the condition.
pub fn extract_contour_region(
    img: &Image,
    region: &ContourMask,
    seed: u64,
    opts: ContourOptions,
) -> Result<ContourMask> {
    if region.height() != img.height() || region.width() != img.width() {
        return Err(MuralError::shape(
            format!("{}x{}", img.height(), img.width()),
            format!("{}x{} region", region.height(), region.width()),
        ));
    }
    let idx: Vec<usize> = region
        .data()
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| (v == 1).then_some(i))
        .collect();
    if idx.is_empty() {
        if opts.allow_degenerate {
            return Ok(ContourMask::zeros(img.height(), img.width()));
        }
        return Err(MuralError::DegenerateInput("empty region mask".into()));
    }
    extract_contour_indices(img, &idx, seed, opts)
}

fn extract_contour_indices(
    img: &Image,
    idx: &[usize],
    seed: u64,
    opts: ContourOptions,
) -> Result<ContourMask> {
    let dim = img.channels();
    let mut points = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        points.extend_from_slice(&img.data()[i * dim..(i + 1) * dim]);
    }

    let result = match kmeans(&points, dim, 2, seed, KMEANS_DEFAULT_MAX_ITER, KMEANS_DEFAULT_TOL) {
        Ok(r) => r,
        Err(MuralError::DegenerateInput(msg)) if opts.allow_degenerate => {
            let _ = msg;
            return Ok(ContourMask::zeros(img.height(), img.width()));
        }
        Err(e) => return Err(e),
    };

    let lum0 = centroid_luminance(&result.centroids[0]);
    let lum1 = centroid_luminance(&result.centroids[1]);
    let count0 = result.assignments.iter().filter(|&&a| a == 0).count();
    let count1 = result.assignments.len() - count0;
    let mut fg = if lum0 < lum1 {
        0
    } else if lum1 < lum0 {
        1
    } else if count0 <= count1 {
        0
    } else {
        1
    };
    if opts.invert {
        fg = 1 - fg;
    }

    let mut data = vec![0u8; img.height() * img.width()];
    for (&i, &a) in idx.iter().zip(&result.assignments) {
        data[i] = (a == fg) as u8;
    }
    ContourMask::new(img.height(), img.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_kmeans(vals: &[f64], k: usize) -> KMeansResult {
        kmeans(vals, 1, k, 0, KMEANS_DEFAULT_MAX_ITER, KMEANS_DEFAULT_TOL).unwrap()
    }

    #[test]
    fn perfectly_separable() {
        let r = scalar_kmeans(&[0.0, 0.0, 0.0, 10.0, 10.0, 10.0], 2);
        assert_eq!(r.centroids, vec![vec![0.0], vec![10.0]]);
        assert_eq!(r.objective, 0.0);
    }

    // Brute force over the three 2-partitions of {0, 2, 10} puts {0,2}|{10}
    // first with J = 2.
    #[test]
    fn three_point_partition() {
        let r = scalar_kmeans(&[0.0, 2.0, 10.0], 2);
        assert_eq!(r.centroids, vec![vec![1.0], vec![10.0]]);
        assert!((r.objective - 2.0).abs() < 1e-12);
        assert_eq!(r.assignments, vec![0, 0, 1]);
    }

    #[test]
    fn k1_is_global_mean() {
        let vals = [1.0, 2.0, 3.0, 6.0];
        let r = scalar_kmeans(&vals, 1);
        let mean = 3.0;
        assert!((r.centroids[0][0] - mean).abs() < 1e-12);
        let var_n: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
        assert!((r.objective - var_n).abs() < 1e-12);
    }

    #[test]
    fn objective_trace_nonincreasing() {
        let vals: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64 / 3.0).collect();
        let r = scalar_kmeans(&vals, 2);
        for pair in r.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "trace {:?}", r.objective_trace);
        }
    }

    #[test]
    fn permutation_invariance() {
        let vals = [0.3, 0.8, 0.1, 0.9, 0.15, 0.85, 0.2, 0.75];
        let r1 = scalar_kmeans(&vals, 2);
        let perm: Vec<f64> = vals.iter().rev().copied().collect();
        let r2 = scalar_kmeans(&perm, 2);
        assert_eq!(r1.centroids, r2.centroids);
        assert!((r1.objective - r2.objective).abs() < 1e-12);
        let rev: Vec<usize> = r2.assignments.iter().rev().copied().collect();
        assert_eq!(r1.assignments, rev);
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(kmeans(&[], 1, 2, 0, 100, 1e-6).is_err());
        assert!(kmeans(&[0.5, 0.5, 0.5], 1, 2, 0, 100, 1e-6).is_err()); // 1 distinct < k
    }

    #[test]
    fn two_tone_mask_is_dark_set() {
        // dark strokes (0.1) on light ground (0.9)
        let mut data = vec![0.9; 16];
        for &i in &[1, 6, 11] {
            data[i] = 0.1;
        }
        let img = Image::new(4, 4, 1, data.clone()).unwrap();
        let mask = extract_contour(&img, 0).unwrap();
        for (i, &v) in data.iter().enumerate() {
            assert_eq!(mask.data()[i] == 1, v < 0.5);
        }
    }

    // Documents the darker-centroid rule: on inverted art the foreground is
    // the dark *ground*.
    #[test]
    fn inverted_two_tone_marks_dark_ground() {
        let mut data = vec![0.1; 16]; // dark ground
        for &i in &[2, 7, 9] {
            data[i] = 0.95; // light strokes
        }
        let img = Image::new(4, 4, 1, data.clone()).unwrap();
        let mask = extract_contour(&img, 0).unwrap();
        assert_eq!(mask.count_ones(), 13);
        let inv = extract_contour_with(
            &img,
            0,
            ContourOptions {
                invert: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(inv.count_ones(), 3);
    }

    #[test]
    fn constant_image_degenerate() {
        let img = Image::constant(4, 4, 1, 0.5).unwrap();
        assert!(extract_contour(&img, 0).is_err());
        let mask = extract_contour_with(
            &img,
            0,
            ContourOptions {
                allow_degenerate: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(mask.count_ones(), 0);
    }

    #[test]
    fn same_seed_same_mask() {
        let data: Vec<f64> = (0..48).map(|i| ((i * 29) % 97) as f64 / 96.0).collect();
        let img = Image::new(4, 4, 3, data).unwrap();
        let a = extract_contour(&img, 9).unwrap();
        let b = extract_contour(&img, 9).unwrap();
        assert_eq!(a, b);
    }

    /// Exhaustive minimum of the 2-cluster objective over all bipartitions.
    fn brute_force_two_cluster(vals: &[f64]) -> f64 {
        let n = vals.len();
        let mut best = f64::INFINITY;
        for bits in 1..(1u32 << n) - 1 {
            let (mut sa, mut na, mut sb, mut nb) = (0.0, 0usize, 0.0, 0usize);
            for (i, &v) in vals.iter().enumerate() {
                if bits >> i & 1 == 1 {
                    sa += v;
                    na += 1;
                } else {
                    sb += v;
                    nb += 1;
                }
            }
            let (ma, mb) = (sa / na as f64, sb / nb as f64);
            let mut j = 0.0;
            for (i, &v) in vals.iter().enumerate() {
                let m = if bits >> i & 1 == 1 { ma } else { mb };
                j += (v - m) * (v - m);
            }
            best = best.min(j);
        }
        best
    }

    // 3 dark pixels among 13 light ones with small additive noise; the mask
    // must match the dark set and Lloyd must reach the brute-force optimum.
    #[test]
    fn noisy_dark_pixels_recovered() {
        let mut data = vec![0.0; 16];
        let dark = [3usize, 7, 12];
        for i in 0..16 {
            let noise = 0.012 * (((i * 13 + 5) % 7) as f64 - 3.0) / 3.0;
            data[i] = if dark.contains(&i) { 0.12 + noise } else { 0.85 + noise };
        }
        let img = Image::new(4, 4, 1, data.clone()).unwrap();
        let mask = extract_contour(&img, 0).unwrap();
        for i in 0..16 {
            assert_eq!(mask.data()[i] == 1, dark.contains(&i), "pixel {i}");
        }
        let r = scalar_kmeans(&data, 2);
        let brute = brute_force_two_cluster(&data);
        assert!(
            (r.objective - brute).abs() < 1e-12,
            "lloyd {} vs brute {}",
            r.objective,
            brute
        );
    }

    #[test]
    fn region_restricted_extraction() {
        // light everywhere; dark detail only inside the region
        let mut data = vec![0.8; 36];
        data[14] = 0.2;
        data[15] = 0.2;
        let img = Image::new(6, 6, 1, data).unwrap();
        let mut region = vec![0u8; 36];
        for i in 12..24 {
            region[i] = 1;
        }
        let region = ContourMask::new(6, 6, region).unwrap();
        let mask = extract_contour_region(&img, &region, 0, ContourOptions::default()).unwrap();
        assert_eq!(mask.count_ones(), 2);
        assert_eq!(mask.data()[14], 1);
        assert_eq!(mask.data()[15], 1);
        // nothing outside the region
        for i in 0..12 {
            assert_eq!(mask.data()[i], 0);
        }
    }
}
