//! Frequency-domain post-optimizer: a learned K-band radial gain filter
//! applied to the image spectrum. Gains multiply complex coefficients by a
//! real scalar, so phase (and with it structure) is preserved; an all-ones
//! filter is the identity.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{MuralError, Result};
use crate::image::Image;

/// Highest normalized radial frequency on the centered grid.
pub const R_MAX: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Piecewise-linear radial gain curve with `K` equal-width bands over
/// `[0, R_MAX]`; the gain anchors sit at band centers and the curve is
/// clamped flat outside the first/last center.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialFilter {
    gains: Vec<f64>,
}

impl RadialFilter {
    pub fn new(gains: Vec<f64>) -> Result<RadialFilter> {
        if gains.is_empty() {
            return Err(MuralError::InvalidParameter("need at least one band".into()));
        }
        if gains.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(MuralError::InvalidParameter(
                "gains must be finite and nonnegative".into(),
            ));
        }
        Ok(RadialFilter { gains })
    }

    /// The identity filter: all gains 1.
    pub fn identity(bands: usize) -> RadialFilter {
        RadialFilter {
            gains: vec![1.0; bands],
        }
    }

    pub fn bands(&self) -> usize {
        self.gains.len()
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    fn band_center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * R_MAX / self.bands() as f64
    }

    /// Interpolated gain at normalized radius `r`.
    pub fn gain_at(&self, r: f64) -> f64 {
        self.weights_at(r)
            .iter()
            .enumerate()
            .map(|(k, w)| w * self.gains[k])
            .sum()
    }

    /// Hat-function weights of each band at radius `r`; the interpolated
    /// gain is linear in the gain vector with these coefficients.
    pub fn weights_at(&self, r: f64) -> Vec<f64> {
        let k = self.bands();
        let mut w = vec![0.0; k];
        if k == 1 || r <= self.band_center(0) {
            w[0] = 1.0;
            return w;
        }
        if r >= self.band_center(k - 1) {
            w[k - 1] = 1.0;
            return w;
        }
        // r sits between two adjacent centers; the clamp guards the case
        // where rounding pushes pos up to exactly k - 1
        let width = R_MAX / k as f64;
        let pos = (r - self.band_center(0)) / width;
        let lo = (pos.floor() as usize).min(k - 2);
        let frac = (pos - lo as f64).clamp(0.0, 1.0);
        w[lo] = 1.0 - frac;
        w[lo + 1] = frac;
        w
    }

    /// One gain per line: `# radial filter` header then K values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::from("# radial filter gains\n");
        for g in &self.gains {
            text.push_str(&format!("{g:.17}\n"));
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RadialFilter> {
        let text = std::fs::read_to_string(path)?;
        let gains: Vec<f64> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.parse::<f64>().map_err(|_| MuralError::MalformedFile {
                    path: path.display().to_string(),
                    reason: format!("bad gain `{l}`"),
                })
            })
            .collect::<Result<_>>()?;
        RadialFilter::new(gains)
    }
}

// ---------------------------------------------------------------------------
// 2D FFT
// ---------------------------------------------------------------------------

/// Unnormalized forward 2D FFT of a real plane (row-major h x w).
pub fn fft2(plane: &[f64], h: usize, w: usize) -> Result<Vec<Complex<f64>>> {
    if h == 0 || w == 0 || plane.len() != h * w {
        return Err(MuralError::InvalidDimension(format!(
            "fft2 of {h}x{w} with {} values",
            plane.len()
        )));
    }
    if plane.iter().any(|v| !v.is_finite()) {
        return Err(MuralError::NonFinite {
            context: "fft2 input".into(),
        });
    }
    let mut data: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    fft2_complex(&mut data, h, w, &mut planner, false);
    Ok(data)
}

/// Inverse 2D FFT returning the real part, normalized by `1/(h*w)`.
pub fn ifft2(spectrum: &[Complex<f64>], h: usize, w: usize) -> Result<Vec<f64>> {
    if h == 0 || w == 0 || spectrum.len() != h * w {
        return Err(MuralError::InvalidDimension(format!(
            "ifft2 of {h}x{w} with {} values",
            spectrum.len()
        )));
    }
    let mut data = spectrum.to_vec();
    let mut planner = FftPlanner::new();
    fft2_complex(&mut data, h, w, &mut planner, true);
    let scale = 1.0 / (h * w) as f64;
    Ok(data.iter().map(|c| c.re * scale).collect())
}

fn fft2_complex(
    data: &mut [Complex<f64>],
    h: usize,
    w: usize,
    planner: &mut FftPlanner<f64>,
    inverse: bool,
) {
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
}

/// Normalized radial frequency of bin `(u, v)` on an h x w grid (DC at 0).
pub fn bin_radius(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let fy = signed_freq(u, h);
    let fx = signed_freq(v, w);
    (fy * fy + fx * fx).sqrt()
}

fn signed_freq(i: usize, n: usize) -> f64 {
    let half = n / 2;
    if i <= half && i < n - half {
        i as f64 / n as f64
    } else if i <= half {
        // even n, i == n/2: the Nyquist bin maps to -1/2
        -0.5
    } else {
        i as f64 / n as f64 - 1.0
    }
}

// ---------------------------------------------------------------------------
// filtering
// ---------------------------------------------------------------------------

/// Filter one plane without clamping.
pub fn filter_plane(plane: &[f64], h: usize, w: usize, filter: &RadialFilter) -> Result<Vec<f64>> {
    let mut spec = fft2(plane, h, w)?;
    for u in 0..h {
        for v in 0..w {
            let g = filter.gain_at(bin_radius(u, v, h, w));
            spec[u * w + v] *= g;
        }
    }
    ifft2(&spec, h, w)
}

/// Apply the radial filter to every channel and clamp to `[0, 1]` at the
/// output boundary.
pub fn apply_filter(img: &Image, filter: &RadialFilter) -> Result<Image> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        let plane: Vec<f64> = (0..h * w).map(|p| img.data()[p * c + ch]).collect();
        let filtered = filter_plane(&plane, h, w, filter)?;
        for p in 0..h * w {
            out[p * c + ch] = filtered[p].clamp(0.0, 1.0);
        }
    }
    Image::new(h, w, c, out)
}

// ---------------------------------------------------------------------------
// fitting
// ---------------------------------------------------------------------------

/// Per-band basis images of one plane: `basis[k] = ifft2(w_k(r) .* F)`, so
/// the filtered plane is exactly `sum_k g_k * basis[k]`.
fn band_basis(plane: &[f64], h: usize, w: usize, bands: usize) -> Result<Vec<Vec<f64>>> {
    let spec = fft2(plane, h, w)?;
    let probe = RadialFilter::identity(bands);
    let mut parts: Vec<Vec<Complex<f64>>> = vec![vec![Complex::new(0.0, 0.0); h * w]; bands];
    for u in 0..h {
        for v in 0..w {
            let weights = probe.weights_at(bin_radius(u, v, h, w));
            for (k, &wk) in weights.iter().enumerate() {
                if wk != 0.0 {
                    parts[k][u * w + v] = spec[u * w + v] * wk;
                }
            }
        }
    }
    parts.iter().map(|p| ifft2(p, h, w)).collect()
}

/// Settings for [`fit_filter`].
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub bands: usize,
    pub steps: usize,
    /// Initial gradient-descent step; backtracking halves it as needed.
    pub learning_rate: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            bands: 8,
            steps: 500,
            learning_rate: 1.0,
        }
    }
}

/// Fit band gains by gradient descent on the mean squared error between
/// filtered generated patches and their references. Gains start at the
/// identity; backtracking line search keeps the recorded loss nonincreasing.
/// Returns the filter and the loss trace.
pub fn fit_filter(
    pairs: &[(Image, Image)],
    opts: FitOptions,
) -> Result<(RadialFilter, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(MuralError::InvalidParameter("no training pairs".into()));
    }
    for (g, r) in pairs {
        if !g.same_shape(r) {
            return Err(MuralError::shape(
                format!("{}x{}x{}", g.height(), g.width(), g.channels()),
                format!("{}x{}x{}", r.height(), r.width(), r.channels()),
            ));
        }
    }
    let bands = opts.bands;

    // Precompute per-plane band bases and reference planes.
    let mut bases: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut refs: Vec<Vec<f64>> = Vec::new();
    for (gen, reference) in pairs {
        let (h, w, c) = (gen.height(), gen.width(), gen.channels());
        for ch in 0..c {
            let plane: Vec<f64> = (0..h * w).map(|p| gen.data()[p * c + ch]).collect();
            bases.push(band_basis(&plane, h, w, bands)?);
            refs.push((0..h * w).map(|p| reference.data()[p * c + ch]).collect());
        }
    }
    let total_px: usize = refs.iter().map(|r| r.len()).sum();

    let loss_of = |gains: &[f64]| -> f64 {
        let mut acc = 0.0;
        for (basis, reference) in bases.iter().zip(&refs) {
            for (p, &rv) in reference.iter().enumerate() {
                let mut v = 0.0;
                for k in 0..bands {
                    v += gains[k] * basis[k][p];
                }
                let d = v - rv;
                acc += d * d;
            }
        }
        acc / total_px as f64
    };

    let mut gains = vec![1.0; bands];
    let mut loss = loss_of(&gains);
    let mut trace = vec![loss];
    let mut step = opts.learning_rate;

    for _ in 0..opts.steps {
        // gradient of the quadratic loss
        let mut grad = vec![0.0; bands];
        for (basis, reference) in bases.iter().zip(&refs) {
            for (p, &rv) in reference.iter().enumerate() {
                let mut v = 0.0;
                for k in 0..bands {
                    v += gains[k] * basis[k][p];
                }
                let d = 2.0 * (v - rv) / total_px as f64;
                for k in 0..bands {
                    grad[k] += d * basis[k][p];
                }
            }
        }
        // backtracking line search keeps the trace nonincreasing
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = gains
                .iter()
                .zip(&grad)
                .map(|(g, d)| (g - step * d).max(0.0))
                .collect();
            let cand_loss = loss_of(&cand);
            if cand_loss <= loss {
                gains = cand;
                loss = cand_loss;
                accepted = true;
                step *= 1.2;
                break;
            }
            step *= 0.5;
        }
        trace.push(loss);
        if !accepted {
            break;
        }
    }
    Ok((RadialFilter::new(gains)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_plane(h: usize, w: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, "fdp-test", 0);
        (0..h * w).map(|_| rand::Rng::gen_range(&mut r, 0.0..1.0)).collect()
    }

    /// O(n^2) direct DFT used as the independent oracle.
    fn direct_dft(plane: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
        let mut out = vec![Complex::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ang = -2.0 * std::f64::consts::PI
                            * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                        acc += plane[y * w + x] * Complex::new(ang.cos(), ang.sin());
                    }
                }
                out[u * w + v] = acc;
            }
        }
        out
    }

    #[test]
    fn fft_matches_direct_dft() {
        let plane = rand_plane(8, 8, 1);
        let fast = fft2(&plane, 8, 8).unwrap();
        let slow = direct_dft(&plane, 8, 8);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-10, "{a} vs {b}");
        }
        // non-power-of-two size as well
        let plane = rand_plane(6, 10, 2);
        let fast = fft2(&plane, 6, 10).unwrap();
        let slow = direct_dft(&plane, 6, 10);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn fft_round_trip_and_parseval() {
        let plane = rand_plane(12, 8, 3);
        let spec = fft2(&plane, 12, 8).unwrap();
        let back = ifft2(&spec, 12, 8).unwrap();
        for (a, b) in plane.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
        let space: f64 = plane.iter().map(|v| v * v).sum();
        let freq: f64 = spec.iter().map(|c| c.norm_sqr()).sum::<f64>() / (12.0 * 8.0);
        assert!((space - freq).abs() < 1e-8);
    }

    #[test]
    fn constant_image_is_dc_only() {
        let plane = vec![0.3; 64];
        let spec = fft2(&plane, 8, 8).unwrap();
        assert!((spec[0].re - 0.3 * 64.0).abs() < 1e-10);
        assert!(spec[0].im.abs() < 1e-10);
        for c in &spec[1..] {
            assert!(c.norm() < 1e-10);
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut plane = vec![0.0; 64];
        plane[0] = 1.0;
        let spec = fft2(&plane, 8, 8).unwrap();
        for c in &spec {
            assert!((c.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_filter_is_identity() {
        let data = rand_plane(8, 8, 4);
        let img = Image::new(8, 8, 1, data.clone()).unwrap();
        let out = apply_filter(&img, &RadialFilter::identity(8)).unwrap();
        for (a, b) in out.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    // On a 4x4 image every nonzero frequency has r >= 0.25, beyond the
    // first two band centers of an 8-band filter, so a DC-only gain vector
    // reduces the image to its mean exactly.
    #[test]
    fn dc_only_passband_yields_mean() {
        let data = rand_plane(4, 4, 5);
        let mean = data.iter().sum::<f64>() / 16.0;
        let img = Image::new(4, 4, 1, data).unwrap();
        let mut gains = vec![0.0; 8];
        gains[0] = 1.0;
        let out = apply_filter(&img, &RadialFilter::new(gains).unwrap()).unwrap();
        for &v in out.data() {
            assert!((v - mean).abs() < 1e-9, "{v} vs mean {mean}");
        }
    }

    #[test]
    fn filtering_is_linear_pre_clamp() {
        let (h, w) = (8, 8);
        let x = rand_plane(h, w, 6);
        let y = rand_plane(h, w, 7);
        let filter = RadialFilter::new(vec![1.0, 0.4, 2.0, 0.1, 1.5, 0.9, 0.2, 3.0]).unwrap();
        let fx = filter_plane(&x, h, w, &filter).unwrap();
        let fy = filter_plane(&y, h, w, &filter).unwrap();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.7 * a + 0.3 * b).collect();
        let fcombo = filter_plane(&combo, h, w, &filter).unwrap();
        for i in 0..h * w {
            let lin = 0.7 * fx[i] + 0.3 * fy[i];
            assert!((fcombo[i] - lin).abs() < 1e-8);
        }
    }

    // Amplifying high bands must strictly sharpen a blurred step edge.
    #[test]
    fn high_band_gain_sharpens_edge() {
        let (h, w) = (16, 16);
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                // soft step along x
                let d = x as f64 - 7.5;
                data[y * w + x] = 0.25 + 0.5 / (1.0 + (-d / 2.0).exp());
            }
        }
        let img = Image::new(h, w, 1, data.clone()).unwrap();
        let mut gains = vec![1.0; 8];
        for g in gains.iter_mut().skip(2) {
            *g = 2.0;
        }
        let out = apply_filter(&img, &RadialFilter::new(gains).unwrap()).unwrap();
        let grad_mag = |d: &[f64]| -> f64 {
            let mut acc: f64 = 0.0;
            for y in 0..h {
                for x in 7..9 {
                    acc = acc.max((d[y * w + x + 1] - d[y * w + x - 1]).abs());
                }
            }
            acc
        };
        assert!(grad_mag(out.data()) > grad_mag(&data));
    }

    #[test]
    fn identity_pairs_keep_unit_gains() {
        let img = Image::new(8, 8, 1, rand_plane(8, 8, 8)).unwrap();
        let pairs = vec![(img.clone(), img)];
        let (filter, trace) = fit_filter(&pairs, FitOptions::default()).unwrap();
        for &g in filter.gains() {
            assert!((g - 1.0).abs() < 1e-3, "gain {g}");
        }
        for pair in trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15);
        }
    }

    // Construct the reference by applying a known filter; fitting must
    // recover its gains within 5%.
    #[test]
    fn known_filter_recovered() {
        let mut known = vec![1.0; 8];
        known[3] = 2.0;
        known[6] = 0.5;
        let target = RadialFilter::new(known.clone()).unwrap();
        let mut pairs = Vec::new();
        for seed in 0..3 {
            // low contrast keeps the filtered reference inside [0, 1]
            let plane: Vec<f64> = rand_plane(16, 16, 100 + seed)
                .iter()
                .map(|v| 0.5 + 0.2 * (v - 0.5))
                .collect();
            let img = Image::new(16, 16, 1, plane.clone()).unwrap();
            let filtered = filter_plane(&plane, 16, 16, &target).unwrap();
            // keep the pair construction pre-clamp to stay in the model class
            let reference = Image::new(
                16,
                16,
                1,
                filtered.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            )
            .unwrap();
            let max = filtered.iter().cloned().fold(f64::MIN, f64::max);
            let min = filtered.iter().cloned().fold(f64::MAX, f64::min);
            assert!(min >= 0.0 && max <= 1.0, "test images must avoid clamping");
            pairs.push((img, reference));
        }
        let (fit, _) = fit_filter(
            &pairs,
            FitOptions {
                bands: 8,
                steps: 2000,
                learning_rate: 1.0,
            },
        )
        .unwrap();
        for (g, k) in fit.gains().iter().zip(&known) {
            assert!((g - k).abs() / k < 0.05, "fit {:?} vs {known:?}", fit.gains());
        }
    }

    // K = 1: the single gain is the closed-form least-squares scalar.
    #[test]
    fn single_band_matches_closed_form() {
        let plane = rand_plane(8, 8, 9);
        let img = Image::new(8, 8, 1, plane.clone()).unwrap();
        let reference: Vec<f64> = plane.iter().map(|v| (0.8 * v).clamp(0.0, 1.0)).collect();
        let ref_img = Image::new(8, 8, 1, reference.clone()).unwrap();
        let (fit, _) = fit_filter(
            &[(img, ref_img)],
            FitOptions {
                bands: 1,
                steps: 3000,
                learning_rate: 1.0,
            },
        )
        .unwrap();
        // With one band the basis is the image itself.
        let num: f64 = plane.iter().zip(&reference).map(|(a, b)| a * b).sum();
        let den: f64 = plane.iter().map(|a| a * a).sum();
        let closed = num / den;
        assert!(
            (fit.gains()[0] - closed).abs() < 1e-4,
            "{} vs {closed}",
            fit.gains()[0]
        );
    }

    #[test]
    fn filter_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        let filter = RadialFilter::new(vec![1.0, 0.25, 2.5]).unwrap();
        filter.save(&path).unwrap();
        let back = RadialFilter::load(&path).unwrap();
        assert_eq!(back, filter);
    }

    #[test]
    fn rejects_bad_gains_and_sizes() {
        assert!(RadialFilter::new(vec![]).is_err());
        assert!(RadialFilter::new(vec![-1.0]).is_err());
        assert!(fft2(&[0.0; 4], 0, 4).is_err());
    }
}
