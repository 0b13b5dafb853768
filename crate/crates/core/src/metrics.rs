//! Restoration-quality metrics: windowed structural similarity, color and
//! texture histogram consistency (chi-square over color / LBP histograms),
//! and edge-gradient consistency. Each metric optionally restricts itself
//! to a repaired-region mask so restored content can be compared against
//! its surroundings.

use serde::Serialize;

use crate::contour::ContourMask;
use crate::error::{MuralError, Result};
use crate::image::Image;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_SSIM_WINDOW: usize = 11;
pub const DEFAULT_SSIM_SIGMA: f64 = 1.5;
pub const DEFAULT_COLOR_BINS: usize = 32;

/// Binned counts with their range metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl Histogram {
    pub fn from_values(values: impl Iterator<Item = f64>, bins: usize, lo: f64, hi: f64) -> Histogram {
        let mut counts = vec![0.0; bins];
        let span = hi - lo;
        for v in values {
            let idx = (((v - lo) / span) * bins as f64).floor() as isize;
            let idx = idx.clamp(0, bins as isize - 1) as usize;
            counts[idx] += 1.0;
        }
        Histogram { counts, lo, hi }
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Chi-square distance: bins with a zero joint count contribute nothing.
pub fn chi_square(h1: &Histogram, h2: &Histogram) -> Result<f64> {
    if h1.counts.len() != h2.counts.len() || h1.lo != h2.lo || h1.hi != h2.hi {
        return Err(MuralError::shape(
            format!("{} bins over [{}, {}]", h1.counts.len(), h1.lo, h1.hi),
            format!("{} bins over [{}, {}]", h2.counts.len(), h2.lo, h2.hi),
        ));
    }
    Ok(h1
        .counts
        .iter()
        .zip(&h2.counts)
        .map(|(&a, &b)| {
            let s = a + b;
            if s > 0.0 {
                (a - b) * (a - b) / s
            } else {
                0.0
            }
        })
        .sum())
}

pub fn similarity_from_chi2(chi2: f64) -> f64 {
    1.0 / (1.0 + chi2)
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..window * window)
        .map(|i| {
            let y = (i / window) as f64 - c;
            let x = (i % window) as f64 - c;
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

/// Mean Gaussian-weighted local SSIM over all valid windows.
pub fn ssim(x: &Image, y: &Image, window: usize, sigma: f64) -> Result<f64> {
    ssim_masked(x, y, window, sigma, None)
}

/// SSIM restricted to windows whose center pixel is in the mask.
pub fn ssim_masked(
    x: &Image,
    y: &Image,
    window: usize,
    sigma: f64,
    mask: Option<&ContourMask>,
) -> Result<f64> {
    if x.height() != y.height() || x.width() != y.width() || x.channels() != y.channels() {
        return Err(MuralError::shape(
            format!("{}x{}x{}", x.height(), x.width(), x.channels()),
            format!("{}x{}x{}", y.height(), y.width(), y.channels()),
        ));
    }
    let gx = x.to_grayscale();
    let gy = y.to_grayscale();
    let (h, w) = (gx.height(), gx.width());
    if h < window || w < window {
        return Err(MuralError::InvalidDimension(format!(
            "image {h}x{w} smaller than SSIM window {window}"
        )));
    }
    if let Some(m) = mask {
        if m.height() != h || m.width() != w {
            return Err(MuralError::shape(
                format!("{h}x{w} mask"),
                format!("{}x{}", m.height(), m.width()),
            ));
        }
    }
    let kernel = gaussian_kernel(window, sigma);
    let half = window / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - window {
        for j in 0..=w - window {
            if let Some(m) = mask {
                if m.at(i + half, j + half) != 1 {
                    continue;
                }
            }
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wy in 0..window {
                for wx in 0..window {
                    let k = kernel[wy * window + wx];
                    let a = gx.at(i + wy, j + wx, 0);
                    let b = gy.at(i + wy, j + wx, 0);
                    mx += k * a;
                    my += k * b;
                    mxx += k * (a * a);
                    myy += k * (b * b);
                    // grouped so ssim(x, y) == ssim(y, x) bit-for-bit
                    mxy += k * (a * b);
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cxy = mxy - mx * my;
            let val = ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            total += val;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MuralError::DegenerateInput(
            "mask selects no SSIM windows".into(),
        ));
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// CCON
// ---------------------------------------------------------------------------

fn masked_channel_values<'a>(
    img: &'a Image,
    mask: Option<&'a ContourMask>,
    channel: usize,
) -> impl Iterator<Item = f64> + 'a {
    let c = img.channels();
    img.data()
        .chunks_exact(c)
        .enumerate()
        .filter(move |(p, _)| mask.map_or(true, |m| m.data()[*p] == 1))
        .map(move |(_, px)| px[channel])
}

/// Per-channel color histograms compared by chi-square, averaged over
/// channels; similarity is `1 / (1 + chi2)`.
pub fn ccon(repaired: &Image, reference: &Image, bins: usize) -> Result<(f64, f64)> {
    ccon_masked(repaired, None, reference, None, bins)
}

/// Masked form: each side restricts its histogram to its own region mask.
pub fn ccon_masked(
    repaired: &Image,
    repaired_mask: Option<&ContourMask>,
    reference: &Image,
    reference_mask: Option<&ContourMask>,
    bins: usize,
) -> Result<(f64, f64)> {
    if repaired.channels() != reference.channels() {
        return Err(MuralError::shape(
            format!("{} channels", repaired.channels()),
            format!("{} channels", reference.channels()),
        ));
    }
    if bins == 0 {
        return Err(MuralError::InvalidParameter("need bins >= 1".into()));
    }
    for (img, m) in [(repaired, repaired_mask), (reference, reference_mask)] {
        if let Some(m) = m {
            if m.height() != img.height() || m.width() != img.width() {
                return Err(MuralError::shape(
                    format!("{}x{}", img.height(), img.width()),
                    format!("{}x{} mask", m.height(), m.width()),
                ));
            }
            if m.count_ones() == 0 {
                return Err(MuralError::DegenerateInput("empty region mask".into()));
            }
        }
    }
    let mut acc = 0.0;
    for ch in 0..repaired.channels() {
        let h1 = Histogram::from_values(
            masked_channel_values(repaired, repaired_mask, ch),
            bins,
            0.0,
            1.0,
        );
        let h2 = Histogram::from_values(
            masked_channel_values(reference, reference_mask, ch),
            bins,
            0.0,
            1.0,
        );
        acc += chi_square(&h1, &h2)?;
    }
    let chi2 = acc / repaired.channels() as f64;
    Ok((chi2, similarity_from_chi2(chi2)))
}

// ---------------------------------------------------------------------------
// LBP / TCON
// ---------------------------------------------------------------------------

/// 8-neighbor radius-1 LBP code of every interior pixel. Bit b is set when
/// the neighbor at that position is >= the center; bits run clockwise from
/// east: E, SE, S, SW, W, NW, N, NE.
pub fn lbp_codes(gray: &Image) -> Result<Vec<u8>> {
    let (h, w) = (gray.height(), gray.width());
    if h < 3 || w < 3 {
        return Err(MuralError::InvalidDimension(format!(
            "LBP needs at least 3x3, got {h}x{w}"
        )));
    }
    // (dy, dx) in clockwise order from east
    const OFFSETS: [(isize, isize); 8] = [
        (0, 1),
        (1, 1),
        (1, 0),
        (1, -1),
        (0, -1),
        (-1, -1),
        (-1, 0),
        (-1, 1),
    ];
    let mut codes = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let center = gray.at(y, x, 0);
            let mut code = 0u8;
            for (bit, (dy, dx)) in OFFSETS.iter().enumerate() {
                let ny = (y as isize + dy) as usize;
                let nx = (x as isize + dx) as usize;
                if gray.at(ny, nx, 0) >= center {
                    code |= 1 << bit;
                }
            }
            codes.push(code);
        }
    }
    Ok(codes)
}

/// 256-bin histogram of LBP codes, optionally restricted to interior
/// pixels whose center lies in the mask.
pub fn lbp_histogram(region: &Image) -> Result<Histogram> {
    lbp_histogram_masked(region, None)
}

pub fn lbp_histogram_masked(region: &Image, mask: Option<&ContourMask>) -> Result<Histogram> {
    let gray = region.to_grayscale();
    let codes = lbp_codes(&gray)?;
    let (h, w) = (gray.height(), gray.width());
    if let Some(m) = mask {
        if m.height() != h || m.width() != w {
            return Err(MuralError::shape(
                format!("{h}x{w}"),
                format!("{}x{} mask", m.height(), m.width()),
            ));
        }
    }
    let mut counts = vec![0.0; 256];
    let mut kept = 0usize;
    for (i, &code) in codes.iter().enumerate() {
        let y = 1 + i / (w - 2);
        let x = 1 + i % (w - 2);
        if mask.map_or(true, |m| m.at(y, x) == 1) {
            counts[code as usize] += 1.0;
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(MuralError::DegenerateInput(
            "mask selects no LBP interior pixels".into(),
        ));
    }
    Ok(Histogram {
        counts,
        lo: 0.0,
        hi: 256.0,
    })
}

/// Texture consistency: chi-square over LBP histograms.
pub fn tcon(repaired: &Image, reference: &Image) -> Result<(f64, f64)> {
    tcon_masked(repaired, None, reference, None)
}

pub fn tcon_masked(
    repaired: &Image,
    repaired_mask: Option<&ContourMask>,
    reference: &Image,
    reference_mask: Option<&ContourMask>,
) -> Result<(f64, f64)> {
    let h1 = lbp_histogram_masked(repaired, repaired_mask)?;
    let h2 = lbp_histogram_masked(reference, reference_mask)?;
    let chi2 = chi_square(&h1, &h2)?;
    Ok((chi2, similarity_from_chi2(chi2)))
}

// ---------------------------------------------------------------------------
// ECON
// ---------------------------------------------------------------------------

/// Horizontal and vertical Sobel responses with replicated borders.
fn sobel(gray: &Image) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (gray.height(), gray.width());
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        gray.at(yy, xx, 0)
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = (y as usize) * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

/// Sobel gradient magnitude (the edge map E).
pub fn edge_map(img: &Image) -> Vec<f64> {
    let gray = img.to_grayscale();
    let (gx, gy) = sobel(&gray);
    gx.iter()
        .zip(&gy)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .collect()
}

/// Whether ECON compares gradients *of* the edge maps (the literal formula)
/// or the raw edge maps themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EconMode {
    /// Gradient of the edge map (gradient-of-gradient).
    #[default]
    GradientOfEdges,
    /// Compare the raw edge maps directly.
    RawEdges,
}

/// Edge consistency (lower is better): the summed discrepancy of edge
/// gradients, normalized by the original's edge gradient mass.
pub fn econ(repaired: &Image, original: &Image) -> Result<f64> {
    econ_masked(repaired, original, None, EconMode::GradientOfEdges)
}

pub fn econ_masked(
    repaired: &Image,
    original: &Image,
    mask: Option<&ContourMask>,
    mode: EconMode,
) -> Result<f64> {
    if repaired.height() != original.height()
        || repaired.width() != original.width()
        || repaired.channels() != original.channels()
    {
        return Err(MuralError::shape(
            format!(
                "{}x{}x{}",
                original.height(),
                original.width(),
                original.channels()
            ),
            format!(
                "{}x{}x{}",
                repaired.height(),
                repaired.width(),
                repaired.channels()
            ),
        ));
    }
    let (h, w) = (repaired.height(), repaired.width());
    if let Some(m) = mask {
        if m.height() != h || m.width() != w {
            return Err(MuralError::shape(
                format!("{h}x{w}"),
                format!("{}x{} mask", m.height(), m.width()),
            ));
        }
    }
    let e_rep = edge_map(repaired);
    let e_org = edge_map(original);
    let included = |p: usize| mask.map_or(true, |m| m.data()[p] == 1);

    let (num, den) = match mode {
        EconMode::RawEdges => {
            let mut num = 0.0;
            let mut den = 0.0;
            for p in 0..h * w {
                if included(p) {
                    num += (e_rep[p] - e_org[p]).abs();
                    den += e_org[p].abs();
                }
            }
            (num, den)
        }
        EconMode::GradientOfEdges => {
            let to_img = |e: &[f64]| {
                // Edge magnitudes are nonnegative; normalize into [0, 1]
                // jointly so both maps share one scale.
                e.to_vec()
            };
            let (rx, ry) = sobel_raw(&to_img(&e_rep), h, w);
            let (ox, oy) = sobel_raw(&to_img(&e_org), h, w);
            let mut num = 0.0;
            let mut den = 0.0;
            for p in 0..h * w {
                if included(p) {
                    let dx = rx[p] - ox[p];
                    let dy = ry[p] - oy[p];
                    num += (dx * dx + dy * dy).sqrt();
                    den += (ox[p] * ox[p] + oy[p] * oy[p]).sqrt();
                }
            }
            (num, den)
        }
    };
    if den == 0.0 {
        return Err(MuralError::UndefinedMetric(
            "original image has no edge gradient in the evaluated region".into(),
        ));
    }
    Ok(num / den)
}

fn sobel_raw(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        plane[yy * w + xx]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = (y as usize) * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

// ---------------------------------------------------------------------------
// combined report
// ---------------------------------------------------------------------------

/// Trivial restoration baseline: damaged pixels take the per-channel mean
/// of the surrounding (unmasked) pixels. The floor a learned restorer must
/// beat.
pub fn mean_fill(known: &Image, damage: &ContourMask) -> Result<Image> {
    if damage.height() != known.height() || damage.width() != known.width() {
        return Err(MuralError::shape(
            format!("{}x{}", known.height(), known.width()),
            format!("{}x{} mask", damage.height(), damage.width()),
        ));
    }
    let c = known.channels();
    let mut sums = vec![0.0; c];
    let mut count = 0usize;
    for (p, px) in known.data().chunks_exact(c).enumerate() {
        if damage.data()[p] == 0 {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(MuralError::DegenerateInput(
            "mean fill needs at least one known pixel".into(),
        ));
    }
    let means: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    let mut data = known.data().to_vec();
    for p in 0..known.height() * known.width() {
        if damage.data()[p] == 1 {
            for ch in 0..c {
                data[p * c + ch] = means[ch];
            }
        }
    }
    Image::new(known.height(), known.width(), c, data)
}

/// Metric parameters recorded alongside the results.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricParams {
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub color_bins: usize,
    pub econ_raw_edges: bool,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            ssim_window: DEFAULT_SSIM_WINDOW,
            ssim_sigma: DEFAULT_SSIM_SIGMA,
            color_bins: DEFAULT_COLOR_BINS,
            econ_raw_edges: false,
        }
    }
}

/// All four metrics plus provenance metadata.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub ccon_chi2: f64,
    pub ccon_similarity: f64,
    pub tcon_chi2: f64,
    pub tcon_similarity: f64,
    pub econ: f64,
    pub masked: bool,
    pub params: MetricParams,
}

/// Evaluate all four metrics for a repaired/reference pair.
///
/// Without a mask every metric compares whole images. With a mask, SSIM and
/// ECON restrict themselves to the repaired region, while CCON/TCON compare
/// the repaired region's distribution against the *surrounding* reference
/// (the mask complement), matching how restorations are judged against
/// their undamaged context.
pub fn evaluate_pair(
    repaired: &Image,
    reference: &Image,
    mask: Option<&ContourMask>,
    params: MetricParams,
) -> Result<MetricReport> {
    let ssim_v = ssim_masked(repaired, reference, params.ssim_window, params.ssim_sigma, mask)?;
    let surrounding = mask.map(|m| m.invert());
    let (ccon_chi2, ccon_similarity) = ccon_masked(
        repaired,
        mask,
        reference,
        surrounding.as_ref(),
        params.color_bins,
    )?;
    let (tcon_chi2, tcon_similarity) =
        tcon_masked(repaired, mask, reference, surrounding.as_ref())?;
    let mode = if params.econ_raw_edges {
        EconMode::RawEdges
    } else {
        EconMode::GradientOfEdges
    };
    let econ_v = econ_masked(repaired, reference, mask, mode)?;
    Ok(MetricReport {
        ssim: ssim_v,
        ccon_chi2,
        ccon_similarity,
        tcon_chi2,
        tcon_similarity,
        econ: econ_v,
        masked: mask.is_some(),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, data: Vec<f64>) -> Image {
        Image::new(h, w, 1, data).unwrap()
    }

    fn pattern16() -> (Image, Image) {
        let mut x = vec![0.0; 256];
        let mut y = vec![0.0; 256];
        for i in 0..16 {
            for j in 0..16 {
                let a = ((0.35 * i as f64).sin() * (0.23 * j as f64).cos() + 1.0) / 2.0;
                let b = (a + 0.08 * (1.7 * i as f64 + 0.9 * j as f64).sin()).clamp(0.0, 1.0);
                x[i * 16 + j] = a;
                y[i * 16 + j] = b;
            }
        }
        (img(16, 16, x), img(16, 16, y))
    }

    #[test]
    fn ssim_identity_is_one() {
        let (x, _) = pattern16();
        let v = ssim(&x, &x, 11, 1.5).unwrap();
        assert_eq!(v, 1.0);
    }

    // Constant 0 vs constant 1: all variances vanish and Eq. 11 collapses
    // to C1 / (1 + C1).
    #[test]
    fn ssim_constant_images() {
        let a = Image::constant(12, 12, 1, 0.0).unwrap();
        let b = Image::constant(12, 12, 1, 1.0).unwrap();
        let v = ssim(&a, &b, 11, 1.5).unwrap();
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((v - expect).abs() < 1e-8, "{v} vs {expect}");
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        let (x, y) = pattern16();
        let inv = img(16, 16, x.data().iter().map(|v| 1.0 - v).collect());
        let a = ssim(&x, &inv, 11, 1.5).unwrap();
        let b = ssim(&inv, &x, 11, 1.5).unwrap();
        assert_eq!(a, b);
        assert!((-1.0..=1.0).contains(&a));
        let _ = y;
    }

    // Frozen from an independent implementation (also cross-checked against
    // scikit-image's structural_similarity with matching settings).
    #[test]
    fn ssim_frozen_golden_value() {
        let (x, y) = pattern16();
        let v = ssim(&x, &y, 11, 1.5).unwrap();
        assert!(
            (v - 0.8950189512247108).abs() < 1e-9,
            "ssim drifted: {v:.16}"
        );
    }

    #[test]
    fn ssim_too_small_rejected() {
        let a = Image::constant(8, 8, 1, 0.5).unwrap();
        assert!(ssim(&a, &a, 11, 1.5).is_err());
    }

    #[test]
    fn chi_square_values() {
        let h = |c: Vec<f64>| Histogram {
            counts: c,
            lo: 0.0,
            hi: 1.0,
        };
        assert_eq!(chi_square(&h(vec![3.0, 1.0]), &h(vec![3.0, 1.0])).unwrap(), 0.0);
        // hand evaluation: 16/4 + 16/4 = 8
        assert_eq!(chi_square(&h(vec![4.0, 0.0]), &h(vec![0.0, 4.0])).unwrap(), 8.0);
        // zero joint bins contribute nothing
        assert_eq!(chi_square(&h(vec![0.0, 4.0]), &h(vec![0.0, 4.0])).unwrap(), 0.0);
    }

    #[test]
    fn chi_square_homogeneity() {
        let h1 = Histogram {
            counts: vec![5.0, 2.0, 9.0],
            lo: 0.0,
            hi: 1.0,
        };
        let h2 = Histogram {
            counts: vec![1.0, 7.0, 4.0],
            lo: 0.0,
            hi: 1.0,
        };
        let base = chi_square(&h1, &h2).unwrap();
        let scale = |h: &Histogram, c: f64| Histogram {
            counts: h.counts.iter().map(|v| v * c).collect(),
            lo: h.lo,
            hi: h.hi,
        };
        let scaled = chi_square(&scale(&h1, 3.0), &scale(&h2, 3.0)).unwrap();
        assert!((scaled - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn ccon_identical_and_permuted() {
        let (x, _) = pattern16();
        let (chi2, sim) = ccon(&x, &x, 32).unwrap();
        assert_eq!(chi2, 0.0);
        assert_eq!(sim, 1.0);
        // permuting pixel positions leaves the histogram unchanged
        let mut permuted = x.data().to_vec();
        permuted.reverse();
        let y = img(16, 16, permuted);
        let (chi2, _) = ccon(&x, &y, 32).unwrap();
        assert_eq!(chi2, 0.0);
    }

    // Disjoint single-bin regions: chi-square comes out at n + m by hand.
    #[test]
    fn ccon_disjoint_single_bins() {
        let a = Image::constant(4, 4, 1, 0.1).unwrap();
        let b = Image::constant(4, 4, 1, 0.9).unwrap();
        let (chi2, sim) = ccon(&a, &b, 32).unwrap();
        assert_eq!(chi2, 32.0); // 16 + 16
        assert!((sim - 1.0 / 33.0).abs() < 1e-15);
    }

    #[test]
    fn lbp_constant_is_single_bin_255() {
        let a = Image::constant(5, 5, 1, 0.4).unwrap();
        let h = lbp_histogram(&a).unwrap();
        assert_eq!(h.counts[255], 9.0);
        assert_eq!(h.total(), 9.0);
    }

    #[test]
    fn lbp_bright_center_code_zero() {
        let mut data = vec![0.0; 9];
        data[4] = 1.0;
        let a = img(3, 3, data);
        let h = lbp_histogram(&a).unwrap();
        assert_eq!(h.counts[0], 1.0);
        assert_eq!(h.total(), 1.0);
    }

    // Hand-evaluated interior codes of a fixed 4x4 patch.
    #[test]
    fn lbp_hand_crafted_patch() {
        let patch = img(
            4,
            4,
            vec![
                0.1, 0.5, 0.3, 0.2, //
                0.4, 0.6, 0.2, 0.7, //
                0.8, 0.1, 0.9, 0.3, //
                0.2, 0.4, 0.5, 0.6,
            ],
        );
        let codes = lbp_codes(&patch.to_grayscale()).unwrap();
        assert_eq!(codes, vec![10, 247, 255, 0]);
    }

    #[test]
    fn lbp_too_small_rejected() {
        let a = Image::constant(2, 3, 1, 0.5).unwrap();
        assert!(lbp_histogram(&a).is_err());
    }

    #[test]
    fn tcon_identity_and_offset_invariance() {
        let (x, _) = pattern16();
        let (chi2, sim) = tcon(&x, &x).unwrap();
        assert_eq!(chi2, 0.0);
        assert_eq!(sim, 1.0);

        // uniform +0.1 with no clipping: LBP comparisons are unchanged
        let scaled = img(16, 16, x.data().iter().map(|v| v * 0.8).collect());
        let offset = img(16, 16, scaled.data().iter().map(|v| v + 0.1).collect());
        let (chi2, sim) = tcon(&scaled, &offset).unwrap();
        assert_eq!(chi2, 0.0);
        assert_eq!(sim, 1.0);
    }

    // A constant region and a horizontal ramp produce disjoint single-bin
    // LBP histograms, so the chi-square is the total count of both.
    #[test]
    fn tcon_disjoint_textures() {
        let constant = Image::constant(6, 6, 1, 0.5).unwrap();
        let ramp_data: Vec<f64> = (0..36).map(|i| (i % 6) as f64 / 10.0).collect();
        let ramp = img(6, 6, ramp_data);
        let hc = lbp_histogram(&constant).unwrap();
        let hr = lbp_histogram(&ramp).unwrap();
        assert_eq!(hc.counts[255], 16.0);
        assert_eq!(hr.counts[199], 16.0);
        let (chi2, _) = tcon(&constant, &ramp).unwrap();
        assert_eq!(chi2, 32.0); // 2 x total
    }

    #[test]
    fn econ_identity_is_zero() {
        let (x, _) = pattern16();
        assert_eq!(econ(&x, &x).unwrap(), 0.0);
    }

    // Flat repaired vs textured original: the numerator equals the
    // denominator exactly.
    #[test]
    fn econ_flat_repaired_is_one() {
        let (x, _) = pattern16();
        let flat = Image::constant(16, 16, 1, 0.5).unwrap();
        let v = econ(&flat, &x).unwrap();
        assert!((v - 1.0).abs() < 1e-10, "{v}");
    }

    // Doubling contrast without clipping: |2 grad - grad| = |grad|.
    #[test]
    fn econ_contrast_doubling_is_one() {
        let (x, _) = pattern16();
        let halved = img(16, 16, x.data().iter().map(|v| v * 0.5).collect());
        let doubled = img(16, 16, halved.data().iter().map(|v| v * 2.0).collect());
        let v = econ(&doubled, &halved).unwrap();
        assert!((v - 1.0).abs() < 1e-10, "{v}");
        // and the raw-edge mode agrees on this case
        let v2 = econ_masked(&doubled, &halved, None, EconMode::RawEdges).unwrap();
        assert!((v2 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn econ_flat_original_undefined() {
        let flat = Image::constant(8, 8, 1, 0.5).unwrap();
        let (x, _) = pattern16();
        let small = crate::image::resample(&x, 8, 8, crate::image::ResampleMode::Bilinear).unwrap();
        assert!(matches!(
            econ(&small, &flat),
            Err(MuralError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn mean_fill_fills_with_surround_mean() {
        let data: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let known = img(4, 4, data);
        let mut mask = vec![0u8; 16];
        mask[5] = 1;
        mask[6] = 1;
        let damage = ContourMask::new(4, 4, mask).unwrap();
        let filled = mean_fill(&known, &damage).unwrap();
        let expect: f64 = (0..16)
            .filter(|i| *i != 5 && *i != 6)
            .map(|i| i as f64 / 15.0)
            .sum::<f64>()
            / 14.0;
        assert!((filled.data()[5] - expect).abs() < 1e-12);
        assert!((filled.data()[6] - expect).abs() < 1e-12);
        assert_eq!(filled.data()[0], known.data()[0]);
    }

    #[test]
    fn evaluate_pair_masked_report() {
        let (x, y) = pattern16();
        let mask_data: Vec<u8> = (0..256)
            .map(|i| ((i / 16 >= 5 && i / 16 < 11) && (i % 16 >= 5 && i % 16 < 11)) as u8)
            .collect();
        let mask = ContourMask::new(16, 16, mask_data).unwrap();
        let report = evaluate_pair(&y, &x, Some(&mask), MetricParams::default()).unwrap();
        assert!(report.masked);
        assert!(report.ssim <= 1.0 && report.ssim >= -1.0);
        assert!(report.ccon_similarity > 0.0 && report.ccon_similarity <= 1.0);
        assert!(report.tcon_similarity > 0.0 && report.tcon_similarity <= 1.0);
        assert!(report.econ >= 0.0);

        let full = evaluate_pair(&y, &x, None, MetricParams::default()).unwrap();
        assert!(!full.masked);
    }
}
