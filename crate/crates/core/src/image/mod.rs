//! Pixel containers shared by the whole pipeline.
//!
//! [`Image`] holds display-ready intensities in `[0, 1]`. Diffusion states
//! live in [`LatentImage`], which is unclamped but must stay finite — a NaN
//! anywhere is a hard error, never silently propagated. The sampler works on
//! `[-1, 1]` values internally; the shift is applied and removed at module
//! boundaries via [`Image::to_signed_latent`] and
//! [`LatentImage::to_image_clamped`].

mod io;
mod resample;

pub use io::{read_image, write_image, write_image_16bit};
pub use resample::{resample, resample_latent, ResampleMode};

use crate::error::{MuralError, Result};

pub const LUMA_R: f64 = 0.299;
pub const LUMA_G: f64 = 0.587;
pub const LUMA_B: f64 = 0.114;

/// Immutable raster with intensities in `[0, 1]`, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Unclamped counterpart of [`Image`]; holds x_t, noise maps and predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

fn check_shape(height: usize, width: usize, channels: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(MuralError::InvalidDimension(format!(
            "image dimensions must be positive, got {height}x{width}"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(MuralError::InvalidDimension(format!(
            "channel count must be 1 or 3, got {channels}"
        )));
    }
    let expected = height * width * channels;
    if len != expected {
        return Err(MuralError::shape(
            format!("{height}x{width}x{channels} = {expected} values"),
            format!("{len} values"),
        ));
    }
    Ok(())
}

impl Image {
    /// Build an image, validating shape, finiteness and the `[0, 1]` range.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(height, width, channels, data.len())?;
        for &v in &data {
            if !v.is_finite() {
                return Err(MuralError::NonFinite {
                    context: "Image::new".into(),
                });
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(MuralError::InvalidParameter(format!(
                    "intensity {v} outside [0, 1]"
                )));
            }
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    /// Constant-valued image.
    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Luminance image (`0.299 R + 0.587 G + 0.114 B`); 1-channel input is
    /// returned unchanged.
    pub fn to_grayscale(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = Vec::with_capacity(self.height * self.width);
        for px in self.data.chunks_exact(3) {
            // Rearranged so that gray pixels (r = g = b) map to themselves
            // exactly; the weights sum to 1.
            let l = px[0] + LUMA_G * (px[1] - px[0]) + LUMA_B * (px[2] - px[0]);
            out.push(l.clamp(0.0, 1.0));
        }
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: out,
        }
    }

    /// Shift to the sampler's working range: `2 v - 1`.
    pub fn to_signed_latent(&self) -> LatentImage {
        LatentImage {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| 2.0 * v - 1.0).collect(),
        }
    }

    /// View as an unclamped latent without shifting the range.
    pub fn to_latent(&self) -> LatentImage {
        LatentImage {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.clone(),
        }
    }
}

impl LatentImage {
    /// Build a latent, validating shape and finiteness (NaN/Inf is an error).
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(height, width, channels, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MuralError::NonFinite {
                context: "LatentImage::new".into(),
            });
        }
        Ok(LatentImage {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        LatentImage {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        LatentImage::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &LatentImage) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    /// Elementwise map, revalidating finiteness.
    pub fn map(&self, f: impl Fn(f64) -> f64, context: &str) -> Result<LatentImage> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MuralError::NonFinite {
                context: context.into(),
            });
        }
        Ok(LatentImage {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        })
    }

    /// Back to display range: `(v + 1) / 2`, clamped to `[0, 1]`.
    pub fn to_image_clamped(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
                .collect(),
        }
    }

    /// Clamp to `[0, 1]` without range shifting.
    pub fn clamp_unit(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

/// One level of a [`ScalePyramid`].
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub scale_id: usize,
    pub image: Image,
}

/// Ordered coarsest-to-finest stack of images; the finest level defines the
/// canonical resolution that fusion operates at.
#[derive(Debug, Clone)]
pub struct ScalePyramid {
    levels: Vec<PyramidLevel>,
}

impl ScalePyramid {
    /// Validates strict growth toward the finest level and a shared aspect ratio.
    pub fn new(levels: Vec<PyramidLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(MuralError::InvalidParameter("pyramid has no levels".into()));
        }
        for pair in levels.windows(2) {
            let (a, b) = (&pair[0].image, &pair[1].image);
            if b.height() <= a.height() || b.width() <= a.width() {
                return Err(MuralError::InvalidParameter(
                    "pyramid levels must strictly grow toward the finest level".into(),
                ));
            }
            // Cross-multiplied aspect check avoids division.
            if a.height() * b.width() != a.width() * b.height() {
                return Err(MuralError::InvalidParameter(
                    "pyramid levels must share one aspect ratio".into(),
                ));
            }
        }
        Ok(ScalePyramid { levels })
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn finest(&self) -> &PyramidLevel {
        self.levels.last().expect("pyramid is non-empty")
    }

    /// Dimensions of the finest level.
    pub fn canonical_scale(&self) -> (usize, usize) {
        let img = &self.finest().image;
        (img.height(), img.width())
    }
}
