//! Image file I/O.
//!
//! PNG (8/16-bit, gray and RGB) plus binary PGM/PPM, which keeps a
//! dependency-free golden-file path for tests. Reads map 8-bit `v` to
//! `v/255` and 16-bit `v` to `v/65535`; writes round half away from zero,
//! so write-then-read round-trips integer payloads exactly.

use std::fs;
use std::path::Path;

use super::Image;
use crate::error::{MuralError, Result};

fn extension(path: &Path) -> String {
    path.extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default()
}

/// Read a PNG/PGM/PPM file into an [`Image`].
pub fn read_image(path: &Path) -> Result<Image> {
    match extension(path).as_str() {
        "png" => read_png(path),
        "pgm" | "ppm" => read_pnm(path),
        other => Err(MuralError::UnsupportedFormat(format!(
            "unknown image extension `{other}` for {}",
            path.display()
        ))),
    }
}

/// Write an [`Image`] as an 8-bit PNG/PGM/PPM file (by extension).
pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    match extension(path).as_str() {
        "png" => write_png8(img, path),
        "pgm" => write_pnm(img, path, false),
        "ppm" => write_pnm(img, path, true),
        other => Err(MuralError::UnsupportedFormat(format!(
            "unknown image extension `{other}` for {}",
            path.display()
        ))),
    }
}

/// Write a 16-bit PNG.
pub fn write_image_16bit(img: &Image, path: &Path) -> Result<()> {
    if extension(path) != "png" {
        return Err(MuralError::UnsupportedFormat(
            "16-bit output is PNG only".into(),
        ));
    }
    let w = img.width() as u32;
    let h = img.height() as u32;
    let quant = |v: f64| (v * 65535.0).round().clamp(0.0, 65535.0) as u16;
    let dynimg = match img.channels() {
        1 => image::DynamicImage::ImageLuma16(
            image::ImageBuffer::from_vec(w, h, img.data().iter().map(|&v| quant(v)).collect())
                .expect("buffer sized from image"),
        ),
        _ => image::DynamicImage::ImageRgb16(
            image::ImageBuffer::from_vec(w, h, img.data().iter().map(|&v| quant(v)).collect())
                .expect("buffer sized from image"),
        ),
    };
    dynimg
        .save(path)
        .map_err(|e| MuralError::Codec(e.to_string()))
}

fn read_png(path: &Path) -> Result<Image> {
    let dynimg = image::io::Reader::open(path)?
        .decode()
        .map_err(|e| MuralError::MalformedFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match dynimg {
        image::DynamicImage::ImageLuma8(buf) => {
            (1, buf.into_raw().iter().map(|&v| v as f64 / 255.0).collect())
        }
        image::DynamicImage::ImageRgb8(buf) => {
            (3, buf.into_raw().iter().map(|&v| v as f64 / 255.0).collect())
        }
        image::DynamicImage::ImageLuma16(buf) => (
            1,
            buf.into_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        ),
        image::DynamicImage::ImageRgb16(buf) => (
            3,
            buf.into_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        ),
        other => {
            return Err(MuralError::UnsupportedFormat(format!(
                "PNG color type {:?} (supported: 8/16-bit gray and RGB)",
                other.color()
            )))
        }
    };
    Image::new(h, w, channels, data)
}

fn write_png8(img: &Image, path: &Path) -> Result<()> {
    let w = img.width() as u32;
    let h = img.height() as u32;
    let bytes = quantize8(img);
    let dynimg = match img.channels() {
        1 => image::DynamicImage::ImageLuma8(
            image::ImageBuffer::from_vec(w, h, bytes).expect("buffer sized from image"),
        ),
        _ => image::DynamicImage::ImageRgb8(
            image::ImageBuffer::from_vec(w, h, bytes).expect("buffer sized from image"),
        ),
    };
    dynimg
        .save(path)
        .map_err(|e| MuralError::Codec(e.to_string()))
}

fn quantize8(img: &Image) -> Vec<u8> {
    img.data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn write_pnm(img: &Image, path: &Path, color: bool) -> Result<()> {
    let (magic, img8) = if color {
        ("P6", if img.channels() == 3 { img.clone() } else { gray_to_rgb(img) })
    } else {
        ("P5", img.to_grayscale())
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img8.width(), img8.height()).into_bytes();
    out.extend(quantize8(&img8));
    fs::write(path, out)?;
    Ok(())
}

fn gray_to_rgb(img: &Image) -> Image {
    let mut data = Vec::with_capacity(img.data().len() * 3);
    for &v in img.data() {
        data.extend_from_slice(&[v, v, v]);
    }
    Image::new(img.height(), img.width(), 3, data).expect("valid expansion")
}

fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let malformed = |reason: &str| MuralError::MalformedFile {
        path: path.display().to_string(),
        reason: reason.into(),
    };

    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and `#` comments between header tokens.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = next_token(&bytes)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => {
            return Err(MuralError::UnsupportedFormat(format!(
                "PNM magic `{m}` (only binary P5/P6)"
            )))
        }
    };
    let width: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| malformed("bad width"))?;
    let height: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| malformed("bad height"))?;
    let maxval: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| malformed("bad maxval"))?;
    if maxval != 255 {
        return Err(MuralError::UnsupportedFormat(format!(
            "PNM maxval {maxval} (only 255)"
        )));
    }
    if width == 0 || height == 0 {
        return Err(malformed("zero dimension in header"));
    }
    // Exactly one whitespace byte separates header and payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed("missing header/payload separator"));
    }
    pos += 1;

    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(malformed(&format!(
            "truncated payload: header declares {expected} bytes, found {}",
            payload.len()
        )));
    }
    let data = payload[..expected]
        .iter()
        .map(|&v| v as f64 / 255.0)
        .collect();
    Image::new(height, width, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn png8_round_trip_exact() {
        let dir = tmpdir();
        let path = dir.path().join("x.png");
        let vals = [0.0, 128.0 / 255.0, 1.0];
        let data: Vec<f64> = (0..9).map(|i| vals[i % 3]).collect();
        let img = Image::new(3, 3, 1, data).unwrap();
        write_image(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn png16_round_trip_exact() {
        let dir = tmpdir();
        let path = dir.path().join("x16.png");
        let data: Vec<f64> = (0..16).map(|i| (i * 4369) as f64 / 65535.0).collect();
        let img = Image::new(4, 4, 1, data).unwrap();
        write_image_16bit(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.data(), img.data());
        // full-scale 16-bit value reads back as exactly 1.0
        assert_eq!(back.data()[15], 1.0);
    }

    #[test]
    fn pnm_round_trip_exact() {
        let dir = tmpdir();
        for (name, channels) in [("x.pgm", 1usize), ("x.ppm", 3usize)] {
            let path = dir.path().join(name);
            let n = 4 * 5 * channels;
            let data: Vec<f64> = (0..n).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
            let img = Image::new(4, 5, channels, data).unwrap();
            write_image(&img, &path).unwrap();
            let back = read_image(&path).unwrap();
            assert_eq!(back.data(), img.data(), "{name}");
        }
    }

    #[test]
    fn truncated_pgm_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("t.pgm");
        // Header declares 4x4 = 16 bytes, provide 7.
        std::fs::write(&path, b"P5\n4 4\n255\n0123456").unwrap();
        match read_image(&path) {
            Err(MuralError::MalformedFile { reason, .. }) => {
                assert!(reason.contains("truncated"), "{reason}")
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_extension_rejected() {
        assert!(matches!(
            read_image(Path::new("x.webp")),
            Err(MuralError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn rgb_png_round_trip() {
        let dir = tmpdir();
        let path = dir.path().join("c.png");
        let data: Vec<f64> = (0..27).map(|i| ((i * 11) % 256) as f64 / 255.0).collect();
        let img = Image::new(3, 3, 3, data).unwrap();
        write_image(&img, &path).unwrap();
        assert_eq!(read_image(&path).unwrap().data(), img.data());
    }
}
