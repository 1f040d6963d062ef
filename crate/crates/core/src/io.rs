//! Image file I/O at the pipeline boundary. 8-bit samples map to `v / 255`
//! and 16-bit samples to `v / 65535`; output is written as 8-bit with
//! round-half-up. Alpha is dropped and gray images are expanded to RGB.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};

use crate::color::{ImageBuffer, RgbColor};
use crate::error::{Error, Result};

pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<RgbColor> = if is_high_depth(&img) {
        img.to_rgb16()
            .pixels()
            .map(|p| {
                RgbColor::new(
                    p[0] as f64 / 65535.0,
                    p[1] as f64 / 65535.0,
                    p[2] as f64 / 65535.0,
                )
            })
            .collect()
    } else {
        img.to_rgb8()
            .pixels()
            .map(|p| RgbColor::new(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0))
            .collect()
    };
    ImageBuffer::new(w, h, pixels)
}

fn is_high_depth(img: &DynamicImage) -> bool {
    matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
            | DynamicImage::ImageRgb32F(_)
            | DynamicImage::ImageRgba32F(_)
    )
}

/// `[0, 1]` to an 8-bit sample, rounding halves up. Out-of-range values clamp.
#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn to_rgb8_bytes(img: &ImageBuffer) -> Vec<u8> {
    img.pixels()
        .iter()
        .flat_map(|p| [to_u8(p.r), to_u8(p.g), to_u8(p.b)])
        .collect()
}

/// Rounds every channel to the nearest 8-bit level.
pub fn quantize_8bit(img: &ImageBuffer) -> ImageBuffer {
    let q = |v: f64| to_u8(v) as f64 / 255.0;
    img.map_pixels(|p| RgbColor::new(q(p.r), q(p.g), q(p.b)))
}

/// PNG unless the extension asks for a portable pixmap.
fn output_format(path: &Path) -> ImageFormat {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("ppm") | Some("pnm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    }
}

pub fn encode_image(img: &ImageBuffer, format: ImageFormat) -> Result<Vec<u8>> {
    let raw = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, to_rgb8_bytes(img))
        .ok_or_else(|| Error::invalid("image dimensions exceed encoder limits"))?;
    let mut out = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(raw)
        .write_to(&mut out, format)
        .map_err(|e| Error::invalid(format!("encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Writes an 8-bit image atomically; the format follows the extension.
pub fn save_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    let bytes = encode_image(img, output_format(path))?;
    write_atomic(path, &bytes)
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.{}.tmp", std::process::id()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_rounding() {
        assert_eq!(to_u8(0.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(1.5), 255);
        assert_eq!(to_u8(-0.2), 0);
        // 0.5 * 255 = 127.5 rounds up
        assert_eq!(to_u8(0.5), 128);
        for v in 0..=255u8 {
            assert_eq!(to_u8(v as f64 / 255.0), v);
        }
    }

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<RgbColor> = (0..12)
            .map(|i| RgbColor::new(i as f64 / 11.0, 0.5, 1.0 - i as f64 / 11.0))
            .collect();
        let img = quantize_8bit(&ImageBuffer::new(4, 3, px).unwrap());
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&p, &img).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn sixteen_bit_png_is_read_at_full_depth() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let raw = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(2, 1, vec![0u16, 1, 65535, 32768, 300, 7])
            .unwrap();
        DynamicImage::ImageRgb16(raw).save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.pixels()[0], RgbColor::new(0.0, 1.0 / 65535.0, 1.0));
        assert_eq!(img.pixels()[1].r, 32768.0 / 65535.0);
    }

    #[test]
    fn alpha_is_stripped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgba.png");
        let raw = image::RgbaImage::from_raw(1, 1, vec![255, 0, 51, 10]).unwrap();
        DynamicImage::ImageRgba8(raw).save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.pixels()[0], RgbColor::new(1.0, 0.0, 0.2));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        let img = ImageBuffer::filled(8, 8, RgbColor::gray(0.3)).unwrap();
        let bytes = encode_image(&img, ImageFormat::Png).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_image(&p).is_err());
        assert!(load_image(&dir.path().join("missing.png")).is_err());
    }
}
