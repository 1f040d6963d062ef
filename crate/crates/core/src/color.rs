//! Pixel and image types, the 9-term polynomial kernel, gamut clamping and
//! the sRGB transfer function.

use crate::error::{Error, Result};

/// Number of terms produced by [`kernel_phi`].
pub const KERNEL_LEN: usize = 9;

/// Term order of [`kernel_phi`]. Written into model files.
pub const KERNEL_LAYOUT: &str = "R,G,B,RG,RB,GB,RR,GG,BB";

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RgbColor {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl RgbColor {
    pub const fn new(r: f64, g: f64, b: f64) -> Self {
        Self { r, g, b }
    }

    pub const fn gray(v: f64) -> Self {
        Self { r: v, g: v, b: v }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn from_array(c: [f64; 3]) -> Self {
        Self::new(c[0], c[1], c[2])
    }

    pub fn is_finite(self) -> bool {
        self.r.is_finite() && self.g.is_finite() && self.b.is_finite()
    }
}

/// Row-major RGB raster with channel values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<RgbColor>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<RgbColor>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if width.checked_mul(height) != Some(pixels.len()) {
            return Err(Error::invalid(format!(
                "{} pixels do not fill a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, color: RgbColor) -> Result<Self> {
        Self::new(width, height, vec![color; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[RgbColor] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [RgbColor] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<RgbColor> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> RgbColor {
        self.pixels[y * self.width + x]
    }

    pub fn map_pixels(&self, f: impl Fn(RgbColor) -> RgbColor) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn same_dimensions(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Lifts a color into `[R, G, B, RG, RB, GB, R², G², B²]`.
pub fn kernel_phi(c: RgbColor) -> Result<[f64; KERNEL_LEN]> {
    if !c.is_finite() {
        return Err(Error::invalid(format!("non-finite color {c:?}")));
    }
    Ok(kernel_phi_unchecked(c))
}

#[inline(always)]
pub(crate) fn kernel_phi_unchecked(c: RgbColor) -> [f64; KERNEL_LEN] {
    let RgbColor { r, g, b } = c;
    [r, g, b, r * g, r * b, g * b, r * r, g * g, b * b]
}

#[inline]
pub fn clamp_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

pub fn clamp_gamut(c: RgbColor) -> RgbColor {
    RgbColor::new(clamp_unit(c.r), clamp_unit(c.g), clamp_unit(c.b))
}

fn check_unit(c: f64) -> Result<()> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{c} is outside [0, 1]")))
    }
}

/// sRGB-encoded value to linear light.
pub fn srgb_decode(c: f64) -> Result<f64> {
    check_unit(c)?;
    Ok(srgb_decode_unchecked(c))
}

/// Linear light to sRGB-encoded value.
pub fn srgb_encode(c: f64) -> Result<f64> {
    check_unit(c)?;
    Ok(srgb_encode_unchecked(c))
}

#[inline]
pub(crate) fn srgb_decode_unchecked(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

// The breakpoint is the image of 0.04045 under decoding so that the two
// branches invert each other exactly.
const LINEAR_BREAK: f64 = 0.04045 / 12.92;

#[inline]
pub(crate) fn srgb_encode_unchecked(c: f64) -> f64 {
    if c <= LINEAR_BREAK {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}
