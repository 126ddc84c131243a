//! Small raster images and the transform set used by the strong policy.
//!
//! Pixels are f64 in [0, 1], row-major HWC with 1 or 3 channels. Every
//! transform preserves shape and clamps back to [0, 1]. Geometric ops
//! (rotate, shear, translate) resample bilinearly around the image center
//! and fill exposed regions with 0; at parameter 0 they reproduce the input
//! exactly because the sampling grid lands on integer coordinates.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Image> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument("images must have 1 or 3 channels"));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image dimensions must be nonzero"));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "Image::new",
                format!("{} values", height * width * channels),
                format!("{}", data.len()),
            ));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]"));
        }
        Ok(Image { height, width, channels, data })
    }

    fn same_shape(&self, data: Vec<f64>) -> Image {
        Image { height: self.height, width: self.width, channels: self.channels, data }
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
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + ch]
    }

    /// Flattened copy for feeding vector models.
    pub fn to_flat(&self) -> Vec<f64> {
        self.data.clone()
    }

    /// Per-pixel luminance (the value itself for single-channel images).
    fn luminance(&self, y: usize, x: usize) -> f64 {
        if self.channels == 1 {
            self.get(y, x, 0)
        } else {
            0.299 * self.get(y, x, 0) + 0.587 * self.get(y, x, 1) + 0.114 * self.get(y, x, 2)
        }
    }
}

#[inline]
fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

#[inline]
fn quantize(v: f64) -> usize {
    ((v * 255.0).round() as i64).clamp(0, 255) as usize
}

// ---------------------------------------------------------------------------
// Photometric transforms
// ---------------------------------------------------------------------------

/// Stretches each channel so its darkest pixel maps to 0 and lightest to 1.
pub fn autocontrast(img: &Image) -> Image {
    let c = img.channels;
    let mut out = img.data.clone();
    for ch in 0..c {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in img.data[ch..].iter().step_by(c) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if hi > lo {
            let scale = 1.0 / (hi - lo);
            for v in out[ch..].iter_mut().step_by(c) {
                *v = clamp01((*v - lo) * scale);
            }
        }
    }
    img.same_shape(out)
}

/// B = 0 black, B = 1 original.
pub fn brightness(img: &Image, b: f64) -> Image {
    img.same_shape(img.data.iter().map(|&v| clamp01(b * v)).collect())
}

/// C = 0 grayscale, C = 1 original. No-op on single-channel images.
pub fn color(img: &Image, c: f64) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let mut out = img.data.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let gray = img.luminance(y, x);
            for ch in 0..3 {
                let i = (y * img.width + x) * 3 + ch;
                out[i] = clamp01((1.0 - c) * gray + c * img.data[i]);
            }
        }
    }
    img.same_shape(out)
}

/// C = 0 flat gray at the mean luminance, C = 1 original.
pub fn contrast(img: &Image, c: f64) -> Image {
    let n = (img.height * img.width) as f64;
    let mut mean = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            mean += img.luminance(y, x);
        }
    }
    mean /= n;
    img.same_shape(img.data.iter().map(|&v| clamp01((1.0 - c) * mean + c * v)).collect())
}

/// Histogram equalization per channel over 256 quantized levels.
pub fn equalize(img: &Image) -> Image {
    let c = img.channels;
    let npix = img.height * img.width;
    let mut out = img.data.clone();
    for ch in 0..c {
        let mut hist = [0usize; 256];
        for v in img.data[ch..].iter().step_by(c) {
            hist[quantize(*v)] += 1;
        }
        let last_occupied = match hist.iter().rposition(|&h| h > 0) {
            Some(i) => i,
            None => continue,
        };
        if hist.iter().filter(|&&h| h > 0).count() <= 1 {
            continue;
        }
        let step = (npix - hist[last_occupied]) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0usize; 256];
        let mut n = step / 2;
        for (i, l) in lut.iter_mut().enumerate() {
            *l = (n / step).min(255);
            n += hist[i];
        }
        for v in out[ch..].iter_mut().step_by(c) {
            *v = lut[quantize(*v)] as f64 / 255.0;
        }
    }
    img.same_shape(out)
}

/// Reduces each pixel to `bits` significant bits of its 8-bit value.
pub fn posterize(img: &Image, bits: u32) -> Image {
    let bits = bits.clamp(1, 8);
    let mask = (0xffu32 << (8 - bits)) as u8;
    img.same_shape(
        img.data
            .iter()
            .map(|&v| {
                let q = quantize(v) as u8 & mask;
                q as f64 / 255.0
            })
            .collect(),
    )
}

/// S = 0 smoothed by a 3x3 kernel, S = 1 original. Border pixels keep their
/// original value in the smoothed image.
pub fn sharpness(img: &Image, s: f64) -> Image {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut smooth = img.data.clone();
    if h > 2 && w > 2 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let k = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                            acc += k * img.get(y + dy - 1, x + dx - 1, ch);
                        }
                    }
                    smooth[(y * w + x) * c + ch] = acc / 13.0;
                }
            }
        }
    }
    let out = img
        .data
        .iter()
        .zip(&smooth)
        .map(|(&orig, &sm)| clamp01((1.0 - s) * sm + s * orig))
        .collect();
    img.same_shape(out)
}

/// Inverts every pixel at or above the threshold.
pub fn solarize(img: &Image, threshold: f64) -> Image {
    img.same_shape(
        img.data.iter().map(|&v| if v >= threshold { 1.0 - v } else { v }).collect(),
    )
}

// ---------------------------------------------------------------------------
// Geometric transforms
// ---------------------------------------------------------------------------

/// Resamples with an inverse map from output to source coordinates.
fn affine<F>(img: &Image, inverse: F) -> Image
where
    F: Fn(f64, f64) -> (f64, f64),
{
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = vec![0.0; img.data.len()];
    let sample = |sy: f64, sx: f64, ch: usize| -> f64 {
        let y0 = sy.floor();
        let x0 = sx.floor();
        let fy = sy - y0;
        let fx = sx - x0;
        let mut acc = 0.0;
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            let yy = y0 as i64 + dy;
            if yy < 0 || yy >= h as i64 {
                continue;
            }
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                let xx = x0 as i64 + dx;
                if xx < 0 || xx >= w as i64 {
                    continue;
                }
                acc += wy * wx * img.get(yy as usize, xx as usize, ch);
            }
        }
        acc
    };
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = inverse(y as f64, x as f64);
            for ch in 0..c {
                out[(y * w + x) * c + ch] = clamp01(sample(sy, sx, ch));
            }
        }
    }
    img.same_shape(out)
}

/// Rotates by `degrees` around the image center.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    affine(img, |y, x| {
        let dy = y - cy;
        let dx = x - cx;
        (cos * dy - sin * dx + cy, sin * dy + cos * dx + cx)
    })
}

/// Shears horizontally with rate `r` about the center row.
pub fn shear_x(img: &Image, r: f64) -> Image {
    let cy = (img.height as f64 - 1.0) / 2.0;
    affine(img, |y, x| (y, x + r * (y - cy)))
}

/// Shears vertically with rate `r` about the center column.
pub fn shear_y(img: &Image, r: f64) -> Image {
    let cx = (img.width as f64 - 1.0) / 2.0;
    affine(img, |y, x| (y + r * (x - cx), x))
}

/// Translates horizontally by `frac`·width pixels.
pub fn translate_x(img: &Image, frac: f64) -> Image {
    let shift = frac * img.width as f64;
    affine(img, move |y, x| (y, x - shift))
}

/// Translates vertically by `frac`·height pixels.
pub fn translate_y(img: &Image, frac: f64) -> Image {
    let shift = frac * img.height as f64;
    affine(img, move |y, x| (y - shift, x))
}

/// Mirrors left-right.
pub fn hflip(img: &Image) -> Image {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(y * w + x) * c + ch] = img.get(y, w - 1 - x, ch);
            }
        }
    }
    img.same_shape(out)
}

/// Zero-pads by `pad` on every side, then crops back to the original size at
/// offset (oy, ox) in [0, 2·pad]. The centered offset (pad, pad) is the
/// identity.
pub fn pad_crop(img: &Image, pad: usize, oy: usize, ox: usize) -> Image {
    let (h, w, c) = (img.height, img.width, img.channels);
    assert!(oy <= 2 * pad && ox <= 2 * pad, "crop offset outside padded area");
    let mut out = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            // Source position in the original image.
            let sy = y as i64 + oy as i64 - pad as i64;
            let sx = x as i64 + ox as i64 - pad as i64;
            if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                for ch in 0..c {
                    out[(y * w + x) * c + ch] = img.get(sy as usize, sx as usize, ch);
                }
            }
        }
    }
    img.same_shape(out)
}
