//! Weak and strong augmentation policies for vectors and raster images.
//!
//! Vector data gets additive Gaussian noise; the strong variant uses a wider
//! sigma plus coordinate dropout. Image data gets the classic crop-and-flip
//! weak policy and a RandAugment-style strong policy drawing from the
//! fourteen-transform set in [`crate::image`]. All sampling goes through an
//! explicit rng, so augmentation streams are reproducible bit-exactly.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, Image};

/// Additive-noise policy for vector inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorAugment {
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    /// Probability that each coordinate is zeroed in the strong view.
    pub dropout: f64,
}

impl VectorAugment {
    /// Strong sigma defaults to four times the weak one.
    pub fn from_weak(sigma_weak: f64) -> VectorAugment {
        VectorAugment { sigma_weak, sigma_strong: 4.0 * sigma_weak, dropout: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sigma_weak.is_finite() || self.sigma_weak < 0.0 {
            return Err(Error::InvalidArgument("sigma_weak must be finite and >= 0"));
        }
        if !self.sigma_strong.is_finite() || self.sigma_strong <= self.sigma_weak {
            return Err(Error::InvalidArgument("sigma_strong must exceed sigma_weak"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn weak<R: Rng>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        gaussian_jitter(x, self.sigma_weak, rng)
    }

    /// Coordinate dropout happens before the jitter, so a dropped coordinate
    /// carries pure noise and the strong view can never collapse to an exact
    /// zero vector (which downstream normalization would reject).
    pub fn strong<R: Rng>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out = x.to_vec();
        for v in &mut out {
            if rng.gen_bool(self.dropout) {
                *v = 0.0;
            }
        }
        gaussian_jitter(&out, self.sigma_strong, rng)
    }
}

impl Default for VectorAugment {
    fn default() -> VectorAugment {
        VectorAugment::from_weak(0.1)
    }
}

fn gaussian_jitter<R: Rng>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        })
        .collect()
}

/// Crop-flip weak policy and RandAugment strong policy for images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageAugment {
    pub pad: usize,
    pub flip_p: f64,
    pub n_ops: usize,
}

impl ImageAugment {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_p) {
            return Err(Error::InvalidArgument("flip_p must lie in [0, 1]"));
        }
        if self.n_ops == 0 {
            return Err(Error::InvalidArgument("n_ops must be >= 1"));
        }
        Ok(())
    }

    pub fn weak<R: Rng>(&self, img: &Image, rng: &mut R) -> Image {
        let oy = rng.gen_range(0..=2 * self.pad);
        let ox = rng.gen_range(0..=2 * self.pad);
        let cropped = image::pad_crop(img, self.pad, oy, ox);
        if rng.gen_bool(self.flip_p) {
            image::hflip(&cropped)
        } else {
            cropped
        }
    }

    pub fn strong<R: Rng>(&self, img: &Image, rng: &mut R) -> Image {
        rand_augment(img, self.n_ops, rng)
    }
}

impl Default for ImageAugment {
    fn default() -> ImageAugment {
        ImageAugment { pad: 4, flip_p: 0.5, n_ops: 2 }
    }
}

/// A weak/strong pair matched to the input modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentPolicy {
    Vector(VectorAugment),
    Image(ImageAugment),
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            AugmentPolicy::Vector(v) => v.validate(),
            AugmentPolicy::Image(i) => i.validate(),
        }
    }
}

/// The fourteen strong-policy transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Autocontrast,
    Brightness,
    Color,
    Contrast,
    Equalize,
    Identity,
    Posterize,
    Rotate,
    Sharpness,
    ShearX,
    ShearY,
    Solarize,
    TranslateX,
    TranslateY,
}

pub const TRANSFORMS: [Transform; 14] = [
    Transform::Autocontrast,
    Transform::Brightness,
    Transform::Color,
    Transform::Contrast,
    Transform::Equalize,
    Transform::Identity,
    Transform::Posterize,
    Transform::Rotate,
    Transform::Sharpness,
    Transform::ShearX,
    Transform::ShearY,
    Transform::Solarize,
    Transform::TranslateX,
    Transform::TranslateY,
];

impl Transform {
    /// Draws the transform parameter uniformly from its range. Parameterless
    /// transforms return 0 without touching the rng.
    pub fn sample_param<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            Transform::Autocontrast | Transform::Equalize | Transform::Identity => 0.0,
            Transform::Brightness
            | Transform::Color
            | Transform::Contrast
            | Transform::Sharpness => rng.gen_range(0.05..=0.95),
            Transform::Posterize => rng.gen_range(4.0..=8.0),
            Transform::Rotate => rng.gen_range(-30.0..=30.0),
            Transform::ShearX | Transform::ShearY => rng.gen_range(-0.3..=0.3),
            Transform::Solarize => rng.gen_range(0.0..=1.0),
            Transform::TranslateX | Transform::TranslateY => rng.gen_range(-0.3..=0.3),
        }
    }
}

/// Applies one transform with an explicit parameter (ignored where the
/// transform takes none).
pub fn apply_transform(img: &Image, t: Transform, param: f64) -> Image {
    match t {
        Transform::Autocontrast => image::autocontrast(img),
        Transform::Brightness => image::brightness(img, param),
        Transform::Color => image::color(img, param),
        Transform::Contrast => image::contrast(img, param),
        Transform::Equalize => image::equalize(img),
        Transform::Identity => img.clone(),
        Transform::Posterize => image::posterize(img, param.round() as u32),
        Transform::Rotate => image::rotate(img, param),
        Transform::Sharpness => image::sharpness(img, param),
        Transform::ShearX => image::shear_x(img, param),
        Transform::ShearY => image::shear_y(img, param),
        Transform::Solarize => image::solarize(img, param),
        Transform::TranslateX => image::translate_x(img, param),
        Transform::TranslateY => image::translate_y(img, param),
    }
}

/// Applies `n_ops` transforms drawn uniformly (with replacement) from the
/// fourteen, each with a fresh uniform parameter.
pub fn rand_augment<R: Rng>(img: &Image, n_ops: usize, rng: &mut R) -> Image {
    let mut out = img.clone();
    for _ in 0..n_ops {
        let t = TRANSFORMS[rng.gen_range(0..TRANSFORMS.len())];
        let param = t.sample_param(rng);
        out = apply_transform(&out, t, param);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image() -> Image {
        let data: Vec<f64> = (0..48).map(|i| (i % 16) as f64 / 15.0).collect();
        Image::new(4, 4, 3, data).unwrap()
    }

    #[test]
    fn zero_sigma_weak_is_identity() {
        let policy = VectorAugment { sigma_weak: 0.0, sigma_strong: 0.2, dropout: 0.1 };
        policy.validate().unwrap();
        let x = vec![0.3, -1.2, 4.5];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(policy.weak(&x, &mut rng), x);
    }

    #[test]
    fn vector_policy_validation() {
        assert!(VectorAugment::from_weak(0.1).validate().is_ok());
        let bad = VectorAugment { sigma_weak: 0.2, sigma_strong: 0.2, dropout: 0.1 };
        assert!(bad.validate().is_err());
        let bad = VectorAugment { sigma_weak: -0.1, sigma_strong: 0.2, dropout: 0.1 };
        assert!(bad.validate().is_err());
        let bad = VectorAugment { sigma_weak: 0.1, sigma_strong: 0.4, dropout: 1.0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn strong_vector_dropout_rate() {
        // Coordinates sit far from zero, so a dropped one (pure noise after
        // the jitter) is unmistakable.
        let policy = VectorAugment::from_weak(0.1);
        let x = vec![100.0; 5000];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = policy.strong(&x, &mut rng);
        let dropped = out.iter().filter(|&&v| v < 50.0).count();
        // Binomial(5000, 0.1): mean 500, sd ~21; allow a wide band.
        assert!((400..=600).contains(&dropped), "dropped = {dropped}");
        // Surviving coordinates keep their value up to sigma-scale jitter.
        assert!(out.iter().any(|&v| (v - 100.0).abs() < 2.0));
    }

    #[test]
    fn streams_reproduce_bit_exactly() {
        let policy = VectorAugment::from_weak(0.05);
        let x = vec![0.5, -0.25, 1.75, 0.0];
        let a = policy.strong(&x, &mut ChaCha8Rng::seed_from_u64(42));
        let b = policy.strong(&x, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);

        let img = test_image();
        let ia = rand_augment(&img, 2, &mut ChaCha8Rng::seed_from_u64(42));
        let ib = rand_augment(&img, 2, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(ia, ib);
    }

    #[test]
    fn weak_image_degenerate_settings_are_identity() {
        let img = test_image();
        let policy = ImageAugment { pad: 0, flip_p: 0.0, n_ops: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(policy.weak(&img, &mut rng), img);
    }

    #[test]
    fn identity_style_params_reproduce_input() {
        let img = test_image();
        assert_eq!(apply_transform(&img, Transform::Identity, 0.0), img);
        assert_eq!(apply_transform(&img, Transform::Brightness, 1.0), img);
        assert_eq!(apply_transform(&img, Transform::Rotate, 0.0), img);
        assert_eq!(apply_transform(&img, Transform::Posterize, 8.0).data().len(), img.data().len());
    }

    #[test]
    fn sampled_params_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            for t in TRANSFORMS {
                let p = t.sample_param(&mut rng);
                let ok = match t {
                    Transform::Autocontrast | Transform::Equalize | Transform::Identity => {
                        p == 0.0
                    }
                    Transform::Brightness
                    | Transform::Color
                    | Transform::Contrast
                    | Transform::Sharpness => (0.05..=0.95).contains(&p),
                    Transform::Posterize => (4.0..=8.0).contains(&p),
                    Transform::Rotate => (-30.0..=30.0).contains(&p),
                    Transform::ShearX | Transform::ShearY | Transform::TranslateX
                    | Transform::TranslateY => (-0.3..=0.3).contains(&p),
                    Transform::Solarize => (0.0..=1.0).contains(&p),
                };
                assert!(ok, "{t:?} sampled {p}");
            }
        }
    }

    #[test]
    fn rand_augment_keeps_shape_and_range() {
        let img = test_image();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let out = rand_augment(&img, 2, &mut rng);
            assert_eq!(out.height(), img.height());
            assert_eq!(out.width(), img.width());
            assert_eq!(out.channels(), img.channels());
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
