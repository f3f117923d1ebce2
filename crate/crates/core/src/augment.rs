//! Stochastic view generation: crop/resize, color jitter, Gaussian blur,
//! and the pluggable age transform that produces the cross-age view.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

pub const CHANNELS: usize = 3;
pub const YEARS_PER_GROUP: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("image {height}x{width} too small for cropping (needs at least 2x2)")]
    TooSmall { height: usize, width: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid augment config: {0}")]
    Config(String),
    #[error("age transform failed for source image {source_index}: {message}")]
    AgeTransform { source_index: usize, message: String },
}

/// H×W×3 raster with values in [0, 1], stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self, AugmentError> {
        if height == 0 || width == 0 || pixels.len() != height * width * CHANNELS {
            return Err(AugmentError::InvalidImage(format!(
                "{height}x{width}x{CHANNELS} needs {} values, got {}",
                height * width * CHANNELS,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AugmentError::InvalidImage(format!("pixel {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    /// Builds from an `[H, W, 3]` tensor, clamping values into [0, 1].
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self, AugmentError> {
        match t.dims() {
            [h, w, 3] => Ok(Self {
                height: *h,
                width: *w,
                pixels: t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            }),
            other => Err(AugmentError::InvalidImage(format!(
                "expected [H, W, 3] tensor, got {other:?}"
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![self.height, self.width, CHANNELS],
            self.pixels.clone(),
        )
        .expect("image invariants guarantee a valid tensor")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    pub fn l2_distance(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Five-year age bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgeGroup(pub u32);

impl AgeGroup {
    pub fn from_age(years: f64) -> Self {
        AgeGroup((years.max(0.0) / YEARS_PER_GROUP).floor() as u32)
    }

    pub fn index(self) -> u32 {
        self.0
    }

    pub fn start_age(self) -> f64 {
        self.0 as f64 * YEARS_PER_GROUP
    }

    pub fn midpoint_age(self) -> f64 {
        self.start_age() + YEARS_PER_GROUP / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Area fraction of the crop window, `(lo, hi)`.
    pub crop_scale_range: (f64, f64),
    pub color_strength: f64,
    pub blur_sigma_range: (f64, f64),
    pub blur_apply_prob: f64,
    /// Number of age groups the synthesized view is drawn from.
    pub n_age_groups: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.2, 1.0),
            color_strength: 0.5,
            blur_sigma_range: (0.1, 2.0),
            blur_apply_prob: 0.5,
            n_age_groups: 8,
        }
    }
}

impl AugmentConfig {
    /// A configuration under which every stochastic view equals its source.
    pub fn identity() -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            color_strength: 0.0,
            blur_sigma_range: (0.0, 0.0),
            blur_apply_prob: 0.0,
            n_age_groups: 8,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(AugmentError::Config(format!(
                "crop_scale_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        if !(self.color_strength >= 0.0 && self.color_strength.is_finite()) {
            return Err(AugmentError::Config("color_strength must be >= 0".into()));
        }
        let (slo, shi) = self.blur_sigma_range;
        if !(slo >= 0.0 && slo <= shi && shi.is_finite()) {
            return Err(AugmentError::Config(format!(
                "blur_sigma_range must satisfy 0 <= lo <= hi, got ({slo}, {shi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.blur_apply_prob) {
            return Err(AugmentError::Config("blur_apply_prob must lie in [0,1]".into()));
        }
        if self.n_age_groups == 0 {
            return Err(AugmentError::Config("n_age_groups must be positive".into()));
        }
        Ok(())
    }
}

/// Crop rectangle in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

pub fn sample_crop_window(
    height: usize,
    width: usize,
    scale_range: (f64, f64),
    rng: &mut impl Rng,
) -> CropWindow {
    let (lo, hi) = scale_range;
    let scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let side = scale.sqrt();
    let ch = ((height as f64 * side).round() as usize).clamp(1, height);
    let cw = ((width as f64 * side).round() as usize).clamp(1, width);
    let top = rng.random_range(0..=height - ch);
    let left = rng.random_range(0..=width - cw);
    CropWindow {
        top,
        left,
        height: ch,
        width: cw,
    }
}

/// Crops `window` and resizes it back to the source size with bilinear
/// interpolation (corner-aligned sampling grid).
pub fn crop_resize(img: &Image, window: CropWindow) -> Image {
    let (h, w) = (img.height, img.width);
    let coord = |out: usize, out_len: usize, win: usize| -> f64 {
        if out_len <= 1 || win <= 1 {
            0.0
        } else {
            out as f64 * (win - 1) as f64 / (out_len - 1) as f64
        }
    };
    let mut pixels = Vec::with_capacity(img.len());
    for y in 0..h {
        let sy = coord(y, h, window.height);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(window.height - 1);
        let fy = sy - y0 as f64;
        for x in 0..w {
            let sx = coord(x, w, window.width);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(window.width - 1);
            let fx = sx - x0 as f64;
            for c in 0..CHANNELS {
                let p = |yy: usize, xx: usize| {
                    img.at(window.top + yy, window.left + xx, c) as f64
                };
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push((v as f32).clamp(0.0, 1.0));
            }
        }
    }
    Image {
        height: h,
        width: w,
        pixels,
    }
}

pub fn random_crop_resize(
    img: &Image,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Image, AugmentError> {
    if img.height < 2 || img.width < 2 {
        return Err(AugmentError::TooSmall {
            height: img.height,
            width: img.width,
        });
    }
    let window = sample_crop_window(img.height, img.width, cfg.crop_scale_range, rng);
    Ok(crop_resize(img, window))
}

/// Multiplicative jitter factors, applied brightness → contrast → saturation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl ColorFactors {
    pub const IDENTITY: ColorFactors = ColorFactors {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };

    pub fn sample(strength: f64, rng: &mut impl Rng) -> Self {
        let spread = strength * 0.8;
        let mut draw = || {
            if spread == 0.0 {
                1.0
            } else {
                rng.random_range((1.0 - spread)..=(1.0 + spread)).max(0.0)
            }
        };
        let brightness = draw();
        let contrast = draw();
        let saturation = draw();
        Self {
            brightness,
            contrast,
            saturation,
        }
    }
}

#[inline]
fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn apply_color(img: &Image, f: ColorFactors) -> Image {
    let mut px: Vec<f32> = img
        .pixels
        .iter()
        .map(|&v| ((v as f64 * f.brightness) as f32).clamp(0.0, 1.0))
        .collect();

    let n = (img.height * img.width) as f64;
    let mean_gray = px
        .chunks_exact(CHANNELS)
        .map(|p| luma(p[0] as f64, p[1] as f64, p[2] as f64))
        .sum::<f64>()
        / n;
    for v in px.iter_mut() {
        let x = (*v as f64 - mean_gray) * f.contrast + mean_gray;
        *v = (x as f32).clamp(0.0, 1.0);
    }

    for p in px.chunks_exact_mut(CHANNELS) {
        let gray = luma(p[0] as f64, p[1] as f64, p[2] as f64) as f32 as f64;
        for v in p.iter_mut() {
            let x = gray + (*v as f64 - gray) * f.saturation;
            *v = (x as f32).clamp(0.0, 1.0);
        }
    }
    Image {
        height: img.height,
        width: img.width,
        pixels: px,
    }
}

pub fn color_distort(img: &Image, strength: f64, rng: &mut impl Rng) -> Image {
    let factors = ColorFactors::sample(strength.max(0.0), rng);
    apply_color(img, factors)
}

/// Normalized 1-D Gaussian kernel of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let idx = |y: isize, x: isize, c: usize| ((y * w + x) as usize) * CHANNELS + c;

    let mut horiz = vec![0.0f64; img.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += wt * img.pixels[idx(y, xx, c)] as f64;
                }
                horiz[idx(y, x, c)] = acc;
            }
        }
    }
    let mut pixels = vec![0.0f32; img.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += wt * horiz[idx(yy, x, c)];
                }
                pixels[idx(y, x, c)] = (acc as f32).clamp(0.0, 1.0);
            }
        }
    }
    Image {
        height: img.height,
        width: img.width,
        pixels,
    }
}

/// One draw of the crop → color → (maybe) blur pipeline.
pub fn augment_view(
    img: &Image,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Image, AugmentError> {
    let cropped = random_crop_resize(img, cfg, rng)?;
    let colored = color_distort(&cropped, cfg.color_strength, rng);
    let blur_draw: f64 = rng.random();
    if blur_draw < cfg.blur_apply_prob {
        let (lo, hi) = cfg.blur_sigma_range;
        let sigma = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        Ok(gaussian_blur(&colored, sigma))
    } else {
        Ok(colored)
    }
}

/// Reference to a dataset image handed to an [`AgeTransform`].
#[derive(Clone, Copy, Debug)]
pub struct SourceImage<'a> {
    pub index: usize,
    pub image: &'a Image,
}

/// Re-renders a face at a target age group while keeping its identity.
pub trait AgeTransform: Sync {
    fn transform(
        &self,
        source: SourceImage<'_>,
        target: AgeGroup,
        rng: &mut dyn RngCore,
    ) -> Result<Image, String>;
}

/// Returns the source image unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityAgeTransform;

impl AgeTransform for IdentityAgeTransform {
    fn transform(
        &self,
        source: SourceImage<'_>,
        _target: AgeGroup,
        _rng: &mut dyn RngCore,
    ) -> Result<Image, String> {
        Ok(source.image.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedTriplet {
    pub view_i: Image,
    pub view_j: Image,
    pub view_k: Image,
    pub age_group: AgeGroup,
}

/// Two stochastic views for the pair-only baseline.
pub fn make_pair(
    img: &Image,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Image, Image), AugmentError> {
    let a = augment_view(img, cfg, rng)?;
    let b = augment_view(img, cfg, rng)?;
    Ok((a, b))
}

/// Two stochastic views plus a synthesized view at a uniformly drawn age group.
/// The synthesized view is not passed through the stochastic pipeline.
pub fn make_triplet<R: Rng>(
    source: SourceImage<'_>,
    cfg: &AugmentConfig,
    at: &dyn AgeTransform,
    rng: &mut R,
) -> Result<AugmentedTriplet, AugmentError> {
    let (view_i, view_j) = make_pair(source.image, cfg, rng)?;
    let age_group = AgeGroup(rng.random_range(0..cfg.n_age_groups.max(1)));
    let view_k = at
        .transform(source, age_group, rng)
        .map_err(|message| AugmentError::AgeTransform {
            source_index: source.index,
            message,
        })?;
    if view_k.height != source.image.height || view_k.width != source.image.width {
        return Err(AugmentError::AgeTransform {
            source_index: source.index,
            message: format!(
                "output {}x{} differs from source {}x{}",
                view_k.height, view_k.width, source.image.height, source.image.width
            ),
        });
    }
    Ok(AugmentedTriplet {
        view_i,
        view_j,
        view_k,
        age_group,
    })
}
