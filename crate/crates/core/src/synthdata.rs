//! Synthetic cross-age face stand-ins with known identity and age latents.
//!
//! Each pixel is `clamp(0.5 + 0.5·tanh(W_id·u + W_age·φ(age) + ε))`. The
//! columns of `W_id` and `W_age` are random fields on a coarse grid,
//! bilinearly upsampled to the image size, so crops keep spatial structure.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AgeGroup, AgeTransform, Image, SourceImage, CHANNELS};
use crate::io::manifest::{Split, SubjectRecord};
use crate::par::{self, Execution};
use crate::seed;

pub const AGE_FEATURES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Config(String),
    #[error("unknown image reference {0}")]
    UnknownImage(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub images_per_subject: usize,
    pub image_side: usize,
    pub n_age_groups: u32,
    pub noise_std: f64,
    pub seed: u64,
    pub latent_dim: usize,
    /// Scale of the age field relative to the unit-variance identity field.
    pub age_strength: f64,
    /// Side of the coarse grid the random fields are drawn on.
    pub field_grid: usize,
    /// Added to every subject id, so two generated datasets can be disjoint.
    pub subject_id_offset: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            images_per_subject: 10,
            image_side: 16,
            n_age_groups: 8,
            noise_std: 0.1,
            seed: 0,
            latent_dim: 16,
            age_strength: 1.5,
            field_grid: 4,
            subject_id_offset: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.n_subjects == 0 || self.latent_dim == 0 || self.image_side == 0 || self.field_grid == 0 {
            return fail("counts and sizes must be positive");
        }
        if self.images_per_subject < 2 {
            return fail("images_per_subject must be >= 2");
        }
        if self.n_age_groups < 2 {
            return fail("n_age_groups must be >= 2 so each subject spans two groups");
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return fail("noise_std must be a finite value >= 0");
        }
        if !(self.age_strength >= 0.0) {
            return fail("age_strength must be >= 0");
        }
        Ok(())
    }

    /// Covered age range in years, `[0, span)`.
    pub fn age_span(&self) -> f64 {
        self.n_age_groups as f64 * crate::augment::YEARS_PER_GROUP
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side * CHANNELS
    }
}

/// Smooth 4-dimensional age encoding.
pub fn age_features(age: f64, span: f64) -> [f64; AGE_FEATURES] {
    let a = age / span;
    let t = std::f64::consts::PI * a;
    [a, t.sin(), t.cos(), a * a]
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityLatent {
    pub subject_id: u64,
    pub u: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageLatent {
    pub subject: usize,
    pub age: f64,
}

/// Fixed linear maps plus the noise model.
#[derive(Clone, Debug)]
pub struct Renderer {
    side: usize,
    latent_dim: usize,
    span: f64,
    noise_std: f64,
    /// `pixels × latent_dim`, row-major.
    w_id: Vec<f64>,
    /// `pixels × AGE_FEATURES`, row-major.
    w_age: Vec<f64>,
}

fn smooth_field(grid: usize, side: usize, rng: &mut impl Rng, scale: f64) -> Vec<f64> {
    let coarse: Vec<f64> = (0..grid * grid * CHANNELS)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    let at = |y: usize, x: usize, c: usize| coarse[(y * grid + x) * CHANNELS + c];
    let pos = |i: usize| -> (usize, usize, f64) {
        if grid == 1 || side == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (grid - 1) as f64 / (side - 1) as f64;
        let lo = (s.floor() as usize).min(grid - 2);
        (lo, lo + 1, s - lo as f64)
    };
    let mut out = Vec::with_capacity(side * side * CHANNELS);
    for y in 0..side {
        let (y0, y1, fy) = pos(y);
        for x in 0..side {
            let (x0, x1, fx) = pos(x);
            for c in 0..CHANNELS {
                let top = at(y0, x0, c) * (1.0 - fx) + at(y0, x1, c) * fx;
                let bot = at(y1, x0, c) * (1.0 - fx) + at(y1, x1, c) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

impl Renderer {
    pub fn new(spec: &SynthSpec) -> Self {
        let mut rng = seed::rng(spec.seed, &[seed::tag("synth-basis")]);
        let p = spec.pixels();
        let columns = |n: usize, scale: f64, rng: &mut seed::Rng| {
            let cols: Vec<Vec<f64>> = (0..n)
                .map(|_| smooth_field(spec.field_grid, spec.image_side, rng, scale))
                .collect();
            let mut m = vec![0.0; p * n];
            for (j, col) in cols.iter().enumerate() {
                for (i, v) in col.iter().enumerate() {
                    m[i * n + j] = *v;
                }
            }
            m
        };
        let w_id = columns(spec.latent_dim, 1.0, &mut rng);
        let w_age = columns(AGE_FEATURES, spec.age_strength, &mut rng);
        Self {
            side: spec.image_side,
            latent_dim: spec.latent_dim,
            span: spec.age_span(),
            noise_std: spec.noise_std,
            w_id,
            w_age,
        }
    }

    pub fn render(&self, u: &[f64], age: f64, rng: &mut impl Rng) -> Image {
        let phi = age_features(age, self.span);
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).expect("finite std");
        let p = self.side * self.side * CHANNELS;
        let k = self.latent_dim;
        let mut px = Vec::with_capacity(p);
        for i in 0..p {
            let id: f64 = self.w_id[i * k..(i + 1) * k].iter().zip(u).map(|(w, x)| w * x).sum();
            let ag: f64 = self.w_age[i * AGE_FEATURES..(i + 1) * AGE_FEATURES]
                .iter()
                .zip(&phi)
                .map(|(w, x)| w * x)
                .sum();
            let eps = if self.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            px.push((0.5 + 0.5 * (id + ag + eps).tanh()).clamp(0.0, 1.0) as f32);
        }
        Image::new(self.side, self.side, px).expect("rendered pixels are in range")
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub records: Vec<SubjectRecord>,
    pub images: Vec<Image>,
    pub latents: Vec<ImageLatent>,
    pub identities: Vec<IdentityLatent>,
    renderer: Renderer,
}

fn unit_vector(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    generate_with(spec, Execution::default())
}

pub fn generate_with(spec: &SynthSpec, exec: Execution) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let renderer = Renderer::new(spec);
    let max_age = spec.age_span() as u32;
    let per_subject = par::map_indexed(exec, spec.n_subjects, |s| {
        let mut rng = seed::rng(spec.seed, &[seed::tag("synth-subject"), s as u64]);
        let u = unit_vector(spec.latent_dim, &mut rng);
        let ages: Vec<u32> = loop {
            let ages: Vec<u32> = (0..spec.images_per_subject)
                .map(|_| rng.random_range(0..max_age))
                .collect();
            let first = AgeGroup::from_age(ages[0] as f64);
            if ages.iter().any(|&a| AgeGroup::from_age(a as f64) != first) {
                break ages;
            }
        };
        let images: Vec<Image> = ages
            .iter()
            .map(|&a| renderer.render(&u, a as f64, &mut rng))
            .collect();
        (u, ages, images)
    });

    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut latents = Vec::new();
    let mut identities = Vec::new();
    for (s, (u, ages, imgs)) in per_subject.into_iter().enumerate() {
        for (m, (age, img)) in ages.into_iter().zip(imgs).enumerate() {
            records.push(SubjectRecord {
                subject_id: spec.subject_id_offset + s as u64,
                age,
                split: Split::Train,
                path: format!("images/s{s:05}_{m:03}.ctns"),
            });
            images.push(img);
            latents.push(ImageLatent {
                subject: s,
                age: age as f64,
            });
        }
        identities.push(IdentityLatent {
            subject_id: spec.subject_id_offset + s as u64,
            u,
        });
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        records,
        images,
        latents,
        identities,
        renderer,
    })
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn renderer(&self) -> &Renderer {
        &self.renderer
    }

    pub fn group_of(&self, image_ref: usize) -> Option<AgeGroup> {
        self.latents.get(image_ref).map(|l| AgeGroup::from_age(l.age))
    }

    /// Re-renders image `image_ref`'s identity at an explicit age.
    pub fn render_at(&self, image_ref: usize, age: f64, rng: &mut impl Rng) -> Result<Image, SynthError> {
        let lat = self.latents.get(image_ref).ok_or(SynthError::UnknownImage(image_ref))?;
        Ok(self.renderer.render(&self.identities[lat.subject].u, age, rng))
    }

    /// Re-renders image `image_ref` at the midpoint of `target` with fresh noise.
    pub fn oracle_age_transform(
        &self,
        image_ref: usize,
        target: AgeGroup,
        rng: &mut impl Rng,
    ) -> Result<Image, SynthError> {
        self.render_at(image_ref, target.midpoint_age(), rng)
    }

    pub fn oracle(&self) -> OracleAgeTransform<'_> {
        OracleAgeTransform { data: self }
    }
}

/// [`AgeTransform`] backed by the stored latents; `SourceImage::index` is
/// the dataset image index.
#[derive(Clone, Copy, Debug)]
pub struct OracleAgeTransform<'a> {
    data: &'a SynthDataset,
}

impl AgeTransform for OracleAgeTransform<'_> {
    fn transform(
        &self,
        source: SourceImage<'_>,
        target: AgeGroup,
        mut rng: &mut dyn rand::RngCore,
    ) -> Result<Image, String> {
        self.data
            .oracle_age_transform(source.index, target, &mut rng)
            .map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            n_subjects: 6,
            images_per_subject: 4,
            image_side: 8,
            seed: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate(&small()).unwrap();
        let b = generate_with(&small(), Execution::Sequential).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn counts_and_group_coverage() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.len(), 24);
        for s in 0..6u64 {
            let groups: std::collections::BTreeSet<_> = d
                .records
                .iter()
                .filter(|r| r.subject_id == s)
                .map(|r| AgeGroup::from_age(r.age as f64))
                .collect();
            assert!(groups.len() >= 2);
            assert!(groups.iter().all(|g| g.0 < 8));
        }
        for id in &d.identities {
            let n: f64 = id.u.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_render_round_trip() {
        let spec = SynthSpec {
            noise_std: 0.0,
            ..small()
        };
        let d = generate(&spec).unwrap();
        let mut rng = seed::rng(0, &[]);
        for i in 0..d.len() {
            let again = d.render_at(i, d.latents[i].age, &mut rng).unwrap();
            assert_eq!(again, d.images[i]);
            let away = d.oracle_age_transform(i, AgeGroup(7), &mut rng).unwrap();
            let back = d.render_at(i, d.latents[i].age, &mut rng).unwrap();
            assert_ne!(away, d.images[i]);
            assert_eq!(back, d.images[i]);
        }
    }

    #[test]
    fn unknown_reference() {
        let d = generate(&small()).unwrap();
        let mut rng = seed::rng(0, &[]);
        assert_eq!(
            d.oracle_age_transform(999, AgeGroup(0), &mut rng),
            Err(SynthError::UnknownImage(999))
        );
    }

    #[test]
    fn invalid_specs() {
        for bad in [
            SynthSpec { images_per_subject: 1, ..small() },
            SynthSpec { n_subjects: 0, ..small() },
            SynthSpec { noise_std: -0.1, ..small() },
            SynthSpec { n_age_groups: 1, ..small() },
        ] {
            assert!(generate(&bad).is_err());
        }
    }
}
