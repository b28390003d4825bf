//! Two-domain synthetic image generator.
//!
//! Both domains share one geometry rule: a "diseased" image contains a bright
//! sharp-edged ellipse on a low-frequency textured background, a "healthy"
//! image is background only. The target domain then inverts intensities,
//! adds a brightness offset and stronger noise, so only intensity
//! statistics differ between domains.

use std::path::Path;

use image::GrayImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::batch::LoadedDataset;
use super::manifest::{scan_dataset, DatasetManifest, Domain, Label};
use crate::seeding::{stream_rng, Purpose};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    pub invert: bool,
    /// Added after inversion.
    pub brightness_offset: f64,
    pub source_noise: f64,
    pub target_noise: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            invert: true,
            brightness_offset: -0.45,
            source_noise: 0.02,
            target_noise: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Images per (domain, class) pair.
    pub samples_per_class: usize,
    pub side: usize,
    pub seed: u64,
    pub background_level: f64,
    pub texture_amplitude: f64,
    /// Ellipse semi-axis range as a fraction of the image side.
    pub blob_radius: (f64, f64),
    pub blob_intensity: f64,
    /// Logistic slope of the blob boundary; larger values give harder edges.
    pub blob_edge_sharpness: f64,
    pub shift: DomainShift,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples_per_class: 200,
            side: 64,
            seed: 0,
            background_level: 0.1,
            texture_amplitude: 0.06,
            blob_radius: (0.08, 0.16),
            blob_intensity: 0.5,
            blob_edge_sharpness: 30.0,
            shift: DomainShift::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class == 0 {
            return Err(Error::config("samples_per_class", "must be >= 1"));
        }
        if self.side < 8 {
            return Err(Error::config("side", "must be >= 8"));
        }
        if !(self.blob_edge_sharpness > 0.0 && self.blob_edge_sharpness.is_finite()) {
            return Err(Error::config("blob_edge_sharpness", "must be positive"));
        }
        let (lo, hi) = self.blob_radius;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return Err(Error::config("blob_radius", "needs 0 < min <= max < 0.5"));
        }
        if self.shift.source_noise < 0.0 || self.shift.target_noise < 0.0 {
            return Err(Error::config("shift", "noise levels must be >= 0"));
        }
        Ok(())
    }

    /// Grayscale pixel values in `[0, 1]`, row-major `side x side`.
    pub fn render(&self, domain: Domain, label: Label, index: usize) -> Vec<f64> {
        let stream = ((domain as u64) << 40) | ((label as u64) << 32) | index as u64;
        let mut rng = stream_rng(self.seed, Purpose::Synthetic, stream);
        let side = self.side;
        let mut clean = self.background(&mut rng);
        if label == Label::Diseased {
            self.add_blob(&mut clean, &mut rng);
        }
        let (noise, flip) = match domain {
            Domain::Source => (self.shift.source_noise, false),
            Domain::Target => (self.shift.target_noise, self.shift.invert),
        };
        let gauss = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite std-dev");
        let offset = if domain == Domain::Target {
            self.shift.brightness_offset
        } else {
            0.0
        };
        debug_assert_eq!(clean.len(), side * side);
        clean
            .into_iter()
            .map(|v| {
                let v = if flip { 1.0 - v } else { v };
                (v + offset + gauss.sample(&mut rng)).clamp(0.0, 1.0)
            })
            .collect()
    }

    fn background(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let side = self.side as f64;
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let cycles = rng.gen_range(1.0..4.0);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU * cycles / side;
                (k * angle.cos(), k * angle.sin(), phase)
            })
            .collect();
        let level = self.background_level + rng.gen_range(-0.05..0.05);
        let mut out = Vec::with_capacity(self.side * self.side);
        for y in 0..self.side {
            for x in 0..self.side {
                let texture: f64 = waves
                    .iter()
                    .map(|(kx, ky, p)| (kx * x as f64 + ky * y as f64 + p).sin())
                    .sum::<f64>()
                    / 3.0;
                out.push(level + self.texture_amplitude * texture);
            }
        }
        out
    }

    fn add_blob(&self, img: &mut [f64], rng: &mut ChaCha8Rng) {
        let side = self.side as f64;
        let (lo, hi) = self.blob_radius;
        let rx = rng.gen_range(lo..=hi) * side;
        let ry = rng.gen_range(lo..=hi) * side;
        let margin = rx.max(ry) + 1.0;
        let cx = rng.gen_range(margin..side - margin);
        let cy = rng.gen_range(margin..side - margin);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let (sin, cos) = theta.sin_cos();
        for y in 0..self.side {
            for x in 0..self.side {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let u = (dx * cos + dy * sin) / rx;
                let v = (-dx * sin + dy * cos) / ry;
                let r = (u * u + v * v).sqrt();
                // logistic edge: ~1 inside, ~0 outside, half intensity on the boundary
                let weight = 1.0 / (1.0 + (self.blob_edge_sharpness * (r - 1.0)).exp());
                img[y * self.side + x] += self.blob_intensity * weight;
            }
        }
    }
}

impl SyntheticSpec {
    /// 8-bit quantized pixels, exactly what the written PNG holds.
    fn render_u8(&self, domain: Domain, label: Label, index: usize) -> Vec<u8> {
        self.render(domain, label, index)
            .into_iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect()
    }

    /// The same images [`generate_synthetic`] writes for `domain`, decoded
    /// in memory (channels replicated, scaled to `[0, 1]`), in manifest order.
    pub fn dataset(&self, domain: Domain) -> Result<LoadedDataset> {
        self.validate()?;
        let mut pixels = Vec::with_capacity(2 * self.samples_per_class * self.side * self.side * 3);
        let mut labels = Vec::with_capacity(2 * self.samples_per_class);
        for label in Label::ALL {
            for index in 0..self.samples_per_class {
                for v in self.render_u8(domain, label, index) {
                    let v = f64::from(v) / 255.0;
                    pixels.extend([v, v, v]);
                }
                labels.push(label);
            }
        }
        LoadedDataset::from_parts(domain, self.side, pixels, labels)
    }
}

/// Writes the dataset as 8-bit grayscale PNGs in the standard tree layout and
/// returns the `(source, target)` manifests.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    spec.validate()?;
    for domain in Domain::ALL {
        for label in Label::ALL {
            let dir = root.join(domain.dir_name()).join(label.dir_name());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for index in 0..spec.samples_per_class {
                let pixels = spec.render_u8(domain, label, index);
                let path = dir.join(format!("{}_{index:05}.png", label.dir_name()));
                GrayImage::from_raw(spec.side as u32, spec.side as u32, pixels)
                    .expect("buffer sized side x side")
                    .save(&path)
                    .map_err(|source| Error::Image {
                        path: path.clone(),
                        source,
                    })?;
            }
        }
    }
    scan_dataset(root)
}
