//! Severity-graded image corruptions for robustness sweeps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MAX_SEVERITY: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Saturation,
    Contrast,
    GaussianBlur,
    GaussianNoise,
    BlockOcclusion,
    Pixelation,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 6] = [
        PerturbKind::Saturation,
        PerturbKind::Contrast,
        PerturbKind::GaussianBlur,
        PerturbKind::GaussianNoise,
        PerturbKind::BlockOcclusion,
        PerturbKind::Pixelation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PerturbKind::Saturation => "saturation",
            PerturbKind::Contrast => "contrast",
            PerturbKind::GaussianBlur => "gaussian_blur",
            PerturbKind::GaussianNoise => "gaussian_noise",
            PerturbKind::BlockOcclusion => "block_occlusion",
            PerturbKind::Pixelation => "pixelation",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown perturbation `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Perturbation {
    pub kind: PerturbKind,
    pub severity: u8,
}

const SCALE: [f32; 6] = [1.0, 0.9, 0.75, 0.6, 0.45, 0.3];
const BLUR_SIGMA: [f64; 6] = [0.0, 0.5, 1.0, 2.0, 3.0, 4.0];
pub const NOISE_SIGMA: [f64; 6] = [0.0, 0.02, 0.04, 0.08, 0.12, 0.16];
const OCCLUDERS: [usize; 6] = [0, 1, 2, 4, 6, 8];
const PIXEL_FACTOR: [usize; 6] = [1, 1, 2, 4, 8, 16];
const OCCLUDER_SIZE: usize = 8;

pub fn perturb(img: &Image, p: Perturbation, rng: &mut Rng) -> Result<Image> {
    if p.severity > MAX_SEVERITY {
        return Err(Error::Usage(format!("severity {} outside 0..={MAX_SEVERITY}", p.severity)));
    }
    let s = p.severity as usize;
    if s == 0 {
        return Ok(img.clone());
    }
    let mut out = match p.kind {
        PerturbKind::Saturation => saturation(img, SCALE[s]),
        PerturbKind::Contrast => contrast(img, SCALE[s]),
        PerturbKind::GaussianBlur => gaussian_blur(img, BLUR_SIGMA[s]),
        PerturbKind::GaussianNoise => {
            let sigma = NOISE_SIGMA[s];
            let mut o = img.clone();
            for v in &mut o.data {
                *v += (rng.normal() * sigma) as f32;
            }
            o
        }
        PerturbKind::BlockOcclusion => occlude(img, OCCLUDERS[s], rng),
        PerturbKind::Pixelation => pixelate(img, PIXEL_FACTOR[s]),
    };
    out.clamp01();
    Ok(out)
}

/// Blend toward per-pixel luminance.
fn saturation(img: &Image, f: f32) -> Image {
    let mut o = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let gray = 0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x);
            for c in 0..3 {
                o.set(c, y, x, gray + f * (img.get(c, y, x) - gray));
            }
        }
    }
    o
}

/// Scale deviations from the global mean.
fn contrast(img: &Image, f: f32) -> Image {
    let mean = (img.data.iter().map(|&v| f64::from(v)).sum::<f64>() / img.data.len() as f64) as f32;
    let mut o = img.clone();
    for v in &mut o.data {
        *v = mean + f * (*v - mean);
    }
    o
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Separable Gaussian with clamped borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = img.clone();
    for c in 0..3 {
        for y in 0..img.height {
            for x in 0..img.width {
                let v = k
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * img.get_clamped(c, y as isize, x as isize + i as isize - r))
                    .sum();
                tmp.set(c, y, x, v);
            }
        }
    }
    let mut out = tmp.clone();
    for c in 0..3 {
        for y in 0..img.height {
            for x in 0..img.width {
                let v = k
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * tmp.get_clamped(c, y as isize + i as isize - r, x as isize))
                    .sum();
                out.set(c, y, x, v);
            }
        }
    }
    out
}

/// Mid-gray square blocks at random positions.
fn occlude(img: &Image, count: usize, rng: &mut Rng) -> Image {
    let mut o = img.clone();
    let bh = OCCLUDER_SIZE.min(img.height);
    let bw = OCCLUDER_SIZE.min(img.width);
    for _ in 0..count {
        let y0 = rng.below(img.height - bh + 1);
        let x0 = rng.below(img.width - bw + 1);
        for c in 0..3 {
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    o.set(c, y, x, 0.5);
                }
            }
        }
    }
    o
}

/// Block averages of `factor × factor` cells, replicated back.
fn pixelate(img: &Image, factor: usize) -> Image {
    if factor <= 1 {
        return img.clone();
    }
    let mut o = img.clone();
    for c in 0..3 {
        for by in (0..img.height).step_by(factor) {
            for bx in (0..img.width).step_by(factor) {
                let ye = (by + factor).min(img.height);
                let xe = (bx + factor).min(img.width);
                let mut sum = 0.0f64;
                for y in by..ye {
                    for x in bx..xe {
                        sum += f64::from(img.get(c, y, x));
                    }
                }
                let mean = (sum / ((ye - by) * (xe - bx)) as f64) as f32;
                for y in by..ye {
                    for x in bx..xe {
                        o.set(c, y, x, mean);
                    }
                }
            }
        }
    }
    o
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        let data = (0..3 * 32 * 32).map(|_| rng.uniform_range(0.2, 0.8) as f32).collect();
        Image::new(32, 32, data).unwrap()
    }

    #[test]
    fn severity_zero_is_bit_identity() {
        let img = textured(1);
        for kind in PerturbKind::ALL {
            let out = perturb(&img, Perturbation { kind, severity: 0 }, &mut Rng::new(2)).unwrap();
            assert_eq!(out, img, "{kind}");
        }
    }

    #[test]
    fn out_of_range_severity_is_rejected() {
        let p = Perturbation {
            kind: PerturbKind::Contrast,
            severity: 6,
        };
        assert!(perturb(&textured(1), p, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn contrast_pivots_at_mean() {
        let img = Image::filled(16, 16, 0.5);
        let p = Perturbation {
            kind: PerturbKind::Contrast,
            severity: 5,
        };
        assert_eq!(perturb(&img, p, &mut Rng::new(1)).unwrap(), img);
    }

    #[test]
    fn noise_std_matches_table() {
        let img = Image::filled(64, 64, 0.5);
        for s in 1..=5u8 {
            let p = Perturbation {
                kind: PerturbKind::GaussianNoise,
                severity: s,
            };
            let out = perturb(&img, p, &mut Rng::new(u64::from(s))).unwrap();
            let diffs: Vec<f64> = out.data.iter().map(|v| f64::from(v - 0.5)).collect();
            let n = diffs.len() as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
            let target = NOISE_SIGMA[s as usize];
            assert!((std - target).abs() < 0.1 * target, "severity {s}: {std} vs {target}");
        }
    }

    #[test]
    fn every_kind_changes_texture_and_stays_in_range() {
        let img = textured(3);
        for kind in PerturbKind::ALL {
            let out = perturb(&img, Perturbation { kind, severity: 5 }, &mut Rng::new(4)).unwrap();
            assert_ne!(out, img, "{kind}");
            assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn blur_preserves_constants_and_pixelation_averages() {
        let img = Image::filled(10, 10, 0.25);
        let out = gaussian_blur(&img, 2.0);
        assert!(out.data.iter().all(|v| (v - 0.25).abs() < 1e-6));
        let mut two = Image::filled(2, 2, 0.0);
        two.set(0, 0, 0, 1.0);
        let p = pixelate(&two, 2);
        assert!(p.data[..4].iter().all(|v| (*v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn occlusion_paints_gray_blocks() {
        let img = Image::filled(32, 32, 0.0);
        let out = occlude(&img, 1, &mut Rng::new(5));
        let gray = out.data.iter().filter(|v| **v == 0.5).count();
        assert_eq!(gray, 3 * 64);
    }
}
