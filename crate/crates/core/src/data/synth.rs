//! Seeded synthetic face-like corpora with localized forgeries.
//!
//! Real frames are smooth colour fields with a shaded face ellipse, eyes and
//! mouth. Each forgery family edits a small region of such a frame, and all
//! but the noise blob leave a faint checkerboard residue on the edited pixels.
//! Frames of one pseudo-video share the base layout and differ by jitter and gain.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::image::{encode_ppm, Image};
use super::SampleRecord;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    PatchSwap,
    HfNoiseBlob,
    WarpBand,
    BlendSeam,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::PatchSwap, Family::HfNoiseBlob, Family::WarpBand, Family::BlendSeam];

    pub fn name(&self) -> &'static str {
        match self {
            Family::PatchSwap => "patch_swap",
            Family::HfNoiseBlob => "hf_noise_blob",
            Family::WarpBand => "warp_band",
            Family::BlendSeam => "blend_seam",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown family `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub family: Family,
    pub image_size: usize,
    pub samples_per_class: usize,
    pub frames_per_video: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(family: Family, samples_per_class: usize, seed: u64) -> Self {
        Self {
            family,
            image_size: 32,
            samples_per_class,
            frames_per_video: 8,
            seed,
        }
    }
}

/// Layout shared by all frames of one pseudo-video.
#[derive(Debug, Clone)]
struct FaceLayout {
    bg: [f32; 3],
    waves: Vec<(f32, f32, f32, f32, usize)>,
    tilt: [f32; 3],
    skin: [f32; 3],
    center: (f32, f32),
    radii: (f32, f32),
    lip: [f32; 3],
}

impl FaceLayout {
    fn draw(rng: &mut Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.uniform_range(lo, hi) as f32;
        let bg = [u(0.35, 0.65), u(0.35, 0.65), u(0.35, 0.65)];
        let waves = (0..3)
            .map(|i| (u(0.2, 1.5), u(0.2, 1.5), u(0.0, 6.283), u(0.01, 0.03), i % 3))
            .collect();
        let tilt = [u(-0.1, 0.1), u(-0.1, 0.1), u(-0.1, 0.1)];
        let skin = [u(0.72, 0.82), u(0.52, 0.62), u(0.42, 0.52)];
        let center = (u(0.45, 0.55), u(0.47, 0.57));
        let radii = (u(0.24, 0.32), u(0.32, 0.4));
        let lip = [u(0.45, 0.7), u(0.15, 0.3), u(0.15, 0.3)];
        Self {
            bg,
            waves,
            tilt,
            skin,
            center,
            radii,
            lip,
        }
    }

    fn render(&self, size: usize, rng: &mut Rng) -> Image {
        let dx = rng.uniform_range(-0.04, 0.04) as f32;
        let dy = rng.uniform_range(-0.04, 0.04) as f32;
        let gain = 1.0 + rng.uniform_range(-0.08, 0.08) as f32;
        let (cx, cy) = (self.center.0 + dx, self.center.1 + dy);
        let (rx, ry) = self.radii;
        let px = 1.0 / size as f32;
        let mut img = Image::filled(size, size, 0.0);
        for y in 0..size {
            for x in 0..size {
                let fx = (x as f32 + 0.5) * px;
                let fy = (y as f32 + 0.5) * px;
                let mut col = [0.0f32; 3];
                for c in 0..3 {
                    let mut v = self.bg[c] + self.tilt[c] * (fx - 0.5) + self.tilt[(c + 1) % 3] * (fy - 0.5);
                    for &(kx, ky, ph, amp, ch) in &self.waves {
                        if ch == c {
                            v += amp * (6.283 * (kx * fx + ky * fy) + ph).cos();
                        }
                    }
                    col[c] = v;
                }
                let e = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
                // Soft edge about one pixel wide.
                let inside = smoothstep(1.0 + 2.0 * px / rx, 1.0 - 2.0 * px / rx, e);
                if inside > 0.0 {
                    let shade = 1.0 - 0.3 * e;
                    for c in 0..3 {
                        col[c] += inside * (self.skin[c] * shade - col[c]);
                    }
                }
                for side in [-1.0f32, 1.0] {
                    let ex = ((fx - (cx + side * 0.4 * rx)) / (0.2 * rx)).powi(2);
                    let ey = ((fy - (cy - 0.25 * ry)) / (0.1 * ry)).powi(2);
                    if ex + ey < 1.0 {
                        col = [0.12, 0.1, 0.1];
                    }
                }
                let mx = ((fx - cx) / (0.35 * rx)).powi(2);
                let my = ((fy - (cy + 0.45 * ry)) / (0.08 * ry)).powi(2);
                if mx + my < 1.0 {
                    col = self.lip;
                }
                for c in 0..3 {
                    let grain = rng.normal() as f32 * 0.01;
                    img.set(c, y, x, (col[c] * gain + grain).clamp(0.0, 1.0));
                }
            }
        }
        img
    }

    /// Pixel bounds of the face box, inset by `margin` pixels.
    fn face_box(&self, size: usize, margin: usize) -> (usize, usize, usize, usize) {
        let s = size as f32;
        let x0 = ((self.center.0 - 0.8 * self.radii.0) * s) as usize + margin;
        let x1 = ((self.center.0 + 0.8 * self.radii.0) * s) as usize;
        let y0 = ((self.center.1 - 0.8 * self.radii.1) * s) as usize + margin;
        let y1 = ((self.center.1 + 0.8 * self.radii.1) * s) as usize;
        (x0, x1.saturating_sub(margin).max(x0 + 1), y0, y1.saturating_sub(margin).max(y0 + 1))
    }
}

fn smoothstep(edge0: f32, edge1: f32, x: f32) -> f32 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Per-video manipulation parameters, fixed across that video's frames.
#[derive(Debug, Clone)]
enum Manipulation {
    PatchSwap { a: (usize, usize), b: (usize, usize), size: usize },
    HfNoiseBlob { center: (f32, f32), radius: f32, seed: u64, amp: f32 },
    WarpBand { y0: usize, height: usize, amp: f32, period: f32, phase: f32 },
    BlendSeam { x0: usize, y0: usize, w: usize, h: usize, shift: (isize, isize), alpha: f32 },
}

impl Manipulation {
    fn draw(family: Family, layout: &FaceLayout, size: usize, rng: &mut Rng) -> Self {
        let scale = size as f32 / 32.0;
        let px = |v: f32| ((v * scale).round() as usize).max(1);
        let (fx0, fx1, fy0, fy1) = layout.face_box(size, 0);
        let pick = |rng: &mut Rng, lo: usize, hi: usize| lo + rng.below(hi.saturating_sub(lo).max(1));
        match family {
            Family::PatchSwap => {
                let s = px(5.0 + rng.below(3) as f32);
                let xmax = fx1.saturating_sub(s).max(fx0 + 1);
                let ymax = fy1.saturating_sub(s).max(fy0 + 1);
                let a = (pick(rng, fx0, xmax), pick(rng, fy0, ymax));
                let mut b = a;
                for _ in 0..64 {
                    b = (pick(rng, fx0, xmax), pick(rng, fy0, ymax));
                    if a.0.abs_diff(b.0) >= s || a.1.abs_diff(b.1) >= s {
                        break;
                    }
                }
                let limit = size - s;
                Manipulation::PatchSwap {
                    a: (a.0.min(limit), a.1.min(limit)),
                    b: (b.0.min(limit), b.1.min(limit)),
                    size: s,
                }
            }
            Family::HfNoiseBlob => Manipulation::HfNoiseBlob {
                center: (
                    pick(rng, fx0 + 2, fx1.saturating_sub(2)) as f32 + 0.5,
                    pick(rng, fy0 + 2, fy1.saturating_sub(2)) as f32 + 0.5,
                ),
                radius: rng.uniform_range(3.5, 5.5) as f32 * scale,
                seed: rng.next_u64(),
                amp: rng.uniform_range(0.3, 0.4) as f32,
            },
            Family::WarpBand => {
                let height = px(5.0 + rng.below(4) as f32);
                Manipulation::WarpBand {
                    y0: pick(rng, fy0, fy1.saturating_sub(height)).min(size - height),
                    height,
                    amp: rng.uniform_range(2.5, 4.0) as f32 * scale,
                    period: rng.uniform_range(4.0, 8.0) as f32 * scale,
                    phase: rng.uniform_range(0.0, 6.283) as f32,
                }
            }
            Family::BlendSeam => {
                let w = px(9.0 + rng.below(5) as f32);
                let h = px(7.0 + rng.below(5) as f32);
                let sign = |rng: &mut Rng| if rng.bernoulli(0.5) { 1 } else { -1 };
                let shift = (
                    sign(rng) * (px(3.0) + rng.below(px(2.0) + 1)) as isize,
                    sign(rng) * (px(2.0) + rng.below(px(2.0) + 1)) as isize,
                );
                Manipulation::BlendSeam {
                    x0: pick(rng, fx0, fx1.saturating_sub(w)).min(size - w),
                    y0: pick(rng, fy0, fy1.saturating_sub(h)).min(size - h),
                    w,
                    h,
                    shift,
                    alpha: rng.uniform_range(0.85, 1.0) as f32,
                }
            }
        }
    }

    /// Applies the edit; returns the edited image and its support mask.
    fn apply(&self, img: &Image) -> (Image, Vec<bool>) {
        let (h, w) = (img.height, img.width);
        let mut out = img.clone();
        let mut support = vec![false; h * w];
        match *self {
            Manipulation::PatchSwap { a, b, size } => {
                for dy in 0..size {
                    for dx in 0..size {
                        let (ax, ay) = (a.0 + dx, a.1 + dy);
                        let (bx, by) = (b.0 + dx, b.1 + dy);
                        for c in 0..3 {
                            out.set(c, ay, ax, img.get(c, by, bx));
                        }
                        support[ay * w + ax] = true;
                    }
                }
                for dy in 0..size {
                    for dx in 0..size {
                        let (ax, ay) = (a.0 + dx, a.1 + dy);
                        let (bx, by) = (b.0 + dx, b.1 + dy);
                        for c in 0..3 {
                            out.set(c, by, bx, img.get(c, ay, ax));
                        }
                        support[by * w + bx] = true;
                    }
                }
            }
            Manipulation::HfNoiseBlob { center, radius, seed, amp } => {
                let mut rng = Rng::new(seed);
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (x as f32 + 0.5 - center.0).powi(2) + (y as f32 + 0.5 - center.1).powi(2);
                        let n = if rng.bernoulli(0.5) { amp } else { -amp };
                        if d2 <= radius * radius {
                            let checker = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                            for c in 0..3 {
                                let v = img.get(c, y, x) + 0.5 * (n + checker * amp);
                                out.set(c, y, x, v.clamp(0.0, 1.0));
                            }
                            support[y * w + x] = true;
                        }
                    }
                }
            }
            Manipulation::WarpBand { y0, height, amp, period, phase } => {
                for y in y0..(y0 + height).min(h) {
                    let t = (y - y0) as f32 + 0.5;
                    let envelope = (std::f32::consts::PI * t / height as f32).sin();
                    let shift = amp * envelope * (6.283 * t / period + phase).sin();
                    for x in 0..w {
                        let sx = x as f32 + shift;
                        let x0 = sx.floor();
                        let fr = sx - x0;
                        for c in 0..3 {
                            let a = img.get_clamped(c, y as isize, x0 as isize);
                            let b = img.get_clamped(c, y as isize, x0 as isize + 1);
                            out.set(c, y, x, a * (1.0 - fr) + b * fr);
                        }
                        support[y * w + x] = true;
                    }
                }
            }
            Manipulation::BlendSeam { x0, y0, w: bw, h: bh, shift, alpha } => {
                for y in y0..y0 + bh {
                    for x in x0..x0 + bw {
                        for c in 0..3 {
                            let src = img.get_clamped(c, y as isize + shift.1, x as isize + shift.0);
                            out.set(c, y, x, (1.0 - alpha) * img.get(c, y, x) + alpha * src);
                        }
                        support[y * w + x] = true;
                    }
                }
            }
        }
        if !matches!(self, Manipulation::HfNoiseBlob { .. }) {
            add_residue(&mut out, &support, BLEND_RESIDUE);
        }
        (out, support)
    }
}

/// Faint checkerboard left on the support by re-encoding the pasted region.
const BLEND_RESIDUE: f32 = 0.12;

fn add_residue(img: &mut Image, support: &[bool], amp: f32) {
    let w = img.width;
    for (p, _) in support.iter().enumerate().filter(|(_, s)| **s) {
        let (y, x) = (p / w, p % w);
        let checker = if (x + y) % 2 == 0 { 0.5 } else { -0.5 };
        for c in 0..3 {
            let v = img.get(c, y, x) + checker * amp;
            img.set(c, y, x, v.clamp(0.0, 1.0));
        }
    }
}

/// One generated frame with its label and, for fakes, the edit support.
#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub record: SampleRecord,
    pub image: Image,
    pub support: Option<Vec<bool>>,
}

/// A real frame, its forged counterpart and the edit support.
pub fn forged_pair(family: Family, size: usize, seed: u64) -> (Image, Image, Vec<bool>) {
    let mut rng = Rng::new(seed);
    let layout = FaceLayout::draw(&mut rng);
    let manip = Manipulation::draw(family, &layout, size, &mut rng);
    let real = layout.render(size, &mut rng).quantized();
    let (fake, support) = manip.apply(&real);
    (real, fake.quantized(), support)
}

/// Generates the frames of a corpus in memory, reals first.
pub fn generate(spec: &SynthSpec) -> Vec<SynthFrame> {
    let fpv = spec.frames_per_video.max(1);
    let mut frames = Vec::with_capacity(2 * spec.samples_per_class);
    for label in [0u8, 1] {
        let class = if label == 0 { "real" } else { "fake" };
        let videos = spec.samples_per_class.div_ceil(fpv);
        for v in 0..videos {
            let mut rng = Rng::derive(spec.seed, &format!("{}/{class}/{v}", spec.family));
            let layout = FaceLayout::draw(&mut rng);
            let manip = (label == 1).then(|| Manipulation::draw(spec.family, &layout, spec.image_size, &mut rng));
            let n = fpv.min(spec.samples_per_class - v * fpv);
            let video_id = format!("{}-{class}-{v:03}", spec.family);
            for f in 0..n {
                let base = layout.render(spec.image_size, &mut rng).quantized();
                let (image, support) = match &manip {
                    Some(m) => {
                        let (img, sup) = m.apply(&base);
                        (img.quantized(), Some(sup))
                    }
                    None => (base, None),
                };
                frames.push(SynthFrame {
                    record: SampleRecord {
                        path: PathBuf::from(format!("{video_id}-{f:02}.ppm")),
                        label,
                        video_id: Some(video_id.clone()),
                        domain: spec.family.name().to_string(),
                    },
                    image,
                    support,
                });
            }
        }
    }
    frames
}

/// Writes `<name>.jsonl` and the images under `<name>/` in `out_dir`.
pub fn synthesize_dataset(spec: &SynthSpec, out_dir: &Path, name: &str) -> Result<PathBuf> {
    let img_dir = out_dir.join(name);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut manifest = String::new();
    for frame in generate(spec) {
        let rel = Path::new(name).join(&frame.record.path);
        let path = out_dir.join(&rel);
        fs::write(&path, encode_ppm(&frame.image)).map_err(|e| Error::io(&path, e))?;
        let rec = SampleRecord {
            path: rel,
            ..frame.record
        };
        manifest.push_str(&serde_json::to_string(&rec)?);
        manifest.push('\n');
    }
    let mpath = out_dir.join(format!("{name}.jsonl"));
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_balance_and_video_structure() {
        let spec = SynthSpec::new(Family::PatchSwap, 20, 7);
        let frames = generate(&spec);
        assert_eq!(frames.iter().filter(|f| f.record.label == 0).count(), 20);
        assert_eq!(frames.iter().filter(|f| f.record.label == 1).count(), 20);
        let last = frames.iter().filter(|f| f.record.video_id.as_deref() == Some("patch_swap-real-002")).count();
        assert_eq!(last, 4);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::new(Family::WarpBand, 9, 7);
        let a = generate(&spec);
        let b = generate(&spec);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.record, y.record);
        }
    }

    #[test]
    fn forgeries_are_localized() {
        for family in Family::ALL {
            for seed in 0..40 {
                let (real, fake, support) = forged_pair(family, 32, seed);
                let n = real.height * real.width;
                let mut changed = 0;
                let mut outside_equal = 0;
                let mut outside = 0;
                for p in 0..n {
                    let differs = (0..3).any(|c| real.data[c * n + p] != fake.data[c * n + p]);
                    changed += usize::from(differs);
                    if !support[p] {
                        outside += 1;
                        outside_equal += usize::from(!differs);
                    }
                }
                let frac = changed as f64 / n as f64;
                assert!((0.01..=0.40).contains(&frac), "{family} seed {seed}: {frac}");
                assert!(outside_equal as f64 >= 0.99 * outside as f64, "{family} seed {seed}");
            }
        }
    }
}
