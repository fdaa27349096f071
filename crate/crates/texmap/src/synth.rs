//! Procedural texture dataset generation: oriented sinusoidal gratings,
//! checkerboards at varied scales, and low-pass filtered noise, written
//! as a folder-per-class PNG tree. Every image is rendered from its own
//! derived seed, so datasets are reproducible file for file.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{save_color_png, ColorImage};
use crate::seed::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            per_class: 50,
            side: 32,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.per_class == 0 {
            return Err(Error::config("per_class must be positive"));
        }
        if self.side < 8 {
            return Err(Error::config("side must be at least 8 pixels"));
        }
        Ok(())
    }
}

/// Texture family of a class. Classes cycle through two grating
/// orientations, checkerboards, and filtered noise; each full cycle
/// shifts the family parameters (frequency, angle, cell size, blur).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    GratingA,
    GratingB,
    Checker,
    Noise,
}

fn family_of(class: usize) -> (Family, usize) {
    let family = match class % 4 {
        0 => Family::GratingA,
        1 => Family::GratingB,
        2 => Family::Checker,
        _ => Family::Noise,
    };
    (family, class / 4)
}

pub fn class_dir_name(class: usize) -> String {
    let (family, _) = family_of(class);
    let tag = match family {
        Family::GratingA => "grating_a",
        Family::GratingB => "grating_b",
        Family::Checker => "checker",
        Family::Noise => "noise",
    };
    format!("c{class:02}_{tag}")
}

/// Grayscale base pattern in [0, 1] before photometric jitter.
fn base_pattern(family: Family, tier: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = side * side;
    match family {
        Family::GratingA | Family::GratingB => {
            let (theta, freq) = match family {
                // two well-separated orientation/frequency ladders
                Family::GratingA => (0.15 + 0.5 * tier as f64, 3.0 + tier as f64),
                _ => (1.45 + 0.5 * tier as f64, 5.0 + tier as f64),
            };
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let (s, c) = theta.sin_cos();
            let scale = std::f64::consts::TAU * freq / side as f64;
            let mut px = Vec::with_capacity(n);
            for y in 0..side {
                for x in 0..side {
                    let u = scale * (c * x as f64 + s * y as f64) + phase;
                    px.push(0.5 + 0.5 * u.sin());
                }
            }
            px
        }
        Family::Checker => {
            let cell = 3 + 2 * tier;
            let ox = rng.random_range(0..cell);
            let oy = rng.random_range(0..cell);
            let mut px = Vec::with_capacity(n);
            for y in 0..side {
                for x in 0..side {
                    let parity = ((x + ox) / cell + (y + oy) / cell) % 2;
                    px.push(if parity == 0 { 0.15 } else { 0.85 });
                }
            }
            px
        }
        Family::Noise => {
            let radius = 1 + tier;
            let raw: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let blurred = box_blur(&raw, side, radius);
            // stretch the smoothed field back to full contrast
            let lo = blurred.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = blurred.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-9);
            blurred.iter().map(|v| (v - lo) / span).collect()
        }
    }
}

/// Separable mean filter with clamped borders.
fn box_blur(pixels: &[f64], side: usize, radius: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for a in 0..side {
            for b in 0..side {
                let mut sum = 0.0;
                let mut count = 0.0;
                for d in -(radius as isize)..=(radius as isize) {
                    let t = b as isize + d;
                    if t < 0 || t >= side as isize {
                        continue;
                    }
                    let (y, x) = if horizontal { (a, t as usize) } else { (t as usize, a) };
                    sum += src[y * side + x];
                    count += 1.0;
                }
                let (y, x) = if horizontal { (a, b) } else { (b, a) };
                dst[y * side + x] = sum / count;
            }
        }
        dst
    };
    pass(&pass(pixels, true), false)
}

/// Render one image: base pattern, then contrast/brightness jitter,
/// per-channel tint (so raw color is uninformative about the class), and
/// additive pixel noise.
fn render(class: usize, index: usize, cfg: &SynthConfig) -> Result<ColorImage> {
    let (family, tier) = family_of(class);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, class as u64), index as u64));
    let base = base_pattern(family, tier, cfg.side, &mut rng);
    let contrast = rng.random_range(0.65..0.95);
    let brightness = rng.random_range(-0.05..0.05);
    let tint = [
        rng.random_range(0.6..1.0),
        rng.random_range(0.6..1.0),
        rng.random_range(0.6..1.0),
    ];
    let mut pixels = Vec::with_capacity(base.len());
    for &g in &base {
        let noise = rng.random_range(-0.03..0.03);
        let v = 0.5 + contrast * (g - 0.5) + brightness + noise;
        let mut px = [0.0; 3];
        for c in 0..3 {
            px[c] = (tint[c] * v).clamp(0.0, 1.0);
        }
        pixels.push(px);
    }
    ColorImage::new(cfg.side, cfg.side, pixels)
}

/// Generate the dataset under `root` and return the files written, in
/// deterministic order.
pub fn synth_dataset(root: &Path, cfg: &SynthConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut written = Vec::with_capacity(cfg.classes * cfg.per_class);
    for class in 0..cfg.classes {
        let dir = root.join(class_dir_name(class));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for index in 0..cfg.per_class {
            let img = render(class, index, cfg)?;
            let path = dir.join(format!("{index:03}.png"));
            save_color_png(&img, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}
