use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{write_pgm, GrayImage};

/// How a raw circular code is reduced before pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LbpVariant {
    #[serde(rename = "raw")]
    Raw,
    #[serde(rename = "uniform2")]
    Uniform2,
    #[serde(rename = "riu2")]
    RotationInvariantUniform2,
}

impl LbpVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            LbpVariant::Raw => "raw",
            LbpVariant::Uniform2 => "uniform2",
            LbpVariant::RotationInvariantUniform2 => "riu2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(LbpVariant::Raw),
            "uniform2" => Ok(LbpVariant::Uniform2),
            "riu2" => Ok(LbpVariant::RotationInvariantUniform2),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected raw, uniform2 or riu2)"
            ))),
        }
    }
}

/// Circular neighborhood descriptor: `points` samples on a circle of
/// `radius` pixels around each center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbpConfig {
    pub points: u32,
    pub radius: f64,
    pub variant: LbpVariant,
}

impl LbpConfig {
    pub fn new(points: u32, radius: f64, variant: LbpVariant) -> Result<Self> {
        let cfg = LbpConfig {
            points,
            radius,
            variant,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points < 1 || self.points > 24 {
            return Err(Error::config(format!(
                "points = {} out of range 1..=24",
                self.points
            )));
        }
        if !self.radius.is_finite() || self.radius <= 0.0 {
            return Err(Error::config(format!(
                "radius = {} must be finite and positive",
                self.radius
            )));
        }
        Ok(())
    }

    /// Number of distinct raw codes, 2^points.
    pub fn code_count(&self) -> usize {
        1usize << self.points
    }

    /// Number of histogram bins after reduction by `variant`.
    pub fn bin_count(&self) -> usize {
        let p = self.points as usize;
        match self.variant {
            LbpVariant::Raw => 1usize << p,
            // one circular run of ones (p positions, p-1 lengths) plus the
            // two constant codes, plus the shared non-uniform bucket
            LbpVariant::Uniform2 => p * (p - 1) + 2 + 1,
            LbpVariant::RotationInvariantUniform2 => p + 2,
        }
    }
}

/// Per-sample displacements (dy, dx) for the circle, sample p at angle
/// 2*pi*p/points from the positive x axis with y growing downward.
/// Components within 1e-6 of an integer are snapped so that samples meant
/// to land on the grid are exact reads instead of interpolations.
pub fn sample_offsets(cfg: &LbpConfig) -> Vec<(f64, f64)> {
    let p = cfg.points as usize;
    (0..p)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / p as f64;
            let dx = snap(cfg.radius * angle.cos());
            let dy = snap(cfg.radius * angle.sin());
            (dy, dx)
        })
        .collect()
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= 1e-6 {
        r
    } else {
        v
    }
}

/// Bilinear interpolation at fractional (y, x). The incremental form keeps
/// constant neighborhoods exact (a region of equal values interpolates to
/// that value with no rounding residue). Caller guarantees
/// 0 <= y <= H-1 and 0 <= x <= W-1.
pub fn bilinear_sample(img: &GrayImage, y: f64, x: f64) -> f64 {
    debug_assert!(y >= 0.0 && y <= (img.height() - 1) as f64);
    debug_assert!(x >= 0.0 && x <= (img.width() - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(img.height() - 1);
    let x1 = (x0 + 1).min(img.width() - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let v00 = img.get(y0, x0);
    let v01 = img.get(y0, x1);
    let v10 = img.get(y1, x0);
    let v11 = img.get(y1, x1);
    let top = v00 + fx * (v01 - v00);
    let bot = v10 + fx * (v11 - v10);
    top + fy * (bot - top)
}

/// The `points` neighborhood samples around (row, col). Errors when the
/// circle leaves the image; `compute_code_image` treats such centers as
/// invalid instead of failing.
pub fn sample_circle(img: &GrayImage, row: usize, col: usize, cfg: &LbpConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if row >= img.height() || col >= img.width() {
        return Err(Error::config(format!(
            "center ({row}, {col}) outside {}x{} image",
            img.height(),
            img.width()
        )));
    }
    let offsets = sample_offsets(cfg);
    let mut samples = Vec::with_capacity(offsets.len());
    for &(dy, dx) in &offsets {
        let y = row as f64 + dy;
        let x = col as f64 + dx;
        if !in_bounds(img, y, x) {
            return Err(Error::config(format!(
                "sampling circle at ({row}, {col}) leaves the {}x{} image",
                img.height(),
                img.width()
            )));
        }
        samples.push(bilinear_sample(img, y, x));
    }
    Ok(samples)
}

fn in_bounds(img: &GrayImage, y: f64, x: f64) -> bool {
    y >= 0.0 && y <= (img.height() - 1) as f64 && x >= 0.0 && x <= (img.width() - 1) as f64
}

/// Raw circular code: bit p is set when sample p is >= the center value.
pub fn lbp_code(samples: &[f64], center: f64) -> u32 {
    let mut code = 0u32;
    for (p, &s) in samples.iter().enumerate() {
        if s >= center {
            code |= 1 << p;
        }
    }
    code
}

/// Raw code image with a validity mask; border centers whose circle falls
/// outside the image carry code 0 and valid = false.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeImage {
    height: usize,
    width: usize,
    codes: Vec<u32>,
    valid: Vec<bool>,
}

impl CodeImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn code(&self, row: usize, col: usize) -> u32 {
        self.codes[row * self.width + col]
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Compute the raw code at every pixel. No padding is invented: any center
/// whose sampling circle leaves the image is marked invalid. Errors when no
/// pixel has a fully interior circle.
pub fn compute_code_image(img: &GrayImage, cfg: &LbpConfig) -> Result<CodeImage> {
    cfg.validate()?;
    let offsets = sample_offsets(cfg);
    let (h, w) = (img.height(), img.width());
    let mut codes = vec![0u32; h * w];
    let mut valid = vec![false; h * w];
    let mut n_valid = 0usize;
    let mut samples = vec![0.0; offsets.len()];
    for row in 0..h {
        for col in 0..w {
            let mut ok = true;
            for &(dy, dx) in &offsets {
                if !in_bounds(img, row as f64 + dy, col as f64 + dx) {
                    ok = false;
                    break;
                }
            }
            if !ok {
                continue;
            }
            for (i, &(dy, dx)) in offsets.iter().enumerate() {
                samples[i] = bilinear_sample(img, row as f64 + dy, col as f64 + dx);
            }
            let idx = row * w + col;
            codes[idx] = lbp_code(&samples, img.get(row, col));
            valid[idx] = true;
            n_valid += 1;
        }
    }
    if n_valid == 0 {
        return Err(Error::config(format!(
            "no valid pixels: every sampling circle (radius {}) leaves the {h}x{w} image",
            cfg.radius
        )));
    }
    Ok(CodeImage {
        height: h,
        width: w,
        codes,
        valid,
    })
}

/// Number of 0/1 transitions around the circular bit pattern.
pub fn transition_count(code: u32, points: u32) -> u32 {
    let mask = if points == 32 {
        u32::MAX
    } else {
        (1u32 << points) - 1
    };
    let code = code & mask;
    let rotated = ((code << 1) | (code >> (points - 1))) & mask;
    (code ^ rotated).count_ones()
}

/// Sentinel value `reduce_code` returns for non-uniform codes under the
/// uniform2 variant: one past the largest raw code.
pub fn nonuniform_sentinel(cfg: &LbpConfig) -> u32 {
    1u32 << cfg.points
}

/// Reduce a raw code according to the configured variant:
/// raw passes through; uniform2 keeps codes with at most two circular
/// transitions and folds everything else into a single sentinel bucket;
/// riu2 maps uniform codes to their popcount and the rest to points+1.
pub fn reduce_code(code: u32, cfg: &LbpConfig) -> u32 {
    match cfg.variant {
        LbpVariant::Raw => code,
        LbpVariant::Uniform2 => {
            if transition_count(code, cfg.points) <= 2 {
                code
            } else {
                nonuniform_sentinel(cfg)
            }
        }
        LbpVariant::RotationInvariantUniform2 => {
            if transition_count(code, cfg.points) <= 2 {
                code.count_ones()
            } else {
                cfg.points + 1
            }
        }
    }
}

/// Dense bin index for each raw code under `cfg.variant`. For uniform2 the
/// uniform codes occupy bins 0.. in ascending code order and the shared
/// bucket is the last bin.
fn bin_indices(cfg: &LbpConfig) -> Vec<usize> {
    let n = cfg.code_count();
    let mut map = vec![0usize; n];
    match cfg.variant {
        LbpVariant::Raw => {
            for (code, slot) in map.iter_mut().enumerate() {
                *slot = code;
            }
        }
        LbpVariant::Uniform2 => {
            let bucket = cfg.bin_count() - 1;
            let mut next = 0usize;
            for (code, slot) in map.iter_mut().enumerate() {
                if transition_count(code as u32, cfg.points) <= 2 {
                    *slot = next;
                    next += 1;
                } else {
                    *slot = bucket;
                }
            }
            debug_assert_eq!(next, bucket);
        }
        LbpVariant::RotationInvariantUniform2 => {
            for (code, slot) in map.iter_mut().enumerate() {
                *slot = reduce_code(code as u32, cfg) as usize;
            }
        }
    }
    map
}

/// L1-normalized histogram over the reduced codes of the valid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeHistogram {
    pub bins: Vec<f64>,
}

impl CodeHistogram {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

pub fn pool_histogram(codes: &CodeImage, cfg: &LbpConfig) -> Result<CodeHistogram> {
    cfg.validate()?;
    let map = bin_indices(cfg);
    let mut counts = vec![0u64; cfg.bin_count()];
    let mut total = 0u64;
    for (i, &code) in codes.codes.iter().enumerate() {
        if codes.valid[i] {
            counts[map[code as usize]] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::config("code image has no valid pixels"));
    }
    let bins = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(CodeHistogram { bins })
}

/// Export a raw 8-point code image as binary PGM, one byte per code.
/// Invalid border pixels are written as 0; the mask itself is geometric
/// (derivable from the configuration) and is not stored.
pub fn write_code_image_pgm(
    codes: &CodeImage,
    cfg: &LbpConfig,
    path: &Path,
    comment: Option<&str>,
) -> Result<()> {
    if cfg.variant != LbpVariant::Raw || cfg.points != 8 {
        return Err(Error::config(
            "PGM export requires variant = raw and points = 8 (one byte per code)",
        ));
    }
    let bytes: Vec<u8> = codes
        .codes
        .iter()
        .zip(&codes.valid)
        .map(|(&c, &v)| if v { c as u8 } else { 0 })
        .collect();
    write_pgm(path, codes.height, codes.width, &bytes, comment)
}
