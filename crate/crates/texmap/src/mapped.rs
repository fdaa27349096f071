use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::index_dataset;
use crate::embedding::CodeEmbedding;
use crate::error::{Error, Result};
use crate::image::{load_image, quantize_u8, GrayImage};
use crate::lbp::{compute_code_image, LbpConfig, LbpVariant};

/// Multi-channel image in embedding space, channel-major storage:
/// channel c of pixel (r, w) lives at `planes[c*h*w + r*w + col]`. The
/// validity mask mirrors the code image the pixels came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedImage {
    height: usize,
    width: usize,
    channels: usize,
    planes: Vec<f64>,
    valid: Vec<bool>,
}

impl MappedImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.planes[channel * self.height * self.width + row * self.width + col]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.planes[c * hw..(c + 1) * hw]
    }

    pub fn planes(&self) -> &[f64] {
        &self.planes
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
}

fn check_embedding(emb: &CodeEmbedding, cfg: &LbpConfig) -> Result<()> {
    if cfg.variant != LbpVariant::Raw {
        return Err(Error::config(
            "mapped images are built from raw codes; set variant = raw",
        ));
    }
    if emb.count() != cfg.code_count() {
        return Err(Error::config(format!(
            "embedding holds {} points but a {}-point configuration produces {} codes",
            emb.count(),
            cfg.points,
            cfg.code_count()
        )));
    }
    if emb.coords.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::config(
            "embedding coordinates fall outside [0, 1]; normalize the embedding first",
        ));
    }
    Ok(())
}

/// Replace every pixel by the embedding point of its raw code. Invalid
/// border pixels (where the sampling circle leaves the image) are filled
/// with the embedding of the all-ones code 2^P - 1, the code a flat
/// region produces.
pub fn encode_image(
    img: &GrayImage,
    emb: &CodeEmbedding,
    cfg: &LbpConfig,
) -> Result<MappedImage> {
    check_embedding(emb, cfg)?;
    let codes = compute_code_image(img, cfg)?;
    let (h, w) = (codes.height(), codes.width());
    let dim = emb.dim;
    let fill = emb.point(cfg.code_count() - 1);
    let mut planes = vec![0.0f64; dim * h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let point = if codes.valid()[i] {
                emb.point(codes.codes()[i] as usize)
            } else {
                fill
            };
            for (d, &v) in point.iter().enumerate() {
                planes[d * h * w + i] = v;
            }
        }
    }
    Ok(MappedImage {
        height: h,
        width: w,
        channels: dim,
        planes,
        valid: codes.valid().to_vec(),
    })
}

/// Rescale a slice into [0, 1] in place; a constant slice becomes all 0.5.
pub(crate) fn minmax_unit(vals: &mut [f64]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let span = hi - lo;
        for v in vals.iter_mut() {
            *v = (*v - lo) / span;
        }
    } else {
        for v in vals.iter_mut() {
            *v = 0.5;
        }
    }
}

/// Keep only channel 0 — the axis with the largest eigenvalue, carrying
/// the most dissimilarity structure — renormalized to [0, 1] over the
/// whole image (a constant channel maps to 0.5).
pub fn collapse_to_single_channel(m: &MappedImage) -> Result<MappedImage> {
    if m.channels < 1 {
        return Err(Error::config("mapped image has no channels"));
    }
    let mut plane = m.channel(0).to_vec();
    minmax_unit(&mut plane);
    Ok(MappedImage {
        height: m.height,
        width: m.width,
        channels: 1,
        planes: plane,
        valid: m.valid.clone(),
    })
}

/// Write a 3-channel mapped image as an 8-bit RGB PNG (or a single-channel
/// one as grayscale PNG), quantizing with round(v*255).
pub fn write_mapped_png(m: &MappedImage, path: &Path) -> Result<()> {
    match m.channels {
        3 => {
            let mut out = image::RgbImage::new(m.width as u32, m.height as u32);
            for r in 0..m.height {
                for c in 0..m.width {
                    out.put_pixel(
                        c as u32,
                        r as u32,
                        image::Rgb([
                            quantize_u8(m.get(0, r, c)),
                            quantize_u8(m.get(1, r, c)),
                            quantize_u8(m.get(2, r, c)),
                        ]),
                    );
                }
            }
            out.save(path)
                .map_err(|e| Error::data(format!("{}: {e}", path.display())))
        }
        1 => {
            let mut out = image::GrayImage::new(m.width as u32, m.height as u32);
            for r in 0..m.height {
                for c in 0..m.width {
                    out.put_pixel(c as u32, r as u32, image::Luma([quantize_u8(m.get(0, r, c))]));
                }
            }
            out.save(path)
                .map_err(|e| Error::data(format!("{}: {e}", path.display())))
        }
        n => Err(Error::config(format!(
            "cannot write a {n}-channel mapped image as PNG (1 or 3 channels)"
        ))),
    }
}

/// Read a quantized mapped image back. The validity mask is not stored in
/// the file; all pixels are treated as valid.
pub fn read_mapped_png(path: &Path) -> Result<MappedImage> {
    let loaded = load_image(path)?;
    Ok(match loaded {
        crate::image::LoadedImage::Gray(g) => MappedImage {
            height: g.height(),
            width: g.width(),
            channels: 1,
            planes: g.pixels().to_vec(),
            valid: vec![true; g.height() * g.width()],
        },
        crate::image::LoadedImage::Color(c) => {
            let (h, w) = (c.height(), c.width());
            let mut planes = vec![0.0f64; 3 * h * w];
            for (i, px) in c.pixels().iter().enumerate() {
                for d in 0..3 {
                    planes[d * h * w + i] = px[d];
                }
            }
            MappedImage {
                height: h,
                width: w,
                channels: 3,
                planes,
                valid: vec![true; h * w],
            }
        }
    })
}

/// Cache-invalidation sidecar written at the output root: any change to
/// the configuration or the embedding changes the checksum and triggers a
/// full re-encode.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EncodeMeta {
    pub points: u32,
    pub radius: f64,
    pub dim: usize,
    pub embedding_sha256: String,
}

pub fn embedding_checksum(emb: &CodeEmbedding, cfg: &LbpConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(cfg.points.to_le_bytes());
    hasher.update(cfg.radius.to_le_bytes());
    hasher.update((emb.dim as u64).to_le_bytes());
    for v in &emb.coords {
        hasher.update(v.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BatchEncodeReport {
    pub written: usize,
    pub skipped: usize,
    pub failed: usize,
}

const META_FILE: &str = "encode_meta.json";

/// Encode every image under `dataset_root` (folder-per-class) into a
/// mirrored tree of quantized mapped PNGs. Outputs that already exist are
/// skipped unless `force` is set or the meta sidecar shows the
/// configuration or embedding changed. Unreadable inputs are logged,
/// counted as failures and do not abort the run.
pub fn batch_encode(
    dataset_root: &Path,
    emb: &CodeEmbedding,
    cfg: &LbpConfig,
    out_root: &Path,
    force: bool,
) -> Result<BatchEncodeReport> {
    check_embedding(emb, cfg)?;
    let index = index_dataset(dataset_root)?;
    let meta = EncodeMeta {
        points: cfg.points,
        radius: cfg.radius,
        dim: emb.dim,
        embedding_sha256: embedding_checksum(emb, cfg),
    };
    let meta_path = out_root.join(META_FILE);
    let cache_valid = match std::fs::read_to_string(&meta_path) {
        Ok(text) => serde_json::from_str::<EncodeMeta>(&text)
            .map(|old| old == meta)
            .unwrap_or(false),
        Err(_) => false,
    };
    let overwrite = force || !cache_valid;

    std::fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    for class in &index.classes {
        let dir = out_root.join(class);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let outcomes: Vec<std::result::Result<bool, ()>> = index
        .samples
        .par_iter()
        .map(|sample| {
            let stem = sample
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let out_path = out_root
                .join(&index.classes[sample.class])
                .join(format!("{stem}.png"));
            if !overwrite && out_path.exists() {
                return Ok(false);
            }
            let encode = || -> Result<()> {
                let gray = load_image(&sample.path)?.into_gray();
                let mapped = encode_image(&gray, emb, cfg)?;
                write_mapped_png(&mapped, &out_path)
            };
            match encode() {
                Ok(()) => Ok(true),
                Err(e) => {
                    log::warn!("skipping {}: {e}", sample.path.display());
                    Err(())
                }
            }
        })
        .collect();

    let mut report = BatchEncodeReport::default();
    for o in outcomes {
        match o {
            Ok(true) => report.written += 1,
            Ok(false) => report.skipped += 1,
            Err(()) => report.failed += 1,
        }
    }
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::data(format!("meta serialization: {e}")))?;
    std::fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::build_code_embedding;
    use crate::image::save_gray_png;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raw_cfg() -> LbpConfig {
        LbpConfig::new(8, 1.0, LbpVariant::Raw).unwrap()
    }

    fn random_gray(seed: u64, h: usize, w: usize) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(h, w, |_, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn encode_composes_code_and_lookup() {
        let cfg = raw_cfg();
        let emb = build_code_embedding(8, 3).unwrap();
        let img = random_gray(2, 10, 8);
        let mapped = encode_image(&img, &emb, &cfg).unwrap();
        assert_eq!(mapped.channels(), 3);
        let codes = compute_code_image(&img, &cfg).unwrap();
        for r in 0..10 {
            for c in 0..8 {
                let expect = if codes.is_valid(r, c) {
                    emb.point(codes.code(r, c) as usize)
                } else {
                    emb.point(255)
                };
                for d in 0..3 {
                    assert_eq!(mapped.get(d, r, c), expect[d]);
                }
                assert_eq!(mapped.is_valid(r, c), codes.is_valid(r, c));
            }
        }
    }

    #[test]
    fn encode_validates_inputs() {
        let emb = build_code_embedding(8, 3).unwrap();
        let img = random_gray(3, 8, 8);
        let mut cfg = raw_cfg();
        cfg.variant = LbpVariant::Uniform2;
        assert!(encode_image(&img, &emb, &cfg).is_err());
        let cfg16 = LbpConfig::new(16, 2.0, LbpVariant::Raw).unwrap();
        assert!(encode_image(&img, &emb, &cfg16).is_err());
        let mut unnormalized = emb.clone();
        unnormalized.coords[0] = -0.5;
        assert!(encode_image(&img, &unnormalized, &raw_cfg()).is_err());
    }

    #[test]
    fn collapse_takes_first_channel_renormalized() {
        let cfg = raw_cfg();
        let emb = build_code_embedding(8, 3).unwrap();
        let img = random_gray(4, 9, 9);
        let mapped = encode_image(&img, &emb, &cfg).unwrap();
        let single = collapse_to_single_channel(&mapped).unwrap();
        assert_eq!(single.channels(), 1);
        let mut expect = mapped.channel(0).to_vec();
        minmax_unit(&mut expect);
        assert_eq!(single.channel(0), expect.as_slice());
        let lo = expect.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = expect.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn collapse_constant_channel_is_half() {
        let m = MappedImage {
            height: 2,
            width: 2,
            channels: 2,
            planes: vec![0.7, 0.7, 0.7, 0.7, 0.1, 0.2, 0.3, 0.4],
            valid: vec![true; 4],
        };
        let single = collapse_to_single_channel(&m).unwrap();
        assert!(single.channel(0).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn png_quantization_round_trips_within_half_step() {
        let cfg = raw_cfg();
        let emb = build_code_embedding(8, 3).unwrap();
        let img = random_gray(5, 8, 8);
        let mapped = encode_image(&img, &emb, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        write_mapped_png(&mapped, &path).unwrap();
        let back = read_mapped_png(&path).unwrap();
        assert_eq!(back.channels(), 3);
        for d in 0..3 {
            for (a, b) in mapped.channel(d).iter().zip(back.channel(d)) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    fn make_dataset(root: &Path, per_class: usize) {
        for (ci, class) in ["lines", "spots"].iter().enumerate() {
            let dir = root.join(class);
            std::fs::create_dir_all(&dir).unwrap();
            for i in 0..per_class {
                let img = random_gray((ci * 100 + i) as u64, 12, 12);
                save_gray_png(&img, &dir.join(format!("img_{i:02}.png"))).unwrap();
            }
        }
    }

    #[test]
    fn batch_encode_mirrors_and_skips() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        make_dataset(data.path(), 3);
        let cfg = raw_cfg();
        let emb = build_code_embedding(8, 3).unwrap();

        let first = batch_encode(data.path(), &emb, &cfg, out.path(), false).unwrap();
        assert_eq!(first.written, 6);
        assert_eq!(first.failed, 0);
        assert!(out.path().join("lines/img_00.png").exists());
        assert!(out.path().join("spots/img_02.png").exists());
        assert!(out.path().join(META_FILE).exists());

        let second = batch_encode(data.path(), &emb, &cfg, out.path(), false).unwrap();
        assert_eq!(second.written, 0);
        assert_eq!(second.skipped, 6);

        let forced = batch_encode(data.path(), &emb, &cfg, out.path(), true).unwrap();
        assert_eq!(forced.written, 6);

        // changing the embedding invalidates the cache without force
        let emb2 = build_code_embedding(8, 2).unwrap();
        let refreshed = batch_encode(data.path(), &emb2, &cfg, out.path(), false);
        // 2-channel images cannot be written as PNG; the per-file failures
        // are counted, not fatal
        let report = refreshed.unwrap();
        assert_eq!(report.written + report.failed, 6);
        assert_eq!(report.failed, 6);
    }

    #[test]
    fn batch_encode_empty_root_errors() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let emb = build_code_embedding(8, 3).unwrap();
        assert!(batch_encode(data.path(), &emb, &raw_cfg(), out.path(), false).is_err());
    }

    #[test]
    fn batch_encode_counts_unreadable_files() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        make_dataset(data.path(), 2);
        std::fs::write(data.path().join("lines/broken.png"), b"not a png").unwrap();
        let emb = build_code_embedding(8, 3).unwrap();
        let report = batch_encode(data.path(), &emb, &raw_cfg(), out.path(), false).unwrap();
        assert_eq!(report.written, 4);
        assert_eq!(report.failed, 1);
    }
}
