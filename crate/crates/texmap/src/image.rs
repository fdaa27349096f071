use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel image with intensities in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::config("image dimensions must be non-zero"));
        }
        if pixels.len() != height * width {
            return Err(Error::config(format!(
                "pixel buffer holds {} values, expected {}x{}={}",
                pixels.len(),
                height,
                width,
                height * width
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::config(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        GrayImage::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.height && col < self.width);
        self.pixels[row * self.width + col]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Apply an intensity transform; the result must stay in [0, 1].
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<GrayImage> {
        GrayImage::new(
            self.height,
            self.width,
            self.pixels.iter().map(|&v| f(v)).collect(),
        )
    }
}

/// Interleaved RGB image with channel intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    height: usize,
    width: usize,
    pixels: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn new(height: usize, width: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::config("image dimensions must be non-zero"));
        }
        if pixels.len() != height * width {
            return Err(Error::config(format!(
                "pixel buffer holds {} values, expected {}",
                pixels.len(),
                height * width
            )));
        }
        for px in &pixels {
            for v in px {
                if !v.is_finite() || *v < 0.0 || *v > 1.0 {
                    return Err(Error::config(format!("pixel value {v} outside [0, 1]")));
                }
            }
        }
        Ok(ColorImage {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        debug_assert!(row < self.height && col < self.width);
        self.pixels[row * self.width + col]
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    /// Luminance conversion used everywhere a color input feeds a
    /// single-channel texture operator.
    pub fn to_gray(&self) -> GrayImage {
        let pixels = self
            .pixels
            .iter()
            .map(|[r, g, b]| (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0))
            .collect();
        GrayImage {
            height: self.height,
            width: self.width,
            pixels,
        }
    }
}

/// Raster file decoded as either grayscale or color, depending on the
/// source pixel format.
#[derive(Debug, Clone)]
pub enum LoadedImage {
    Gray(GrayImage),
    Color(ColorImage),
}

impl LoadedImage {
    pub fn into_gray(self) -> GrayImage {
        match self {
            LoadedImage::Gray(g) => g,
            LoadedImage::Color(c) => c.to_gray(),
        }
    }

    pub fn into_color(self) -> ColorImage {
        match self {
            LoadedImage::Color(c) => c,
            LoadedImage::Gray(g) => {
                let pixels = g.pixels.iter().map(|&v| [v, v, v]).collect();
                ColorImage {
                    height: g.height,
                    width: g.width,
                    pixels,
                }
            }
        }
    }
}

/// Decode an 8-bit raster file (PNG, PGM/PPM). Values are normalized to
/// [0, 1] by dividing by 255.
pub fn load_image(path: &Path) -> Result<LoadedImage> {
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::data(format!("{}: {other}", path.display())),
    })?;
    match dynimg {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let pixels = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
            Ok(LoadedImage::Gray(GrayImage {
                height: h,
                width: w,
                pixels,
            }))
        }
        other => {
            let img = other.into_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let pixels = img
                .pixels()
                .map(|p| {
                    [
                        p.0[0] as f64 / 255.0,
                        p.0[1] as f64 / 255.0,
                        p.0[2] as f64 / 255.0,
                    ]
                })
                .collect();
            Ok(LoadedImage::Color(ColorImage {
                height: h,
                width: w,
                pixels,
            }))
        }
    }
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save an RGB image as PNG, quantizing each channel to 8 bits.
pub fn save_color_png(img: &ColorImage, path: &Path) -> Result<()> {
    let mut out = image::RgbImage::new(img.width as u32, img.height as u32);
    for (i, px) in img.pixels.iter().enumerate() {
        let x = (i % img.width) as u32;
        let y = (i / img.width) as u32;
        out.put_pixel(
            x,
            y,
            image::Rgb([quantize_u8(px[0]), quantize_u8(px[1]), quantize_u8(px[2])]),
        );
    }
    out.save(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Save a grayscale image as PNG.
pub fn save_gray_png(img: &GrayImage, path: &Path) -> Result<()> {
    let mut out = image::GrayImage::new(img.width as u32, img.height as u32);
    for (i, &v) in img.pixels.iter().enumerate() {
        let x = (i % img.width) as u32;
        let y = (i / img.width) as u32;
        out.put_pixel(x, y, image::Luma([quantize_u8(v)]));
    }
    out.save(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Write a binary (P5) PGM with an optional comment line recording how the
/// data was produced. The image crate's PNM encoder does not emit comments,
/// so the writer is done by hand; readers (including `load_image`) skip it.
pub fn write_pgm(
    path: &Path,
    height: usize,
    width: usize,
    bytes: &[u8],
    comment: Option<&str>,
) -> Result<()> {
    if bytes.len() != height * width {
        return Err(Error::config(format!(
            "PGM buffer holds {} bytes, expected {}",
            bytes.len(),
            height * width
        )));
    }
    let mut header = String::from("P5\n");
    if let Some(c) = comment {
        for line in c.lines() {
            header.push_str(&format!("# {line}\n"));
        }
    }
    header.push_str(&format!("{width} {height}\n255\n"));
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}
