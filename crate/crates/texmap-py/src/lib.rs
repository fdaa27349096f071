//! Python bindings for the texture-code pipeline: circular binary
//! patterns, the transport-based code dissimilarity, and the embedding
//! that turns code images into multi-channel maps.
//!
//! Images cross the boundary as nested lists of floats in [0, 1]
//! (rows of pixels), so no Python-side array dependency is required.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use texmap::embedding::{build_code_embedding, read_embedding_csv, CodeEmbedding};
use texmap::emd::code_emd;
use texmap::image::GrayImage;
use texmap::lbp::{compute_code_image, pool_histogram, LbpConfig, LbpVariant};
use texmap::mapped::encode_image;

fn pyerr(e: texmap::Error) -> PyErr {
    match &e {
        texmap::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn gray_from_rows(rows: Vec<Vec<f64>>) -> PyResult<GrayImage> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("image must have at least one row"));
    }
    let height = rows.len();
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err(
            "image rows must all have the same length",
        ));
    }
    let pixels: Vec<f64> = rows.into_iter().flatten().collect();
    GrayImage::new(height, width, pixels).map_err(pyerr)
}

/// Raw circular binary-pattern codes of a grayscale image.
///
/// Returns `(codes, valid)`, both height x width nested lists. A pixel
/// is valid when its whole sampling circle fits inside the image.
#[pyfunction]
#[pyo3(signature = (image, points=8, radius=1.0))]
fn code_image(
    image: Vec<Vec<f64>>,
    points: u32,
    radius: f64,
) -> PyResult<(Vec<Vec<u32>>, Vec<Vec<bool>>)> {
    let img = gray_from_rows(image)?;
    let cfg = LbpConfig::new(points, radius, LbpVariant::Raw).map_err(pyerr)?;
    let codes = compute_code_image(&img, &cfg).map_err(pyerr)?;
    let (h, w) = (codes.height(), codes.width());
    let mut code_rows = Vec::with_capacity(h);
    let mut valid_rows = Vec::with_capacity(h);
    for r in 0..h {
        code_rows.push((0..w).map(|c| codes.code(r, c)).collect::<Vec<_>>());
        valid_rows.push((0..w).map(|c| codes.is_valid(r, c)).collect::<Vec<_>>());
    }
    Ok((code_rows, valid_rows))
}

/// L1-normalized code histogram of a grayscale image.
///
/// `variant` selects the bin reduction: "raw", "uniform2", or "riu2".
#[pyfunction]
#[pyo3(signature = (image, points=8, radius=1.0, variant="uniform2"))]
fn histogram(image: Vec<Vec<f64>>, points: u32, radius: f64, variant: &str) -> PyResult<Vec<f64>> {
    let img = gray_from_rows(image)?;
    let variant = LbpVariant::parse(variant).map_err(pyerr)?;
    let cfg = LbpConfig::new(points, radius, variant).map_err(pyerr)?;
    let codes = compute_code_image(&img, &cfg).map_err(pyerr)?;
    Ok(pool_histogram(&codes, &cfg).map_err(pyerr)?.bins)
}

/// Transport distance between two raw codes of a P-point alphabet,
/// treating each code as a distribution of set bits on the sampling
/// circle. Symmetric, zero on the diagonal.
#[pyfunction]
#[pyo3(signature = (a, b, points=8))]
fn code_dissimilarity(a: u32, b: u32, points: u32) -> PyResult<f64> {
    let cfg = LbpConfig::new(points, 1.0, LbpVariant::Raw).map_err(pyerr)?;
    let count = cfg.code_count() as u32;
    for (name, v) in [("a", a), ("b", b)] {
        if v >= count {
            return Err(PyValueError::new_err(format!(
                "code {name}={v} out of range for {points} points (max {})",
                count - 1
            )));
        }
    }
    Ok(code_emd(a, b, points))
}

/// Euclidean stand-in for a code alphabet: one point per code, laid out
/// so that straight-line distance approximates the code dissimilarity,
/// with each axis rescaled into [0, 1].
#[pyclass]
struct Embedding {
    inner: CodeEmbedding,
    points: u32,
}

#[pymethods]
impl Embedding {
    /// Build the embedding for a P-point alphabet from scratch:
    /// pairwise dissimilarities, classical scaling, axis rescale.
    #[staticmethod]
    #[pyo3(signature = (points=8, dim=3))]
    fn build(points: u32, dim: usize) -> PyResult<Self> {
        let inner = build_code_embedding(points, dim).map_err(pyerr)?;
        Ok(Embedding { inner, points })
    }

    /// Load an embedding CSV written by the command-line tool;
    /// `sidecar` may name the JSON metadata stored next to it.
    #[staticmethod]
    #[pyo3(signature = (path, sidecar=None))]
    fn from_csv(path: PathBuf, sidecar: Option<PathBuf>) -> PyResult<Self> {
        let inner = read_embedding_csv(&path, sidecar.as_deref()).map_err(pyerr)?;
        let count = inner.count();
        if !count.is_power_of_two() {
            return Err(PyValueError::new_err(format!(
                "embedding holds {count} rows, expected a power of two"
            )));
        }
        Ok(Embedding {
            inner,
            points: count.trailing_zeros(),
        })
    }

    #[getter]
    fn points(&self) -> u32 {
        self.points
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn count(&self) -> usize {
        self.inner.count()
    }

    /// Residual mismatch between embedded distances and the original
    /// dissimilarities (0 = perfect).
    #[getter]
    fn stress(&self) -> f64 {
        self.inner.stress
    }

    /// Coordinates of one code.
    fn point(&self, code: u32) -> PyResult<Vec<f64>> {
        let count = self.inner.count();
        if (code as usize) < count {
            Ok(self.inner.point(code as usize).to_vec())
        } else {
            Err(PyValueError::new_err(format!(
                "code {code} out of range (embedding holds {count} points)"
            )))
        }
    }

    /// Replace every pixel of a grayscale image by its code's
    /// coordinates; returns a height x width x dim nested list. Border
    /// pixels whose sampling circle leaves the image take the
    /// flat-region code's coordinates.
    #[pyo3(signature = (image, radius=1.0))]
    fn encode(&self, image: Vec<Vec<f64>>, radius: f64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let img = gray_from_rows(image)?;
        let cfg = LbpConfig::new(self.points, radius, LbpVariant::Raw).map_err(pyerr)?;
        let mapped = encode_image(&img, &self.inner, &cfg).map_err(pyerr)?;
        let (h, w, d) = (mapped.height(), mapped.width(), mapped.channels());
        let mut out = Vec::with_capacity(h);
        for r in 0..h {
            let mut row = Vec::with_capacity(w);
            for c in 0..w {
                row.push((0..d).map(|ch| mapped.get(ch, r, c)).collect::<Vec<_>>());
            }
            out.push(row);
        }
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!(
            "Embedding(points={}, dim={}, count={}, stress={:.6})",
            self.points,
            self.inner.dim,
            self.inner.count(),
            self.inner.stress
        )
    }
}

#[pymodule]
fn texmap_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(code_image, m)?)?;
    m.add_function(wrap_pyfunction!(histogram, m)?)?;
    m.add_function(wrap_pyfunction!(code_dissimilarity, m)?)?;
    m.add_class::<Embedding>()?;
    Ok(())
}
