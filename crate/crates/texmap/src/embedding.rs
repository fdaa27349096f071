use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::emd::{build_dissimilarity_matrix, CodeDissimilarityMatrix, UNMATCHED_PENALTY};
use crate::error::{Error, Result};

/// Low-dimensional coordinates for a code alphabet (or any item set that a
/// dissimilarity matrix was built over). `coords` is row-major: item j
/// occupies `coords[j*dim .. (j+1)*dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeEmbedding {
    pub dim: usize,
    pub coords: Vec<f64>,
    /// Residual stress of the metric reconstruction, computed against the
    /// dissimilarity matrix the embedding was derived from (it is carried
    /// unchanged through `normalize_embedding`).
    pub stress: f64,
    /// Number of trailing dimensions that were zero-filled because the
    /// matrix did not have enough positive eigenvalue directions.
    pub padded_dims: usize,
}

impl CodeEmbedding {
    pub fn count(&self) -> usize {
        self.coords.len() / self.dim
    }

    #[inline]
    pub fn point(&self, idx: usize) -> &[f64] {
        &self.coords[idx * self.dim..(idx + 1) * self.dim]
    }
}

/// Eigenvalues this close to the spectrum's top (relatively) or below are
/// treated as non-positive: they are reconstruction noise, not geometry.
const EIGEN_REL_CUTOFF: f64 = 1e-12;

/// Classical (Torgerson) metric scaling. Double-centers the squared
/// dissimilarities, takes the top `dim` positive eigenvalue directions
/// scaled by sqrt(eigenvalue), and fixes each axis's sign so its
/// largest-magnitude coordinate is positive. Runs out of positive
/// directions -> remaining dimensions are zeros and `padded_dims` says how
/// many.
pub fn classical_mds(dist: &CodeDissimilarityMatrix, dim: usize) -> Result<CodeEmbedding> {
    let n = dist.size();
    if dim < 1 {
        return Err(Error::config("embedding dimension must be at least 1"));
    }
    if dim > n {
        return Err(Error::config(format!(
            "embedding dimension {dim} exceeds matrix size {n}"
        )));
    }
    // B = -1/2 * J D^2 J via explicit double centering of squared entries
    let sq = |j: usize, k: usize| {
        let d = dist.get(j, k);
        d * d
    };
    let mut row_mean = vec![0.0f64; n];
    for j in 0..n {
        row_mean[j] = (0..n).map(|k| sq(j, k)).sum::<f64>() / n as f64;
    }
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |j, k| {
        -0.5 * (sq(j, k) - row_mean[j] - row_mean[k] + grand)
    });
    let eig = nalgebra::linalg::SymmetricEigen::try_new(b, f64::EPSILON, 100_000)
        .ok_or_else(|| Error::numeric("eigendecomposition did not converge"))?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("eigendecomposition produced non-finite values"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| {
        eig.eigenvalues[c]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&c))
    });
    let lambda_max = eig.eigenvalues[order[0]];
    let cutoff = if lambda_max > 0.0 {
        lambda_max * EIGEN_REL_CUTOFF
    } else {
        0.0
    };
    let mut coords = vec![0.0f64; n * dim];
    let mut padded_dims = 0usize;
    for (d, &src) in order.iter().take(dim).enumerate() {
        let lambda = eig.eigenvalues[src];
        if lambda <= cutoff {
            padded_dims += 1;
            continue;
        }
        let scale = lambda.sqrt();
        for j in 0..n {
            coords[j * dim + d] = eig.eigenvectors[(j, src)] * scale;
        }
        fix_axis_sign(&mut coords, n, dim, d);
    }
    let mut emb = CodeEmbedding {
        dim,
        coords,
        stress: 0.0,
        padded_dims,
    };
    emb.stress = embedding_stress(dist, &emb)?;
    Ok(emb)
}

/// Flip axis `d` so the coordinate with the largest magnitude is positive
/// (first occurrence wins ties). Keeps the eigenvector sign deterministic
/// across runs and platforms.
fn fix_axis_sign(coords: &mut [f64], n: usize, dim: usize, d: usize) {
    let mut best = 0usize;
    let mut best_mag = -1.0f64;
    for j in 0..n {
        let mag = coords[j * dim + d].abs();
        if mag > best_mag {
            best_mag = mag;
            best = j;
        }
    }
    if coords[best * dim + d] < 0.0 {
        for j in 0..n {
            coords[j * dim + d] = -coords[j * dim + d];
        }
    }
}

/// Kruskal-style residual: sqrt of (sum of squared differences between the
/// dissimilarities and the embedded distances) over (sum of squared
/// dissimilarities), across unordered pairs. 0/0 counts as a perfect fit.
pub fn embedding_stress(dist: &CodeDissimilarityMatrix, emb: &CodeEmbedding) -> Result<f64> {
    let n = dist.size();
    if emb.count() != n {
        return Err(Error::config(format!(
            "embedding holds {} items, matrix is {n}x{n}",
            emb.count()
        )));
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for j in 0..n {
        for k in (j + 1)..n {
            let delta = dist.get(j, k);
            let d = emb
                .point(j)
                .iter()
                .zip(emb.point(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            num += (delta - d) * (delta - d);
            den += delta * delta;
        }
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((num / den).sqrt())
}

/// Rescale every dimension into [0, 1] with an affine map, after applying
/// the axis sign convention. A degenerate dimension (all coordinates equal)
/// maps to 0.5. Idempotent: normalizing a normalized embedding changes
/// nothing.
pub fn normalize_embedding(emb: &CodeEmbedding) -> CodeEmbedding {
    let n = emb.count();
    let dim = emb.dim;
    let mut coords = emb.coords.clone();
    for d in 0..dim {
        fix_axis_sign(&mut coords, n, dim, d);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for j in 0..n {
            let v = coords[j * dim + d];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            let span = hi - lo;
            for j in 0..n {
                let v = &mut coords[j * dim + d];
                *v = (*v - lo) / span;
            }
        } else {
            for j in 0..n {
                coords[j * dim + d] = 0.5;
            }
        }
    }
    CodeEmbedding {
        dim,
        coords,
        stress: emb.stress,
        padded_dims: emb.padded_dims,
    }
}

/// Full pipeline for a code alphabet: dissimilarity matrix -> classical
/// MDS -> normalized coordinates. The result has 2^points rows.
pub fn build_code_embedding(points: u32, dim: usize) -> Result<CodeEmbedding> {
    let matrix = build_dissimilarity_matrix(points)?;
    let emb = classical_mds(&matrix, dim)?;
    Ok(normalize_embedding(&emb))
}

/// CSV layout: header `code,x0,..,x{D-1}`, one row per item in ascending
/// code order. Coordinates use the shortest representation that
/// round-trips, so parsing the file back reproduces the exact values.
pub fn write_embedding_csv(emb: &CodeEmbedding, path: &Path) -> Result<()> {
    let mut out = String::from("code");
    for d in 0..emb.dim {
        let _ = write!(out, ",x{d}");
    }
    out.push('\n');
    for j in 0..emb.count() {
        let _ = write!(out, "{j}");
        for &v in emb.point(j) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    #[serde(rename = "P")]
    pub points: u32,
    #[serde(rename = "D")]
    pub dim: usize,
    pub stress: f64,
    pub ground_distance: String,
    pub penalty: f64,
}

pub fn write_embedding_sidecar(emb: &CodeEmbedding, points: u32, path: &Path) -> Result<()> {
    let sidecar = EmbeddingSidecar {
        points,
        dim: emb.dim,
        stress: emb.stress,
        ground_distance: "circular".to_string(),
        penalty: UNMATCHED_PENALTY,
    };
    let mut text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::data(format!("sidecar serialization: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_embedding_sidecar(path: &Path) -> Result<EmbeddingSidecar> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Parse an embedding CSV written by `write_embedding_csv`. The optional
/// sidecar restores the stress value; without it stress is 0.
pub fn read_embedding_csv(path: &Path, sidecar: Option<&Path>) -> Result<CodeEmbedding> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"code") || cols.len() < 2 {
        return Err(Error::data(format!(
            "{}: expected header starting with 'code,x0'",
            path.display()
        )));
    }
    let dim = cols.len() - 1;
    for (d, col) in cols[1..].iter().enumerate() {
        if *col != format!("x{d}") {
            return Err(Error::data(format!(
                "{}: unexpected header column {col:?}",
                path.display()
            )));
        }
    }
    let mut coords = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::data(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                i + 1,
                fields.len(),
                dim + 1
            )));
        }
        let code: usize = fields[0]
            .parse()
            .map_err(|_| Error::data(format!("{}: bad code {:?}", path.display(), fields[0])))?;
        if code != i {
            return Err(Error::data(format!(
                "{}: row {} carries code {code}, rows must be dense and ascending",
                path.display(),
                i + 1
            )));
        }
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::data(format!("{}: bad coordinate {f:?}", path.display())))?;
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "{}: non-finite coordinate in row {}",
                    path.display(),
                    i + 1
                )));
            }
            coords.push(v);
        }
    }
    if coords.is_empty() {
        return Err(Error::data(format!("{}: no data rows", path.display())));
    }
    let stress = match sidecar {
        Some(p) => read_embedding_sidecar(p)?.stress,
        None => 0.0,
    };
    Ok(CodeEmbedding {
        dim,
        coords,
        stress,
        padded_dims: 0,
    })
}
