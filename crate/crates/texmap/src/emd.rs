use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Circular ground distance between bit positions p and q on a ring of
/// `points` positions, normalized so that diametrically opposite positions
/// are 1 apart.
pub fn ground_distance(p: u32, q: u32, points: u32) -> f64 {
    let d = p.abs_diff(q);
    let d = d.min(points - d);
    d as f64 / (points as f64 / 2.0)
}

/// Penalty per unmatched unit of mass when two codes have different
/// popcounts: the maximum normalized ground distance.
pub const UNMATCHED_PENALTY: f64 = 1.0;

fn bit_positions(code: u32, points: u32) -> Vec<u32> {
    (0..points).filter(|p| code >> p & 1 == 1).collect()
}

/// Transport-style dissimilarity between two codes: each set bit carries a
/// unit of mass at its angular position; the smaller mass set is matched
/// into the larger at minimum total ground distance and every leftover unit
/// pays the maximum distance. Symmetric, zero for equal codes.
pub fn code_emd(j: u32, k: u32, points: u32) -> f64 {
    debug_assert!(points >= 1 && points <= 24);
    // canonical argument order makes the computation path identical for
    // (j, k) and (k, j), so symmetry is exact
    let (a, b) = if (j.count_ones(), j) <= (k.count_ones(), k) {
        (j, k)
    } else {
        (k, j)
    };
    let small = bit_positions(a, points);
    let large = bit_positions(b, points);
    let n = large.len();
    if n == 0 {
        return 0.0;
    }
    if small.is_empty() {
        return n as f64 * UNMATCHED_PENALTY;
    }
    // square assignment: rows are the larger set's units, columns are the
    // smaller set's units padded with dummies that cost the full penalty
    let mut cost = vec![0.0f64; n * n];
    for (r, &bp) in large.iter().enumerate() {
        for c in 0..n {
            cost[r * n + c] = if c < small.len() {
                ground_distance(bp, small[c], points)
            } else {
                UNMATCHED_PENALTY
            };
        }
    }
    assignment_cost(&cost, n)
}

/// Minimum-cost perfect matching on an n x n cost matrix (row-major) via
/// the O(n^3) shortest-augmenting-path Hungarian algorithm. Returns the sum
/// of the selected original entries.
fn assignment_cost(cost: &[f64], n: usize) -> f64 {
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched = vec![0usize; n + 1]; // column -> row (1-based, 0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n)
        .map(|j| cost[(matched[j] - 1) * n + (j - 1)])
        .sum()
}

/// Dense symmetric dissimilarity matrix with zero diagonal. Entries from
/// `build_dissimilarity_matrix` are rescaled into [0, 1]; matrices built
/// from arbitrary point sets (for embedding) may exceed 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeDissimilarityMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl CodeDissimilarityMatrix {
    pub fn from_entries(size: usize, entries: Vec<f64>) -> Result<Self> {
        if size == 0 {
            return Err(Error::config("dissimilarity matrix must be non-empty"));
        }
        if entries.len() != size * size {
            return Err(Error::config(format!(
                "matrix buffer holds {} entries, expected {size}x{size}",
                entries.len()
            )));
        }
        for j in 0..size {
            if entries[j * size + j] != 0.0 {
                return Err(Error::config(format!("diagonal entry ({j}, {j}) is not zero")));
            }
            for k in 0..size {
                let e = entries[j * size + k];
                if !e.is_finite() || e < 0.0 {
                    return Err(Error::config(format!(
                        "entry ({j}, {k}) = {e} must be finite and non-negative"
                    )));
                }
                if entries[j * size + k] != entries[k * size + j] {
                    return Err(Error::config(format!("matrix not symmetric at ({j}, {k})")));
                }
            }
        }
        Ok(CodeDissimilarityMatrix { size, entries })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.entries[j * self.size + k]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Pairwise Euclidean distances of a point set (row = point), the usual
    /// way to build an embedding target from coordinates.
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::config("point set must be non-empty"));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::config("points must share one dimensionality"));
        }
        let mut entries = vec![0.0; n * n];
        for j in 0..n {
            for k in (j + 1)..n {
                let d = points[j]
                    .iter()
                    .zip(&points[k])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                entries[j * n + k] = d;
                entries[k * n + j] = d;
            }
        }
        CodeDissimilarityMatrix::from_entries(n, entries)
    }

    /// Write as plain CSV: `size` rows of comma-separated decimals with 9
    /// significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for j in 0..self.size {
            for k in 0..self.size {
                if k > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{:.8e}", self.get(j, k));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// All-pairs code dissimilarity for a `points`-bit alphabet, globally
/// rescaled by the maximum entry so values live in [0, 1]. Row computation
/// is parallel; the result is deterministic because the upper triangle is
/// computed independently and mirrored.
pub fn build_dissimilarity_matrix(points: u32) -> Result<CodeDissimilarityMatrix> {
    if points < 1 || points > 16 {
        return Err(Error::config(format!(
            "points = {points} out of range 1..=16 for a dense code matrix"
        )));
    }
    let n = 1usize << points;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            (j..n)
                .map(|k| code_emd(j as u32, k as u32, points))
                .collect()
        })
        .collect();
    let mut entries = vec![0.0f64; n * n];
    for (j, row) in rows.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let k = j + off;
            entries[j * n + k] = v;
            entries[k * n + j] = v;
        }
    }
    let max = entries.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for e in &mut entries {
            *e /= max;
        }
    }
    CodeDissimilarityMatrix::from_entries(n, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive reference: try every injection of the smaller bit set
    /// into the larger and keep the cheapest, then add the unmatched
    /// penalty. Exponential, only usable for small popcounts.
    fn emd_by_enumeration(j: u32, k: u32, points: u32) -> f64 {
        let (a, b) = if j.count_ones() <= k.count_ones() {
            (j, k)
        } else {
            (k, j)
        };
        let small = bit_positions(a, points);
        let large = bit_positions(b, points);
        if small.is_empty() {
            return large.len() as f64 * UNMATCHED_PENALTY;
        }
        fn recurse(small: &[u32], large: &[u32], used: &mut [bool], points: u32) -> f64 {
            if small.is_empty() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for (i, &lp) in large.iter().enumerate() {
                if used[i] {
                    continue;
                }
                used[i] = true;
                let rest = recurse(&small[1..], large, used, points);
                used[i] = false;
                let total = ground_distance(small[0], lp, points) + rest;
                if total < best {
                    best = total;
                }
            }
            best
        }
        let mut used = vec![false; large.len()];
        let matched = recurse(&small, &large, &mut used, points);
        matched + (large.len() - small.len()) as f64 * UNMATCHED_PENALTY
    }

    #[test]
    fn pinned_examples() {
        // adjacent single bits: one unit moved one step of 8
        assert!((code_emd(0b0000_0001, 0b0000_0010, 8) - 0.25).abs() < 1e-15);
        // empty vs full: all mass unmatched
        assert_eq!(code_emd(0x00, 0xFF, 8), 8.0);
        assert_eq!(code_emd(0, 0, 8), 0.0);
        // opposite single bits: half the ring
        assert!((code_emd(0b0000_0001, 0b0001_0000, 8) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ground_distance_wraps() {
        assert_eq!(ground_distance(0, 7, 8), 0.25);
        assert_eq!(ground_distance(0, 4, 8), 1.0);
        assert_eq!(ground_distance(3, 3, 8), 0.0);
        assert_eq!(ground_distance(1, 6, 8), 0.75);
        assert_eq!(ground_distance(0, 8, 16), 1.0);
    }

    #[test]
    fn matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(401);
        for _ in 0..300 {
            let j = rng.random::<u32>() & 0xFF;
            let k = rng.random::<u32>() & 0xFF;
            let fast = code_emd(j, k, 8);
            let slow = emd_by_enumeration(j, k, 8);
            assert!(
                (fast - slow).abs() <= 1e-9,
                "codes {j:#010b}/{k:#010b}: {fast} vs {slow}"
            );
        }
        // a few wider-alphabet pairs (popcounts kept small so the oracle
        // stays tractable)
        for _ in 0..50 {
            let j = (0..4).fold(0u32, |c, _| c | 1 << rng.random_range(0..16u32));
            let k = (0..4).fold(0u32, |c, _| c | 1 << rng.random_range(0..16u32));
            let fast = code_emd(j, k, 16);
            let slow = emd_by_enumeration(j, k, 16);
            assert!((fast - slow).abs() <= 1e-9);
        }
    }

    #[test]
    fn matrix_is_rescaled_symmetric_zero_diagonal() {
        let m = build_dissimilarity_matrix(8).unwrap();
        assert_eq!(m.size(), 256);
        let mut max = 0.0f64;
        for j in 0..256 {
            assert_eq!(m.get(j, j), 0.0);
            for k in 0..256 {
                let e = m.get(j, k);
                assert!(e >= 0.0 && e <= 1.0);
                assert_eq!(e.to_bits(), m.get(k, j).to_bits());
                max = max.max(e);
            }
        }
        assert_eq!(max, 1.0);
        // rescale divides by the max raw entry, which is the empty/full pair
        assert_eq!(m.get(0, 255), 1.0);
        assert!((m.get(0b1, 0b10) - 0.25 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn from_entries_validates() {
        assert!(CodeDissimilarityMatrix::from_entries(2, vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(CodeDissimilarityMatrix::from_entries(2, vec![0.5, 1.0, 1.0, 0.0]).is_err());
        assert!(CodeDissimilarityMatrix::from_entries(2, vec![0.0, -1.0, -1.0, 0.0]).is_err());
        assert!(CodeDissimilarityMatrix::from_entries(2, vec![0.0, 1.0, 1.0, 0.0]).is_ok());
    }

    #[test]
    fn csv_format_is_nine_significant_digits() {
        let m = CodeDissimilarityMatrix::from_entries(2, vec![0.0, 0.25, 0.25, 0.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        m.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "0.00000000e0,2.50000000e-1\n2.50000000e-1,0.00000000e0\n");
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(j in 0u32..256, k in 0u32..256) {
            let d = code_emd(j, k, 8);
            prop_assert!(d >= 0.0 && d <= 8.0);
            prop_assert_eq!(d.to_bits(), code_emd(k, j, 8).to_bits());
            if j == k {
                prop_assert_eq!(d, 0.0);
            }
        }

        #[test]
        fn triangle_inequality(j in 0u32..256, k in 0u32..256, l in 0u32..256) {
            let jk = code_emd(j, k, 8);
            let jl = code_emd(j, l, 8);
            let lk = code_emd(l, k, 8);
            prop_assert!(jk <= jl + lk + 1e-9);
        }
    }
}
