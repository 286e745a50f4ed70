//! Nearest-neighbor search and local tangent-space estimation.
//!
//! Neighborhoods always start with the point itself, so tangent coordinates
//! are expressed relative to the center and the center sits at the origin.

use std::cmp::Ordering;

use faer::{Mat, Side};
use rayon::prelude::*;

use crate::data::PointCloud;
use crate::error::{Error, Result};

/// Ordered `K`-nearest neighborhoods, self first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodIndex {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborhoodIndex {
    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Rows `x_j - x_i` for every `j` in the neighborhood of `i`, row-major `K x n`.
    pub fn displacements(&self, cloud: &PointCloud, i: usize) -> Vec<f64> {
        displacements_about(
            cloud.point(i),
            self.neighbors(i).iter().map(|&j| cloud.point(j)),
        )
    }
}

fn cmp_candidates(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `count` points of `cloud` closest to `x`, ordered by distance then index.
pub fn nearest_to(cloud: &PointCloud, x: &[f64], count: usize, skip: Option<usize>) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = (0..cloud.len())
        .filter(|&j| Some(j) != skip)
        .map(|j| (cloud.dist2_to(j, x), j))
        .collect();
    let count = count.min(cand.len());
    if count == 0 {
        return Vec::new();
    }
    if count < cand.len() {
        cand.select_nth_unstable_by(count - 1, cmp_candidates);
        cand.truncate(count);
    }
    cand.sort_unstable_by(cmp_candidates);
    cand.into_iter().map(|(_, j)| j).collect()
}

/// Brute-force Euclidean `K`-nearest neighborhoods.
///
/// Each list starts with the point itself; the rest are sorted by distance
/// with ties broken by the smaller index.
pub fn knn(cloud: &PointCloud, k: usize) -> Result<NeighborhoodIndex> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "K = {k} must lie in 1..={n}"
        )));
    }
    let rows: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::with_capacity(k);
            row.push(i);
            row.extend(nearest_to(cloud, cloud.point(i), k - 1, Some(i)));
            row
        })
        .collect();
    Ok(NeighborhoodIndex {
        k,
        indices: rows.concat(),
    })
}

pub(crate) fn displacements_about<'a>(
    center: &[f64],
    points: impl Iterator<Item = &'a [f64]>,
) -> Vec<f64> {
    let mut out = Vec::new();
    for p in points {
        out.extend(p.iter().zip(center).map(|(a, b)| a - b));
    }
    out
}

/// Gram matrix of row-major displacement rows (`k x n`).
pub(crate) fn gram_of(disp: &[f64], k: usize) -> Mat<f64> {
    let n = disp.len().checked_div(k).unwrap_or(0);
    let row = |j: usize| &disp[j * n..(j + 1) * n];
    let mut g = Mat::<f64>::zeros(k, k);
    for a in 0..k {
        for b in 0..=a {
            let v: f64 = row(a).iter().zip(row(b)).map(|(x, y)| x * y).sum();
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    g
}

/// `G_jk = (x_j - x_i) . (x_k - x_i)` over the neighborhood of `i`.
pub fn local_gram(cloud: &PointCloud, nbr: &NeighborhoodIndex, i: usize) -> Mat<f64> {
    gram_of(&nbr.displacements(cloud, i), nbr.k())
}

/// Projected tangent coordinates of one neighborhood.
#[derive(Debug, Clone)]
pub struct TangentFrame {
    /// `K x d`; column `k` holds `u_k`, the PCA scores along the `k`-th axis.
    pub coords: Mat<f64>,
    /// Eigenvalues of the local Gram matrix, decreasing.
    pub spectrum: Vec<f64>,
    /// Neighborhood positions excluded from the subspace fit (trimmed PCA only).
    pub dropped: Vec<usize>,
}

impl TangentFrame {
    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    /// `lambda_{d+1} / lambda_d`; small values mean a clean tangent plane.
    pub fn spectral_gap_ratio(&self) -> Option<f64> {
        let d = self.dim();
        let top = *self.spectrum.get(d - 1)?;
        let next = *self.spectrum.get(d)?;
        (top > 0.0).then(|| next.max(0.0) / top)
    }
}

/// Eigenvalues at or below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-10;

/// Decreasing eigenpairs of a symmetric matrix with the sign of each
/// eigenvector fixed so that its first significant entry is positive.
fn sorted_eigen(gram: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let k = gram.nrows();
    let eig = gram
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::NonConvergence(format!("local eigensolver: {e:?}")))?;
    let s = eig.S().column_vector();
    let u = eig.U();
    let mut values = Vec::with_capacity(k);
    let mut vectors = Mat::<f64>::zeros(k, k);
    for (col, src) in (0..k).rev().enumerate() {
        values.push(s[src]);
        let v = u.col(src);
        let scale = (0..k).map(|r| v[r].abs()).fold(0.0, f64::max);
        let sign = (0..k)
            .map(|r| v[r])
            .find(|x| x.abs() > 1e-8 * scale)
            .map_or(1.0, |x| x.signum());
        for r in 0..k {
            vectors[(r, col)] = sign * v[r];
        }
    }
    Ok((values, vectors))
}

fn numerical_rank(values: &[f64]) -> usize {
    let top = values.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return 0;
    }
    values.iter().filter(|&&v| v > RANK_TOL * top).count()
}

fn frame_from_eigen(values: Vec<f64>, vectors: &Mat<f64>, d: usize) -> Result<TangentFrame> {
    let rank = numerical_rank(&values);
    if rank < d {
        return Err(Error::RankDeficient {
            context: format!("local PCA needs rank {d}"),
            rank,
            point: None,
        });
    }
    let k = vectors.nrows();
    let coords = Mat::from_fn(k, d, |r, c| values[c].sqrt() * vectors[(r, c)]);
    Ok(TangentFrame {
        coords,
        spectrum: values,
        dropped: Vec::new(),
    })
}

/// PCA scores `u_k = sqrt(lambda_k) v_k` of the `d` leading Gram eigenpairs.
pub fn tangent_frame(gram: &Mat<f64>, d: usize) -> Result<TangentFrame> {
    if gram.nrows() != gram.ncols() {
        return Err(Error::InvalidArgument("Gram matrix must be square".into()));
    }
    if d == 0 || d > gram.nrows() {
        return Err(Error::InvalidArgument(format!(
            "tangent dimension {d} must lie in 1..={}",
            gram.nrows()
        )));
    }
    let (values, vectors) = sorted_eigen(gram)?;
    frame_from_eigen(values, &vectors, d)
}

/// Tangent frame from displacement rows (`k x n`, first row the center).
pub(crate) fn frame_from_displacements(disp: &[f64], k: usize, d: usize) -> Result<TangentFrame> {
    tangent_frame(&gram_of(disp, k), d)
}

/// PCA with one round of outlier trimming.
///
/// Fits a frame, drops the `ceil(trim_fraction * K)` neighbors with the largest
/// orthogonal residual (never the center), refits on the rest and projects
/// every neighbor onto the refitted subspace.
pub fn trimmed_tangent_frame(
    cloud: &PointCloud,
    nbr: &NeighborhoodIndex,
    i: usize,
    d: usize,
    trim_fraction: f64,
) -> Result<TangentFrame> {
    if !(0.0..0.5).contains(&trim_fraction) {
        return Err(Error::InvalidArgument(format!(
            "trim fraction {trim_fraction} must lie in [0, 0.5)"
        )));
    }
    let k = nbr.k();
    let n_drop = (trim_fraction * k as f64).ceil() as usize;
    if k - n_drop < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "trimming {n_drop} of {k} neighbors leaves fewer than {} points",
            d + 1
        )));
    }
    let disp = nbr.displacements(cloud, i);
    let gram = gram_of(&disp, k);
    let first = tangent_frame(&gram, d)?;
    if n_drop == 0 {
        return Ok(first);
    }

    let mut residuals: Vec<(f64, usize)> = (1..k)
        .map(|r| {
            let proj: f64 = (0..d).map(|c| first.coords[(r, c)].powi(2)).sum();
            ((gram[(r, r)] - proj).max(0.0), r)
        })
        .collect();
    residuals.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut dropped: Vec<usize> = residuals[..n_drop].iter().map(|&(_, r)| r).collect();
    dropped.sort_unstable();
    let kept: Vec<usize> = (0..k)
        .filter(|r| dropped.binary_search(r).is_err())
        .collect();

    let n = cloud.n_features();
    let kept_disp: Vec<f64> = kept
        .iter()
        .flat_map(|&r| disp[r * n..(r + 1) * n].iter().copied())
        .collect();
    let (values, vectors) = sorted_eigen(&gram_of(&kept_disp, kept.len()))?;
    let rank = numerical_rank(&values);
    if rank < d {
        return Err(Error::RankDeficient {
            context: format!("trimmed local PCA needs rank {d}"),
            rank,
            point: Some(i),
        });
    }
    // Ambient basis W = E_kept^T V diag(lambda^{-1/2}); every neighbor is projected onto it.
    let mut basis = vec![0.0; n * d];
    for c in 0..d {
        let inv = 1.0 / values[c].sqrt();
        for (row, &r) in kept.iter().enumerate() {
            let weight = vectors[(row, c)] * inv;
            for f in 0..n {
                basis[f * d + c] += disp[r * n + f] * weight;
            }
        }
    }
    let coords = Mat::from_fn(k, d, |r, c| {
        (0..n).map(|f| disp[r * n + f] * basis[f * d + c]).sum()
    });
    Ok(TangentFrame {
        coords,
        spectrum: values,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud_1d(xs: &[f64]) -> PointCloud {
        PointCloud::from_flat(xs.to_vec(), xs.len(), 1, 1).unwrap()
    }

    fn random_cloud(n: usize, dim: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..n * dim).map(|_| rng.random::<f64>()).collect();
        PointCloud::from_flat(coords, n, dim, dim.min(2)).unwrap()
    }

    fn pairwise(rows: &[Vec<f64>]) -> Vec<f64> {
        let mut out = Vec::new();
        for a in rows {
            for b in rows {
                out.push(
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| (x - y).powi(2))
                        .sum::<f64>()
                        .sqrt(),
                );
            }
        }
        out
    }

    fn frame_rows(f: &TangentFrame) -> Vec<Vec<f64>> {
        (0..f.len())
            .map(|r| (0..f.dim()).map(|c| f.coords[(r, c)]).collect())
            .collect()
    }

    #[test]
    fn knn_small_line() {
        let nbr = knn(&cloud_1d(&[0.0, 1.0, 2.0]), 3).unwrap();
        assert_eq!(nbr.neighbors(1), &[1, 0, 2]);
        assert_eq!(nbr.neighbors(0), &[0, 1, 2]);
    }

    #[test]
    fn knn_k1_is_self() {
        let nbr = knn(&random_cloud(20, 2, 1), 1).unwrap();
        for i in 0..20 {
            assert_eq!(nbr.neighbors(i), &[i]);
        }
    }

    #[test]
    fn knn_duplicates_break_ties_by_index() {
        let nbr = knn(&cloud_1d(&[5.0, 0.0, 3.0, 0.0]), 3).unwrap();
        assert_eq!(nbr.neighbors(3), &[3, 1, 2]);
        assert_eq!(nbr.neighbors(1), &[1, 3, 2]);
    }

    #[test]
    fn knn_rejects_large_k() {
        assert!(knn(&random_cloud(5, 2, 1), 6).is_err());
    }

    #[test]
    fn knn_sorted_and_distinct() {
        let cloud = random_cloud(200, 3, 7);
        let nbr = knn(&cloud, 10).unwrap();
        for i in 0..cloud.len() {
            let row = nbr.neighbors(i);
            assert_eq!(row[0], i);
            let d: Vec<f64> = row
                .iter()
                .map(|&j| cloud.dist2_to(j, cloud.point(i)))
                .collect();
            assert!(d.windows(2).all(|w| w[0] <= w[1]));
            let mut s = row.to_vec();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 10);
        }
    }

    #[test]
    fn knn_permutation_equivariant() {
        let cloud = random_cloud(150, 2, 3);
        let mut perm: Vec<usize> = (0..150).collect();
        perm.reverse();
        perm.swap(3, 70);
        let permuted = cloud.permuted(&perm).unwrap();
        let a = knn(&cloud, 8).unwrap();
        let b = knn(&permuted, 8).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            let back: Vec<usize> = b.neighbors(new_i).iter().map(|&j| perm[j]).collect();
            assert_eq!(back, a.neighbors(old_i));
        }
    }

    #[test]
    fn gram_line_example() {
        let cloud = cloud_1d(&[0.0, 1.0, 2.0]);
        let nbr = knn(&cloud, 3).unwrap();
        let g = local_gram(&cloud, &nbr, 1);
        let want = [[0.0, 0.0, 0.0], [0.0, 1.0, -1.0], [0.0, -1.0, 1.0]];
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(g[(a, b)], want[a][b]);
            }
        }
    }

    #[test]
    fn gram_psd_and_self_row_zero() {
        let cloud = random_cloud(100, 3, 9);
        let nbr = knn(&cloud, 12).unwrap();
        for i in [0, 17, 99] {
            let g = local_gram(&cloud, &nbr, i);
            for c in 0..12 {
                assert_eq!(g[(0, c)], 0.0);
            }
            let ev = g.self_adjoint_eigenvalues(Side::Lower).unwrap();
            assert!(ev.iter().all(|&v| v >= -1e-10));
        }
    }

    #[test]
    fn planar_frame_preserves_distances() {
        let cloud = random_cloud(60, 2, 4);
        let nbr = knn(&cloud, 10).unwrap();
        for i in [0, 30] {
            let frame = tangent_frame(&local_gram(&cloud, &nbr, i), 2).unwrap();
            let orig: Vec<Vec<f64>> = nbr
                .neighbors(i)
                .iter()
                .map(|&j| cloud.point(j).to_vec())
                .collect();
            let (a, b) = (pairwise(&frame_rows(&frame)), pairwise(&orig));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-10);
            }
            // center at origin, columns orthogonal with squared norm = eigenvalue
            for c in 0..2 {
                assert!(frame.coords[(0, c)].abs() < 1e-12);
                let norm2: f64 = (0..10).map(|r| frame.coords[(r, c)].powi(2)).sum();
                assert!((norm2 - frame.spectrum[c]).abs() <= 1e-10 * frame.spectrum[0]);
            }
            let dot: f64 = (0..10)
                .map(|r| frame.coords[(r, 0)] * frame.coords[(r, 1)])
                .sum();
            assert!(dot.abs() < 1e-10 * frame.spectrum[0]);
        }
    }

    #[test]
    fn projected_coordinates_match_orthogonal_projection() {
        // noisy points near a plane in R^4
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut coords = Vec::new();
        for _ in 0..40 {
            let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
            coords.extend([a, b, 0.3 * a * b, 0.05 * rng.random::<f64>()]);
        }
        let cloud = PointCloud::from_flat(coords, 40, 4, 2).unwrap();
        let nbr = knn(&cloud, 12).unwrap();
        let disp = nbr.displacements(&cloud, 5);
        let gram = gram_of(&disp, 12);
        let frame = tangent_frame(&gram, 2).unwrap();
        // Ambient orthonormal basis of the fitted subspace from the 4x4 scatter matrix.
        let scatter = Mat::from_fn(4, 4, |a, b| {
            (0..12)
                .map(|r| disp[r * 4 + a] * disp[r * 4 + b])
                .sum::<f64>()
        });
        let eig = scatter.self_adjoint_eigen(Side::Lower).unwrap();
        let proj: Vec<Vec<f64>> = (0..12)
            .map(|r| {
                (2..4)
                    .map(|c| (0..4).map(|f| disp[r * 4 + f] * eig.U()[(f, c)]).sum())
                    .collect()
            })
            .collect();
        for (x, y) in pairwise(&frame_rows(&frame)).iter().zip(pairwise(&proj)) {
            assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn rank_deficient_frame() {
        // collinear points embedded in R^2, asking for d = 2
        let coords: Vec<f64> = (0..6).flat_map(|t| [t as f64, 2.0 * t as f64]).collect();
        let cloud = PointCloud::from_flat(coords, 6, 2, 2).unwrap();
        let nbr = knn(&cloud, 6).unwrap();
        let err = tangent_frame(&local_gram(&cloud, &nbr, 2), 2).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { rank: 1, .. }), "{err}");
    }

    #[test]
    fn gap_ratio_reported() {
        let cloud = random_cloud(50, 3, 2);
        let nbr = knn(&cloud, 10).unwrap();
        let frame = tangent_frame(&local_gram(&cloud, &nbr, 0), 2).unwrap();
        let ratio = frame.spectral_gap_ratio().unwrap();
        assert_eq!(ratio, frame.spectrum[2] / frame.spectrum[1]);
    }

    #[test]
    fn trim_zero_is_plain_pca() {
        let cloud = random_cloud(50, 3, 5);
        let nbr = knn(&cloud, 10).unwrap();
        let a = trimmed_tangent_frame(&cloud, &nbr, 4, 2, 0.0).unwrap();
        let b = tangent_frame(&local_gram(&cloud, &nbr, 4), 2).unwrap();
        assert_eq!(a.coords, b.coords);
        assert_eq!(a.spectrum, b.spectrum);
    }

    #[test]
    fn trimming_removes_off_plane_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut coords = vec![0.5, 0.5, 0.0];
        for _ in 0..8 {
            coords.extend([
                0.4 + 0.2 * rng.random::<f64>(),
                0.4 + 0.2 * rng.random::<f64>(),
                0.0,
            ]);
        }
        // small enough that the first fit is still dominated by the plane
        coords.extend([0.52, 0.48, 0.1]);
        // far points so the outlier is still among the 10 nearest
        for _ in 0..20 {
            coords.extend([5.0 + rng.random::<f64>(), 5.0, 0.0]);
        }
        let cloud = PointCloud::from_flat(coords, 30, 3, 2).unwrap();
        let nbr = knn(&cloud, 10).unwrap();
        assert!(nbr.neighbors(0).contains(&9));
        let frame = trimmed_tangent_frame(&cloud, &nbr, 0, 2, 0.2).unwrap();
        let outlier_pos = nbr.neighbors(0).iter().position(|&j| j == 9).unwrap();
        assert!(frame.dropped.contains(&outlier_pos));

        let clean: Vec<usize> = (0..10).filter(|&r| r != outlier_pos).collect();
        let clean_rows: Vec<Vec<f64>> = clean
            .iter()
            .map(|&r| cloud.point(nbr.neighbors(0)[r]).to_vec())
            .collect();
        let disp = displacements_about(cloud.point(0), clean_rows.iter().map(Vec::as_slice));
        let reference = frame_from_displacements(&disp, clean.len(), 2).unwrap();
        let trimmed_rows: Vec<Vec<f64>> = clean
            .iter()
            .map(|&r| (0..2).map(|c| frame.coords[(r, c)]).collect())
            .collect();
        for (x, y) in pairwise(&trimmed_rows)
            .iter()
            .zip(pairwise(&frame_rows(&reference)))
        {
            assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn trimming_needs_enough_points() {
        let cloud = random_cloud(20, 2, 1);
        let nbr = knn(&cloud, 4).unwrap();
        assert!(trimmed_tangent_frame(&cloud, &nbr, 0, 2, 0.49).is_err());
    }
}
