//! Local Hessian functionals and the assembled penalty quadratic form.
//!
//! At every point the neighborhood's tangent coordinates `u_1..u_d` define a
//! `K x (1 + d + d(d+1)/2)` design `[1 | u_k | u_k * u_l]`. Modified
//! Gram-Schmidt on its columns leaves the last `d(d+1)/2` orthonormal
//! columns orthogonal to constants and linear terms; a triangular change of
//! basis within that block then fixes the response on the quadratic columns.
//! The resulting rows map neighborhood values to the second partials at the
//! center, exactly for quadratics in the tangent coordinates.

use std::path::Path;

use faer::{Mat, Side};
use rayon::prelude::*;

use crate::data::{DegeneratePolicy, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{knn, local_gram, tangent_frame, NeighborhoodIndex, TangentFrame};
use crate::sparse::SymmetricCsr;

/// A column is dependent when its residual norm falls below this fraction of its original norm.
const DEPENDENCE_TOL: f64 = 1e-10;

/// `(alpha, beta)` pairs with `alpha <= beta`, lexicographic.
pub fn hessian_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|a| (a..d).map(move |b| (a, b))).collect()
}

/// Second-partial estimator for one neighborhood.
#[derive(Debug, Clone)]
pub struct LocalHessian {
    /// `d(d+1)/2 x K`; row order follows [`hessian_pairs`].
    pub rows: Mat<f64>,
    pub dim: usize,
}

impl LocalHessian {
    /// Applies the estimator to neighborhood values `f`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        (0..self.rows.nrows())
            .map(|r| {
                (0..self.rows.ncols())
                    .map(|j| self.rows[(r, j)] * f[j])
                    .sum()
            })
            .collect()
    }

    /// Contraction weight of each row: 1 on the diagonal, 2 off it.
    pub fn contraction_weights(&self) -> Vec<f64> {
        hessian_pairs(self.dim)
            .into_iter()
            .map(|(a, b)| if a == b { 1.0 } else { 2.0 })
            .collect()
    }
}

/// Builds the local Hessian rows from a tangent frame.
pub fn local_hessian(frame: &TangentFrame) -> Result<LocalHessian> {
    let k = frame.len();
    let d = frame.dim();
    let pairs = hessian_pairs(d);
    let q = pairs.len();
    let m = 1 + d + q;
    if k < m {
        return Err(Error::RankDeficient {
            context: format!("{k} neighbors cannot determine {m} local quadratic terms"),
            rank: k,
            point: None,
        });
    }

    let design = Mat::from_fn(k, m, |r, c| {
        if c == 0 {
            1.0
        } else if c <= d {
            frame.coords[(r, c - 1)]
        } else {
            let (a, b) = pairs[c - 1 - d];
            frame.coords[(r, a)] * frame.coords[(r, b)]
        }
    });

    // A column that is tiny relative to the neighborhood's scale for its
    // degree counts as dependent even if it survives projection intact.
    let radius = (0..k)
        .map(|r| {
            (0..d)
                .map(|c| frame.coords[(r, c)].powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    let reference = |c: usize| {
        let degree = if c == 0 {
            0
        } else if c <= d {
            1
        } else {
            2
        };
        (k as f64).sqrt() * radius.powi(degree)
    };

    // Modified Gram-Schmidt, keeping R for the quadratic block.
    let mut basis = design.clone();
    let mut r_mat = Mat::<f64>::zeros(m, m);
    for c in 0..m {
        let original = basis.col(c).norm_l2().max(reference(c));
        for p in 0..c {
            let proj: f64 = (0..k).map(|r| basis[(r, p)] * basis[(r, c)]).sum();
            r_mat[(p, c)] = proj;
            for r in 0..k {
                let v = basis[(r, p)];
                basis[(r, c)] -= proj * v;
            }
        }
        let residual = basis.col(c).norm_l2();
        if !(original > 0.0) || residual <= DEPENDENCE_TOL * original {
            return Err(Error::RankDeficient {
                context: format!("local design column {c} is dependent on earlier columns"),
                rank: c,
                point: None,
            });
        }
        r_mat[(c, c)] = residual;
        for r in 0..k {
            basis[(r, c)] /= residual;
        }
    }

    // H = D R_qq^{-1} Q_q^T with D = 2 on squared terms and 1 on cross terms.
    let off = 1 + d;
    let mut r_inv = Mat::<f64>::zeros(q, q);
    for j in 0..q {
        r_inv[(j, j)] = 1.0 / r_mat[(off + j, off + j)];
        for i in (0..j).rev() {
            let s: f64 = ((i + 1)..=j)
                .map(|l| r_mat[(off + i, off + l)] * r_inv[(l, j)])
                .sum();
            r_inv[(i, j)] = -s / r_mat[(off + i, off + i)];
        }
    }
    let scale: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| if a == b { 2.0 } else { 1.0 })
        .collect();
    let rows = Mat::from_fn(q, k, |row, j| {
        let acc: f64 = (row..q)
            .map(|l| r_inv[(row, l)] * basis[(j, off + l)])
            .sum();
        scale[row] * acc
    });
    Ok(LocalHessian { rows, dim: d })
}

/// Estimated penalty `H` with `f^T H f ~ integral of ||Hess f||_F^2`.
#[derive(Debug, Clone)]
pub struct HessianForm {
    matrix: SymmetricCsr,
    k: usize,
    dim: usize,
    skipped: Vec<usize>,
}

/// Tangent frame for every neighborhood, computed in parallel.
pub fn tangent_frames(cloud: &PointCloud, nbr: &NeighborhoodIndex) -> Vec<Result<TangentFrame>> {
    let d = cloud.intrinsic_dim();
    (0..cloud.len())
        .into_par_iter()
        .map(|i| tangent_frame(&local_gram(cloud, nbr, i), d).map_err(|e| e.at_point(i)))
        .collect()
}

/// Contracts the local Hessians into the global `N x N` form.
///
/// Entry `(j, m)` is `(1/N) sum_i sum_rows c_row H_row,j H_row,m`. Blocks
/// are scattered in point order so the result does not depend on thread
/// scheduling.
pub fn assemble(
    nbr: &NeighborhoodIndex,
    frames: &[Result<TangentFrame>],
    policy: DegeneratePolicy,
) -> Result<HessianForm> {
    let n = nbr.len();
    if frames.len() != n {
        return Err(Error::DimensionMismatch {
            what: "tangent frames",
            expected: n,
            got: frames.len(),
        });
    }
    let k = nbr.k();
    let blocks: Vec<Result<(LocalHessian, Vec<f64>)>> = frames
        .par_iter()
        .enumerate()
        .map(|(i, frame)| {
            let frame = frame.as_ref().map_err(|e| clone_error(e).at_point(i))?;
            let lh = local_hessian(frame).map_err(|e| e.at_point(i))?;
            let weights = lh.contraction_weights();
            let mut block = vec![0.0; k * k];
            for a in 0..k {
                for b in 0..=a {
                    let v: f64 = weights
                        .iter()
                        .enumerate()
                        .map(|(r, c)| c * lh.rows[(r, a)] * lh.rows[(r, b)])
                        .sum::<f64>()
                        / n as f64;
                    block[a * k + b] = v;
                    block[b * k + a] = v;
                }
            }
            Ok((lh, block))
        })
        .collect();

    let mut dim = frames
        .iter()
        .find_map(|f| f.as_ref().ok().map(TangentFrame::dim));
    let mut skipped = Vec::new();
    let mut entries = Vec::with_capacity(n * k * k);
    for (i, block) in blocks.into_iter().enumerate() {
        match block {
            Ok((lh, block)) => {
                dim.get_or_insert(lh.dim);
                let idx = nbr.neighbors(i);
                for a in 0..k {
                    for b in 0..k {
                        entries.push((idx[a], idx[b], block[a * k + b]));
                    }
                }
            }
            Err(e) => match policy {
                DegeneratePolicy::Fail => return Err(e),
                DegeneratePolicy::SkipPoint => skipped.push(i),
            },
        }
    }
    if skipped.len() == n {
        return Err(Error::RankDeficient {
            context: "every neighborhood is degenerate".into(),
            rank: 0,
            point: None,
        });
    }
    Ok(HessianForm {
        matrix: SymmetricCsr::from_triplets(n, entries),
        k,
        dim: dim.unwrap_or(0),
        skipped,
    })
}

// Errors are not Clone (they may wrap io::Error); frames only carry numerical ones.
fn clone_error(e: &Error) -> Error {
    match e {
        Error::RankDeficient {
            context,
            rank,
            point,
        } => Error::RankDeficient {
            context: context.clone(),
            rank: *rank,
            point: *point,
        },
        Error::NonConvergence(s) => Error::NonConvergence(s.clone()),
        other => Error::InvalidArgument(other.to_string()),
    }
}

/// Neighborhood search, local PCA and assembly in one call.
pub fn estimate_hessian(
    cloud: &PointCloud,
    k: usize,
    policy: DegeneratePolicy,
) -> Result<HessianForm> {
    let min_k = crate::data::FitConfig::min_neighbors(cloud.intrinsic_dim());
    if k < min_k {
        return Err(Error::InvalidArgument(format!(
            "K = {k} is below the minimum {min_k} for d = {}",
            cloud.intrinsic_dim()
        )));
    }
    let nbr = knn(cloud, k)?;
    let frames = tangent_frames(cloud, &nbr);
    assemble(&nbr, &frames, policy)
}

/// Smallest eigenvectors of the penalty with the constant direction removed.
#[derive(Debug, Clone)]
pub struct NullEmbedding {
    /// `N x d` row-major coordinates, each column scaled to norm `sqrt(N)`.
    pub coords: Vec<f64>,
    pub dim: usize,
    /// Spectrum of the penalty restricted to the complement of constants, ascending.
    pub eigenvalues: Vec<f64>,
    /// Rayleigh quotient of the constant vector.
    pub constant_rayleigh: f64,
}

impl NullEmbedding {
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }
}

impl HessianForm {
    pub fn matrix(&self) -> &SymmetricCsr {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.dim() == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.dim
    }

    /// Points whose neighborhoods were degenerate and contribute nothing.
    pub fn skipped(&self) -> &[usize] {
        &self.skipped
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn norm(&self) -> f64 {
        self.matrix.norm_inf()
    }

    /// `f^T H f`.
    pub fn quadratic_form(&self, f: &[f64]) -> Result<f64> {
        if f.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "quadratic form argument",
                expected: self.len(),
                got: f.len(),
            });
        }
        Ok(self.matrix.quadratic(f))
    }

    pub fn to_dense(&self) -> Mat<f64> {
        self.matrix.to_dense()
    }

    /// Full spectrum, ascending. Dense, so intended for a few thousand points.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        self.to_dense()
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| Error::NonConvergence(format!("eigensolver: {e:?}")))
    }

    /// Relabels points: new index `r` is old index `perm[r]`.
    pub fn permuted(&self, perm: &[usize]) -> HessianForm {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let entries = self
            .matrix
            .iter()
            .map(|(r, c, v)| (inverse[r], inverse[c], v))
            .collect();
        HessianForm {
            matrix: SymmetricCsr::from_triplets(self.len(), entries),
            k: self.k,
            dim: self.dim,
            skipped: self.skipped.iter().map(|&s| inverse[s]).collect(),
        }
    }

    pub fn write_coordinate(&self, path: &Path) -> Result<()> {
        self.matrix.write_coordinate(path)
    }

    /// Eigenvectors of the `d` smallest nonconstant eigenvalues.
    pub fn null_embedding(&self, d: usize) -> Result<NullEmbedding> {
        let n = self.len();
        if n <= d + 1 {
            return Err(Error::InvalidArgument(format!(
                "need more than {} points for a {d}-dimensional embedding",
                d + 1
            )));
        }
        let dense = self.to_dense();
        let ones = vec![1.0; n];
        let constant_rayleigh = self.matrix.quadratic(&ones) / n as f64;

        // P H P + s 11^T / N with P = I - 11^T / N and s above the spectrum:
        // the constant direction moves to the top, the rest is the deflated spectrum.
        let row_mean: Vec<f64> = (0..n)
            .map(|r| (0..n).map(|c| dense[(r, c)]).sum::<f64>() / n as f64)
            .collect();
        let total_mean = row_mean.iter().sum::<f64>() / n as f64;
        let shift = 2.0 * self.norm() + 1.0;
        let deflated = Mat::from_fn(n, n, |r, c| {
            dense[(r, c)] - row_mean[r] - row_mean[c] + total_mean + shift / n as f64
        });
        let eig = deflated
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::NonConvergence(format!("eigensolver: {e:?}")))?;
        let s = eig.S().column_vector();
        let u = eig.U();
        let eigenvalues: Vec<f64> = (0..n - 1).map(|i| s[i]).collect();
        let scale = (n as f64).sqrt();
        let mut coords = vec![0.0; n * d];
        for c in 0..d {
            let col = u.col(c);
            let sign = (0..n)
                .map(|r| col[r])
                .find(|x| x.abs() > 1e-8)
                .map_or(1.0, f64::signum);
            for r in 0..n {
                coords[r * d + c] = sign * scale * col[r];
            }
        }
        Ok(NullEmbedding {
            coords,
            dim: d,
            eigenvalues,
            constant_rayleigh,
        })
    }
}

/// Number of eigenvalues (ascending input) before the sharpest relative jump
/// among the first `max_count + 1`, and the size of that jump.
///
/// Values below `floor` are clamped to it so that roundoff-level zeros
/// compare equal.
pub fn kernel_dimension(eigenvalues: &[f64], max_count: usize, floor: f64) -> (usize, f64) {
    let clamp = |v: f64| v.max(floor);
    (1..=max_count.min(eigenvalues.len().saturating_sub(1)))
        .map(|c| (c, clamp(eigenvalues[c]) / clamp(eigenvalues[c - 1])))
        .fold(
            (0, 1.0),
            |best, cur| if cur.1 > best.1 { cur } else { best },
        )
}
