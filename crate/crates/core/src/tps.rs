//! Euclidean thin-plate splines in dimensions 1 to 3.

use std::f64::consts::PI;

use faer::linalg::solvers::Solve;
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radial Green's function of the iterated Laplacian used as the spline basis.
///
/// `d = 1`: `r^3 / 12`; `d = 2`: `r^2 log r / (8 pi)`; `d = 3`: `-r / (8 pi)`.
/// All three vanish at `r = 0`. Higher dimensions are singular at the origin
/// and rejected.
pub fn green_kernel(r: f64, d: usize) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "radius must be nonnegative, got {r}"
        )));
    }
    kernel_fn(d).map(|k| k(r))
}

fn kernel_fn(d: usize) -> Result<fn(f64) -> f64> {
    match d {
        1 => Ok(|r| r * r * r / 12.0),
        2 => Ok(|r| {
            if r == 0.0 {
                0.0
            } else {
                r * r * r.ln() / (8.0 * PI)
            }
        }),
        3 => Ok(|r| -r / (8.0 * PI)),
        _ => Err(Error::InvalidArgument(format!(
            "thin-plate kernels are defined for dimensions 1 to 3, got {d}"
        ))),
    }
}

/// Fitted spline `f(x) = sum_i a_i G(|x - c_i|) + b_0 + sum_j b_j x_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsModel {
    /// `M x d`, row-major.
    pub centers: Vec<f64>,
    pub a: Vec<f64>,
    /// Intercept first.
    pub b: Vec<f64>,
    pub lambda: f64,
    pub dim: usize,
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Fits the smoothing spline through `y` at `centers` (`M x dim`, row-major).
pub fn tps_fit(centers: &[f64], dim: usize, y: &[f64], lambda: f64) -> Result<TpsModel> {
    let kernel = kernel_fn(dim)?;
    if !centers.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument(format!(
            "{} center coordinates do not split into rows of {dim}",
            centers.len()
        )));
    }
    let m = centers.len() / dim;
    if y.len() != m {
        return Err(Error::DimensionMismatch {
            what: "spline responses",
            expected: m,
            got: y.len(),
        });
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    let p = dim + 1;
    if m < p {
        return Err(Error::RankDeficient {
            context: format!("{m} centers cannot determine an affine function in {dim} dimensions"),
            rank: m,
            point: None,
        });
    }
    let row = |i: usize| &centers[i * dim..(i + 1) * dim];
    if lambda == 0.0 {
        for i in 0..m {
            for j in 0..i {
                if dist(row(i), row(j)) == 0.0 {
                    return Err(Error::Singular(format!(
                        "centers {j} and {i} coincide; interpolation needs lambda > 0"
                    )));
                }
            }
        }
    }

    let design = Mat::from_fn(m, p, |i, c| if c == 0 { 1.0 } else { row(i)[c - 1] });
    let sv = design
        .singular_values()
        .map_err(|e| Error::NonConvergence(format!("singular values: {e:?}")))?;
    let (smax, smin) = (sv[0], sv[p - 1]);
    if !(smin > 1e-10 * smax) {
        return Err(Error::RankDeficient {
            context: "spline centers are affinely dependent".into(),
            rank: sv.iter().filter(|s| **s > 1e-10 * smax).count(),
            point: None,
        });
    }

    let system = Mat::from_fn(m, m, |i, j| {
        kernel(dist(row(i), row(j))) + if i == j { lambda } else { 0.0 }
    });
    let lu = system.partial_piv_lu();
    let rhs = Mat::from_fn(m, p + 1, |i, c| if c < p { design[(i, c)] } else { y[i] });
    let z = lu.solve(&rhs);
    // normal equations X^T A^{-1} X b = X^T A^{-1} y
    let xt_z = design.transpose() * &z;
    let small = Mat::from_fn(p, p, |r, c| xt_z[(r, c)]);
    let small_rhs = Mat::from_fn(p, 1, |r, _| xt_z[(r, p)]);
    let b_mat = small.partial_piv_lu().solve(&small_rhs);
    let b: Vec<f64> = (0..p).map(|r| b_mat[(r, 0)]).collect();
    let a: Vec<f64> = (0..m)
        .map(|i| z[(i, p)] - (0..p).map(|c| z[(i, c)] * b[c]).sum::<f64>())
        .collect();

    if a.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::Singular("kernel system is singular".into()));
    }
    let model = TpsModel {
        centers: centers.to_vec(),
        a,
        b,
        lambda,
        dim,
    };
    let scale = y.iter().fold(0.0, |acc: f64, v| acc.max(v.abs())).max(1.0);
    if model.stationarity_residual(y)? > 1e-6 * scale {
        return Err(Error::Singular(
            "kernel system is numerically singular".into(),
        ));
    }
    Ok(model)
}

impl TpsModel {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "query dimension",
                expected: self.dim,
                got: x.len(),
            });
        }
        let kernel = kernel_fn(self.dim)?;
        let radial: f64 = (0..self.len())
            .map(|i| self.a[i] * kernel(dist(x, self.center(i))))
            .sum();
        let affine: f64 = self.b[0] + x.iter().zip(&self.b[1..]).map(|(x, b)| x * b).sum::<f64>();
        Ok(radial + affine)
    }

    /// Largest entry of `|G a + X b - y + lambda a|` and `|X^T a|`.
    pub fn stationarity_residual(&self, y: &[f64]) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for i in 0..self.len() {
            let r = self.eval(self.center(i))? - y[i] + self.lambda * self.a[i];
            worst = worst.max(r.abs());
        }
        worst = worst.max(self.a.iter().sum::<f64>().abs());
        for c in 0..self.dim {
            let s: f64 = (0..self.len()).map(|i| self.a[i] * self.center(i)[c]).sum();
            worst = worst.max(s.abs());
        }
        Ok(worst)
    }
}

pub fn tps_eval(model: &TpsModel, x: &[f64]) -> Result<f64> {
    model.eval(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Natural cubic interpolating spline via the tridiagonal second-derivative system.
    fn natural_cubic(x: &[f64], y: &[f64], t: f64) -> f64 {
        let n = x.len();
        let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
        // unknown second derivatives at interior knots; zero at the ends
        let m = n - 2;
        let mut diag = vec![0.0; m];
        let mut upper = vec![0.0; m];
        let mut lower = vec![0.0; m];
        let mut rhs = vec![0.0; m];
        for k in 0..m {
            let i = k + 1;
            lower[k] = h[i - 1];
            diag[k] = 2.0 * (h[i - 1] + h[i]);
            upper[k] = h[i];
            rhs[k] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
        }
        for k in 1..m {
            let f = lower[k] / diag[k - 1];
            diag[k] -= f * upper[k - 1];
            rhs[k] -= f * rhs[k - 1];
        }
        let mut second = vec![0.0; n];
        for k in (0..m).rev() {
            let next = if k + 1 < m { second[k + 2] } else { 0.0 };
            second[k + 1] = (rhs[k] - upper[k] * next) / diag[k];
        }
        let i = (0..n - 1)
            .rev()
            .find(|&i| t >= x[i])
            .unwrap_or(0)
            .min(n - 2);
        if t < x[0] || t > x[n - 1] {
            // natural splines continue linearly
            let (i, end) = if t < x[0] {
                (0, x[0])
            } else {
                (n - 2, x[n - 1])
            };
            let slope_at = |s: f64| {
                let hi = h[i];
                let (a, b) = (x[i + 1] - s, s - x[i]);
                -second[i] * a * a / (2.0 * hi)
                    + second[i + 1] * b * b / (2.0 * hi)
                    + (y[i + 1] - y[i]) / hi
                    - (second[i + 1] - second[i]) * hi / 6.0
            };
            return natural_cubic(x, y, end) + slope_at(end) * (t - end);
        }
        let hi = h[i];
        let (a, b) = (x[i + 1] - t, t - x[i]);
        second[i] * a * a * a / (6.0 * hi)
            + second[i + 1] * b * b * b / (6.0 * hi)
            + (y[i] / hi - second[i] * hi / 6.0) * a
            + (y[i + 1] / hi - second[i + 1] * hi / 6.0) * b
    }

    #[test]
    fn kernel_values() {
        assert_eq!(green_kernel(0.0, 2).unwrap(), 0.0);
        assert_eq!(green_kernel(1.0, 2).unwrap(), 0.0);
        assert!((green_kernel(2.0, 1).unwrap() - 8.0 / 12.0).abs() < 1e-15);
        assert!((green_kernel(2.0, 3).unwrap() + 2.0 / (8.0 * PI)).abs() < 1e-15);
        assert!(green_kernel(1.0, 4).is_err());
        assert!(green_kernel(-1.0, 2).is_err());
    }

    #[test]
    fn one_dimensional_constant_from_gamma_values() {
        // Gamma(-3/2) = 4 sqrt(pi) / 3, divided by 16 sqrt(pi)
        let constant = (4.0 * PI.sqrt() / 3.0) / (16.0 * PI.sqrt());
        assert!((constant - 1.0 / 12.0).abs() < 1e-15);
        // Gamma(-1/2) = -2 sqrt(pi), divided by 16 pi^{3/2}
        let constant3 = (-2.0 * PI.sqrt()) / (16.0 * PI.powf(1.5));
        assert!((constant3 + 1.0 / (8.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn matches_natural_cubic_spline_on_three_knots() {
        let x = [0.0, 1.0, 2.0];
        let y = [0.0, 1.0, 0.0];
        let model = tps_fit(&x, 1, &y, 0.0).unwrap();
        for k in 0..20 {
            let t = -0.5 + 3.0 * k as f64 / 19.0;
            let want = natural_cubic(&x, &y, t);
            assert!((model.eval(&[t]).unwrap() - want).abs() < 1e-8, "t = {t}");
        }
    }

    #[test]
    fn matches_natural_cubic_spline_on_irregular_knots() {
        let x = [-1.0, -0.2, 0.3, 1.1, 2.5, 2.7, 4.0];
        let y = [0.3, -1.0, 2.0, 0.5, 0.0, 0.4, -0.7];
        let model = tps_fit(&x, 1, &y, 0.0).unwrap();
        for k in 0..40 {
            let t = -1.0 + 5.0 * k as f64 / 39.0;
            assert!((model.eval(&[t]).unwrap() - natural_cubic(&x, &y, t)).abs() < 1e-8);
        }
    }

    fn random_centers(m: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn stationarity_in_two_dimensions() {
        let c = random_centers(30, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        for lambda in [0.0, 0.01, 1.0] {
            let model = tps_fit(&c, 2, &y, lambda).unwrap();
            assert!(model.stationarity_residual(&y).unwrap() < 1e-8);
        }
    }

    #[test]
    fn interpolates_at_zero_lambda() {
        for d in 1..=3 {
            let c = random_centers(25, d, 3 + d as u64);
            let y: Vec<f64> = (0..25).map(|i| (i as f64).sin()).collect();
            let model = tps_fit(&c, d, &y, 0.0).unwrap();
            for i in 0..25 {
                assert!((model.eval(model.center(i)).unwrap() - y[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn affine_data_has_no_radial_part() {
        let c = random_centers(20, 2, 5);
        let y: Vec<f64> = (0..20)
            .map(|i| 0.5 - 2.0 * c[2 * i] + 3.0 * c[2 * i + 1])
            .collect();
        for lambda in [0.0, 0.3, 100.0] {
            let model = tps_fit(&c, 2, &y, lambda).unwrap();
            assert!(model.a.iter().all(|a| a.abs() < 1e-8));
            for (got, want) in model.b.iter().zip([0.5, -2.0, 3.0]) {
                assert!((got - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn huge_lambda_tends_to_least_squares() {
        let c = random_centers(40, 2, 6);
        let y: Vec<f64> = (0..40)
            .map(|i| (3.0 * c[2 * i]).sin() + c[2 * i + 1].powi(2))
            .collect();
        let model = tps_fit(&c, 2, &y, 1e12).unwrap();
        // closed-form least squares through the normal equations
        let mut xtx = [[0.0; 3]; 3];
        let mut xty = [0.0; 3];
        for i in 0..40 {
            let row = [1.0, c[2 * i], c[2 * i + 1]];
            for r in 0..3 {
                xty[r] += row[r] * y[i];
                for s in 0..3 {
                    xtx[r][s] += row[r] * row[s];
                }
            }
        }
        let m = Mat::from_fn(3, 3, |r, s| xtx[r][s]);
        let coef = m.partial_piv_lu().solve(&Mat::from_fn(3, 1, |r, _| xty[r]));
        for i in 0..40 {
            let want = coef[(0, 0)] + coef[(1, 0)] * c[2 * i] + coef[(2, 0)] * c[2 * i + 1];
            let got = model.eval(model.center(i)).unwrap();
            assert!((got - want).abs() <= 1e-4 * want.abs().max(1.0));
        }
    }

    #[test]
    fn evaluation_is_the_representer_sum() {
        let c = random_centers(15, 1, 7);
        let y: Vec<f64> = (0..15).map(|i| i as f64 * 0.1).map(f64::cos).collect();
        let model = tps_fit(&c, 1, &y, 0.05).unwrap();
        for x in [-50.0, 3.0, 120.0] {
            let mut want = model.b[0] + model.b[1] * x;
            let mut magnitude = want.abs();
            for i in 0..15 {
                let term = model.a[i] * (x - c[i]).abs().powi(3) / 12.0;
                want += term;
                magnitude += term.abs();
            }
            // far away the radial terms cancel, so compare against their size
            assert!((model.eval(&[x]).unwrap() - want).abs() <= 1e-12 * magnitude.max(1.0));
        }
    }

    #[test]
    fn translation_invariance() {
        let c = random_centers(20, 3, 8);
        let y: Vec<f64> = (0..20).map(|i| (i as f64).sqrt()).collect();
        let shift = [5.0, -3.0, 0.25];
        let moved: Vec<f64> = c
            .iter()
            .enumerate()
            .map(|(i, v)| v + shift[i % 3])
            .collect();
        let m1 = tps_fit(&c, 3, &y, 0.1).unwrap();
        let m2 = tps_fit(&moved, 3, &y, 0.1).unwrap();
        let q = [0.1, 0.2, -0.3];
        let q2: Vec<f64> = q.iter().zip(shift).map(|(a, b)| a + b).collect();
        assert!((m1.eval(&q).unwrap() - m2.eval(&q2).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn zero_radial_part_is_affine() {
        let model = TpsModel {
            centers: vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            a: vec![0.0; 3],
            b: vec![1.0, 2.0, -1.0],
            lambda: 0.0,
            dim: 2,
        };
        assert_eq!(tps_eval(&model, &[0.5, 2.0]).unwrap(), 1.0 + 1.0 - 2.0);
        assert!(tps_eval(&model, &[0.5]).is_err());
    }

    #[test]
    fn invalid_inputs() {
        // collinear in 2-D
        let line = [0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        assert!(matches!(
            tps_fit(&line, 2, &[0.0, 1.0, 2.0, 3.0], 0.1),
            Err(Error::RankDeficient { .. })
        ));
        let dup = [0.0, 1.0, 1.0, 2.0];
        assert!(matches!(
            tps_fit(&dup, 1, &[0.0, 1.0, 1.5, 2.0], 0.0),
            Err(Error::Singular(_))
        ));
        assert!(tps_fit(&dup, 1, &[0.0, 1.0, 1.5, 2.0], 0.1).is_ok());
        assert!(tps_fit(&[0.0; 8], 4, &[0.0, 1.0], 0.0).is_err());
    }
}
