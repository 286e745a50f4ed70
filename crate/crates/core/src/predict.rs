//! Out-of-sample prediction through local tangent charts, and spline classifiers.

use faer::linalg::solvers::SolveLstsq;
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::data::{DegeneratePolicy, PointCloud, ResponseVector};
use crate::error::{Error, Result};
use crate::geometry::{displacements_about, frame_from_displacements, nearest_to};
use crate::hessian::{estimate_hessian, HessianForm};
use crate::solver::fit;
use crate::tps::tps_fit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMethod {
    /// Near-interpolating thin-plate spline in tangent coordinates.
    #[default]
    LocalTps,
    /// Affine least squares in tangent coordinates.
    LocalLinear,
    /// Normalized inverse-distance weights; stays within the neighborhood's range.
    LocalConvex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub value: f64,
    pub method: PredictMethod,
    /// Data indices used, nearest first.
    pub neighborhood: Vec<usize>,
    /// Local PCA eigenvalues, decreasing.
    pub tangent_spectrum: Vec<f64>,
}

/// Relative smoothing of the local spline, scaled by the neighborhood's mean squared radius.
const LOCAL_LAMBDA_FACTOR: f64 = 1e-8;

/// Predicts the response at `x_star` from fitted values at the data points.
///
/// The `k` nearest data points and `x_star` itself are charted by local PCA
/// centered at `x_star`, so the query sits at the chart origin.
pub fn predict_oos(
    cloud: &PointCloud,
    fitted: &[f64],
    x_star: &[f64],
    k: usize,
    method: PredictMethod,
) -> Result<Prediction> {
    let n = cloud.len();
    let d = cloud.intrinsic_dim();
    if fitted.len() != n {
        return Err(Error::DimensionMismatch {
            what: "fitted values",
            expected: n,
            got: fitted.len(),
        });
    }
    if x_star.len() != cloud.n_features() {
        return Err(Error::DimensionMismatch {
            what: "query dimension",
            expected: cloud.n_features(),
            got: x_star.len(),
        });
    }
    if let Some(row) = x_star.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "query", row });
    }
    if k > n || k < d + 2 {
        return Err(Error::InvalidArgument(format!(
            "K = {k} must lie in {}..={n} for d = {d}",
            d + 2
        )));
    }

    let neighborhood = nearest_to(cloud, x_star, k, None);
    let disp = displacements_about(
        x_star,
        std::iter::once(x_star).chain(neighborhood.iter().map(|&j| cloud.point(j))),
    );
    let frame = frame_from_displacements(&disp, k + 1, d)?;
    // row 0 is the query at the origin; data rows follow
    let coords: Vec<f64> = (1..=k)
        .flat_map(|r| (0..d).map(move |c| (r, c)))
        .map(|(r, c)| frame.coords[(r, c)])
        .collect();
    let values: Vec<f64> = neighborhood.iter().map(|&j| fitted[j]).collect();

    let value = match method {
        PredictMethod::LocalTps => {
            let radius2: f64 = disp.iter().map(|v| v * v).sum();
            let lambda = LOCAL_LAMBDA_FACTOR * radius2 / k as f64;
            tps_fit(&coords, d, &values, lambda)?.eval(&vec![0.0; d])?
        }
        PredictMethod::LocalLinear => affine_at_origin(&coords, d, &values)?,
        PredictMethod::LocalConvex => inverse_distance(&coords, d, &values),
    };
    Ok(Prediction {
        value,
        method,
        neighborhood,
        tangent_spectrum: frame.spectrum,
    })
}

fn affine_at_origin(coords: &[f64], d: usize, values: &[f64]) -> Result<f64> {
    let k = values.len();
    let design = Mat::from_fn(
        k,
        d + 1,
        |r, c| if c == 0 { 1.0 } else { coords[r * d + c - 1] },
    );
    let sv = design
        .singular_values()
        .map_err(|e| Error::NonConvergence(format!("singular values: {e:?}")))?;
    if !(sv[d] > 1e-10 * sv[0]) {
        return Err(Error::RankDeficient {
            context: "local affine design".into(),
            rank: sv.iter().filter(|s| **s > 1e-10 * sv[0]).count(),
            point: None,
        });
    }
    let rhs = Mat::from_fn(k, 1, |r, _| values[r]);
    let coef = design.qr().solve_lstsq(&rhs);
    Ok(coef[(0, 0)])
}

fn inverse_distance(coords: &[f64], d: usize, values: &[f64]) -> f64 {
    let dists: Vec<f64> = (0..values.len())
        .map(|r| {
            coords[r * d..(r + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let exact: Vec<f64> = dists
        .iter()
        .zip(values)
        .filter(|(dist, _)| **dist == 0.0)
        .map(|(_, v)| *v)
        .collect();
    if !exact.is_empty() {
        return exact.iter().sum::<f64>() / exact.len() as f64;
    }
    let weights: Vec<f64> = dists.iter().map(|r| 1.0 / r).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().zip(values).map(|(w, v)| w * v).sum::<f64>() / total
}

/// One-vs-rest spline fits to class indicators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    /// Distinct labels, ascending.
    pub classes: Vec<i64>,
    /// Fitted indicator per scored class: one column for two classes, otherwise one per class.
    pub scores: Vec<Vec<f64>>,
    pub lambda: f64,
    #[serde(rename = "K")]
    pub k: usize,
}

impl ClassifierModel {
    /// Fitted label of every training point.
    pub fn training_labels(&self) -> Vec<i64> {
        let n = self.scores.first().map_or(0, Vec::len);
        (0..n)
            .map(|i| {
                let s: Vec<f64> = self.scores.iter().map(|col| col[i]).collect();
                decide(&self.classes, &s)
            })
            .collect()
    }
}

/// Turns per-class scores into a label.
///
/// With two classes a single score for the larger label is thresholded: at
/// most 0.5 gives the smaller label. Otherwise the highest score wins, ties
/// going to the earliest class.
pub fn decide(classes: &[i64], scores: &[f64]) -> i64 {
    if classes.len() == 2 && scores.len() == 1 {
        return if scores[0] <= 0.5 {
            classes[0]
        } else {
            classes[1]
        };
    }
    let mut best = 0;
    for (j, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = j;
        }
    }
    classes[best]
}

/// Builds the penalty and fits the indicator responses.
pub fn classify_fit(
    cloud: &PointCloud,
    labels: &[i64],
    lambda: f64,
    k: usize,
) -> Result<ClassifierModel> {
    let h = estimate_hessian(cloud, k, DegeneratePolicy::SkipPoint)?;
    classify_fit_with(&h, labels, lambda)
}

/// Fits indicator responses against an existing penalty.
pub fn classify_fit_with(h: &HessianForm, labels: &[i64], lambda: f64) -> Result<ClassifierModel> {
    if labels.len() != h.len() {
        return Err(Error::DimensionMismatch {
            what: "label count",
            expected: h.len(),
            got: labels.len(),
        });
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(
            "classification needs at least two distinct labels".into(),
        ));
    }
    let scored: &[i64] = if classes.len() == 2 {
        &classes[1..]
    } else {
        &classes
    };
    let scores = scored
        .iter()
        .map(|&c| {
            let y = labels.iter().map(|&l| f64::from(l == c)).collect();
            fit(h, &ResponseVector::new(y)?, lambda).map(|f| f.fitted)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassifierModel {
        classes,
        scores,
        lambda,
        k: h.k(),
    })
}

pub fn classify_predict(
    model: &ClassifierModel,
    cloud: &PointCloud,
    x_star: &[f64],
    k: usize,
    method: PredictMethod,
) -> Result<i64> {
    let scores = model
        .scores
        .iter()
        .map(|col| predict_oos(cloud, col, x_star, k, method).map(|p| p.value))
        .collect::<Result<Vec<_>>>()?;
    Ok(decide(&model.classes, &scores))
}
