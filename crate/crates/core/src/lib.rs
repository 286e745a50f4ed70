//! Hessian smoothing splines for data sampled from flat manifolds.
//!
//! A point cloud in `R^n` is assumed to lie near a `d`-dimensional flat
//! manifold. [`hessian::estimate_hessian`] builds a sparse penalty `H` with
//! `f^T H f` approximating the integrated squared Hessian of `f` along the
//! manifold, using nothing but the samples. Smoothing with that penalty
//! ([`solver`]) needs no coordinates on the manifold; new points are handled
//! by local tangent charts ([`predict`]) and the bottom of the spectrum
//! recovers isometric coordinates ([`hessian::HessianForm::null_embedding`]).
//!
//! ```no_run
//! use hspline::{estimate_hessian, fit, generate, response, DegeneratePolicy};
//! use hspline::{ManifoldKind, ManifoldSpec, ResponseFn};
//!
//! let truth = generate(&ManifoldSpec::new(ManifoldKind::SwissRoll, 7), 2000)?;
//! let y = response(&truth.params, &ResponseFn::Linear { offset: 0.0, gradient: vec![1.0, 0.5] })?;
//! let h = estimate_hessian(&truth.embedded, 12, DegeneratePolicy::SkipPoint)?;
//! let g = fit(&h, &y, 1.0)?;
//! println!("effective dof {:?}", g.diagnostics.effective_dof);
//! # Ok::<(), hspline::Error>(())
//! ```

// NaN-rejecting guards are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod geometry;
pub mod hessian;
pub mod manifolds;
pub mod predict;
pub mod solver;
pub mod sparse;
pub mod tps;

pub use data::{
    load_dataset, load_fit, save_fit, DataFormat, Dataset, DegeneratePolicy, FitConfig, PointCloud,
    ResponseVector, WeightVector,
};
pub use error::{Error, ErrorClass, Result};
pub use geometry::{knn, tangent_frame, NeighborhoodIndex, TangentFrame};
pub use hessian::{estimate_hessian, local_hessian, HessianForm, LocalHessian, NullEmbedding};
pub use manifolds::{
    add_noise, generate, response, GroundTruth, ManifoldKind, ManifoldSpec, ResponseFn,
};
pub use predict::{
    classify_fit, classify_fit_with, classify_predict, predict_oos, ClassifierModel, PredictMethod,
    Prediction,
};
pub use solver::{
    cv_select, default_lambda_grid, fit, fit_weighted, fit_with, reweight_fit, variance_diagnostic,
    CvMethod, CvReport, FitDiagnostics, ReweightOptions, RhoScale, SolveOptions, SolverKind,
    SplineFit, VarianceReport,
};
pub use sparse::SymmetricCsr;
pub use tps::{green_kernel, tps_eval, tps_fit, TpsModel};
