//! Penalized least squares with the Hessian penalty:
//! `g = argmin sum_i w_i (y_i - g_i)^2 + lambda g^T H g`, i.e. `(W + lambda H) g = W y`.

use faer::prelude::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::SparseColMat;
use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ResponseVector, WeightVector};
use crate::error::{Error, Result};
use crate::hessian::HessianForm;

/// Above this size dense eigendecompositions are replaced by repeated sparse solves.
pub const DENSE_LIMIT: usize = 3000;
/// Above this size the effective degrees of freedom are estimated stochastically.
const EXACT_DOF_LIMIT: usize = 5000;
const HUTCHINSON_PROBES: usize = 64;
const SOLVE_BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Sparse Cholesky with iterative refinement.
    #[default]
    Cholesky,
    /// Jacobi-preconditioned conjugate gradients.
    ConjugateGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub kind: SolverKind,
    /// Target normwise backward error `|A x - b| / (|A| |x| + |b|)`.
    pub tolerance: f64,
    pub max_refinements: usize,
    /// Conjugate-gradient iteration cap; `None` means `10 N`.
    pub max_cg_iterations: Option<usize>,
    /// Reject nearly singular systems when some weights vanish.
    pub check_singular: bool,
    /// Compute `trace(S)`; costs one solve per point below the exact limit.
    pub effective_dof: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            kind: SolverKind::Cholesky,
            tolerance: 1e-10,
            max_refinements: 3,
            max_cg_iterations: None,
            check_singular: true,
            effective_dof: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// `trace((W + lambda H)^{-1} W)`, when requested.
    pub effective_dof: Option<f64>,
    /// False when `effective_dof` is a randomized trace estimate.
    pub effective_dof_exact: bool,
    /// `|y - fitted|`.
    pub residual_norm: f64,
    /// Normwise backward error of the final linear solve.
    pub backward_error: f64,
    pub skipped_points: usize,
    pub solver: SolverKind,
    /// Reweighting reached its tolerance (always true for a single solve).
    pub converged: bool,
    /// Scale of the reweighting function, when reweighting was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineFit {
    pub fitted: Vec<f64>,
    pub lambda: f64,
    pub weights: WeightVector,
    /// Number of weight updates (0 for a plain fit).
    pub iterations: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub diagnostics: FitDiagnostics,
}

impl SplineFit {
    pub fn residuals(&self, y: &ResponseVector) -> Vec<f64> {
        y.as_slice()
            .iter()
            .zip(&self.fitted)
            .map(|(a, b)| a - b)
            .collect()
    }
}

/// `W + lambda H`, factored once.
struct System<'a> {
    h: &'a HessianForm,
    weights: &'a [f64],
    lambda: f64,
    norm: f64,
    kind: SolverKind,
    llt: Option<Llt<usize, f64>>,
}

impl<'a> System<'a> {
    fn new(
        h: &'a HessianForm,
        weights: &'a [f64],
        lambda: f64,
        kind: SolverKind,
        symbolic: Option<&SymbolicLlt<usize>>,
    ) -> Result<Self> {
        let norm = weights.iter().fold(0.0, |m: f64, w| m.max(*w)) + lambda * h.norm();
        let llt = match kind {
            SolverKind::Cholesky => {
                let a = h.matrix().shifted(weights, lambda)?;
                Some(factor(&a, symbolic)?)
            }
            SolverKind::ConjugateGradient => None,
        };
        Ok(Self {
            h,
            weights,
            lambda,
            norm,
            kind,
            llt,
        })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let hx = self.h.matrix().matvec(x);
        x.iter()
            .zip(&hx)
            .zip(self.weights)
            .map(|((xi, hi), w)| w * xi + self.lambda * hi)
            .collect()
    }

    fn backward_error(&self, x: &[f64], b: &[f64]) -> f64 {
        let r = self.apply(x);
        let res = norm2(&r.iter().zip(b).map(|(a, b)| a - b).collect::<Vec<_>>());
        let denom = self.norm * norm2(x) + norm2(b);
        if denom == 0.0 {
            0.0
        } else {
            res / denom
        }
    }

    fn solve_direct(&self, b: &[f64]) -> Vec<f64> {
        let llt = self
            .llt
            .as_ref()
            .expect("direct solve needs a factorization");
        let rhs = Mat::from_fn(b.len(), 1, |r, _| b[r]);
        let x = llt.solve(&rhs);
        (0..b.len()).map(|r| x[(r, 0)]).collect()
    }

    /// Solves `A x = b`, returning the solution and its backward error.
    fn solve(&self, b: &[f64], opts: &SolveOptions) -> Result<(Vec<f64>, f64)> {
        match self.kind {
            SolverKind::Cholesky => {
                let mut x = self.solve_direct(b);
                let mut err = self.backward_error(&x, b);
                for _ in 0..opts.max_refinements {
                    if err <= opts.tolerance * 1e-3 {
                        break;
                    }
                    let ax = self.apply(&x);
                    let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
                    let dx = self.solve_direct(&r);
                    let candidate: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + d).collect();
                    let cand_err = self.backward_error(&candidate, b);
                    if cand_err >= err {
                        break;
                    }
                    x = candidate;
                    err = cand_err;
                }
                Ok((x, err))
            }
            SolverKind::ConjugateGradient => self.solve_cg(b, opts),
        }
    }

    fn solve_cg(&self, b: &[f64], opts: &SolveOptions) -> Result<(Vec<f64>, f64)> {
        let n = b.len();
        let precond: Vec<f64> = self
            .h
            .matrix()
            .diagonal()
            .iter()
            .zip(self.weights)
            .map(|(d, w)| {
                let v = w + self.lambda * d;
                if v > 0.0 {
                    1.0 / v
                } else {
                    1.0
                }
            })
            .collect();
        let max_iter = opts.max_cg_iterations.unwrap_or(10 * n.max(1));
        let mut x = vec![0.0; n];
        let mut r = b.to_vec();
        let mut z: Vec<f64> = r.iter().zip(&precond).map(|(a, p)| a * p).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for _ in 0..max_iter {
            let err = norm2(&r) / (self.norm * norm2(&x) + norm2(b)).max(f64::MIN_POSITIVE);
            if err <= opts.tolerance {
                // recompute from scratch so the reported error is not the recurrence's
                let err = self.backward_error(&x, b);
                if err <= opts.tolerance {
                    return Ok((x, err));
                }
                let ax = self.apply(&x);
                r = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
                z = r.iter().zip(&precond).map(|(a, p)| a * p).collect();
                p = z.clone();
                rz = dot(&r, &z);
            }
            let ap = self.apply(&p);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                return Err(Error::Singular(
                    "conjugate gradients met a direction of nonpositive curvature".into(),
                ));
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            z = r.iter().zip(&precond).map(|(a, p)| a * p).collect();
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        let err = self.backward_error(&x, b);
        if err <= opts.tolerance {
            Ok((x, err))
        } else {
            Err(Error::NonConvergence(format!(
                "conjugate gradients stopped after {max_iter} iterations at backward error {err:.3e}"
            )))
        }
    }

    /// Columns of `A^{-1}` for the given unit vectors, in blocks.
    fn inverse_columns(&self, cols: &[usize], opts: &SolveOptions) -> Result<Vec<Vec<f64>>> {
        let n = self.weights.len();
        match &self.llt {
            Some(llt) => Ok(cols
                .chunks(SOLVE_BLOCK)
                .flat_map(|chunk| {
                    let rhs = Mat::from_fn(n, chunk.len(), |r, c| f64::from(r == chunk[c]));
                    let x = llt.solve(&rhs);
                    (0..chunk.len())
                        .map(|c| (0..n).map(|r| x[(r, c)]).collect::<Vec<_>>())
                        .collect::<Vec<_>>()
                })
                .collect()),
            None => cols
                .iter()
                .map(|&c| {
                    let mut e = vec![0.0; n];
                    e[c] = 1.0;
                    self.solve(&e, opts).map(|(x, _)| x)
                })
                .collect(),
        }
    }

    /// Inverse-iteration estimate of the smallest eigenvalue.
    fn smallest_eigenvalue(&self, opts: &SolveOptions) -> Result<f64> {
        let n = self.weights.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        scale_to_unit(&mut v);
        let mut estimate = f64::INFINITY;
        for _ in 0..30 {
            let (mut x, _) = self.solve(&v, opts)?;
            let growth = norm2(&x);
            if !growth.is_finite() {
                return Ok(0.0);
            }
            let next = 1.0 / growth;
            scale_to_unit(&mut x);
            v = x;
            if (next - estimate).abs() <= 1e-6 * next {
                return Ok(next);
            }
            estimate = next;
        }
        Ok(estimate)
    }
}

fn factor(
    a: &SparseColMat<usize, f64>,
    symbolic: Option<&SymbolicLlt<usize>>,
) -> Result<Llt<usize, f64>> {
    let result = match symbolic {
        Some(sym) => Llt::try_new_with_symbolic(sym.clone(), a.as_ref(), Side::Lower),
        None => a.sp_cholesky(Side::Lower),
    };
    result.map_err(|e| Error::Singular(format!("Cholesky factorization failed: {e:?}")))
}

fn symbolic_for(h: &HessianForm) -> Result<SymbolicLlt<usize>> {
    let pattern = h.matrix().shifted(&vec![1.0; h.len()], 1.0)?;
    SymbolicLlt::try_new(pattern.symbolic(), Side::Lower)
        .map_err(|e| Error::Singular(format!("symbolic factorization failed: {e:?}")))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn scale_to_unit(v: &mut [f64]) {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn check_inputs(h: &HessianForm, y: &ResponseVector, w: &WeightVector, lambda: f64) -> Result<()> {
    y.expect_len(h.len())?;
    if w.len() != h.len() {
        return Err(Error::DimensionMismatch {
            what: "weight length",
            expected: h.len(),
            got: w.len(),
        });
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    Ok(())
}

/// Unweighted fit: `(I + lambda H) g = y`.
pub fn fit(h: &HessianForm, y: &ResponseVector, lambda: f64) -> Result<SplineFit> {
    fit_weighted(h, y, &WeightVector::ones(h.len()), lambda)
}

/// Weighted fit: `(W + lambda H) g = W y`.
pub fn fit_weighted(
    h: &HessianForm,
    y: &ResponseVector,
    w: &WeightVector,
    lambda: f64,
) -> Result<SplineFit> {
    fit_with(h, y, w, lambda, &SolveOptions::default())
}

pub fn fit_with(
    h: &HessianForm,
    y: &ResponseVector,
    w: &WeightVector,
    lambda: f64,
    opts: &SolveOptions,
) -> Result<SplineFit> {
    check_inputs(h, y, w, lambda)?;
    let n = h.len();
    let weights = w.as_slice();
    let has_zero = weights.contains(&0.0);

    if lambda == 0.0 {
        if has_zero {
            return Err(Error::Singular(
                "lambda = 0 leaves zero-weight observations undetermined".into(),
            ));
        }
        return Ok(SplineFit {
            fitted: y.as_slice().to_vec(),
            lambda,
            weights: w.clone(),
            iterations: 0,
            k: h.k(),
            diagnostics: FitDiagnostics {
                effective_dof: Some(n as f64),
                effective_dof_exact: true,
                residual_norm: 0.0,
                backward_error: 0.0,
                skipped_points: h.skipped().len(),
                solver: opts.kind,
                converged: true,
                rho_scale: None,
            },
        });
    }

    let system = System::new(h, weights, lambda, opts.kind, None)?;
    if has_zero && opts.check_singular {
        let smallest = system.smallest_eigenvalue(opts)?;
        if smallest < 1e-13 * system.norm {
            return Err(Error::Singular(format!(
                "zero weights leave the penalty null space undetermined \
                 (smallest eigenvalue {smallest:.3e})"
            )));
        }
    }
    let rhs: Vec<f64> = y
        .as_slice()
        .iter()
        .zip(weights)
        .map(|(y, w)| y * w)
        .collect();
    let (fitted, backward_error) = system.solve(&rhs, opts)?;
    let (effective_dof, effective_dof_exact) = if opts.effective_dof {
        let (dof, exact) = effective_dof(&system, opts)?;
        (Some(dof), exact)
    } else {
        (None, false)
    };
    let residual_norm = norm2(
        &y.as_slice()
            .iter()
            .zip(&fitted)
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>(),
    );
    Ok(SplineFit {
        fitted,
        lambda,
        weights: w.clone(),
        iterations: 0,
        k: h.k(),
        diagnostics: FitDiagnostics {
            effective_dof,
            effective_dof_exact,
            residual_norm,
            backward_error,
            skipped_points: h.skipped().len(),
            solver: opts.kind,
            converged: true,
            rho_scale: None,
        },
    })
}

fn effective_dof(system: &System, opts: &SolveOptions) -> Result<(f64, bool)> {
    let n = system.weights.len();
    if n <= EXACT_DOF_LIMIT {
        let cols: Vec<usize> = (0..n).collect();
        let inv = system.inverse_columns(&cols, opts)?;
        let trace = inv
            .iter()
            .enumerate()
            .map(|(i, col)| system.weights[i] * col[i])
            .sum();
        return Ok((trace, true));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xd0f);
    let mut total = 0.0;
    for _ in 0..HUTCHINSON_PROBES {
        let z: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let wz: Vec<f64> = z.iter().zip(system.weights).map(|(a, w)| a * w).collect();
        let (x, _) = system.solve(&wz, opts)?;
        total += dot(&z, &x);
    }
    Ok((total / HUTCHINSON_PROBES as f64, false))
}

/// Scale of the reweighting function `rho(r) = exp(-r / (2 s))`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RhoScale {
    /// `1.4826 * MAD` of the residuals of the initial unweighted fit.
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReweightOptions {
    pub rho_scale: RhoScale,
    pub max_iter: usize,
    /// Stop once no weight moves by more than this.
    pub tol: f64,
}

impl Default for ReweightOptions {
    fn default() -> Self {
        Self {
            rho_scale: RhoScale::Auto,
            max_iter: 10,
            tol: 1e-6,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median absolute deviation scaled to estimate a normal standard deviation.
pub fn robust_scale(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let center = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - center).abs()).collect();
    1.4826 * median(&mut dev)
}

/// Iteratively downweights observations with large residuals.
///
/// Starting from unit weights, each pass fits with the current weights,
/// multiplies every weight by `rho(|y_i - g_i|)`, and rescales them to sum
/// to `N`. The returned fit uses the final weights.
pub fn reweight_fit(
    h: &HessianForm,
    y: &ResponseVector,
    lambda: f64,
    opts: &ReweightOptions,
) -> Result<SplineFit> {
    if opts.max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
    }
    if let RhoScale::Fixed(s) = opts.rho_scale {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "reweighting scale must be positive, got {s}"
            )));
        }
    }
    let n = h.len();
    let mut weights = WeightVector::ones(n);
    let mut current = fit_weighted(h, y, &weights, lambda)?;
    let scale = match opts.rho_scale {
        RhoScale::Fixed(s) => s,
        RhoScale::Auto => robust_scale(&current.residuals(y)),
    };
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let updated: Vec<f64> = current
            .residuals(y)
            .iter()
            .zip(weights.as_slice())
            .map(|(r, w)| {
                // a zero scale only arises from exactly reproduced data
                let rho = if scale > 0.0 {
                    (-r.abs() / (2.0 * scale)).exp()
                } else {
                    1.0
                };
                rho * w
            })
            .collect();
        let next = WeightVector::new(updated)
            .map_err(|_| Error::NonConvergence("reweighting drove every weight to zero".into()))?
            .normalized();
        let change = next
            .as_slice()
            .iter()
            .zip(weights.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        weights = next;
        current = fit_weighted(h, y, &weights, lambda)?;
        if change <= opts.tol {
            converged = true;
            break;
        }
    }
    current.iterations = iterations;
    current.diagnostics.converged = converged;
    current.diagnostics.rho_scale = Some(scale);
    Ok(current)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvMethod {
    /// Refit with each observation's weight set to zero.
    ExactRefit,
    /// `(y_i - g_i) / (1 - S_ii)` from the smoother diagonal.
    #[default]
    SmootherShortcut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// Evaluated lambdas, ascending, excluding degenerate ones.
    pub grid: Vec<f64>,
    /// Mean squared leave-one-out error per grid value.
    pub scores: Vec<f64>,
    pub method: CvMethod,
    pub selected: f64,
    pub selected_score: f64,
    /// Lambdas at which some observation has leverage 1, so leave-one-out is undefined.
    pub degenerate: Vec<f64>,
}

/// 25 log-spaced values over `[1e-4, 1e4] * N / trace(H)`.
pub fn default_lambda_grid(h: &HessianForm) -> Vec<f64> {
    let trace = h.trace();
    let base = if trace > 0.0 {
        h.len() as f64 / trace
    } else {
        1.0
    };
    (0..25)
        .map(|i| base * 10f64.powf(-4.0 + 8.0 * i as f64 / 24.0))
        .collect()
}

const LEVERAGE_LIMIT: f64 = 1.0 - 1e-12;

/// Leave-one-out cross-validation over a grid of smoothing parameters.
pub fn cv_select(
    h: &HessianForm,
    y: &ResponseVector,
    grid: &[f64],
    method: CvMethod,
) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lambda grid values must be finite and nonnegative, got {bad}"
        )));
    }
    y.expect_len(h.len())?;
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();

    let scores: Vec<Option<f64>> = match method {
        CvMethod::SmootherShortcut => shortcut_scores(h, y.as_slice(), &sorted)?,
        CvMethod::ExactRefit => {
            let symbolic = symbolic_for(h)?;
            sorted
                .par_iter()
                .map(|&lambda| exact_score(h, y.as_slice(), lambda, &symbolic))
                .collect::<Result<Vec<_>>>()?
        }
    };

    let mut report = CvReport {
        grid: Vec::new(),
        scores: Vec::new(),
        method,
        selected: f64::NAN,
        selected_score: f64::INFINITY,
        degenerate: Vec::new(),
    };
    for (lambda, score) in sorted.into_iter().zip(scores) {
        match score {
            Some(s) if s.is_finite() => {
                // strict comparison keeps the smaller lambda on ties
                if s < report.selected_score {
                    report.selected = lambda;
                    report.selected_score = s;
                }
                report.grid.push(lambda);
                report.scores.push(s);
            }
            _ => report.degenerate.push(lambda),
        }
    }
    if report.grid.is_empty() {
        return Err(Error::Singular(
            "leave-one-out error is undefined at every lambda in the grid".into(),
        ));
    }
    Ok(report)
}

fn exact_score(
    h: &HessianForm,
    y: &[f64],
    lambda: f64,
    symbolic: &SymbolicLlt<usize>,
) -> Result<Option<f64>> {
    let n = y.len();
    if lambda == 0.0 {
        return Ok(None);
    }
    let opts = SolveOptions::default();
    let mut total = 0.0;
    let mut weights = vec![1.0; n];
    for i in 0..n {
        weights[i] = 0.0;
        let system = match System::new(h, &weights, lambda, SolverKind::Cholesky, Some(symbolic)) {
            Ok(s) => s,
            Err(Error::Singular(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let rhs: Vec<f64> = y.iter().zip(&weights).map(|(y, w)| y * w).collect();
        let (g, _) = system.solve(&rhs, &opts)?;
        let r = y[i] - g[i];
        total += r * r;
        weights[i] = 1.0;
    }
    Ok(Some(total / n as f64))
}

fn shortcut_scores(h: &HessianForm, y: &[f64], grid: &[f64]) -> Result<Vec<Option<f64>>> {
    let n = y.len();
    if n <= DENSE_LIMIT {
        let eig = h
            .to_dense()
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::NonConvergence(format!("eigensolver: {e:?}")))?;
        let mu: Vec<f64> = (0..n).map(|k| eig.S().column_vector()[k]).collect();
        let q = eig.U();
        let qty: Vec<f64> = (0..n)
            .map(|k| (0..n).map(|i| q[(i, k)] * y[i]).sum())
            .collect();
        let scores = grid
            .par_iter()
            .map(|&lambda| {
                let shrink: Vec<f64> = mu.iter().map(|m| 1.0 / (1.0 + lambda * m)).collect();
                let mut total = 0.0;
                for i in 0..n {
                    let mut g = 0.0;
                    let mut s = 0.0;
                    for k in 0..n {
                        let qik = q[(i, k)];
                        g += qik * shrink[k] * qty[k];
                        s += qik * qik * shrink[k];
                    }
                    if s >= LEVERAGE_LIMIT {
                        return None;
                    }
                    let r = (y[i] - g) / (1.0 - s);
                    total += r * r;
                }
                Some(total / n as f64)
            })
            .collect();
        return Ok(scores);
    }

    let opts = SolveOptions::default();
    let ones = vec![1.0; n];
    grid.par_iter()
        .map(|&lambda| {
            if lambda == 0.0 {
                return Ok(None);
            }
            let system = System::new(h, &ones, lambda, SolverKind::Cholesky, None)?;
            let (g, _) = system.solve(y, &opts)?;
            let cols: Vec<usize> = (0..n).collect();
            let mut total = 0.0;
            for chunk in cols.chunks(SOLVE_BLOCK) {
                let inv = system.inverse_columns(chunk, &opts)?;
                for (&i, col) in chunk.iter().zip(&inv) {
                    if col[i] >= LEVERAGE_LIMIT {
                        return Ok(None);
                    }
                    let r = (y[i] - g[i]) / (1.0 - col[i]);
                    total += r * r;
                }
            }
            Ok(Some(total / n as f64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    /// Diagonal of `sigma^2 (W + lambda H)^{-1} W^2 (W + lambda H)^{-1}`.
    pub variances: Vec<f64>,
    /// Spectral norm of the same matrix.
    pub spectral_norm: f64,
    /// `sigma^2`.
    pub bound: f64,
    /// Every variance and the spectral norm are within `sigma^2 + 1e-10`.
    pub bound_holds: bool,
}

/// Sampling covariance of the fitted values under homoscedastic noise.
///
/// The bound by `sigma^2` is guaranteed for unit weights; for general
/// weights it is reported rather than enforced.
pub fn variance_diagnostic(
    h: &HessianForm,
    w: &WeightVector,
    lambda: f64,
    sigma: f64,
) -> Result<VarianceReport> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma must be finite and nonnegative, got {sigma}"
        )));
    }
    let n = h.len();
    check_inputs(h, &ResponseVector::new(vec![0.0; n])?, w, lambda)?;
    let s2 = sigma * sigma;
    let weights = w.as_slice();
    let finish = |variances: Vec<f64>, spectral_norm: f64| {
        let limit = s2 + 1e-10;
        let bound_holds = spectral_norm <= limit && variances.iter().all(|v| *v <= limit);
        VarianceReport {
            variances,
            spectral_norm,
            bound: s2,
            bound_holds,
        }
    };

    if lambda == 0.0 {
        if weights.contains(&0.0) {
            return Err(Error::Singular(
                "lambda = 0 with zero weights has no unique fit".into(),
            ));
        }
        return Ok(finish(vec![s2; n], s2));
    }

    let opts = SolveOptions::default();
    let system = System::new(h, weights, lambda, SolverKind::Cholesky, None)?;
    let cols: Vec<usize> = (0..n).collect();
    // Row i of M W is w_j M_ij, and M is symmetric, so rows come from columns of M.
    let mut variances = Vec::with_capacity(n);
    let dense = n <= DENSE_LIMIT;
    let mut mw = if dense {
        Mat::<f64>::zeros(n, n)
    } else {
        Mat::<f64>::zeros(0, 0)
    };
    for chunk in cols.chunks(SOLVE_BLOCK) {
        let inv = system.inverse_columns(chunk, &opts)?;
        for (&i, col) in chunk.iter().zip(&inv) {
            let row_sq: f64 = col
                .iter()
                .zip(weights)
                .map(|(m, w)| (m * w) * (m * w))
                .sum();
            variances.push(s2 * row_sq);
            if dense {
                for j in 0..n {
                    mw[(i, j)] = col[j] * weights[j];
                }
            }
        }
    }

    let top = if dense {
        let gram = &mw * mw.transpose();
        let ev = gram
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| Error::NonConvergence(format!("eigensolver: {e:?}")))?;
        ev.last().copied().unwrap_or(0.0)
    } else {
        // power iteration on M W^2 M
        let mut rng = ChaCha8Rng::seed_from_u64(0x7a7);
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        scale_to_unit(&mut v);
        let mut rayleigh = 0.0;
        for _ in 0..200 {
            let (a, _) = system.solve(&v, &opts)?;
            let b: Vec<f64> = a.iter().zip(weights).map(|(x, w)| x * w * w).collect();
            let (mut c, _) = system.solve(&b, &opts)?;
            let next = dot(&v, &c);
            scale_to_unit(&mut c);
            v = c;
            if (next - rayleigh).abs() <= 1e-12 * next.abs() {
                rayleigh = next;
                break;
            }
            rayleigh = next;
        }
        rayleigh
    };
    Ok(finish(variances, s2 * top))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DegeneratePolicy, PointCloud};
    use crate::hessian::estimate_hessian;
    use crate::manifolds::{generate, response, ManifoldKind, ManifoldSpec, ResponseFn};
    use proptest::prelude::*;

    fn square(n: usize, seed: u64) -> (PointCloud, HessianForm) {
        let truth = generate(&ManifoldSpec::new(ManifoldKind::FlatSquare, seed), n).unwrap();
        let h = estimate_hessian(&truth.embedded, 12, DegeneratePolicy::SkipPoint).unwrap();
        (truth.params, h)
    }

    fn sine(params: &PointCloud) -> ResponseVector {
        response(
            params,
            &ResponseFn::Sine {
                amplitude: 1.0,
                frequencies: vec![1.0, 1.0],
            },
        )
        .unwrap()
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Dense Gaussian elimination with partial pivoting.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for c in 0..n {
            let p = (c..n)
                .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
                .unwrap();
            a.swap(c, p);
            b.swap(c, p);
            for r in c + 1..n {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
            x[r] = (b[r] - s) / a[r][r];
        }
        x
    }

    fn dense_system(h: &HessianForm, w: &[f64], lambda: f64) -> Vec<Vec<f64>> {
        let d = h.to_dense();
        (0..h.len())
            .map(|r| {
                (0..h.len())
                    .map(|c| lambda * d[(r, c)] + if r == c { w[r] } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn zero_lambda_is_identity() {
        let (params, h) = square(200, 1);
        let y = sine(&params);
        assert_eq!(fit(&h, &y, 0.0).unwrap().fitted, y.as_slice());
    }

    #[test]
    fn constants_pass_through() {
        let (_, h) = square(200, 2);
        let y = ResponseVector::new(vec![1.0; 200]).unwrap();
        for lambda in [0.1, 10.0, 1e4] {
            let g = fit(&h, &y, lambda).unwrap();
            assert!(
                g.fitted.iter().all(|v| (v - 1.0).abs() < 1e-8),
                "lambda {lambda}"
            );
        }
    }

    #[test]
    fn unit_weights_match_plain_fit_bitwise() {
        let (params, h) = square(200, 3);
        let y = sine(&params);
        let a = fit(&h, &y, 0.5).unwrap();
        let b = fit_weighted(&h, &y, &WeightVector::ones(200), 0.5).unwrap();
        assert_eq!(a.fitted, b.fitted);
    }

    #[test]
    fn matches_dense_reference() {
        let (params, h) = square(150, 4);
        let y = sine(&params);
        let w: Vec<f64> = (0..150).map(|i| 0.5 + (i % 7) as f64 / 7.0).collect();
        let got = fit_weighted(&h, &y, &WeightVector::new(w.clone()).unwrap(), 2.0).unwrap();
        let rhs: Vec<f64> = y.as_slice().iter().zip(&w).map(|(a, b)| a * b).collect();
        let want = dense_solve(dense_system(&h, &w, 2.0), rhs);
        for (a, b) in got.fitted.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(got.diagnostics.backward_error <= 1e-10);
    }

    #[test]
    fn conjugate_gradients_agree_with_cholesky() {
        let (params, h) = square(300, 5);
        let y = sine(&params);
        let w = WeightVector::ones(300);
        let direct = fit_weighted(&h, &y, &w, 1.0).unwrap();
        let opts = SolveOptions {
            kind: SolverKind::ConjugateGradient,
            ..SolveOptions::default()
        };
        let cg = fit_with(&h, &y, &w, 1.0, &opts).unwrap();
        assert!(cg.diagnostics.backward_error <= 1e-10);
        // forward agreement needs a backward error well below the conditioning
        let tight = SolveOptions {
            tolerance: 1e-14,
            ..opts
        };
        let cg = fit_with(&h, &y, &w, 1.0, &tight).unwrap();
        let scale = norm2(y.as_slice());
        for (a, b) in direct.fitted.iter().zip(&cg.fitted) {
            assert!((a - b).abs() < 1e-8 * scale, "{a} vs {b}, scale {scale}");
        }
        assert_eq!(cg.diagnostics.solver, SolverKind::ConjugateGradient);
    }

    #[test]
    fn zero_weight_infill_matches_block_elimination() {
        let (params, h) = square(150, 6);
        let y = sine(&params);
        let i = 17;
        let mut w = vec![1.0; 150];
        w[i] = 0.0;
        let got = fit_weighted(&h, &y, &WeightVector::new(w.clone()).unwrap(), 0.3).unwrap();
        // eliminating row i: g_i = -(sum_{j != i} H_ij g_j) / H_ii at the optimum
        let hd = h.to_dense();
        let off: f64 = (0..150)
            .filter(|&j| j != i)
            .map(|j| hd[(i, j)] * got.fitted[j])
            .sum();
        assert!((got.fitted[i] + off / hd[(i, i)]).abs() < 1e-8);
        let full = fit(&h, &y, 0.3).unwrap();
        let r_full = norm2(
            &full
                .residuals(&y)
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, r)| *r)
                .collect::<Vec<_>>(),
        );
        let r_drop = norm2(
            &got.residuals(&y)
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, r)| *r)
                .collect::<Vec<_>>(),
        );
        assert!((r_drop - r_full).abs() <= 0.1 * r_full);
    }

    #[test]
    fn scaling_weights_and_lambda_together_is_invariant() {
        let (params, h) = square(150, 7);
        let y = sine(&params);
        let w: Vec<f64> = (0..150).map(|i| 1.0 + (i % 3) as f64).collect();
        let a = fit_weighted(&h, &y, &WeightVector::new(w.clone()).unwrap(), 0.7).unwrap();
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let b = fit_weighted(&h, &y, &WeightVector::new(w2).unwrap(), 1.4).unwrap();
        for (x, y) in a.fitted.iter().zip(&b.fitted) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_when_weights_vanish_on_null_space() {
        let (_, h) = square(100, 8);
        let mut w = vec![0.0; 100];
        w[0] = 1.0;
        w[1] = 1.0;
        let y = ResponseVector::new(vec![0.0; 100]).unwrap();
        let err = fit_weighted(&h, &y, &WeightVector::new(w).unwrap(), 1.0).unwrap_err();
        assert!(matches!(err, Error::Singular(_)), "{err}");
    }

    #[test]
    fn residual_and_penalty_are_monotone_in_lambda() {
        let (params, h) = square(200, 9);
        let mut y = sine(&params).into_inner();
        for (v, e) in y.iter_mut().zip(noise(200, 1)) {
            *v += 0.1 * e;
        }
        let y = ResponseVector::new(y).unwrap();
        let mut last_res = 0.0;
        let mut last_pen = f64::INFINITY;
        for lambda in [0.0, 1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0] {
            let g = fit(&h, &y, lambda).unwrap();
            let pen = h.quadratic_form(&g.fitted).unwrap();
            assert!(g.diagnostics.residual_norm >= last_res - 1e-12);
            assert!(pen <= last_pen * (1.0 + 1e-9) + 1e-12);
            last_res = g.diagnostics.residual_norm;
            last_pen = pen;
        }
    }

    #[test]
    fn effective_dof_is_trace_of_smoother() {
        let (params, h) = square(100, 10);
        let y = sine(&params);
        let g = fit(&h, &y, 0.5).unwrap();
        let a = dense_system(&h, &[1.0; 100], 0.5);
        let trace: f64 = (0..100)
            .map(|i| {
                let mut e = vec![0.0; 100];
                e[i] = 1.0;
                dense_solve(a.clone(), e)[i]
            })
            .sum();
        assert!((g.diagnostics.effective_dof.unwrap() - trace).abs() < 1e-8);
        assert!(g.diagnostics.effective_dof_exact);
    }

    #[test]
    fn noiseless_reweighting_stays_uniform() {
        let (params, h) = square(200, 11);
        let y = response(
            &params,
            &ResponseFn::Linear {
                offset: 0.5,
                gradient: vec![1.0, -2.0],
            },
        )
        .unwrap();
        let opts = ReweightOptions {
            rho_scale: RhoScale::Fixed(0.1),
            max_iter: 10,
            tol: 1e-6,
        };
        let g = reweight_fit(&h, &y, 1e-3, &opts).unwrap();
        assert!(g.diagnostics.converged);
        assert!(g.iterations <= 3);
        assert!(g.weights.as_slice().iter().all(|w| (w - 1.0).abs() < 1e-6));
    }

    #[test]
    fn single_reweighting_pass() {
        let (params, h) = square(150, 12);
        let y = sine(&params);
        let opts = ReweightOptions {
            rho_scale: RhoScale::Fixed(0.05),
            max_iter: 1,
            tol: 0.0,
        };
        let g = reweight_fit(&h, &y, 0.1, &opts).unwrap();
        let first = fit(&h, &y, 0.1).unwrap();
        let w: Vec<f64> = first
            .residuals(&y)
            .iter()
            .map(|r| (-r.abs() / 0.1).exp())
            .collect();
        let w = WeightVector::new(w).unwrap().normalized();
        let want = fit_weighted(&h, &y, &w, 0.1).unwrap();
        assert_eq!(g.iterations, 1);
        assert_eq!(g.fitted, want.fitted);
    }

    #[test]
    fn robust_scale_of_known_sample() {
        // median 3, absolute deviations {2,1,0,1,97} -> MAD 1
        assert!((robust_scale(&[1.0, 2.0, 3.0, 4.0, 100.0]) - 1.4826).abs() < 1e-12);
    }

    #[test]
    fn cv_methods_agree() {
        let (params, h) = square(30, 13);
        let mut y = sine(&params).into_inner();
        for (v, e) in y.iter_mut().zip(noise(30, 2)) {
            *v += 0.1 * e;
        }
        let y = ResponseVector::new(y).unwrap();
        let grid = default_lambda_grid(&h);
        let exact = cv_select(&h, &y, &grid, CvMethod::ExactRefit).unwrap();
        let short = cv_select(&h, &y, &grid, CvMethod::SmootherShortcut).unwrap();
        assert_eq!(exact.grid, short.grid);
        for (a, b) in exact.scores.iter().zip(&short.scores) {
            assert!((a - b).abs() <= 1e-8 * a.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn brute_force_leave_one_out() {
        let (params, h) = square(30, 14);
        let y = sine(&params);
        let lambda = 0.2;
        let report = cv_select(&h, &y, &[lambda], CvMethod::SmootherShortcut).unwrap();
        // refit the dense system on 29 observations
        let mut total = 0.0;
        for i in 0..30 {
            let mut w = vec![1.0; 30];
            w[i] = 0.0;
            let rhs: Vec<f64> = y.as_slice().iter().zip(&w).map(|(a, b)| a * b).collect();
            let g = dense_solve(dense_system(&h, &w, lambda), rhs);
            total += (y.as_slice()[i] - g[i]).powi(2);
        }
        assert!((report.scores[0] - total / 30.0).abs() < 1e-9);
        assert_eq!(report.selected, lambda);
    }

    #[test]
    fn pure_noise_prefers_heaviest_smoothing() {
        let (_, h) = square(200, 15);
        let y = ResponseVector::new(noise(200, 3)).unwrap();
        let grid = default_lambda_grid(&h);
        let report = cv_select(&h, &y, &grid, CvMethod::SmootherShortcut).unwrap();
        assert_eq!(report.selected, *grid.last().unwrap());
    }

    #[test]
    fn zero_lambda_is_degenerate_for_cv() {
        let (params, h) = square(30, 16);
        let y = sine(&params);
        for method in [CvMethod::ExactRefit, CvMethod::SmootherShortcut] {
            let report = cv_select(&h, &y, &[0.0, 1.0], method).unwrap();
            assert_eq!(report.degenerate, vec![0.0]);
            assert_eq!(report.grid, vec![1.0]);
        }
        assert!(cv_select(&h, &y, &[], CvMethod::ExactRefit).is_err());
    }

    #[test]
    fn default_grid_shape() {
        let (_, h) = square(100, 17);
        let grid = default_lambda_grid(&h);
        assert_eq!(grid.len(), 25);
        let base = 100.0 / h.trace();
        assert!((grid[0] / base - 1e-4).abs() < 1e-16);
        assert!((grid[24] / base - 1e4).abs() < 1e-8);
    }

    #[test]
    fn variance_limits() {
        let (_, h) = square(150, 18);
        let w = WeightVector::ones(150);
        let at_zero = variance_diagnostic(&h, &w, 0.0, 1.5).unwrap();
        assert!(at_zero.variances.iter().all(|v| *v == 2.25));
        let smooth = variance_diagnostic(&h, &w, 1.0, 1.0).unwrap();
        assert!(smooth.bound_holds);
        assert!(smooth.variances.iter().all(|v| *v <= 1.0 + 1e-10));
        let silent = variance_diagnostic(&h, &w, 1.0, 0.0).unwrap();
        assert!(silent.variances.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fit_json_round_trip() {
        let (params, h) = square(60, 19);
        let g = fit(&h, &sine(&params), 0.4).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        assert!(text.contains("\"K\":12"));
        let back: SplineFit = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn fit_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let (_, h) = square(80, 20);
            let y1 = noise(80, seed);
            let y2 = noise(80, seed + 1);
            let combo: Vec<f64> = y1.iter().zip(&y2).map(|(p, q)| a * p + b * q).collect();
            let f1 = fit(&h, &ResponseVector::new(y1).unwrap(), 0.8).unwrap();
            let f2 = fit(&h, &ResponseVector::new(y2).unwrap(), 0.8).unwrap();
            let fc = fit(&h, &ResponseVector::new(combo).unwrap(), 0.8).unwrap();
            for i in 0..80 {
                prop_assert!((fc.fitted[i] - a * f1.fitted[i] - b * f2.fitted[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn fit_minimizes_loss(seed in 0u64..1000, scale in 1e-4f64..1e-1) {
            let (_, h) = square(80, 21);
            let y = noise(80, seed);
            let w: Vec<f64> = (0..80).map(|i| 0.5 + (i % 4) as f64 * 0.25).collect();
            let lambda = 0.6;
            let g = fit_weighted(&h, &ResponseVector::new(y.clone()).unwrap(),
                &WeightVector::new(w.clone()).unwrap(), lambda).unwrap();
            let loss = |f: &[f64]| {
                f.iter().zip(&y).zip(&w).map(|((f, y), w)| w * (y - f).powi(2)).sum::<f64>()
                    + lambda * h.quadratic_form(f).unwrap()
            };
            let delta = noise(80, seed + 500);
            let perturbed: Vec<f64> = g.fitted.iter().zip(&delta).map(|(a, d)| a + scale * d).collect();
            prop_assert!(loss(&g.fitted) <= loss(&perturbed) + 1e-12);
        }
    }
}
