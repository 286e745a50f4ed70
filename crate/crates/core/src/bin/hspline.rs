//! `hspline` command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 numerical.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hspline::data::{atomic_write, write_csv, write_json};
use hspline::hessian::kernel_dimension;
use hspline::{
    add_noise, classify_fit_with, classify_predict, cv_select, default_lambda_grid,
    estimate_hessian, fit_with, generate, load_dataset, load_fit, predict_oos, response,
    reweight_fit, CvMethod, CvReport, DataFormat, Dataset, DegeneratePolicy, Error, ErrorClass,
    FitConfig, HessianForm, ManifoldKind, ManifoldSpec, PointCloud, PredictMethod, ResponseFn,
    ReweightOptions, RhoScale, SolveOptions, SolverKind, SplineFit, WeightVector,
};

type Result<T> = hspline::Result<T>;

#[derive(Parser)]
#[command(
    name = "hspline",
    version,
    about = "Hessian smoothing splines for data sampled from flat manifolds"
)]
struct Cli {
    /// Worker threads; defaults to HSPLINE_THREADS, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic manifold and a response.
    Gen(GenArgs),
    /// Fit the smoothing spline at one lambda.
    Fit(FitArgs),
    /// Leave-one-out cross-validation over a lambda grid.
    Cv(CvArgs),
    /// Out-of-sample prediction from a fit.
    Predict(PredictArgs),
    /// Spline classifier on integer labels.
    Classify(ClassifyArgs),
    /// Recover isometric coordinates from the penalty's null space.
    Embed(EmbedArgs),
}

/// Penalty construction shared by every subcommand that reads data.
#[derive(Args)]
struct PenaltyArgs {
    /// Intrinsic dimension of the manifold.
    #[arg(long = "d", default_value_t = 2)]
    dim: usize,
    /// Neighborhood size, including the point itself.
    #[arg(long, default_value_t = FitConfig::default().k)]
    k: usize,
    /// Handling of rank-deficient neighborhoods.
    #[arg(long, value_enum, default_value_t = DegenerateArg::Skip)]
    degenerate: DegenerateArg,
}

impl PenaltyArgs {
    fn build(&self, cloud: &PointCloud) -> Result<HessianForm> {
        estimate_hessian(cloud, self.k, self.degenerate.into())
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum DegenerateArg {
    Skip,
    Fail,
}

impl From<DegenerateArg> for DegeneratePolicy {
    fn from(a: DegenerateArg) -> Self {
        match a {
            DegenerateArg::Skip => DegeneratePolicy::SkipPoint,
            DegenerateArg::Fail => DegeneratePolicy::Fail,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ResponseArg {
    Constant,
    Linear,
    Quadratic,
    Sine,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Cholesky,
    Cg,
}

#[derive(Clone, Copy, ValueEnum)]
enum CvMethodArg {
    Exact,
    Shortcut,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    #[value(name = "local_tps")]
    Tps,
    #[value(name = "local_linear")]
    Linear,
    #[value(name = "local_convex")]
    Convex,
}

impl From<MethodArg> for PredictMethod {
    fn from(a: MethodArg) -> Self {
        match a {
            MethodArg::Tps => PredictMethod::LocalTps,
            MethodArg::Linear => PredictMethod::LocalLinear,
            MethodArg::Convex => PredictMethod::LocalConvex,
        }
    }
}

fn parse_manifold(s: &str) -> std::result::Result<ManifoldKind, String> {
    s.parse::<ManifoldKind>().map_err(|_| {
        let names: Vec<_> = ManifoldKind::ALL.iter().map(|k| k.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_parser = parse_manifold)]
    manifold: ManifoldKind,
    /// Number of samples.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Intrinsic dimension; only flat_square accepts values other than 2.
    #[arg(long = "d", default_value_t = 2)]
    dim: usize,
    #[arg(long, value_enum, default_value_t = ResponseArg::Quadratic)]
    response: ResponseArg,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "out-dir", default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// CSV or JSON with coordinates and a `y` column (and `w` for --weighted).
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    penalty: PenaltyArgs,
    #[arg(long, default_value_t = FitConfig::default().lambda)]
    lambda: f64,
    /// Use the `w` column as observation weights.
    #[arg(long, conflicts_with = "reweight")]
    weighted: bool,
    /// Iteratively downweight large residuals.
    #[arg(long)]
    reweight: bool,
    #[arg(long = "max-iter", default_value_t = ReweightOptions::default().max_iter)]
    max_iter: usize,
    /// Stop reweighting once no weight changes by more than this.
    #[arg(long = "reweight-tol", default_value_t = ReweightOptions::default().tol)]
    reweight_tol: f64,
    /// Fixed scale of the reweighting function; default is a robust residual scale.
    #[arg(long = "rho-scale")]
    rho_scale: Option<f64>,
    #[arg(long, value_enum, default_value_t = SolverArg::Cholesky)]
    solver: SolverArg,
    /// Target backward error of the linear solve.
    #[arg(long, default_value_t = FitConfig::default().solver_tolerance)]
    tolerance: f64,
    /// Skip the effective degrees of freedom.
    #[arg(long = "no-dof")]
    no_dof: bool,
    #[arg(long, default_value = "fit.json")]
    out: PathBuf,
    /// Per-point CSV of index, y, fitted, weight.
    #[arg(long = "fitted", default_value = "fitted.csv")]
    fitted_csv: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    penalty: PenaltyArgs,
    /// Comma-separated lambdas; default is 25 log-spaced values scaled by N / trace.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, value_enum, default_value_t = CvMethodArg::Shortcut)]
    method: CvMethodArg,
    #[arg(long, default_value = "cv.json")]
    out: PathBuf,
    /// CSV of lambda, score, degenerate.
    #[arg(long, default_value = "cv_curve.csv")]
    curve: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Training coordinates; needs a `y` column unless --fit is given.
    #[arg(long)]
    train: PathBuf,
    /// Fit JSON written by `fit` on the same training file.
    #[arg(long)]
    fit: Option<PathBuf>,
    /// Query coordinates.
    #[arg(long)]
    query: PathBuf,
    #[command(flatten)]
    penalty: PenaltyArgs,
    /// Smoothing used when no --fit is given.
    #[arg(long, default_value_t = FitConfig::default().lambda)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Tps)]
    method: MethodArg,
    #[arg(long, default_value = "predictions.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Training coordinates with an integer `label` column.
    #[arg(long)]
    train: PathBuf,
    /// Query coordinates; a `label` column, if present, is used to report accuracy.
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    penalty: PenaltyArgs,
    /// Light smoothing suits indicator responses.
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Tps)]
    method: MethodArg,
    #[arg(long, default_value = "labels.csv")]
    out: PathBuf,
    /// Optional JSON with the fitted class scores.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    penalty: PenaltyArgs,
    #[arg(long, default_value = "embedding.csv")]
    out: PathBuf,
    /// JSON with the low end of the spectrum.
    #[arg(long, default_value = "embedding.json")]
    report: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = configure_threads(cli.threads).and_then(|()| match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Embed(a) => cmd_embed(a),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hspline: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            })
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let threads = match flag {
        Some(t) => Some(t),
        None => match std::env::var("HSPLINE_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                Error::InvalidArgument(format!("HSPLINE_THREADS must be a count, got {v:?}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads.filter(|&t| t > 0) {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
    Ok(())
}

fn load(path: &Path, dim: usize) -> Result<Dataset> {
    load_dataset(path, DataFormat::from_path(path), dim)
}

fn numbered(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}{i}")).collect()
}

/// Writes rows of already formatted fields.
fn write_text_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    atomic_write(path, |out| {
        let mut writer = csv::Writer::from_writer(out);
        let fail = |e: csv::Error| Error::parse(path, e.to_string());
        writer.write_record(header).map_err(fail)?;
        for row in rows {
            writer.write_record(row).map_err(fail)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    })
}

fn response_fn(kind: ResponseArg, spec: &ManifoldSpec) -> ResponseFn {
    let d = spec.intrinsic_dim();
    let unit = |j: usize| {
        (0..d)
            .map(|i| f64::from(u8::from(i == j)))
            .collect::<Vec<_>>()
    };
    match kind {
        ResponseArg::Constant => ResponseFn::Constant { value: 1.0 },
        ResponseArg::Linear => ResponseFn::Linear {
            offset: 0.0,
            gradient: unit(0),
        },
        ResponseArg::Quadratic => ResponseFn::Quadratic {
            matrix: (0..d).flat_map(unit).collect(),
        },
        ResponseArg::Sine => {
            // one full period across the first coordinate
            let (lo, hi) = spec.extent[0];
            let mut frequencies = vec![0.0; d];
            frequencies[0] = std::f64::consts::TAU / (hi - lo);
            ResponseFn::Sine {
                amplitude: 1.0,
                frequencies,
            }
        }
    }
}

#[derive(Serialize)]
struct GenManifest<'a> {
    manifold: &'a str,
    extent: &'a [(f64, f64)],
    n: usize,
    ambient_dim: usize,
    intrinsic_dim: usize,
    response: &'a ResponseFn,
    sigma: f64,
    seed: u64,
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut spec = ManifoldSpec::new(a.manifold, a.seed);
    if a.dim != 2 {
        if a.manifold != ManifoldKind::FlatSquare {
            return Err(Error::InvalidArgument(format!(
                "{} is two-dimensional; --d {} is only valid for flat_square",
                a.manifold, a.dim
            )));
        }
        spec = spec.with_extent(vec![(0.0, 1.0); a.dim]);
    }
    let truth = generate(&spec, a.n)?;
    let f = response_fn(a.response, &spec);
    let clean = response(&truth.params, &f)?;
    // noise stream independent of the sampling stream
    let noisy = add_noise(&clean, a.sigma, a.seed ^ 0x9e37_79b9_7f4a_7c15)?;

    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let d = truth.params.n_features();
    let n_amb = truth.embedded.n_features();
    write_csv(
        &a.out_dir.join("params.csv"),
        &numbered("t", d),
        truth.params.rows(),
    )?;
    write_csv(
        &a.out_dir.join("embedded.csv"),
        &numbered("x", n_amb),
        truth.embedded.rows(),
    )?;
    let pairs = clean.as_slice().iter().zip(noisy.as_slice());
    write_csv(
        &a.out_dir.join("response.csv"),
        &["f".to_string(), "y".to_string()],
        pairs.clone().map(|(f, y)| [*f, *y]),
    )?;
    let mut header = numbered("x", n_amb);
    header.push("y".into());
    write_csv(
        &a.out_dir.join("data.csv"),
        &header,
        truth
            .embedded
            .rows()
            .zip(noisy.as_slice())
            .map(|(x, y)| x.iter().copied().chain([*y]).collect::<Vec<_>>()),
    )?;
    write_json(
        &a.out_dir.join("gen.json"),
        &GenManifest {
            manifold: a.manifold.name(),
            extent: &spec.extent,
            n: a.n,
            ambient_dim: n_amb,
            intrinsic_dim: d,
            response: &f,
            sigma: a.sigma,
            seed: a.seed,
        },
    )?;
    println!(
        "gen: {} N={} n={n_amb} d={d} seed={} -> {}",
        a.manifold,
        a.n,
        a.seed,
        a.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FitRunConfig {
    input: PathBuf,
    intrinsic_dim: usize,
    #[serde(rename = "K")]
    k: usize,
    degenerate: DegenerateArg,
    solver: SolverKind,
    solver_tolerance: f64,
    weighted: bool,
    reweight: Option<ReweightConfig>,
}

#[derive(Serialize)]
struct ReweightConfig {
    max_iter: usize,
    tol: f64,
    /// `null` means the robust scale of the first fit's residuals.
    rho_scale: Option<f64>,
}

#[derive(Serialize)]
struct FitOutput<'a> {
    config: FitRunConfig,
    #[serde(flatten)]
    fit: &'a SplineFit,
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let data = load(&a.input, a.penalty.dim)?;
    let y = data
        .response
        .ok_or_else(|| Error::parse(&a.input, "no `y` column; fit needs responses"))?;
    let n = data.cloud.len();
    y.expect_len(n)?;
    let h = a.penalty.build(&data.cloud)?;
    let opts = SolveOptions {
        kind: match a.solver {
            SolverArg::Cholesky => SolverKind::Cholesky,
            SolverArg::Cg => SolverKind::ConjugateGradient,
        },
        tolerance: a.tolerance,
        effective_dof: !a.no_dof,
        ..SolveOptions::default()
    };

    let fit = if a.reweight {
        let ropts = ReweightOptions {
            rho_scale: a.rho_scale.map_or(RhoScale::Auto, RhoScale::Fixed),
            max_iter: a.max_iter,
            tol: a.reweight_tol,
        };
        reweight_fit(&h, &y, a.lambda, &ropts)?
    } else {
        let w = if a.weighted {
            data.weights
                .ok_or_else(|| Error::parse(&a.input, "--weighted needs a `w` column"))?
        } else {
            WeightVector::ones(n)
        };
        fit_with(&h, &y, &w, a.lambda, &opts)?
    };

    let config = FitRunConfig {
        input: a.input.clone(),
        intrinsic_dim: a.penalty.dim,
        k: a.penalty.k,
        degenerate: a.penalty.degenerate,
        solver: opts.kind,
        solver_tolerance: opts.tolerance,
        weighted: a.weighted,
        reweight: a.reweight.then_some(ReweightConfig {
            max_iter: a.max_iter,
            tol: a.reweight_tol,
            rho_scale: a.rho_scale,
        }),
    };
    write_json(&a.out, &FitOutput { config, fit: &fit })?;
    write_csv(
        &a.fitted_csv,
        &["index", "y", "fitted", "weight"].map(String::from),
        (0..n).map(|i| {
            [
                i as f64,
                y.as_slice()[i],
                fit.fitted[i],
                fit.weights.as_slice()[i],
            ]
        }),
    )?;
    let dof = fit
        .diagnostics
        .effective_dof
        .map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
    println!(
        "fit: N={n} lambda={} dof={dof} iterations={} skipped={} residual={:.4e} -> {}",
        fit.lambda,
        fit.iterations,
        fit.diagnostics.skipped_points,
        fit.diagnostics.residual_norm,
        a.out.display()
    );
    Ok(())
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad lambda {t:?} in --grid")))
        })
        .collect()
}

#[derive(Serialize)]
struct CvRunConfig {
    input: PathBuf,
    intrinsic_dim: usize,
    #[serde(rename = "K")]
    k: usize,
    degenerate: DegenerateArg,
    default_grid: bool,
}

#[derive(Serialize)]
struct CvOutput<'a> {
    config: CvRunConfig,
    #[serde(flatten)]
    report: &'a CvReport,
}

fn cmd_cv(a: CvArgs) -> Result<()> {
    let user_grid = a.grid.as_deref().map(parse_grid).transpose()?;
    if user_grid.as_ref().is_some_and(Vec::is_empty) {
        return Err(Error::InvalidArgument("--grid is empty".into()));
    }
    let data = load(&a.input, a.penalty.dim)?;
    let y = data
        .response
        .ok_or_else(|| Error::parse(&a.input, "no `y` column; cv needs responses"))?;
    y.expect_len(data.cloud.len())?;
    let h = a.penalty.build(&data.cloud)?;
    let grid = user_grid.clone().unwrap_or_else(|| default_lambda_grid(&h));
    let method = match a.method {
        CvMethodArg::Exact => CvMethod::ExactRefit,
        CvMethodArg::Shortcut => CvMethod::SmootherShortcut,
    };
    let report = cv_select(&h, &y, &grid, method)?;

    let mut curve: Vec<[f64; 3]> = report
        .grid
        .iter()
        .zip(&report.scores)
        .map(|(l, s)| [*l, *s, 0.0])
        .chain(report.degenerate.iter().map(|l| [*l, f64::NAN, 1.0]))
        .collect();
    curve.sort_by(|x, y| x[0].total_cmp(&y[0]));
    write_csv(
        &a.curve,
        &["lambda", "score", "degenerate"].map(String::from),
        &curve,
    )?;
    let config = CvRunConfig {
        input: a.input.clone(),
        intrinsic_dim: a.penalty.dim,
        k: a.penalty.k,
        degenerate: a.penalty.degenerate,
        default_grid: user_grid.is_none(),
    };
    write_json(
        &a.out,
        &CvOutput {
            config,
            report: &report,
        },
    )?;
    println!(
        "cv: {} lambdas, selected {:.6e} (score {:.6e}), {} degenerate -> {}",
        curve.len(),
        report.selected,
        report.selected_score,
        report.degenerate.len(),
        a.out.display()
    );
    Ok(())
}

fn method_name(m: PredictMethod) -> &'static str {
    match m {
        PredictMethod::LocalTps => "local_tps",
        PredictMethod::LocalLinear => "local_linear",
        PredictMethod::LocalConvex => "local_convex",
    }
}

fn fmt_row(x: &[f64]) -> Vec<String> {
    x.iter().map(f64::to_string).collect()
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let train = load(&a.train, a.penalty.dim)?;
    let n = train.cloud.len();
    let fitted = match &a.fit {
        Some(path) => {
            let fit = load_fit(path)?;
            if fit.fitted.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "fitted values in --fit",
                    expected: n,
                    got: fit.fitted.len(),
                });
            }
            fit.fitted
        }
        None => {
            let y = train
                .response
                .ok_or_else(|| Error::parse(&a.train, "no `y` column and no --fit given"))?;
            y.expect_len(n)?;
            let h = a.penalty.build(&train.cloud)?;
            let opts = SolveOptions {
                effective_dof: false,
                ..SolveOptions::default()
            };
            fit_with(&h, &y, &WeightVector::ones(n), a.lambda, &opts)?.fitted
        }
    };
    let query = load(&a.query, a.penalty.dim)?;
    let method = PredictMethod::from(a.method);
    let mut rows = Vec::with_capacity(query.cloud.len());
    for x in query.cloud.rows() {
        let p = predict_oos(&train.cloud, &fitted, x, a.penalty.k, method)?;
        let mut row = fmt_row(x);
        row.push(p.value.to_string());
        row.push(method_name(method).into());
        rows.push(row);
    }
    let mut header = numbered("x", query.cloud.n_features());
    header.extend(["value".to_string(), "method".to_string()]);
    write_text_csv(&a.out, &header, &rows)?;
    println!(
        "predict: {} queries with {} (K={}) -> {}",
        rows.len(),
        method_name(method),
        a.penalty.k,
        a.out.display()
    );
    Ok(())
}

fn cmd_classify(a: ClassifyArgs) -> Result<()> {
    let train = load(&a.train, a.penalty.dim)?;
    let labels = train
        .labels
        .ok_or_else(|| Error::parse(&a.train, "no `label` column"))?;
    let h = a.penalty.build(&train.cloud)?;
    let model = classify_fit_with(&h, &labels, a.lambda)?;
    let test = load(&a.test, a.penalty.dim)?;
    let method = PredictMethod::from(a.method);
    let predicted = test
        .cloud
        .rows()
        .map(|x| classify_predict(&model, &train.cloud, x, a.penalty.k, method))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<String>> = test
        .cloud
        .rows()
        .zip(&predicted)
        .map(|(x, l)| {
            let mut row = fmt_row(x);
            row.push(l.to_string());
            row
        })
        .collect();
    let mut header = numbered("x", test.cloud.n_features());
    header.push("label".into());
    write_text_csv(&a.out, &header, &rows)?;
    if let Some(path) = &a.model {
        write_json(path, &model)?;
    }
    let train_acc = accuracy(&model.training_labels(), &labels);
    let test_acc = test.labels.as_ref().map_or_else(
        || "n/a".to_string(),
        |t| format!("{:.4}", accuracy(&predicted, t)),
    );
    println!(
        "classify: {} classes, lambda={} K={}, training accuracy {train_acc:.4}, test accuracy {test_acc} -> {}",
        model.classes.len(),
        a.lambda,
        a.penalty.k,
        a.out.display()
    );
    Ok(())
}

fn accuracy(predicted: &[i64], truth: &[i64]) -> f64 {
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len().max(1) as f64
}

#[derive(Serialize)]
struct EmbedReport {
    input: PathBuf,
    intrinsic_dim: usize,
    #[serde(rename = "K")]
    k: usize,
    skipped_points: usize,
    /// Rayleigh quotient of the constant vector (zero up to roundoff).
    constant_rayleigh: f64,
    /// Lowest nonconstant eigenvalues, ascending.
    eigenvalues: Vec<f64>,
    /// Nonconstant eigenvalues before the sharpest relative jump.
    null_count: usize,
    gap_ratio: f64,
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let data = load(&a.input, a.penalty.dim)?;
    let h = a.penalty.build(&data.cloud)?;
    let d = a.penalty.dim;
    let emb = h.null_embedding(d)?;
    let n = data.cloud.len();
    write_csv(&a.out, &numbered("e", d), (0..n).map(|i| emb.point(i)))?;

    let shown = emb.eigenvalues.len().min(20);
    let floor = n as f64 * f64::EPSILON * h.norm();
    let (null_count, gap_ratio) = kernel_dimension(&emb.eigenvalues, shown - 1, floor);
    let report = EmbedReport {
        input: a.input.clone(),
        intrinsic_dim: d,
        k: a.penalty.k,
        skipped_points: h.skipped().len(),
        constant_rayleigh: emb.constant_rayleigh,
        eigenvalues: emb.eigenvalues[..shown].to_vec(),
        null_count,
        gap_ratio,
    };
    write_json(&a.report, &report)?;
    println!(
        "embed: N={n} d={d} K={}, {null_count} near-null nonconstant directions (gap {gap_ratio:.3e}) -> {}",
        a.penalty.k,
        a.out.display()
    );
    Ok(())
}
