//! Deterministic samplers for flat manifolds with known isometric coordinates.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{PointCloud, ResponseVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldKind {
    /// Axis-aligned box in `R^d`, embedded by the identity.
    FlatSquare,
    /// Arclength-parameterized spiral sheet in `R^3`.
    SwissRoll,
    /// `R x (R/Z)` rolled into a circle of circumference 1.
    Cylinder,
    /// `S^1 x S^1` with unit radii in `R^4`.
    CliffordTorus,
}

impl ManifoldKind {
    pub const ALL: [ManifoldKind; 4] = [
        ManifoldKind::FlatSquare,
        ManifoldKind::SwissRoll,
        ManifoldKind::Cylinder,
        ManifoldKind::CliffordTorus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ManifoldKind::FlatSquare => "flat_square",
            ManifoldKind::SwissRoll => "swiss_roll",
            ManifoldKind::Cylinder => "cylinder",
            ManifoldKind::CliffordTorus => "clifford_torus",
        }
    }

    /// Default parameter domain for each generator.
    pub fn default_extent(self) -> Vec<(f64, f64)> {
        match self {
            ManifoldKind::FlatSquare => vec![(0.0, 1.0), (0.0, 1.0)],
            ManifoldKind::SwissRoll => vec![
                (spiral_arclength(1.5 * PI), spiral_arclength(4.5 * PI)),
                (0.0, 21.0),
            ],
            ManifoldKind::Cylinder => vec![(0.0, 1.0), (0.0, 1.0)],
            ManifoldKind::CliffordTorus => vec![(0.0, TAU), (0.0, TAU)],
        }
    }

    pub fn ambient_dim(self, intrinsic_dim: usize) -> usize {
        match self {
            ManifoldKind::FlatSquare => intrinsic_dim,
            ManifoldKind::SwissRoll | ManifoldKind::Cylinder => 3,
            ManifoldKind::CliffordTorus => 4,
        }
    }
}

impl fmt::Display for ManifoldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ManifoldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ManifoldKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown manifold kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
    /// `(low, high)` bounds of the parameter box, one pair per intrinsic dimension.
    pub extent: Vec<(f64, f64)>,
    pub seed: u64,
}

impl ManifoldSpec {
    pub fn new(kind: ManifoldKind, seed: u64) -> Self {
        Self {
            kind,
            extent: kind.default_extent(),
            seed,
        }
    }

    pub fn with_extent(mut self, extent: Vec<(f64, f64)>) -> Self {
        self.extent = extent;
        self
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.extent.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent.is_empty() {
            return Err(Error::InvalidArgument("extent must be nonempty".into()));
        }
        if self.kind != ManifoldKind::FlatSquare && self.extent.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "{} is two dimensional, got {} extents",
                self.kind,
                self.extent.len()
            )));
        }
        for &(lo, hi) in &self.extent {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::InvalidArgument(format!(
                    "extent ({lo}, {hi}) must be finite with positive width"
                )));
            }
        }
        if self.kind == ManifoldKind::SwissRoll && self.extent[0].0 < 0.0 {
            return Err(Error::InvalidArgument(
                "swiss roll arclength must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Maps one parameter vector into the ambient space.
    pub fn embed(&self, theta: &[f64]) -> Vec<f64> {
        match self.kind {
            ManifoldKind::FlatSquare => theta.to_vec(),
            ManifoldKind::SwissRoll => {
                let t = spiral_angle(theta[0]);
                vec![t * t.cos(), theta[1], t * t.sin()]
            }
            ManifoldKind::Cylinder => {
                let phi = TAU * theta[1];
                vec![theta[0], phi.cos() / TAU, phi.sin() / TAU]
            }
            ManifoldKind::CliffordTorus => {
                vec![
                    theta[0].cos(),
                    theta[0].sin(),
                    theta[1].cos(),
                    theta[1].sin(),
                ]
            }
        }
    }

    /// Partial derivatives of the embedding, one ambient vector per parameter.
    pub fn jacobian(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        match self.kind {
            ManifoldKind::FlatSquare => (0..theta.len())
                .map(|k| {
                    (0..theta.len())
                        .map(|j| f64::from(u8::from(j == k)))
                        .collect()
                })
                .collect(),
            ManifoldKind::SwissRoll => {
                let t = spiral_angle(theta[0]);
                let dt_ds = 1.0 / (1.0 + t * t).sqrt();
                vec![
                    vec![
                        (t.cos() - t * t.sin()) * dt_ds,
                        0.0,
                        (t.sin() + t * t.cos()) * dt_ds,
                    ],
                    vec![0.0, 1.0, 0.0],
                ]
            }
            ManifoldKind::Cylinder => {
                let phi = TAU * theta[1];
                vec![vec![1.0, 0.0, 0.0], vec![0.0, -phi.sin(), phi.cos()]]
            }
            ManifoldKind::CliffordTorus => vec![
                vec![-theta[0].sin(), theta[0].cos(), 0.0, 0.0],
                vec![0.0, 0.0, -theta[1].sin(), theta[1].cos()],
            ],
        }
    }
}

/// Arclength of the spiral `r = t` from angle 0 to `t`.
pub fn spiral_arclength(t: f64) -> f64 {
    0.5 * (t * (1.0 + t * t).sqrt() + t.asinh())
}

/// Inverse of [`spiral_arclength`] by monotone bisection, run until the
/// bracket cannot shrink further in floating point.
pub fn spiral_angle(s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    // s >= t^2 / 2 on the spiral, so the root lies below sqrt(2s) + 1.
    let (mut lo, mut hi) = (0.0_f64, (2.0 * s).sqrt() + 1.0);
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if spiral_arclength(mid) < s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Sampled parameters, their embedding and (optionally) a response.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub spec: ManifoldSpec,
    /// `N x d` isometric coordinates.
    pub params: PointCloud,
    /// `N x n` embedded points.
    pub embedded: PointCloud,
    pub f_values: Option<ResponseVector>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn with_response(mut self, f: &ResponseFn) -> Result<Self> {
        self.f_values = Some(response(&self.params, f)?);
        Ok(self)
    }
}

/// Draws `n` i.i.d. uniform parameters and embeds them.
pub fn generate(spec: &ManifoldSpec, n: usize) -> Result<GroundTruth> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let d = spec.intrinsic_dim();
    let ambient = spec.kind.ambient_dim(d);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = Vec::with_capacity(n * d);
    let mut embedded = Vec::with_capacity(n * ambient);
    let mut theta = vec![0.0; d];
    for _ in 0..n {
        for (t, &(lo, hi)) in theta.iter_mut().zip(&spec.extent) {
            *t = lo + (hi - lo) * rng.random::<f64>();
        }
        params.extend_from_slice(&theta);
        embedded.extend(spec.embed(&theta));
    }
    Ok(GroundTruth {
        spec: spec.clone(),
        params: PointCloud::from_flat(params, n, d, d)?,
        embedded: PointCloud::from_flat(embedded, n, ambient, d)?,
        f_values: None,
    })
}

/// Response functions of the isometric coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ResponseFn {
    Constant {
        value: f64,
    },
    /// `offset + gradient . theta`
    Linear {
        offset: f64,
        gradient: Vec<f64>,
    },
    /// `theta^T A theta` with symmetric row-major `A`.
    Quadratic {
        matrix: Vec<f64>,
    },
    /// `amplitude * sin(frequencies . theta)`
    Sine {
        amplitude: f64,
        frequencies: Vec<f64>,
    },
}

impl ResponseFn {
    pub fn eval(&self, theta: &[f64]) -> f64 {
        let dot = |w: &[f64]| w.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
        match self {
            ResponseFn::Constant { value } => *value,
            ResponseFn::Linear { offset, gradient } => offset + dot(gradient),
            ResponseFn::Quadratic { matrix } => {
                let d = theta.len();
                let mut acc = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        acc += theta[a] * matrix[a * d + b] * theta[b];
                    }
                }
                acc
            }
            ResponseFn::Sine {
                amplitude,
                frequencies,
            } => amplitude * dot(frequencies).sin(),
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        let (what, expected, got) = match self {
            ResponseFn::Constant { .. } => return Ok(()),
            ResponseFn::Linear { gradient, .. } => ("linear gradient", d, gradient.len()),
            ResponseFn::Quadratic { matrix } => ("quadratic matrix", d * d, matrix.len()),
            ResponseFn::Sine { frequencies, .. } => ("sine frequencies", d, frequencies.len()),
        };
        if expected != got {
            return Err(Error::DimensionMismatch {
                what,
                expected,
                got,
            });
        }
        if let ResponseFn::Quadratic { matrix } = self {
            for a in 0..d {
                for b in 0..a {
                    if matrix[a * d + b] != matrix[b * d + a] {
                        return Err(Error::InvalidArgument(
                            "quadratic response matrix must be symmetric".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Evaluates `f` at every row of `params`.
pub fn response(params: &PointCloud, f: &ResponseFn) -> Result<ResponseVector> {
    f.check_dim(params.n_features())?;
    ResponseVector::new(params.rows().map(|theta| f.eval(theta)).collect())
}

/// Adds i.i.d. `N(0, sigma^2)` noise from a seeded generator.
pub fn add_noise(y: &ResponseVector, sigma: f64, seed: u64) -> Result<ResponseVector> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise level must be finite and nonnegative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(y.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    ResponseVector::new(
        y.as_slice()
            .iter()
            .map(|v| v + normal.sample(&mut rng))
            .collect(),
    )
}
