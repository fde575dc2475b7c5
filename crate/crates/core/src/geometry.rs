//! Similarity functions for the four embedding geometries and the
//! hyperboloid machinery behind the hyperbolic one.
//!
//! | kind        | similarity                                   |
//! |-------------|----------------------------------------------|
//! | `clip`      | cosine                                       |
//! | `elliptic`  | `-arccos(cosine)`                            |
//! | `euclidean` | `-‖x-y‖/√n` or `-‖x-y‖²/n`                    |
//! | `hyperbolic`| `-d_L` or `-d_L²` between lifted points       |
//!
//! Hyperbolic embeddings are scaled by a per-modality `α`, lifted onto the
//! hyperboloid `⟨x,x⟩_L = -1/c` with the exponential map at the origin, and
//! compared with the Lorentzian distance.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite real vector with at least two entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::domain(
                "Embedding::new",
                format!("dimension {} < 2", values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding entry {i}")));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryKind {
    Clip,
    Elliptic,
    Euclidean,
    Hyperbolic,
}

impl GeometryKind {
    pub const ALL: [GeometryKind; 4] = [
        GeometryKind::Clip,
        GeometryKind::Elliptic,
        GeometryKind::Euclidean,
        GeometryKind::Hyperbolic,
    ];

    /// Whether the kind has an entailment loss (and a distance-squared variant).
    pub fn supports_entailment(self) -> bool {
        matches!(self, GeometryKind::Euclidean | GeometryKind::Hyperbolic)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GeometryKind::Clip => "clip",
            GeometryKind::Elliptic => "elliptic",
            GeometryKind::Euclidean => "euclidean",
            GeometryKind::Hyperbolic => "hyperbolic",
        }
    }
}

impl fmt::Display for GeometryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for GeometryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GeometryKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown geometry kind `{s}`")))
    }
}

/// Negative distance (`d`) or negative squared distance (`d2`) as the logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogitVariant {
    D,
    D2,
}

impl fmt::Display for LogitVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogitVariant::D => "d",
            LogitVariant::D2 => "d2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

/// Initial logit scale for distance (`d`) models: `β = 1/0.07`.
pub fn default_log_beta_d() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Geometry, logit variant and the trainable scalars, all stored on the
/// log scale. Clamping happens when a scalar is read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub kind: GeometryKind,
    pub variant: LogitVariant,
    pub log_beta: f64,
    pub log_c: f64,
    pub log_alpha_txt: f64,
    pub log_alpha_img: f64,
    /// Minimum radius `K` of the entailment cones.
    pub min_radius: f64,
    /// Entailment loss weight `λ`.
    pub lambda: f64,
    pub beta_max: f64,
    pub c_min: f64,
    pub c_max: f64,
}

impl GeometryConfig {
    /// Default initialization for embedding dimension `n`: `β = 1/0.07` for
    /// `d` logits and `β = 1` for `d2`, `c = 1`, `α_txt = α_img = 1/√n`,
    /// `K = 0.1` (hyperbolic) or `0.3` (euclidean), `λ = 0`.
    pub fn new(kind: GeometryKind, variant: LogitVariant, n: usize) -> Self {
        let log_beta = match variant {
            LogitVariant::D => default_log_beta_d(),
            LogitVariant::D2 => 0.0,
        };
        let log_alpha = -0.5 * (n.max(1) as f64).ln();
        Self {
            kind,
            variant,
            log_beta,
            log_c: 0.0,
            log_alpha_txt: log_alpha,
            log_alpha_img: log_alpha,
            min_radius: if kind == GeometryKind::Hyperbolic { 0.1 } else { 0.3 },
            lambda: 0.0,
            beta_max: 100.0,
            c_min: 0.1,
            c_max: 10.0,
        }
    }

    pub fn clip() -> Self {
        Self::new(GeometryKind::Clip, LogitVariant::D, 2)
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_min_radius(mut self, k: f64) -> Self {
        self.min_radius = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.kind.supports_entailment() {
            if self.variant != LogitVariant::D {
                return Err(Error::Config(format!(
                    "{} geometry only has the `d` logit",
                    self.kind
                )));
            }
            if self.lambda != 0.0 {
                return Err(Error::Config(format!(
                    "entailment weight λ = {} given for {} geometry, which has no entailment loss",
                    self.lambda, self.kind
                )));
            }
        }
        let scalars = [
            ("log_beta", self.log_beta),
            ("log_c", self.log_c),
            ("log_alpha_txt", self.log_alpha_txt),
            ("log_alpha_img", self.log_alpha_img),
        ];
        for (name, v) in scalars {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} is not finite")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("λ must be ≥ 0, got {}", self.lambda)));
        }
        if !(self.min_radius >= 0.0 && self.min_radius.is_finite()) {
            return Err(Error::Config(format!(
                "minimum radius must be ≥ 0, got {}",
                self.min_radius
            )));
        }
        if self.lambda > 0.0 && self.min_radius <= 0.0 {
            return Err(Error::Config("entailment requires K > 0".into()));
        }
        if !(self.beta_max > 0.0 && self.beta_max.is_finite()) {
            return Err(Error::Config(format!("beta_max must be > 0, got {}", self.beta_max)));
        }
        if !(self.c_min > 0.0 && self.c_min <= self.c_max && self.c_max.is_finite()) {
            return Err(Error::Config(format!(
                "curvature bounds must satisfy 0 < c_min ≤ c_max, got [{}, {}]",
                self.c_min, self.c_max
            )));
        }
        Ok(())
    }

    /// Logit scale `β = exp(log_beta)` clamped to `(0, beta_max]`.
    pub fn beta(&self) -> f64 {
        // clamp after exp: exp(ln 100) rounds above 100
        self.log_beta.exp().min(self.beta_max)
    }

    /// Curvature `c = exp(log_c)` clamped to `[c_min, c_max]`.
    pub fn curvature(&self) -> f64 {
        self.log_c.exp().clamp(self.c_min, self.c_max)
    }

    pub fn alpha_txt(&self) -> f64 {
        self.log_alpha_txt.exp()
    }

    pub fn alpha_img(&self) -> f64 {
        self.log_alpha_img.exp()
    }

    pub fn alpha(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Text => self.alpha_txt(),
            Modality::Image => self.alpha_img(),
        }
    }

    /// False when `log_beta` sits beyond its ceiling, where the clamp blocks the gradient.
    pub fn beta_unclamped(&self) -> bool {
        self.log_beta <= self.beta_max.ln()
    }

    pub fn curvature_unclamped(&self) -> bool {
        self.log_c >= self.c_min.ln() && self.log_c <= self.c_max.ln()
    }

    /// Pull the stored log-scalars back inside their clamp ranges.
    pub fn clamp_scalars(&mut self) {
        self.log_beta = self.log_beta.min(self.beta_max.ln());
        self.log_c = self.log_c.clamp(self.c_min.ln(), self.c_max.ln());
    }
}

/// A point on the hyperboloid `⟨x,x⟩_L = -1/c` with its curvature attached.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzPoint {
    space: Vec<f64>,
    time: f64,
    c: f64,
}

impl LorentzPoint {
    /// Build a point from its space part; the time coordinate is inferred
    /// as `sqrt(1/c + ‖space‖²)`.
    pub fn from_space(space: Vec<f64>, c: f64) -> Result<Self> {
        check_curvature(c)?;
        let time = (1.0 / c + norm_sq(&space)).sqrt();
        Ok(Self { space, time, c })
    }

    /// The hyperboloid apex, image of the origin.
    pub fn apex(n: usize, c: f64) -> Result<Self> {
        Self::from_space(vec![0.0; n], c)
    }

    pub fn space(&self) -> &[f64] {
        &self.space
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn curvature(&self) -> f64 {
        self.c
    }

    pub fn dim(&self) -> usize {
        self.space.len()
    }
}

fn check_curvature(c: f64) -> Result<()> {
    if c > 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(Error::domain("curvature", format!("c must be > 0, got {c}")))
    }
}

pub(crate) fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() == y.len() {
        Ok(())
    } else {
        Err(Error::DimMismatch {
            expected: x.len(),
            got: y.len(),
        })
    }
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    // four independent partial sums; a single running sum is latency-bound
    let mut acc = [0.0; 4];
    let xs = x.chunks_exact(4);
    let ys = y.chunks_exact(4);
    let tail: f64 = xs.remainder().iter().zip(ys.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xs.zip(ys) {
        for k in 0..4 {
            acc[k] += a[k] * b[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn norm_sq(x: &[f64]) -> f64 {
    dot(x, x)
}

#[inline]
pub(crate) fn norm(x: &[f64]) -> f64 {
    norm_sq(x).sqrt()
}

/// `sinh(z)/z`, using its Taylor series near zero.
pub(crate) fn sinhc(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        let z2 = z * z;
        1.0 + z2 / 6.0 + z2 * z2 / 120.0
    } else {
        z.sinh() / z
    }
}

pub fn cosine_sim(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    let nx = norm_sq(x);
    let ny = norm_sq(y);
    cosine_from_parts(dot(x, y), nx, ny)
}

/// Cosine from `x·y`, `‖x‖²` and `‖y‖²`.
pub(crate) fn cosine_from_parts(xy: f64, nx: f64, ny: f64) -> Result<f64> {
    if nx == 0.0 {
        return Err(Error::domain("cosine_sim", "first argument has zero norm"));
    }
    if ny == 0.0 {
        return Err(Error::domain("cosine_sim", "second argument has zero norm"));
    }
    // sqrt(‖x‖²‖x‖²) == ‖x‖² exactly, so cos(x, x) = 1 without rounding
    Ok((xy / (nx * ny).sqrt()).clamp(-1.0, 1.0))
}

/// Negative great-circle distance on the unit sphere, in `[-π, 0]`.
pub fn elliptic_sim(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(-cosine_sim(x, y)?.acos())
}

/// `‖x-y‖` computed as `sqrt(‖x‖² - 2x·y + ‖y‖²)` with the radicand clamped at 0.
pub fn euclidean_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(euclidean_distance_sq(x, y)?.sqrt())
}

pub(crate) fn euclidean_distance_sq(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    Ok(distance_sq_from_parts(dot(x, y), norm_sq(x), norm_sq(y)))
}

#[inline]
pub(crate) fn distance_sq_from_parts(xy: f64, nx: f64, ny: f64) -> f64 {
    (nx - 2.0 * xy + ny).max(0.0)
}

pub fn euclidean_sim(x: &[f64], y: &[f64], variant: LogitVariant) -> Result<f64> {
    let sq = euclidean_distance_sq(x, y)?;
    Ok(euclidean_sim_from_sq(sq, x.len(), variant))
}

#[inline]
pub(crate) fn euclidean_sim_from_sq(sq: f64, n: usize, variant: LogitVariant) -> f64 {
    let n = n as f64;
    match variant {
        LogitVariant::D => -sq.sqrt() / n.sqrt(),
        LogitVariant::D2 => -sq / n,
    }
}

/// Exponential map at the origin: lifts a tangent vector onto the hyperboloid
/// along the radial geodesic of length `‖u‖`.
pub fn exp_map_origin(u: &[f64], c: f64) -> Result<LorentzPoint> {
    check_curvature(c)?;
    let factor = sinhc(c.sqrt() * norm(u));
    LorentzPoint::from_space(u.iter().map(|v| factor * v).collect(), c)
}

pub fn lorentz_inner(x: &LorentzPoint, y: &LorentzPoint) -> Result<f64> {
    check_dims(&x.space, &y.space)?;
    if x.c != y.c {
        return Err(Error::CurvatureMismatch {
            left: x.c,
            right: y.c,
        });
    }
    Ok(dot(&x.space, &y.space) - x.time * y.time)
}

/// Geodesic distance `arccosh(-c⟨x,y⟩_L)/√c`, argument clamped below at 1.
///
/// Nearby points go through `z - 1 = (c/2)⟨x-y, x-y⟩_L` instead, with the
/// time difference formed without cancellation, so short distances keep
/// their relative precision and coincident points give exactly 0.
pub fn lorentz_distance(x: &LorentzPoint, y: &LorentzPoint) -> Result<f64> {
    let c = x.c;
    let z = -c * lorentz_inner(x, y)?;
    if z >= 2.0 {
        return Ok(z.acosh() / c.sqrt());
    }
    let mut ds_sq = 0.0;
    let mut cross = 0.0;
    for (a, b) in x.space.iter().zip(&y.space) {
        let d = a - b;
        ds_sq += d * d;
        cross += d * (a + b);
    }
    let dt = cross / (x.time + y.time);
    let w = (0.5 * c * (ds_sq - dt * dt)).max(0.0);
    Ok((w + (w * (w + 2.0)).sqrt()).ln_1p() / c.sqrt())
}

pub fn lorentz_sim(x: &LorentzPoint, y: &LorentzPoint, variant: LogitVariant) -> Result<f64> {
    let d = lorentz_distance(x, y)?;
    Ok(match variant {
        LogitVariant::D => -d,
        LogitVariant::D2 => -d * d,
    })
}

/// Scale an encoder output by the modality's `α` and lift it.
pub fn lift(cfg: &GeometryConfig, e: &[f64], modality: Modality) -> Result<LorentzPoint> {
    let alpha = cfg.alpha(modality);
    let u: Vec<f64> = e.iter().map(|v| alpha * v).collect();
    exp_map_origin(&u, cfg.curvature())
}

/// Similarity between a text and an image encoder output under `cfg`.
pub fn similarity(cfg: &GeometryConfig, text: &[f64], image: &[f64]) -> Result<f64> {
    match cfg.kind {
        GeometryKind::Clip => cosine_sim(text, image),
        GeometryKind::Elliptic => elliptic_sim(text, image),
        GeometryKind::Euclidean => euclidean_sim(text, image, cfg.variant),
        GeometryKind::Hyperbolic => {
            check_dims(text, image)?;
            let x = lift(cfg, text, Modality::Text)?;
            let y = lift(cfg, image, Modality::Image)?;
            lorentz_sim(&x, &y, cfg.variant)
        }
    }
}
