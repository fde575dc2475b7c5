//! Symmetric InfoNCE, entailment-cone losses and the combined objective.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::geometry::{
    check_dims, cosine_from_parts, distance_sq_from_parts, dot, euclidean_sim_from_sq, lift,
    lorentz_inner, lorentz_sim, norm, norm_sq, GeometryConfig, GeometryKind, LorentzPoint, Modality,
};

/// `B×B` matrix of `β·sim(text_i, image_j)`, row-major with rows indexed by text.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    values: Vec<f64>,
    size: usize,
    beta: Option<f64>,
}

impl LogitMatrix {
    /// Wrap raw logits. No scale is recorded.
    pub fn from_values(size: usize, values: Vec<f64>) -> Result<Self> {
        if size == 0 || values.len() != size * size {
            return Err(Error::DimMismatch {
                expected: size * size,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logit matrix".into()));
        }
        Ok(Self {
            values,
            size,
            beta: None,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, text: usize, image: usize) -> f64 {
        self.values[text * self.size + image]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The logit scale folded into the entries, if any.
    pub fn beta_applied(&self) -> Option<f64> {
        self.beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub entailment: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    fn new(contrastive: f64, entailment: f64, lambda: f64) -> Self {
        Self {
            contrastive,
            entailment,
            total: contrastive + lambda * entailment,
            lambda,
        }
    }
}

pub(crate) fn check_batch<T: AsRef<[f64]>>(texts: &[T], images: &[T]) -> Result<usize> {
    if texts.is_empty() {
        return Err(Error::Config("batch must hold at least one pair".into()));
    }
    if texts.len() != images.len() {
        return Err(Error::DimMismatch {
            expected: texts.len(),
            got: images.len(),
        });
    }
    let n = texts[0].as_ref().len();
    for e in texts.iter().chain(images) {
        if e.as_ref().len() != n {
            return Err(Error::DimMismatch {
                expected: n,
                got: e.as_ref().len(),
            });
        }
    }
    Ok(texts.len())
}

/// Shared forward pass: similarities, logits and per-pair entailment terms.
/// Both `total_loss` and the gradient code run through this so that their
/// loss values agree bit-for-bit.
pub(crate) struct Forward {
    pub b: usize,
    pub beta: f64,
    /// Lifted points (hyperbolic only).
    pub text_pts: Vec<LorentzPoint>,
    pub image_pts: Vec<LorentzPoint>,
    pub logits: LogitMatrix,
    pub entail_terms: Vec<f64>,
    pub breakdown: LossBreakdown,
}

impl Forward {
    pub fn run<T: AsRef<[f64]>>(cfg: &GeometryConfig, texts: &[T], images: &[T]) -> Result<Self> {
        let prep = Prepared::new(cfg, texts, images)?;
        let sims = prep.all_sims()?;
        let entail_terms = prep.all_entail_terms()?;
        let (logits, breakdown) = assemble(cfg, prep.b, &sims, &entail_terms)?;
        Ok(Self {
            b: prep.b,
            beta: cfg.beta(),
            text_pts: prep.text_pts,
            image_pts: prep.image_pts,
            logits,
            entail_terms,
            breakdown,
        })
    }
}

/// Per-embedding state the pairwise terms are built from: squared norms
/// for the flat kinds, lifted points for the hyperbolic one.
pub(crate) struct Prepared {
    cfg: GeometryConfig,
    pub b: usize,
    pub texts: Vec<Vec<f64>>,
    pub images: Vec<Vec<f64>>,
    text_norms: Vec<f64>,
    image_norms: Vec<f64>,
    text_pts: Vec<LorentzPoint>,
    image_pts: Vec<LorentzPoint>,
}

impl Prepared {
    pub fn new<T: AsRef<[f64]>>(cfg: &GeometryConfig, texts: &[T], images: &[T]) -> Result<Self> {
        cfg.validate()?;
        let b = check_batch(texts, images)?;
        let mut prep = Self {
            cfg: cfg.clone(),
            b,
            texts: texts.iter().map(|e| e.as_ref().to_vec()).collect(),
            images: images.iter().map(|e| e.as_ref().to_vec()).collect(),
            text_norms: Vec::new(),
            image_norms: Vec::new(),
            text_pts: Vec::new(),
            image_pts: Vec::new(),
        };
        if cfg.kind == GeometryKind::Hyperbolic {
            prep.text_pts = (0..b)
                .map(|i| lift(cfg, &prep.texts[i], Modality::Text))
                .collect::<Result<_>>()?;
            prep.image_pts = (0..b)
                .map(|i| lift(cfg, &prep.images[i], Modality::Image))
                .collect::<Result<_>>()?;
        } else {
            prep.text_norms = prep.texts.iter().map(|e| norm_sq(e)).collect();
            prep.image_norms = prep.images.iter().map(|e| norm_sq(e)).collect();
        }
        Ok(prep)
    }

    /// Overwrite one coordinate of one embedding and refresh its derived state.
    pub fn set_coord(&mut self, modality: Modality, pair: usize, coord: usize, value: f64) -> Result<()> {
        let (embs, norms, pts) = match modality {
            Modality::Text => (&mut self.texts, &mut self.text_norms, &mut self.text_pts),
            Modality::Image => (&mut self.images, &mut self.image_norms, &mut self.image_pts),
        };
        embs[pair][coord] = value;
        if self.cfg.kind == GeometryKind::Hyperbolic {
            pts[pair] = lift(&self.cfg, &embs[pair], modality)?;
        } else {
            norms[pair] = norm_sq(&embs[pair]);
        }
        Ok(())
    }

    pub fn sim(&self, i: usize, j: usize) -> Result<f64> {
        let cfg = &self.cfg;
        Ok(match cfg.kind {
            GeometryKind::Hyperbolic => lorentz_sim(&self.text_pts[i], &self.image_pts[j], cfg.variant)?,
            kind => {
                let (t, im) = (&self.texts[i], &self.images[j]);
                let xy = dot(t, im);
                let (nt, ni) = (self.text_norms[i], self.image_norms[j]);
                match kind {
                    GeometryKind::Clip => cosine_from_parts(xy, nt, ni)?,
                    GeometryKind::Elliptic => -cosine_from_parts(xy, nt, ni)?.acos(),
                    _ => euclidean_sim_from_sq(distance_sq_from_parts(xy, nt, ni), t.len(), cfg.variant),
                }
            }
        })
    }

    pub fn all_sims(&self) -> Result<Vec<f64>> {
        let mut sims = Vec::with_capacity(self.b * self.b);
        for i in 0..self.b {
            for j in 0..self.b {
                sims.push(self.sim(i, j)?);
            }
        }
        Ok(sims)
    }

    pub fn entail_term(&self, i: usize) -> Result<f64> {
        let k = self.cfg.min_radius;
        match self.cfg.kind {
            GeometryKind::Euclidean => pair_entail_euclid(&self.texts[i], &self.images[i], k),
            GeometryKind::Hyperbolic => pair_entail_hyper(&self.text_pts[i], &self.image_pts[i], k),
            _ => unreachable!("validated: λ > 0 only for entailment kinds"),
        }
    }

    /// Empty when `λ = 0`.
    pub fn all_entail_terms(&self) -> Result<Vec<f64>> {
        if self.cfg.lambda > 0.0 {
            (0..self.b).map(|i| self.entail_term(i)).collect()
        } else {
            Ok(Vec::new())
        }
    }
}

/// Turn similarities and entailment terms into logits and the loss.
pub(crate) fn assemble(
    cfg: &GeometryConfig,
    b: usize,
    sims: &[f64],
    entail_terms: &[f64],
) -> Result<(LogitMatrix, LossBreakdown)> {
    let beta = cfg.beta();
    let values: Vec<f64> = sims.iter().map(|s| beta * s).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logit matrix".into()));
    }
    let logits = LogitMatrix {
        values,
        size: b,
        beta: Some(beta),
    };
    let contrastive = contrastive_loss(&logits);
    let entailment = if entail_terms.is_empty() {
        0.0
    } else {
        entail_terms.iter().sum::<f64>() / b as f64
    };
    Ok((logits, LossBreakdown::new(contrastive, entailment, cfg.lambda)))
}

pub(crate) fn pair_entail_euclid(x: &[f64], y: &[f64], k: f64) -> Result<f64> {
    if x == y {
        return Ok(0.0);
    }
    entail_loss_euclid(x, y, k)
}

pub(crate) fn pair_entail_hyper(x: &LorentzPoint, y: &LorentzPoint, k: f64) -> Result<f64> {
    if x.space() == y.space() {
        return Ok(0.0);
    }
    entail_loss_hyper(x, y, k)
}

pub fn logit_matrix<T: AsRef<[f64]>>(
    cfg: &GeometryConfig,
    texts: &[T],
    images: &[T],
) -> Result<LogitMatrix> {
    let mut cfg = cfg.clone();
    // λ does not enter the logits
    cfg.lambda = 0.0;
    Ok(Forward::run(&cfg, texts, images)?.logits)
}

/// Cross-entropy `LSE(v) - v[target]` of one softmax row. `grad` receives
/// `softmax(v) - onehot(target)`, with the target entry computed as minus
/// the off-target mass so it stays accurate when the softmax saturates.
pub(crate) fn softmax_xent(v: &[f64], target: usize, grad: &mut [f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut rest = 0.0;
    for (j, (&x, g)) in v.iter().zip(grad.iter_mut()).enumerate() {
        let e = (x - max).exp();
        *g = e;
        sum += e;
        if j != target {
            rest += e;
        }
    }
    for (j, g) in grad.iter_mut().enumerate() {
        *g = if j == target { -rest / sum } else { *g / sum };
    }
    if v[target] == max {
        rest.ln_1p()
    } else {
        (max - v[target]) + sum.ln()
    }
}

/// Symmetric InfoNCE over a logit matrix: the mean of the text→image
/// (row) and image→text (column) cross-entropies with the diagonal as target.
pub fn contrastive_loss(logits: &LogitMatrix) -> f64 {
    let b = logits.size;
    let v = &logits.values;
    let mut col = vec![0.0; b];
    let mut scratch = vec![0.0; b];
    let mut acc = 0.0;
    for i in 0..b {
        for (j, c) in col.iter_mut().enumerate() {
            *c = v[j * b + i];
        }
        acc += softmax_xent(&v[i * b..(i + 1) * b], i, &mut scratch);
        acc += softmax_xent(&col, i, &mut scratch);
    }
    acc / (2.0 * b as f64)
}

/// `arcsin(min(1, K/‖x‖))`; `π/2` inside the minimum radius, including the origin.
pub fn half_aperture_euclid(x: &[f64], k: f64) -> f64 {
    let r = norm(x);
    if r <= k {
        FRAC_PI_2
    } else {
        (k / r).asin()
    }
}

/// `π - ∠Oxy`, the angle between `y - x` and the outward direction of `x`.
pub fn exterior_angle_euclid(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    let r = norm(x);
    if r == 0.0 {
        return Err(Error::domain("exterior_angle_euclid", "x is the origin"));
    }
    let w: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
    let m = norm(&w);
    if m == 0.0 {
        return Err(Error::domain("exterior_angle_euclid", "y coincides with x"));
    }
    Ok((dot(&w, x) / (m * r)).clamp(-1.0, 1.0).acos())
}

pub fn entail_loss_euclid(x: &[f64], y: &[f64], k: f64) -> Result<f64> {
    Ok((exterior_angle_euclid(x, y)? - half_aperture_euclid(x, k)).max(0.0))
}

/// `arcsin(min(1, 2K/(√c‖x_space‖)))`.
pub fn half_aperture_hyper(x: &LorentzPoint, k: f64) -> f64 {
    let denom = x.curvature().sqrt() * norm(x.space());
    if denom <= 2.0 * k {
        FRAC_PI_2
    } else {
        (2.0 * k / denom).asin()
    }
}

/// Hyperbolic exterior angle at `x` of the triangle (apex, x, y).
///
/// Taken as `atan2` of the two components of the geodesic direction toward
/// `y` in the tangent space at `x`: across the radial plane it is the part
/// of `y_space` orthogonal to `x_space`, and along the outward radial unit
/// vector it is `√c(t_x·a - ‖x_space‖·t_y)` with `a` the radial coordinate
/// of `y`. Both stay accurate far from the apex, where the closed-form
/// arccos loses about half of its digits.
pub fn exterior_angle_hyper(x: &LorentzPoint, y: &LorentzPoint) -> Result<f64> {
    lorentz_inner(x, y)?;
    let p = norm(x.space());
    if p == 0.0 {
        return Err(Error::domain("exterior_angle_hyper", "x is the hyperboloid apex"));
    }
    if x.space() == y.space() {
        return Err(Error::domain("exterior_angle_hyper", "y coincides with x"));
    }
    let c = x.curvature();
    let a = dot(x.space(), y.space()) / p;
    let perp: Vec<f64> = y
        .space()
        .iter()
        .zip(x.space())
        .map(|(ys, xs)| ys - a * xs / p)
        .collect();
    let w = norm(&perp);
    let radial = if a > 0.0 {
        // t_x² a² - p² t_y² expanded so the leading terms cancel exactly
        ((a - p) * (a + p) / c - p * p * w * w) / (x.time() * a + p * y.time())
    } else {
        x.time() * a - p * y.time()
    };
    Ok(w.atan2(c.sqrt() * radial))
}

pub fn entail_loss_hyper(x: &LorentzPoint, y: &LorentzPoint, k: f64) -> Result<f64> {
    Ok((exterior_angle_hyper(x, y)? - half_aperture_hyper(x, k)).max(0.0))
}

/// `L_cont + λ·L_entail`, entailment averaged over the positive pairs with
/// the text embedding as the generic concept.
pub fn total_loss<T: AsRef<[f64]>>(
    cfg: &GeometryConfig,
    texts: &[T],
    images: &[T],
) -> Result<LossBreakdown> {
    Ok(Forward::run(cfg, texts, images)?.breakdown)
}
