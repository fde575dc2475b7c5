//! Hand-derived gradients of the training objective and a central-difference
//! oracle to check them against.
//!
//! Clamped quantities (`β`, `c`, cosine and arccosh arguments) use
//! stop-gradient semantics outside their active range, and `max(0, ·)` in
//! the entailment loss has subgradient 0 at the kink.

use crate::error::{Error, Result};
use crate::geometry::{
    cosine_sim, dot, euclidean_distance, lift, lorentz_distance, norm, norm_sq, sinhc,
    GeometryConfig, GeometryKind, LogitVariant, Modality,
};
use crate::losses::{
    exterior_angle_euclid, exterior_angle_hyper, half_aperture_euclid, half_aperture_hyper,
    softmax_xent, Forward, LossBreakdown, Prepared,
};

#[derive(Debug, Clone, PartialEq)]
pub struct GradRecord {
    pub d_texts: Vec<Vec<f64>>,
    pub d_images: Vec<Vec<f64>>,
    pub d_log_beta: f64,
    pub d_log_c: f64,
    pub d_log_alpha_txt: f64,
    pub d_log_alpha_img: f64,
}

impl GradRecord {
    fn zeros(b: usize, n: usize) -> Self {
        Self {
            d_texts: vec![vec![0.0; n]; b],
            d_images: vec![vec![0.0; n]; b],
            d_log_beta: 0.0,
            d_log_c: 0.0,
            d_log_alpha_txt: 0.0,
            d_log_alpha_img: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_texts
            .iter()
            .chain(&self.d_images)
            .flatten()
            .chain([
                &self.d_log_beta,
                &self.d_log_c,
                &self.d_log_alpha_txt,
                &self.d_log_alpha_img,
            ])
            .all(|v| v.is_finite())
    }
}

/// `(a cosh a - sinh a)/a³`, series near zero.
fn cosh_sinh_cubic(a: f64) -> f64 {
    if a.abs() < 1e-2 {
        let a2 = a * a;
        1.0 / 3.0 + a2 / 30.0 + a2 * a2 / 840.0
    } else {
        (a * a.cosh() - a.sinh()) / (a * a * a)
    }
}

/// `arccosh(z)/sqrt(z² - 1)`, which tends to 1 as `z → 1`.
fn acosh_ratio(z: f64) -> f64 {
    let w = z - 1.0;
    if w < 1e-6 {
        1.0 - w / 3.0 + 2.0 * w * w / 15.0
    } else {
        z.acosh() / (z * z - 1.0).sqrt()
    }
}

/// Per-embedding quantities of the hyperbolic lift `u ↦ expm_O(u)`, with `a = √c·‖u‖`.
struct HypPrep {
    /// `u = α·e`
    u: Vec<f64>,
    r: f64,
    sinh_a: f64,
    cosh_a: f64,
    /// `sinh(a)/‖u‖`
    sigma: f64,
    /// `(a cosh a - sinh a)/a³`
    g: f64,
}

impl HypPrep {
    fn new(e: &[f64], alpha: f64, s: f64) -> Self {
        let u: Vec<f64> = e.iter().map(|v| alpha * v).collect();
        let r = norm(&u);
        let a = s * r;
        Self {
            u,
            r,
            sinh_a: a.sinh(),
            cosh_a: a.cosh(),
            sigma: s * sinhc(a),
            g: cosh_sinh_cubic(a),
        }
    }
}

/// Partials of `z = -c⟨x,y⟩_L = cosh a cosh b - σ_u σ_v (u·v)` w.r.t. `u`, `v`, `√c`.
struct ZGrad {
    /// coefficients: ∇_u z = cu_u·u + cu_v·v
    cu_u: f64,
    cu_v: f64,
    /// ∇_v z = cv_v·v + cv_u·u
    cv_v: f64,
    cv_u: f64,
    ds: f64,
}

fn z_grad(p: &HypPrep, q: &HypPrep, s: f64) -> ZGrad {
    let uv = dot(&p.u, &q.u);
    let s3 = s * s * s;
    ZGrad {
        cu_u: s * p.sigma * q.cosh_a - s3 * p.g * q.sigma * uv,
        cu_v: -p.sigma * q.sigma,
        cv_v: s * q.sigma * p.cosh_a - s3 * q.g * p.sigma * uv,
        cv_u: -p.sigma * q.sigma,
        ds: p.r * p.sinh_a * q.cosh_a + q.r * p.cosh_a * q.sinh_a
            - uv * (p.cosh_a * q.sigma + q.cosh_a * p.sigma),
    }
}

fn axpy(out: &mut [f64], k: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += k * v;
    }
}

/// Loss and its gradient w.r.t. every embedding and trainable log-scalar.
/// The loss is produced by the same forward pass as [`crate::total_loss`].
pub fn grad_total_loss<T: AsRef<[f64]>>(
    cfg: &GeometryConfig,
    texts: &[T],
    images: &[T],
) -> Result<(LossBreakdown, GradRecord)> {
    let fw = Forward::run(cfg, texts, images)?;
    let b = fw.b;
    let n = texts[0].as_ref().len();
    let l = fw.logits.values();

    // dL/dlogit, from row (text→image) and column (image→text) softmaxes
    let mut row_p = vec![0.0; b * b];
    let mut col_p = vec![0.0; b * b];
    let mut col = vec![0.0; b];
    let mut scratch = vec![0.0; b];
    for i in 0..b {
        softmax_xent(&l[i * b..(i + 1) * b], i, &mut row_p[i * b..(i + 1) * b]);
        for (j, c) in col.iter_mut().enumerate() {
            *c = l[j * b + i];
        }
        softmax_xent(&col, i, &mut scratch);
        for (j, p) in scratch.iter().enumerate() {
            col_p[j * b + i] = *p;
        }
    }
    let scale = 1.0 / (2.0 * b as f64);
    let dlogit: Vec<f64> = row_p.iter().zip(&col_p).map(|(r, c)| scale * (r + c)).collect();

    let mut grad = GradRecord::zeros(b, n);
    if cfg.beta_unclamped() {
        // Σ dlogit·logit, with each softmax centred on its target logit
        let mut acc = 0.0;
        for i in 0..b {
            for j in (0..b).filter(|&j| j != i) {
                let v = l[i * b + j];
                acc += row_p[i * b + j] * (v - l[i * b + i]) + col_p[i * b + j] * (v - l[j * b + j]);
            }
        }
        grad.d_log_beta = scale * acc;
    }
    let dsim: Vec<f64> = dlogit.iter().map(|g| fw.beta * g).collect();

    match cfg.kind {
        GeometryKind::Clip | GeometryKind::Elliptic => {
            angular_grads(cfg.kind, texts, images, &dsim, &mut grad)?
        }
        GeometryKind::Euclidean => euclidean_grads(cfg, texts, images, &dsim, &fw, &mut grad)?,
        GeometryKind::Hyperbolic => hyperbolic_grads(cfg, texts, images, &dsim, &fw, &mut grad)?,
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok((fw.breakdown, grad))
}

/// Gradient of one similarity `sim(text, image)` w.r.t. the text and the
/// image embedding.
pub fn similarity_grad(cfg: &GeometryConfig, text: &[f64], image: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut cfg = cfg.clone();
    cfg.lambda = 0.0;
    let (texts, images) = ([text], [image]);
    let fw = Forward::run(&cfg, &texts, &images)?;
    let mut grad = GradRecord::zeros(1, text.len());
    let dsim = [1.0];
    match cfg.kind {
        GeometryKind::Clip | GeometryKind::Elliptic => {
            angular_grads(cfg.kind, &texts, &images, &dsim, &mut grad)?
        }
        GeometryKind::Euclidean => euclidean_grads(&cfg, &texts, &images, &dsim, &fw, &mut grad)?,
        GeometryKind::Hyperbolic => hyperbolic_grads(&cfg, &texts, &images, &dsim, &fw, &mut grad)?,
    }
    Ok((grad.d_texts.swap_remove(0), grad.d_images.swap_remove(0)))
}

fn angular_grads<T: AsRef<[f64]>>(
    kind: GeometryKind,
    texts: &[T],
    images: &[T],
    dsim: &[f64],
    grad: &mut GradRecord,
) -> Result<()> {
    let b = texts.len();
    let tn: Vec<f64> = texts.iter().map(|t| norm(t.as_ref())).collect();
    let inn: Vec<f64> = images.iter().map(|t| norm(t.as_ref())).collect();
    for i in 0..b {
        let x = texts[i].as_ref();
        for j in 0..b {
            let y = images[j].as_ref();
            let nn = tn[i] * inn[j];
            let cos_raw = dot(x, y) / nn;
            let w = match kind {
                GeometryKind::Clip => dsim[i * b + j],
                _ => {
                    let cos = cos_raw.clamp(-1.0, 1.0);
                    let one_minus = 1.0 - cos * cos;
                    if one_minus <= 0.0 {
                        return Err(Error::GradientSingular {
                            text: i,
                            image: j,
                            formula: "arccos of cosine at ±1 (elliptic similarity)",
                        });
                    }
                    dsim[i * b + j] / one_minus.sqrt()
                }
            };
            // ∇_x cos = y/(‖x‖‖y‖) - cos·x/‖x‖²
            axpy(&mut grad.d_texts[i], w / nn, y);
            axpy(&mut grad.d_texts[i], -w * cos_raw / (tn[i] * tn[i]), x);
            axpy(&mut grad.d_images[j], w / nn, x);
            axpy(&mut grad.d_images[j], -w * cos_raw / (inn[j] * inn[j]), y);
        }
    }
    Ok(())
}

fn euclidean_grads<T: AsRef<[f64]>>(
    cfg: &GeometryConfig,
    texts: &[T],
    images: &[T],
    dsim: &[f64],
    fw: &Forward,
    grad: &mut GradRecord,
) -> Result<()> {
    let b = texts.len();
    let n = texts[0].as_ref().len();
    let nf = n as f64;
    let mut diff = vec![0.0; n];
    for i in 0..b {
        let x = texts[i].as_ref();
        for j in 0..b {
            let y = images[j].as_ref();
            for k in 0..n {
                diff[k] = x[k] - y[k];
            }
            let sq_raw = norm_sq(x) - 2.0 * dot(x, y) + norm_sq(y);
            let coef = match cfg.variant {
                LogitVariant::D => {
                    if sq_raw <= 0.0 || x == y {
                        return Err(Error::GradientSingular {
                            text: i,
                            image: j,
                            formula: "Euclidean distance at coincident points (d logit)",
                        });
                    }
                    -1.0 / (sq_raw.sqrt() * nf.sqrt())
                }
                LogitVariant::D2 => {
                    if sq_raw < 0.0 {
                        0.0
                    } else {
                        -2.0 / nf
                    }
                }
            };
            // sim = f(‖x-y‖); ∇_x sim = coef·(x-y), ∇_y sim = -coef·(x-y)
            let w = dsim[i * b + j] * coef;
            axpy(&mut grad.d_texts[i], w, &diff);
            axpy(&mut grad.d_images[j], -w, &diff);
        }
    }

    if cfg.lambda > 0.0 {
        let weight = cfg.lambda / b as f64;
        for i in 0..b {
            if fw.entail_terms[i] <= 0.0 {
                continue;
            }
            euclid_entail_grad(
                i,
                texts[i].as_ref(),
                images[i].as_ref(),
                cfg.min_radius,
                weight,
                grad,
            )?;
        }
    }
    Ok(())
}

fn euclid_entail_grad(
    i: usize,
    x: &[f64],
    y: &[f64],
    k: f64,
    weight: f64,
    grad: &mut GradRecord,
) -> Result<()> {
    let w: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
    let p = dot(&w, x);
    let m = norm(&w);
    let r = norm(x);
    let q = p / (m * r);
    if q <= -1.0 {
        return Err(Error::GradientSingular {
            text: i,
            image: i,
            formula: "arccos at -1 in Euclidean exterior angle",
        });
    }
    let dext = -weight / (1.0 - q * q).sqrt();
    let mr = m * r;
    let m3r = m * m * m * r;
    // ∇_y q = x/(m r) - p w/(m³ r)
    axpy(&mut grad.d_images[i], dext / mr, x);
    axpy(&mut grad.d_images[i], -dext * p / m3r, &w);
    // ∇_x q = (w - x)/(m r) + p w/(m³ r) - p x/(m r³)
    axpy(&mut grad.d_texts[i], dext / mr, &w);
    axpy(&mut grad.d_texts[i], -dext / mr, x);
    axpy(&mut grad.d_texts[i], dext * p / m3r, &w);
    axpy(&mut grad.d_texts[i], -dext * p / (m * r * r * r), x);
    // aperture arcsin(K/‖x‖) when unclamped
    if r > k {
        let rho = k / r;
        let daper = -(rho / (1.0 - rho * rho).sqrt()) / (r * r);
        axpy(&mut grad.d_texts[i], -weight * daper, x);
    }
    Ok(())
}

fn hyperbolic_grads<T: AsRef<[f64]>>(
    cfg: &GeometryConfig,
    texts: &[T],
    images: &[T],
    dsim: &[f64],
    fw: &Forward,
    grad: &mut GradRecord,
) -> Result<()> {
    let b = texts.len();
    let n = texts[0].as_ref().len();
    let c = cfg.curvature();
    let s = c.sqrt();
    let tp: Vec<HypPrep> = texts
        .iter()
        .map(|e| HypPrep::new(e.as_ref(), cfg.alpha_txt(), s))
        .collect();
    let ip: Vec<HypPrep> = images
        .iter()
        .map(|e| HypPrep::new(e.as_ref(), cfg.alpha_img(), s))
        .collect();

    // gradients w.r.t. the scaled vectors u, v and √c
    let mut du = vec![vec![0.0; n]; b];
    let mut dv = vec![vec![0.0; n]; b];
    let mut ds = 0.0;

    for i in 0..b {
        for j in 0..b {
            let x = &fw.text_pts[i];
            let y = &fw.image_pts[j];
            let z_raw = -c * (dot(x.space(), y.space()) - x.time() * y.time());
            let coincident = z_raw <= 1.0 || x.space() == y.space();
            let z = z_raw.max(1.0);
            let (dsim_dz, dsim_ds) = match cfg.variant {
                LogitVariant::D => {
                    if coincident {
                        return Err(Error::GradientSingular {
                            text: i,
                            image: j,
                            formula: "arccosh at 1 in Lorentzian distance (d logit)",
                        });
                    }
                    let d = z.acosh() / s;
                    (-1.0 / (s * (z * z - 1.0).sqrt()), d / s)
                }
                LogitVariant::D2 => {
                    if coincident {
                        continue;
                    }
                    let d = z.acosh() / s;
                    (-(2.0 / c) * acosh_ratio(z), 2.0 * d * d / s)
                }
            };
            let w = dsim[i * b + j];
            let zg = z_grad(&tp[i], &ip[j], s);
            let wz = w * dsim_dz;
            axpy(&mut du[i], wz * zg.cu_u, &tp[i].u);
            axpy(&mut du[i], wz * zg.cu_v, &ip[j].u);
            axpy(&mut dv[j], wz * zg.cv_v, &ip[j].u);
            axpy(&mut dv[j], wz * zg.cv_u, &tp[i].u);
            ds += wz * zg.ds + w * dsim_ds;
        }
    }

    if cfg.lambda > 0.0 {
        let weight = cfg.lambda / b as f64;
        for i in 0..b {
            if fw.entail_terms[i] <= 0.0 {
                continue;
            }
            ds += hyper_entail_grad(
                i,
                &tp[i],
                &ip[i],
                fw,
                c,
                cfg.min_radius,
                weight,
                &mut du[i],
                &mut dv[i],
            )?;
        }
    }

    let (at, ai) = (cfg.alpha_txt(), cfg.alpha_img());
    for i in 0..b {
        axpy(&mut grad.d_texts[i], at, &du[i]);
        axpy(&mut grad.d_images[i], ai, &dv[i]);
        grad.d_log_alpha_txt += dot(&du[i], &tp[i].u);
        grad.d_log_alpha_img += dot(&dv[i], &ip[i].u);
    }
    if cfg.curvature_unclamped() {
        grad.d_log_c = 0.5 * s * ds;
    }
    Ok(())
}

/// Adds the entailment gradient of pair `i` into `du`/`dv`; returns its `∂/∂√c`.
#[allow(clippy::too_many_arguments)]
fn hyper_entail_grad(
    i: usize,
    p: &HypPrep,
    q: &HypPrep,
    fw: &Forward,
    c: f64,
    k: f64,
    weight: f64,
    du: &mut [f64],
    dv: &mut [f64],
) -> Result<f64> {
    let s = c.sqrt();
    let x = &fw.text_pts[i];
    let y = &fw.image_pts[i];
    let z = -c * (dot(x.space(), y.space()) - x.time() * y.time());
    let rx = norm(x.space());
    let root = (z * z - 1.0).sqrt();
    // sin taken from the stable angle; 1 - cos² cancels far from the apex
    let sin_ext = exterior_angle_hyper(x, y)?.sin();
    if sin_ext <= 0.0 {
        return Err(Error::GradientSingular {
            text: i,
            image: i,
            formula: "arccos at -1 in hyperbolic exterior angle",
        });
    }
    let dext = -weight / sin_ext;

    // cos_ext = (cosh b - z cosh a)/(sinh a·sqrt(z² - 1)) with a = √c‖u‖, b = √c‖v‖
    let (sa, ca) = (p.sinh_a, p.cosh_a);
    let num = q.cosh_a - z * ca;
    let den = sa * root;
    let dq_da = (-z * sa - num * ca / sa) / den;
    let dq_dz = -ca / den - num * z / ((z * z - 1.0) * den);
    // ∂q/∂b · ∇_v b = (sinh b/den)·√c·v/‖v‖ = √c·σ_v·v/den
    let dq_dv_coef = s * q.sigma / den;

    let mut da = dext * dq_da;
    let dz = dext * dq_dz;
    // aperture arcsin(2K/(√c‖x_space‖)) when unclamped
    let ap_den = s * rx;
    if ap_den > 2.0 * k {
        let rho = 2.0 * k / ap_den;
        let daper_da = -(rho / (1.0 - rho * rho).sqrt()) * ca / sa;
        da -= weight * daper_da;
    }

    let zg = z_grad(p, q, s);
    // ∇_u a = √c·u/‖u‖
    axpy(du, da * s / p.r, &p.u);
    axpy(du, dz * zg.cu_u, &p.u);
    axpy(du, dz * zg.cu_v, &q.u);
    axpy(dv, dext * dq_dv_coef, &q.u);
    axpy(dv, dz * zg.cv_v, &q.u);
    axpy(dv, dz * zg.cv_u, &p.u);

    let dq_db_sinh = q.sinh_a / den;
    Ok(da * p.r + dext * dq_db_sinh * q.r + dz * zg.ds)
}

/// Whether a batch stays clear of the points where the objective is not
/// differentiable: coincident pairs, cosines at ±1 and, when `λ > 0`, cone
/// boundaries and the aperture clamp (both by at least `margin`).
pub fn clear_of_singularities<T: AsRef<[f64]>>(
    cfg: &GeometryConfig,
    texts: &[T],
    images: &[T],
    margin: f64,
) -> Result<bool> {
    for t in texts {
        for i in images {
            let (t, i) = (t.as_ref(), i.as_ref());
            let ok = match cfg.kind {
                GeometryKind::Clip => true,
                GeometryKind::Elliptic => cosine_sim(t, i)?.abs() < 1.0 - 1e-6,
                GeometryKind::Euclidean => euclidean_distance(t, i)? > 1e-3,
                GeometryKind::Hyperbolic => {
                    let x = lift(cfg, t, Modality::Text)?;
                    let y = lift(cfg, i, Modality::Image)?;
                    lorentz_distance(&x, &y)? > 1e-3
                }
            };
            if !ok {
                return Ok(false);
            }
        }
    }
    if cfg.lambda == 0.0 {
        return Ok(true);
    }
    let k = cfg.min_radius;
    for (t, i) in texts.iter().zip(images) {
        let (t, i) = (t.as_ref(), i.as_ref());
        let ok = match cfg.kind {
            GeometryKind::Euclidean => {
                let gap = exterior_angle_euclid(t, i)? - half_aperture_euclid(t, k);
                (norm(t) - k).abs() > margin && gap.abs() > margin
            }
            GeometryKind::Hyperbolic => {
                let x = lift(cfg, t, Modality::Text)?;
                let y = lift(cfg, i, Modality::Image)?;
                let gap = exterior_angle_hyper(&x, &y)? - half_aperture_hyper(&x, k);
                let radius = cfg.curvature().sqrt() * norm(x.space());
                (radius - 2.0 * k).abs() > margin && gap.abs() > margin
            }
            _ => true,
        };
        if !ok {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Relative error `|a - g| / max(1e-8, |a| + |g|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central-difference gradient with per-coordinate step `h·max(1, |θ_k|)`.
pub fn central_difference<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    fd_gradient(f, theta, FdOptions::central(h))
}

/// How the finite-difference oracle probes each coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    /// Base step; the step on coordinate `k` is `h·max(1, |θ_k|)`.
    pub h: f64,
    /// Richardson levels on top of the central difference. With `levels = 1`
    /// the estimate is `(4·D(h/2) - D(h))/3`, which cancels the `h²` error term.
    pub richardson_levels: usize,
}

impl FdOptions {
    pub fn central(h: f64) -> Self {
        Self {
            h,
            richardson_levels: 0,
        }
    }

    pub fn richardson(h: f64, levels: usize) -> Self {
        Self {
            h,
            richardson_levels: levels,
        }
    }
}

impl Default for FdOptions {
    fn default() -> Self {
        Self::central(1e-6)
    }
}

pub fn fd_gradient<F>(f: F, theta: &[f64], opts: FdOptions) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut probe = theta.to_vec();
    let mut at = |k: usize, v: f64| {
        probe[k] = v;
        let out = f(&probe);
        probe[k] = theta[k];
        out
    };
    fd_sweep(theta, opts, |k, lo, hi| Ok(at(k, hi)? - at(k, lo)?))
}

/// Core of the oracle. `diff(k, lo, hi)` returns `f(θ|θ_k=hi) - f(θ|θ_k=lo)`.
fn fd_sweep<F>(theta: &[f64], opts: FdOptions, mut diff: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64, f64) -> Result<f64>,
{
    let h = opts.h;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut out = Vec::with_capacity(theta.len());
    let mut table = vec![0.0; opts.richardson_levels + 1];
    for (k, &x) in theta.iter().enumerate() {
        let base = h * x.abs().max(1.0);
        for (level, slot) in table.iter_mut().enumerate() {
            let step = base / (1u64 << level) as f64;
            // the step actually taken, after rounding x ± step
            *slot = diff(k, x - step, x + step)? / ((x + step) - (x - step));
        }
        // Neville-style elimination of the h², h⁴, ... terms
        for m in 1..table.len() {
            let factor = 4f64.powi(m as i32);
            for level in (m..table.len()).rev() {
                table[level] = (factor * table[level] - table[level - 1]) / (factor - 1.0);
            }
        }
        out.push(table[table.len() - 1]);
    }
    Ok(out)
}

/// Loss differences for the oracle. Subtracting two separately rounded
/// losses leaves noise near `1e-16/h`, which swamps gradients of a saturated
/// softmax. Instead each cross-entropy difference is formed directly from
/// the logit differences, so terms the probe does not touch cancel exactly.
struct LossProbe<'a> {
    cfg: &'a GeometryConfig,
    layout: Layout,
    prep: Prepared,
    sims: Vec<f64>,
    entail: Vec<f64>,
}

/// Logits and entailment terms at one probe point.
struct ProbeSide {
    logits: Vec<f64>,
    entail: Vec<f64>,
}

impl<'a> LossProbe<'a> {
    fn new<T: AsRef<[f64]>>(cfg: &'a GeometryConfig, texts: &[T], images: &[T]) -> Result<Self> {
        let prep = Prepared::new(cfg, texts, images)?;
        let sims = prep.all_sims()?;
        let entail = prep.all_entail_terms()?;
        Ok(Self {
            cfg,
            layout: Layout {
                b: prep.b,
                n: prep.texts[0].len(),
            },
            prep,
            sims,
            entail,
        })
    }

    fn side(&mut self, k: usize, value: f64) -> Result<ProbeSide> {
        let b = self.layout.b;
        let (modality, pair, coord) = match self.layout.param(k) {
            Param::Text { pair, coord } => (Modality::Text, pair, coord),
            Param::Image { pair, coord } => (Modality::Image, pair, coord),
            scalar => {
                let mut cfg = self.cfg.clone();
                *match scalar {
                    Param::LogBeta => &mut cfg.log_beta,
                    Param::LogC => &mut cfg.log_c,
                    Param::LogAlphaTxt => &mut cfg.log_alpha_txt,
                    _ => &mut cfg.log_alpha_img,
                } = value;
                let prep = Prepared::new(&cfg, &self.prep.texts, &self.prep.images)?;
                return side_from(&cfg, prep.all_sims()?, prep.all_entail_terms()?);
            }
        };
        let embs = match modality {
            Modality::Text => &self.prep.texts,
            Modality::Image => &self.prep.images,
        };
        let old = embs[pair][coord];
        let moved = self.moved(modality, pair, coord, value);
        self.prep.set_coord(modality, pair, coord, old)?;
        let (sims, entail) = moved?;
        debug_assert_eq!(sims.len(), b * b);
        side_from(self.cfg, sims, entail)
    }

    fn moved(
        &mut self,
        modality: Modality,
        pair: usize,
        coord: usize,
        value: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let b = self.layout.b;
        self.prep.set_coord(modality, pair, coord, value)?;
        let mut sims = self.sims.clone();
        for other in 0..b {
            let (i, j) = match modality {
                Modality::Text => (pair, other),
                Modality::Image => (other, pair),
            };
            sims[i * b + j] = self.prep.sim(i, j)?;
        }
        let mut entail = self.entail.clone();
        if !entail.is_empty() {
            entail[pair] = self.prep.entail_term(pair)?;
        }
        Ok((sims, entail))
    }

    /// `L(θ_k = hi) - L(θ_k = lo)`.
    fn diff(&mut self, k: usize, lo: f64, hi: f64) -> Result<f64> {
        let minus = self.side(k, lo)?;
        let plus = self.side(k, hi)?;
        Ok(loss_difference(self.cfg.lambda, self.layout.b, &minus, &plus))
    }
}

fn side_from(cfg: &GeometryConfig, sims: Vec<f64>, entail: Vec<f64>) -> Result<ProbeSide> {
    let beta = cfg.beta();
    let logits: Vec<f64> = sims.iter().map(|s| beta * s).collect();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logit matrix".into()));
    }
    Ok(ProbeSide { logits, entail })
}

fn loss_difference(lambda: f64, b: usize, minus: &ProbeSide, plus: &ProbeSide) -> f64 {
    let (lm, lp) = (&minus.logits, &plus.logits);
    let mut col_m = vec![0.0; b];
    let mut col_p = vec![0.0; b];
    let mut contrastive = 0.0;
    for i in 0..b {
        let row = i * b..(i + 1) * b;
        contrastive += xent_difference(&lm[row.clone()], &lp[row], i);
        for j in 0..b {
            col_m[j] = lm[j * b + i];
            col_p[j] = lp[j * b + i];
        }
        contrastive += xent_difference(&col_m, &col_p, i);
    }
    let mut out = contrastive / (2.0 * b as f64);
    if !minus.entail.is_empty() {
        let d: f64 = minus.entail.iter().zip(&plus.entail).map(|(m, p)| p - m).sum();
        out += lambda * d / b as f64;
    }
    out
}

/// `X(plus) - X(minus)` for `X(v) = LSE(v) - v[t] = ln Σ_j exp(v_j - v_t)`.
fn xent_difference(minus: &[f64], plus: &[f64], t: usize) -> f64 {
    if minus == plus {
        return 0.0;
    }
    let dt = plus[t] - minus[t];
    // shift that keeps every exp(w_j - m) ≤ 1, with w = v - v_t
    let mut m: f64 = 0.0;
    for j in (0..minus.len()).filter(|&j| j != t) {
        m = m.max(minus[j] - minus[t]).max(plus[j] - plus[t]);
    }
    let mut base = (-m).exp();
    let mut delta = 0.0;
    for j in (0..minus.len()).filter(|&j| j != t) {
        let e = (minus[j] - minus[t] - m).exp();
        base += e;
        delta += e * ((plus[j] - minus[j]) - dt).exp_m1();
    }
    (delta / base).ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Text { pair: usize, coord: usize },
    Image { pair: usize, coord: usize },
    LogBeta,
    LogC,
    LogAlphaTxt,
    LogAlphaImg,
}

impl std::fmt::Display for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Param::Text { pair, coord } => write!(f, "text[{pair}][{coord}]"),
            Param::Image { pair, coord } => write!(f, "image[{pair}][{coord}]"),
            Param::LogBeta => f.write_str("log_beta"),
            Param::LogC => f.write_str("log_c"),
            Param::LogAlphaTxt => f.write_str("log_alpha_txt"),
            Param::LogAlphaImg => f.write_str("log_alpha_img"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdEntry {
    pub param: Param,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn worst(&self) -> Option<&FdEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |e| e.rel_err)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

/// Flattened view of the objective's inputs: texts, images, then the four log-scalars.
struct Layout {
    b: usize,
    n: usize,
}

impl Layout {
    fn flatten<T: AsRef<[f64]>>(&self, cfg: &GeometryConfig, texts: &[T], images: &[T]) -> Vec<f64> {
        let mut theta = Vec::with_capacity(2 * self.b * self.n + 4);
        for e in texts.iter().chain(images) {
            theta.extend_from_slice(e.as_ref());
        }
        theta.extend([cfg.log_beta, cfg.log_c, cfg.log_alpha_txt, cfg.log_alpha_img]);
        theta
    }

    fn param(&self, k: usize) -> Param {
        let bn = self.b * self.n;
        if k < bn {
            Param::Text { pair: k / self.n, coord: k % self.n }
        } else if k < 2 * bn {
            Param::Image { pair: (k - bn) / self.n, coord: (k - bn) % self.n }
        } else {
            [Param::LogBeta, Param::LogC, Param::LogAlphaTxt, Param::LogAlphaImg][k - 2 * bn]
        }
    }
}

fn analytic_flat(grad: &GradRecord) -> Vec<f64> {
    let mut out: Vec<f64> = grad.d_texts.iter().chain(&grad.d_images).flatten().copied().collect();
    out.extend([grad.d_log_beta, grad.d_log_c, grad.d_log_alpha_txt, grad.d_log_alpha_img]);
    out
}

/// Compare [`grad_total_loss`] with central differences on every embedding
/// coordinate and every log-scalar.
pub fn fd_check<T: AsRef<[f64]>>(
    cfg: &GeometryConfig,
    texts: &[T],
    images: &[T],
    h: f64,
) -> Result<FdReport> {
    fd_check_with(cfg, texts, images, FdOptions::central(h))
}

pub fn fd_check_with<T: AsRef<[f64]>>(
    cfg: &GeometryConfig,
    texts: &[T],
    images: &[T],
    opts: FdOptions,
) -> Result<FdReport> {
    let (_, grad) = grad_total_loss(cfg, texts, images)?;
    let layout = Layout {
        b: texts.len(),
        n: texts[0].as_ref().len(),
    };
    let theta = layout.flatten(cfg, texts, images);
    let mut probe = LossProbe::new(cfg, texts, images)?;
    let numeric = fd_sweep(&theta, opts, |k, lo, hi| probe.diff(k, lo, hi))?;
    let analytic = analytic_flat(&grad);
    let entries = analytic
        .iter()
        .zip(&numeric)
        .enumerate()
        .map(|(k, (&a, &g))| FdEntry {
            param: layout.param(k),
            analytic: a,
            numeric: g,
            rel_err: relative_error(a, g),
        })
        .collect();
    Ok(FdReport { entries })
}
