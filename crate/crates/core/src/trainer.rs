//! Toy dual encoders, AdamW, warmup-cosine schedule and the training loop.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GeometryConfig, GeometryKind, Modality};
use crate::gradients::{grad_total_loss, GradRecord};
use crate::losses::{logit_matrix, LossBreakdown};
use crate::synthdata::{gen_tree, sample_batch, AncestorDepth, PairBatch, Tree, TreeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Hidden width of the tanh layer; `None` gives a single affine layer.
    pub hidden: Option<usize>,
    /// Standardize the pre-output vector and apply an element-wise affine
    /// before the projection.
    pub final_norm: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            hidden: Some(64),
            final_norm: true,
        }
    }
}

/// Row-major `rows × cols` weight and a bias of length `rows`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(rows: usize, cols: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != rows * cols || bias.len() != rows {
            return Err(Error::Config(format!(
                "dense layer {rows}×{cols} given {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            weight,
            bias,
        })
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (cols as f64).sqrt();
        let weight = (0..rows * cols)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        Self {
            rows,
            cols,
            weight,
            bias: vec![0.0; rows],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulate parameter gradients into `grad`; return the input gradient.
    fn backward(&self, x: &[f64], g_out: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut g_in = vec![0.0; self.cols];
        for (r, &g) in g_out.iter().enumerate() {
            let row = &self.weight[r * self.cols..(r + 1) * self.cols];
            let grow = &mut grad.weight[r * self.cols..(r + 1) * self.cols];
            for c in 0..self.cols {
                grow[c] += g * x[c];
                g_in[c] += g * row[c];
            }
            grad.bias[r] += g;
        }
        g_in
    }

    fn zeros_like(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Encoder `m → n`: one affine layer, or affine→tanh→affine, then optionally
/// standardization with element-wise affine `(w, b)`, then the projection `P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Dense>,
    pub final_norm: bool,
    pub norm_weight: Vec<f64>,
    pub norm_bias: Vec<f64>,
    /// Row-major `n × n`.
    pub projection: Vec<f64>,
}

/// Intermediate values of one encoder forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Input to each layer.
    pub inputs: Vec<Vec<f64>>,
    /// Output of the last layer.
    pub pre_output: Vec<f64>,
    /// Standardized pre-output (final_norm only).
    pub standardized: Option<Vec<f64>>,
    /// `1/σ` of the standardization.
    inv_std: f64,
    /// What the projection is applied to.
    pub projected_input: Vec<f64>,
    pub output: Vec<f64>,
}

impl EncoderParams {
    /// Gaussian layer weights with variance `1/fan_in`, zero biases,
    /// `w = 1`, `b = 0` and `P = I`.
    pub fn init(m: usize, n: usize, spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        if m == 0 || n < 2 {
            return Err(Error::Config(format!(
                "encoder needs input dim ≥ 1 and output dim ≥ 2, got {m} → {n}"
            )));
        }
        let layers = match spec.hidden {
            Some(0) => return Err(Error::Config("hidden width must be ≥ 1".into())),
            Some(h) => vec![Dense::random(h, m, rng), Dense::random(n, h, rng)],
            None => vec![Dense::random(n, m, rng)],
        };
        Ok(Self {
            layers,
            final_norm: spec.final_norm,
            norm_weight: vec![1.0; n],
            norm_bias: vec![0.0; n],
            projection: identity(n),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn out_dim(&self) -> usize {
        self.norm_weight.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.out_dim();
        if self.layers.is_empty() || self.layers.len() > 2 {
            return Err(Error::Config("encoder has one or two layers".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].rows != pair[1].cols {
                return Err(Error::Config("encoder layer shapes do not chain".into()));
            }
        }
        let last = self.layers.last().map_or(0, |l| l.rows);
        if last != n || self.norm_bias.len() != n || self.projection.len() != n * n {
            return Err(Error::Config(format!(
                "encoder output pieces disagree on n = {n}"
            )));
        }
        Ok(())
    }

    pub fn forward_trace(&self, feat: &[f64]) -> Result<ForwardTrace> {
        if feat.len() != self.in_dim() {
            return Err(Error::DimMismatch {
                expected: self.in_dim(),
                got: feat.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = feat.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&x);
            inputs.push(std::mem::replace(&mut x, z));
            if k + 1 < self.layers.len() {
                x.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        let pre_output = x;
        let (standardized, inv_std, projected_input) = if self.final_norm {
            let (xhat, inv_std) = standardize(&pre_output)?;
            let y = xhat
                .iter()
                .zip(self.norm_weight.iter().zip(&self.norm_bias))
                .map(|(v, (w, b))| w * v + b)
                .collect();
            (Some(xhat), inv_std, y)
        } else {
            (None, 0.0, pre_output.clone())
        };
        let n = self.out_dim();
        let output = self
            .projection
            .chunks_exact(n)
            .map(|row| row.iter().zip(&projected_input).map(|(p, v)| p * v).sum())
            .collect();
        Ok(ForwardTrace {
            inputs,
            pre_output,
            standardized,
            inv_std,
            projected_input,
            output,
        })
    }

    /// Accumulate the gradient of `g_out·output` into `grad`.
    pub fn backward(&self, trace: &ForwardTrace, g_out: &[f64], grad: &mut EncoderParams) {
        let n = self.out_dim();
        let mut g_y = vec![0.0; n];
        for (r, &g) in g_out.iter().enumerate() {
            let row = &self.projection[r * n..(r + 1) * n];
            let grow = &mut grad.projection[r * n..(r + 1) * n];
            for c in 0..n {
                grow[c] += g * trace.projected_input[c];
                g_y[c] += g * row[c];
            }
        }
        let mut g = match &trace.standardized {
            Some(xhat) => {
                let mut g_xhat = vec![0.0; n];
                for k in 0..n {
                    grad.norm_weight[k] += g_y[k] * xhat[k];
                    grad.norm_bias[k] += g_y[k];
                    g_xhat[k] = g_y[k] * self.norm_weight[k];
                }
                let nf = n as f64;
                let mean_g = g_xhat.iter().sum::<f64>() / nf;
                let mean_gx = g_xhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                g_xhat
                    .iter()
                    .zip(xhat)
                    .map(|(gk, xk)| trace.inv_std * (gk - mean_g - xk * mean_gx))
                    .collect()
            }
            None => g_y,
        };
        for k in (0..self.layers.len()).rev() {
            let x = &trace.inputs[k];
            g = self.layers[k].backward(x, &g, &mut grad.layers[k]);
            if k > 0 {
                // x = tanh(z) of the previous layer
                g.iter_mut().zip(x).for_each(|(gv, a)| *gv *= 1.0 - a * a);
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
            final_norm: self.final_norm,
            norm_weight: vec![0.0; self.norm_weight.len()],
            norm_bias: vec![0.0; self.norm_bias.len()],
            projection: vec![0.0; self.projection.len()],
        }
    }

    /// Every parameter block, flagged with whether weight decay applies.
    fn blocks_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out: Vec<(&mut [f64], bool)> = Vec::new();
        for layer in &mut self.layers {
            out.push((&mut layer.weight, true));
            out.push((&mut layer.bias, false));
        }
        out.push((&mut self.norm_weight, false));
        out.push((&mut self.norm_bias, false));
        out.push((&mut self.projection, true));
        out
    }

    fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.norm_weight);
        out.push(&self.norm_bias);
        out.push(&self.projection);
        out
    }

    fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    for k in 0..n {
        p[k * n + k] = 1.0;
    }
    p
}

/// Mean 0, variance 1 (population); returns the result and `1/σ`.
fn standardize(x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 || !var.is_finite() {
        return Err(Error::Degenerate(format!(
            "final normalization of a vector with variance {var}"
        )));
    }
    let inv_std = 1.0 / var.sqrt();
    Ok((x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std))
}

pub fn encoder_forward(p: &EncoderParams, feat: &[f64]) -> Result<Vec<f64>> {
    Ok(p.forward_trace(feat)?.output)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            max_lr: 5e-4,
            warmup_steps: 500,
            total_steps: 2000,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup ({}) longer than the run ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("max_lr must be ≥ 0, got {}", self.max_lr)));
        }
        Ok(())
    }
}

/// Linear warmup from 0, then cosine decay to 0 at `total_steps`.
pub fn lr_at(s: &ScheduleSpec, step: u64) -> f64 {
    let step = step.min(s.total_steps);
    if step < s.warmup_steps {
        return s.max_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps - s.warmup_steps;
    if span == 0 {
        return s.max_lr;
    }
    let progress = (step - s.warmup_steps) as f64 / span as f64;
    s.max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    /// One update of `theta` in place; `t` is the 1-based step.
    #[allow(clippy::too_many_arguments)]
    fn update(&self, theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, decay: bool) {
        let bc1 = 1.0 - self.beta1.powf(t as f64);
        let bc2 = 1.0 - self.beta2.powf(t as f64);
        let step_size = lr / bc1;
        let bc2_sqrt = bc2.sqrt();
        for k in 0..theta.len() {
            if decay {
                theta[k] *= 1.0 - lr * self.weight_decay;
            }
            m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
            v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
            let denom = v[k].sqrt() / bc2_sqrt + self.eps;
            theta[k] -= step_size * m[k] / denom;
        }
    }
}

/// Adam moments for everything the optimizer touches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub text_m: EncoderParams,
    pub text_v: EncoderParams,
    pub image_m: EncoderParams,
    pub image_v: EncoderParams,
    /// `[log_beta, log_c, log_alpha_txt, log_alpha_img]`.
    pub scalar_m: [f64; 4],
    pub scalar_v: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub text_encoder: EncoderParams,
    pub image_encoder: EncoderParams,
    pub cfg: GeometryConfig,
    pub optimizer: AdamW,
    pub moments: Moments,
    pub step: u64,
    pub rng_seed: u64,
}

/// What one optimizer step saw, measured before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    /// Fraction of texts whose most similar in-batch image is their own.
    pub recall_at_1: f64,
}

const CHECKPOINT_FORMAT: &str = "embgeo-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    state: TrainState,
}

impl TrainState {
    pub fn new(cfg: GeometryConfig, m: usize, n: usize, encoder: &EncoderSpec, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text_encoder = EncoderParams::init(m, n, encoder, &mut rng)?;
        let image_encoder = EncoderParams::init(m, n, encoder, &mut rng)?;
        Ok(Self::from_parts(text_encoder, image_encoder, cfg, AdamW::default(), seed))
    }

    pub fn from_parts(
        text_encoder: EncoderParams,
        image_encoder: EncoderParams,
        cfg: GeometryConfig,
        optimizer: AdamW,
        rng_seed: u64,
    ) -> Self {
        let moments = Moments {
            text_m: text_encoder.zeros_like(),
            text_v: text_encoder.zeros_like(),
            image_m: image_encoder.zeros_like(),
            image_v: image_encoder.zeros_like(),
            scalar_m: [0.0; 4],
            scalar_v: [0.0; 4],
        };
        Self {
            text_encoder,
            image_encoder,
            cfg,
            optimizer,
            moments,
            step: 0,
            rng_seed,
        }
    }

    pub fn encoder(&self, modality: Modality) -> &EncoderParams {
        match modality {
            Modality::Text => &self.text_encoder,
            Modality::Image => &self.image_encoder,
        }
    }

    /// Encode raw features with one of the two encoders.
    pub fn embed(&self, modality: Modality, feats: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let enc = self.encoder(modality);
        feats.iter().map(|f| encoder_forward(enc, f)).collect()
    }

    /// Which of the four log-scalars this geometry trains.
    fn trainable_scalars(&self) -> [bool; 4] {
        match self.cfg.kind {
            GeometryKind::Hyperbolic => [true; 4],
            _ => [true, false, false, false],
        }
    }

    /// One AdamW step on `batch` at learning rate `lr`. On error the state
    /// is left untouched.
    pub fn train_step(&mut self, batch: &PairBatch, lr: f64) -> Result<StepReport> {
        self.text_encoder.validate()?;
        self.image_encoder.validate()?;
        let text_traces = batch
            .text_features
            .iter()
            .map(|f| self.text_encoder.forward_trace(f))
            .collect::<Result<Vec<_>>>()?;
        let image_traces = batch
            .image_features
            .iter()
            .map(|f| self.image_encoder.forward_trace(f))
            .collect::<Result<Vec<_>>>()?;
        let texts: Vec<&[f64]> = text_traces.iter().map(|t| t.output.as_slice()).collect();
        let images: Vec<&[f64]> = image_traces.iter().map(|t| t.output.as_slice()).collect();
        if texts.iter().chain(&images).any(|e| e.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("encoder output".into()));
        }

        let (loss, grad) = grad_total_loss(&self.cfg, &texts, &images)?;
        check_finite_loss(&loss)?;
        check_finite_grad(&grad)?;
        let recall_at_1 = recall_at_1(&self.cfg, &texts, &images)?;

        let mut g_text = self.text_encoder.zeros_like();
        let mut g_image = self.image_encoder.zeros_like();
        for (trace, g) in text_traces.iter().zip(&grad.d_texts) {
            self.text_encoder.backward(trace, g, &mut g_text);
        }
        for (trace, g) in image_traces.iter().zip(&grad.d_images) {
            self.image_encoder.backward(trace, g, &mut g_image);
        }
        if !g_text.all_finite() {
            return Err(Error::NonFinite("text encoder gradient".into()));
        }
        if !g_image.all_finite() {
            return Err(Error::NonFinite("image encoder gradient".into()));
        }

        let t = self.step + 1;
        let opt = self.optimizer;
        let trainable = self.trainable_scalars();
        let mv = &mut self.moments;
        for (enc, g, m, v) in [
            (&mut self.text_encoder, &g_text, &mut mv.text_m, &mut mv.text_v),
            (&mut self.image_encoder, &g_image, &mut mv.image_m, &mut mv.image_v),
        ] {
            let blocks = enc.blocks_mut().into_iter();
            for (((theta, decay), g), (m, v)) in blocks
                .zip(g.blocks())
                .zip(m.blocks_mut().into_iter().zip(v.blocks_mut()))
            {
                opt.update(theta, g, m.0, v.0, t, lr, decay);
            }
        }

        let scalar_grads = [grad.d_log_beta, grad.d_log_c, grad.d_log_alpha_txt, grad.d_log_alpha_img];
        let active = [
            self.cfg.beta_unclamped(),
            self.cfg.curvature_unclamped(),
            true,
            true,
        ];
        let cfg = &mut self.cfg;
        let scalars = [
            &mut cfg.log_beta,
            &mut cfg.log_c,
            &mut cfg.log_alpha_txt,
            &mut cfg.log_alpha_img,
        ];
        for (k, theta) in scalars.into_iter().enumerate() {
            if trainable[k] && active[k] {
                opt.update(
                    std::slice::from_mut(theta),
                    &scalar_grads[k..=k],
                    &mut mv.scalar_m[k..=k],
                    &mut mv.scalar_v[k..=k],
                    t,
                    lr,
                    false,
                );
            }
        }
        self.cfg.clamp_scalars();
        self.step = t;
        Ok(StepReport { loss, recall_at_1 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            state: self.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
        let file: CheckpointFile =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        file.state.cfg.validate()?;
        file.state.text_encoder.validate()?;
        file.state.image_encoder.validate()?;
        Ok(file.state)
    }
}

fn check_finite_loss(loss: &LossBreakdown) -> Result<()> {
    for (name, v) in [
        ("contrastive loss", loss.contrastive),
        ("entailment loss", loss.entailment),
        ("total loss", loss.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(())
}

fn check_finite_grad(g: &GradRecord) -> Result<()> {
    let named = [
        ("d_log_beta", g.d_log_beta),
        ("d_log_c", g.d_log_c),
        ("d_log_alpha_txt", g.d_log_alpha_txt),
        ("d_log_alpha_img", g.d_log_alpha_img),
    ];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite((*name).into()));
    }
    if g.d_texts.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("text embedding gradient".into()));
    }
    if g.d_images.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image embedding gradient".into()));
    }
    Ok(())
}

/// Text→image in-batch recall@1; ties go to the lowest image index.
pub fn recall_at_1<T: AsRef<[f64]>>(cfg: &GeometryConfig, texts: &[T], images: &[T]) -> Result<f64> {
    let logits = logit_matrix(cfg, texts, images)?;
    let b = logits.size();
    let hits = (0..b)
        .filter(|&i| {
            let mut best = 0;
            for j in 1..b {
                if logits.get(i, j) > logits.get(i, best) {
                    best = j;
                }
            }
            best == i
        })
        .count();
    Ok(hits as f64 / b as f64)
}

/// Everything `train` needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub tree: TreeSpec,
    pub geometry: GeometryConfig,
    pub embed_dim: usize,
    pub encoder: EncoderSpec,
    pub schedule: ScheduleSpec,
    pub optimizer: AdamW,
    pub batch_size: usize,
    pub seed: u64,
    pub ancestors: AncestorDepth,
    /// Log every this many steps; the last step is always logged.
    pub log_every: u64,
}

/// One row of the training log. Losses and recall are measured on the
/// step's batch before the update; the scalars are the values after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub contrastive: f64,
    pub entailment: f64,
    pub total: f64,
    pub beta: f64,
    pub curvature: f64,
    pub alpha_txt: f64,
    pub alpha_img: f64,
    pub recall_at_1: f64,
    /// Batches redrawn so far because their gradient was singular.
    pub resampled: u64,
}

/// Give up after this many singular batches in a row.
const MAX_RESAMPLES: u32 = 16;

pub fn train(spec: &TrainSpec) -> Result<(TrainState, Vec<MetricsRow>)> {
    train_on(&gen_tree(&spec.tree)?, spec)
}

/// [`train`] on an already generated tree, which must match `spec.tree`.
pub fn train_on(tree: &Tree, spec: &TrainSpec) -> Result<(TrainState, Vec<MetricsRow>)> {
    if tree.spec() != &spec.tree {
        return Err(Error::Config("tree does not match the tree section of the spec".into()));
    }
    spec.schedule.validate()?;
    if spec.batch_size == 0 {
        return Err(Error::Config("batch size must be ≥ 1".into()));
    }
    if spec.log_every == 0 {
        return Err(Error::Config("log_every must be ≥ 1".into()));
    }
    let mut state = TrainState::new(
        spec.geometry.clone(),
        spec.tree.raw_dim,
        spec.embed_dim,
        &spec.encoder,
        spec.seed,
    )?;
    state.optimizer = spec.optimizer;
    let mut data_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    data_rng.set_stream(1);
    let mut resampled = 0;
    let mut log = Vec::new();
    for s in 0..spec.schedule.total_steps {
        let lr = lr_at(&spec.schedule, s);
        let mut attempts = 0;
        let report = loop {
            let batch = sample_batch(tree, spec.batch_size, data_rng.next_u64(), &spec.ancestors)?;
            match state.train_step(&batch, lr) {
                Err(Error::GradientSingular { .. }) if attempts < MAX_RESAMPLES => {
                    attempts += 1;
                    resampled += 1;
                }
                other => break other?,
            }
        };
        let step = state.step;
        if step % spec.log_every == 0 || step == spec.schedule.total_steps {
            let cfg = &state.cfg;
            log.push(MetricsRow {
                step,
                lr,
                contrastive: report.loss.contrastive,
                entailment: report.loss.entailment,
                total: report.loss.total,
                beta: cfg.beta(),
                curvature: cfg.curvature(),
                alpha_txt: cfg.alpha_txt(),
                alpha_img: cfg.alpha_img(),
                recall_at_1: report.recall_at_1,
                resampled,
            });
        }
    }
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LogitVariant;

    fn tiny_encoder(final_norm: bool, hidden: Option<usize>) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        EncoderParams::init(4, 3, &EncoderSpec { hidden, final_norm }, &mut rng).unwrap()
    }

    #[test]
    fn standardized_intermediate_has_zero_mean_and_norm_sqrt_n() {
        let enc = tiny_encoder(true, Some(6));
        let tr = enc.forward_trace(&[0.3, -1.0, 2.0, 0.5]).unwrap();
        let xhat = tr.standardized.unwrap();
        let mean = xhat.iter().sum::<f64>() / 3.0;
        let norm = xhat.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(mean.abs() <= 1e-12);
        assert!((norm - 3f64.sqrt()).abs() <= 1e-9);
    }

    #[test]
    fn identity_projection_returns_standardized_vector() {
        let enc = tiny_encoder(true, None);
        let tr = enc.forward_trace(&[0.3, -1.0, 2.0, 0.5]).unwrap();
        assert_eq!(tr.output, tr.standardized.unwrap());
    }

    #[test]
    fn zero_weights_leave_only_the_bias_path() {
        let mut enc = tiny_encoder(false, None);
        enc.layers[0].weight.iter_mut().for_each(|w| *w = 0.0);
        enc.layers[0].bias = vec![0.5, -1.0, 2.0];
        enc.projection = vec![1.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, -1.0];
        let out = encoder_forward(&enc, &[9.0, 8.0, 7.0, 6.0]).unwrap();
        assert_eq!(out, vec![-0.5, -2.0, -2.0]);
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let mut enc = tiny_encoder(true, None);
        enc.layers[0].weight.iter_mut().for_each(|w| *w = 0.0);
        enc.layers[0].bias = vec![1.5; 3];
        assert!(matches!(encoder_forward(&enc, &[1.0; 4]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (final_norm, hidden) in [(true, Some(5)), (false, Some(5)), (true, None)] {
            let mut enc = tiny_encoder(final_norm, hidden);
            enc.norm_weight = vec![0.7, 1.3, -0.4];
            enc.norm_bias = vec![0.1, -0.2, 0.3];
            enc.projection = vec![0.9, 0.2, -0.1, 0.3, 1.1, 0.4, -0.5, 0.0, 0.8];
            let feat = [0.3, -1.0, 2.0, 0.5];
            let g_out = [0.4, -1.2, 0.7];
            let f = |e: &EncoderParams| -> f64 {
                let out = encoder_forward(e, &feat).unwrap();
                out.iter().zip(&g_out).map(|(a, b)| a * b).sum()
            };
            let mut grad = enc.zeros_like();
            enc.backward(&enc.forward_trace(&feat).unwrap(), &g_out, &mut grad);
            let analytic: Vec<f64> = grad.blocks().concat();
            let n_blocks = enc.blocks().len();
            let mut k = 0;
            for block in 0..n_blocks {
                let len = enc.blocks()[block].len();
                for i in 0..len {
                    let h = 1e-6;
                    let mut plus = enc.clone();
                    plus.blocks_mut()[block].0[i] += h;
                    let mut minus = enc.clone();
                    minus.blocks_mut()[block].0[i] -= h;
                    let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                    let a = analytic[k];
                    assert!(
                        (a - numeric).abs() <= 1e-7 * (1.0 + a.abs()),
                        "norm={final_norm} block {block}[{i}]: {a} vs {numeric}"
                    );
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = ScheduleSpec {
            max_lr: 5e-4,
            warmup_steps: 500,
            total_steps: 3125,
        };
        assert_eq!(lr_at(&s, 0), 0.0);
        assert_eq!(lr_at(&s, 500), 5e-4);
        assert!(lr_at(&s, 3125).abs() <= 1e-15);
        assert!((lr_at(&s, 250) - 2.5e-4).abs() < 1e-18);
        let mid = 500 + (3125 - 500) / 2;
        assert!(lr_at(&s, mid) < 5e-4 && lr_at(&s, mid) > 2.4e-4);
    }

    fn toy_batch() -> PairBatch {
        PairBatch {
            text_features: vec![vec![0.3, -1.0, 2.0, 0.5], vec![1.0, 0.2, -0.3, 0.8]],
            image_features: vec![vec![0.4, -0.8, 1.7, 0.2], vec![0.9, 0.1, -0.5, 1.1]],
            text_node_ids: vec![0, 0],
            image_node_ids: vec![0, 0],
        }
    }

    #[test]
    fn zero_learning_rate_only_advances_the_counter() {
        let cfg = GeometryConfig::new(GeometryKind::Hyperbolic, LogitVariant::D, 3).with_lambda(0.2);
        let mut state = TrainState::new(cfg, 4, 3, &EncoderSpec::default(), 1).unwrap();
        let before = state.clone();
        state.train_step(&toy_batch(), 0.0).unwrap();
        assert_eq!(state.step, 1);
        assert_eq!(state.text_encoder, before.text_encoder);
        assert_eq!(state.image_encoder, before.image_encoder);
        assert_eq!(state.cfg, before.cfg);
    }

    #[test]
    fn steps_are_deterministic() {
        let cfg = GeometryConfig::new(GeometryKind::Euclidean, LogitVariant::D2, 3).with_lambda(0.2);
        let mut a = TrainState::new(cfg, 4, 3, &EncoderSpec::default(), 1).unwrap();
        let mut b = a.clone();
        for _ in 0..3 {
            a.train_step(&toy_batch(), 1e-2).unwrap();
            b.train_step(&toy_batch(), 1e-2).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn singular_step_leaves_state_untouched() {
        let cfg = GeometryConfig::new(GeometryKind::Euclidean, LogitVariant::D, 3);
        let mut state = TrainState::new(cfg, 4, 3, &EncoderSpec::default(), 1).unwrap();
        state.image_encoder = state.text_encoder.clone();
        let mut batch = toy_batch();
        batch.image_features = batch.text_features.clone();
        let before = state.clone();
        assert!(matches!(
            state.train_step(&batch, 1e-2),
            Err(Error::GradientSingular { .. })
        ));
        assert_eq!(state, before);
    }

    #[test]
    fn empty_run_returns_initial_state() {
        let spec = TrainSpec {
            tree: TreeSpec {
                depth: 2,
                raw_dim: 4,
                ..TreeSpec::default()
            },
            geometry: GeometryConfig::new(GeometryKind::Euclidean, LogitVariant::D2, 3),
            embed_dim: 3,
            encoder: EncoderSpec::default(),
            schedule: ScheduleSpec {
                max_lr: 1e-3,
                warmup_steps: 0,
                total_steps: 0,
            },
            optimizer: AdamW::default(),
            batch_size: 4,
            seed: 2,
            ancestors: AncestorDepth::Uniform,
            log_every: 1,
        };
        let (state, log) = train(&spec).unwrap();
        assert!(log.is_empty());
        let init = TrainState::new(spec.geometry.clone(), 4, 3, &spec.encoder, 2).unwrap();
        assert_eq!(state, init);
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let cfg = GeometryConfig::new(GeometryKind::Hyperbolic, LogitVariant::D2, 3).with_lambda(0.2);
        let mut state = TrainState::new(cfg, 4, 3, &EncoderSpec::default(), 3).unwrap();
        state.train_step(&toy_batch(), 1e-2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        state.save(&path).unwrap();
        assert_eq!(TrainState::load(&path).unwrap(), state);
    }
}
