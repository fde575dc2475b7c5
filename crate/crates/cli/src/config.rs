//! The run configuration: one TOML document with nested sections.
//!
//! Every key is optional. Geometry scalars left out are filled with the
//! defaults for the chosen kind and variant when the config is resolved, and
//! the resolved document is what gets echoed next to the outputs.

use std::path::{Path, PathBuf};

use embgeo_core::{
    AdamW, AncestorDepth, EncoderSpec, GeometryConfig, GeometryKind, LogitVariant, ScheduleSpec,
    TrainSpec, TreeSpec,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// File name of the config echo written into every output directory.
pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds encoder initialization, batch sampling, the corpus and gradcheck.
    pub seed: u64,
    pub out: PathBuf,
    /// Embedding dimension `n`.
    pub embed_dim: usize,
    pub batch_size: usize,
    pub log_every: u64,
    pub geometry: GeometrySection,
    pub tree: TreeSpec,
    pub data: DataSection,
    pub encoder: EncoderSection,
    pub schedule: ScheduleSpec,
    pub optimizer: AdamW,
    pub analysis: AnalysisSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            embed_dim: 32,
            batch_size: 64,
            log_every: 100,
            geometry: GeometrySection::default(),
            tree: TreeSpec::default(),
            data: DataSection::default(),
            encoder: EncoderSection::default(),
            schedule: ScheduleSpec::default(),
            optimizer: AdamW::default(),
            analysis: AnalysisSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub kind: GeometryKind,
    pub variant: LogitVariant,
    pub lambda: f64,
    pub min_radius: Option<f64>,
    pub log_beta: Option<f64>,
    pub log_c: f64,
    pub log_alpha_txt: Option<f64>,
    pub log_alpha_img: Option<f64>,
    pub beta_max: f64,
    pub c_min: f64,
    pub c_max: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            kind: GeometryKind::Euclidean,
            variant: LogitVariant::D2,
            lambda: 0.2,
            min_radius: None,
            log_beta: None,
            log_c: 0.0,
            log_alpha_txt: None,
            log_alpha_img: None,
            beta_max: 100.0,
            c_min: 0.1,
            c_max: 10.0,
        }
    }
}

impl GeometrySection {
    pub fn to_config(&self, n: usize) -> GeometryConfig {
        let base = GeometryConfig::new(self.kind, self.variant, n);
        GeometryConfig {
            log_beta: self.log_beta.unwrap_or(base.log_beta),
            log_c: self.log_c,
            log_alpha_txt: self.log_alpha_txt.unwrap_or(base.log_alpha_txt),
            log_alpha_img: self.log_alpha_img.unwrap_or(base.log_alpha_img),
            min_radius: self.min_radius.unwrap_or(base.min_radius),
            lambda: self.lambda,
            beta_max: self.beta_max,
            c_min: self.c_min,
            c_max: self.c_max,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub ancestors: AncestorDepth,
    /// Pairs in the corpus written by `gen-data` and read by the analysis commands.
    pub corpus_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            ancestors: AncestorDepth::Uniform,
            corpus_size: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    /// Hidden width; 0 gives a single affine layer.
    pub hidden: usize,
    pub final_norm: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            hidden: 64,
            final_norm: true,
        }
    }
}

impl EncoderSection {
    pub fn to_spec(self) -> EncoderSpec {
        EncoderSpec {
            hidden: (self.hidden > 0).then_some(self.hidden),
            final_norm: self.final_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub bins: usize,
    /// How many corpus images `traverse` walks to the root.
    pub images: usize,
    pub filter_k: Option<f64>,
    pub include_root: bool,
    /// Embedding dump to traverse instead of the encoded corpus.
    pub corpus: Option<PathBuf>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            bins: 20,
            images: 8,
            filter_k: None,
            include_root: true,
            corpus: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    /// Random configurations per geometry combination.
    pub configs: usize,
    pub batch: usize,
    pub dim: usize,
    /// λ used for the entailment rows.
    pub lambda: f64,
    pub h: f64,
    pub richardson_levels: usize,
    pub tolerance: f64,
    /// Required clearance from cone boundaries and the aperture clamp.
    pub margin: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            configs: 100,
            batch: 8,
            dim: 16,
            lambda: 0.2,
            h: 1e-2,
            richardson_levels: 2,
            tolerance: 1e-5,
            margin: 0.05,
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub filter_k: Option<f64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Read `path`, or start from the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                Self::from_toml(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Apply overrides, fill in the geometry defaults and validate.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Self> {
        if let Some(out) = &overrides.out {
            self.out = out.clone();
        }
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(k) = overrides.filter_k {
            self.analysis.filter_k = Some(k);
        }
        let g = self.geometry.to_config(self.embed_dim);
        self.geometry.min_radius = Some(g.min_radius);
        self.geometry.log_beta = Some(g.log_beta);
        self.geometry.log_alpha_txt = Some(g.log_alpha_txt);
        self.geometry.log_alpha_img = Some(g.log_alpha_img);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        // TOML integers are signed 64-bit
        for (name, seed) in [("seed", self.seed), ("tree.seed", self.tree.seed)] {
            if i64::try_from(seed).is_err() {
                return bad(format!("{name} = {seed} does not fit in a signed 64-bit integer"));
            }
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be ≥ 1".into());
        }
        if self.data.corpus_size == 0 {
            return bad("data.corpus_size must be ≥ 1".into());
        }
        if self.analysis.bins == 0 {
            return bad("analysis.bins must be ≥ 1".into());
        }
        if let Some(k) = self.analysis.filter_k {
            if !(k > 0.0 && k.is_finite()) {
                return bad(format!("filter K must be > 0, got {k}"));
            }
        }
        let gc = &self.gradcheck;
        if gc.configs == 0 || gc.batch == 0 || gc.dim == 0 {
            return bad("gradcheck configs, batch and dim must be ≥ 1".into());
        }
        if !(gc.h > 0.0 && gc.tolerance > 0.0 && gc.lambda > 0.0 && gc.margin >= 0.0) {
            return bad("gradcheck h, tolerance and lambda must be > 0 and margin ≥ 0".into());
        }
        self.tree.validate()?;
        self.schedule.validate()?;
        self.geometry_config().validate()?;
        Ok(())
    }

    pub fn geometry_config(&self) -> GeometryConfig {
        self.geometry.to_config(self.embed_dim)
    }

    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            tree: self.tree.clone(),
            geometry: self.geometry_config(),
            embed_dim: self.embed_dim,
            encoder: self.encoder.to_spec(),
            schedule: self.schedule,
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            seed: self.seed,
            ancestors: self.data.ancestors.clone(),
            log_every: self.log_every,
        }
    }
}
