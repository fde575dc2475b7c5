use std::path::{Path, PathBuf};

use embgeo_core::{
    clear_of_singularities, compute_root, distance_histogram, fd_check_with, gen_tree,
    modality_gap, relative_error, root_distance, sample_batch, step_t, train_on, traverse_image,
    FdOptions, GeometryConfig, GeometryKind, Hit, LogitVariant, Modality, MetricsRow,
    TrainState, TraversalOptions,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{RunConfig, ECHO_FILE};
use crate::error::{CliError, Result};
use crate::tables::{
    finish, num, put, read_embeddings, read_pairs, read_tree, write_embeddings, write_pairs,
    write_tree, writer, Corpus, DumpRow, EmbeddingDump,
};

pub const TREE_FILE: &str = "tree.csv";
pub const PAIRS_FILE: &str = "pairs.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const GAP_FILE: &str = "gap.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const TRAVERSAL_SUMMARY_FILE: &str = "traversal.csv";
pub const TRAVERSAL_DIR: &str = "traversal";

/// Create the output directory and echo the resolved config into it.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out.clone();
    std::fs::create_dir_all(&out).map_err(CliError::io(&out))?;
    let echo = out.join(ECHO_FILE);
    std::fs::write(&echo, cfg.to_toml()?).map_err(CliError::io(&echo))?;
    Ok(out)
}

fn require(path: PathBuf, what: &'static str, producer: &'static str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Missing {
            what,
            path,
            producer,
        })
    }
}

/// One row of the gradient check report.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub kind: GeometryKind,
    pub variant: LogitVariant,
    pub lambda: f64,
    pub configs: usize,
    pub rejected: usize,
    pub max_rel_err: f64,
    /// Where the largest error occurred, e.g. `config 3 text[0][5]`.
    pub worst: String,
}

fn combos(lambda: f64) -> Vec<(GeometryKind, LogitVariant, f64)> {
    let mut out = Vec::new();
    for kind in GeometryKind::ALL {
        let variants: &[LogitVariant] = if kind.supports_entailment() {
            &[LogitVariant::D, LogitVariant::D2]
        } else {
            &[LogitVariant::D]
        };
        for &variant in variants {
            out.push((kind, variant, 0.0));
            if kind.supports_entailment() {
                out.push((kind, variant, lambda));
            }
        }
    }
    out
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..n).map(|_| Distribution::<f64>::sample(&StandardNormal, rng)).collect())
        .collect()
}

/// Compare analytic and finite-difference gradients at seeded random points
/// for every geometry, variant and entailment setting. With
/// `inject_wrong_sign` the analytic gradient is negated before comparing.
pub fn run_gradcheck(cfg: &RunConfig, inject_wrong_sign: bool) -> Result<Vec<GradcheckRow>> {
    let gc = &cfg.gradcheck;
    let opts = FdOptions::richardson(gc.h, gc.richardson_levels);
    let mut rows = Vec::new();
    for (idx, (kind, variant, lambda)) in combos(gc.lambda).into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(idx as u64);
        let mut row = GradcheckRow {
            kind,
            variant,
            lambda,
            configs: 0,
            rejected: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        };
        while row.configs < gc.configs {
            let texts = gaussian(&mut rng, gc.batch, gc.dim);
            let images = gaussian(&mut rng, gc.batch, gc.dim);
            let mut g = GeometryConfig::new(kind, variant, gc.dim).with_lambda(lambda);
            g.log_beta = rng.random_range(0.0..3.0);
            g.log_c = rng.random_range(-1.5..1.5);
            g.log_alpha_txt = rng.random_range(-2.0..-0.5);
            g.log_alpha_img = rng.random_range(-2.0..-0.5);
            if !clear_of_singularities(&g, &texts, &images, gc.margin)? {
                row.rejected += 1;
                if row.rejected > 100 * gc.configs {
                    return Err(CliError::Config(format!(
                        "{kind}/{variant}: could not sample points clear of singularities; lower gradcheck.margin"
                    )));
                }
                continue;
            }
            let report = fd_check_with(&g, &texts, &images, opts)?;
            for e in &report.entries {
                let err = if inject_wrong_sign {
                    relative_error(-e.analytic, e.numeric)
                } else {
                    e.rel_err
                };
                if err > row.max_rel_err || row.worst.is_empty() {
                    row.max_rel_err = err;
                    row.worst = format!("config {} {}", row.configs, e.param);
                }
            }
            row.configs += 1;
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn gradcheck(cfg: &RunConfig, inject_wrong_sign: bool) -> Result<String> {
    let out = prepare_out(cfg)?;
    let rows = run_gradcheck(cfg, inject_wrong_sign)?;
    let tol = cfg.gradcheck.tolerance;
    let path = out.join(GRADCHECK_FILE);
    let mut w = writer(&path)?;
    put(&mut w, &path, ["kind", "variant", "lambda", "configs", "rejected", "max_rel_err", "worst", "pass"])?;
    for r in &rows {
        put(
            &mut w,
            &path,
            [
                r.kind.to_string(),
                r.variant.to_string(),
                num(r.lambda),
                r.configs.to_string(),
                r.rejected.to_string(),
                num(r.max_rel_err),
                r.worst.clone(),
                (r.max_rel_err <= tol).to_string(),
            ],
        )?;
    }
    finish(w, &path)?;
    let worst = rows
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("at least one combination");
    let name = format!("{}/{}/λ={}", worst.kind, worst.variant, worst.lambda);
    if worst.max_rel_err > tol {
        return Err(CliError::Verification(format!(
            "worst relative error {:.3e} > {tol:e} in {name} at {}; report in {}",
            worst.max_rel_err,
            worst.worst,
            path.display()
        )));
    }
    Ok(format!(
        "{} combinations passed; worst relative error {:.3e} in {name}",
        rows.len(),
        worst.max_rel_err
    ))
}

pub fn gen_data(cfg: &RunConfig) -> Result<String> {
    let out = prepare_out(cfg)?;
    let tree = gen_tree(&cfg.tree)?;
    write_tree(&out.join(TREE_FILE), &tree)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let corpus = sample_batch(&tree, cfg.data.corpus_size, rng.next_u64(), &cfg.data.ancestors)?;
    write_pairs(&out.join(PAIRS_FILE), &tree, &corpus)?;
    Ok(format!(
        "wrote {} tree nodes and {} pairs to {}",
        tree.len(),
        corpus.len(),
        out.display()
    ))
}

fn write_metrics(path: &Path, log: &[MetricsRow]) -> Result<()> {
    let mut w = writer(path)?;
    put(
        &mut w,
        path,
        [
            "step", "lr", "contrastive", "entailment", "total", "beta", "curvature", "alpha_txt",
            "alpha_img", "recall_at_1", "resampled",
        ],
    )?;
    for r in log {
        put(
            &mut w,
            path,
            [
                r.step.to_string(),
                num(r.lr),
                num(r.contrastive),
                num(r.entailment),
                num(r.total),
                num(r.beta),
                num(r.curvature),
                num(r.alpha_txt),
                num(r.alpha_img),
                num(r.recall_at_1),
                r.resampled.to_string(),
            ],
        )?;
    }
    finish(w, path)
}

pub fn train(cfg: &RunConfig) -> Result<String> {
    let tree_path = require(cfg.out.join(TREE_FILE), "generated data", "gen-data")?;
    let out = prepare_out(cfg)?;
    let tree = read_tree(&tree_path, &cfg.tree)?;
    let (state, log) = train_on(&tree, &cfg.train_spec())?;
    state.save(&out.join(CHECKPOINT_FILE))?;
    write_metrics(&out.join(METRICS_FILE), &log)?;
    Ok(match log.last() {
        Some(r) => format!(
            "step {}: loss {:.4} (contrastive {:.4}, entailment {:.4}), recall@1 {:.3}",
            r.step, r.total, r.contrastive, r.entailment, r.recall_at_1
        ),
        None => "no training steps; wrote the initial checkpoint".into(),
    })
}

fn load_checkpoint(cfg: &RunConfig) -> Result<TrainState> {
    let path = require(cfg.out.join(CHECKPOINT_FILE), "checkpoint", "train")?;
    let state = TrainState::load(&path)?;
    let want = cfg.geometry_config();
    if (state.cfg.kind, state.cfg.variant) != (want.kind, want.variant) {
        return Err(CliError::Config(format!(
            "{} holds a {}/{} model but the config asks for {}/{}; rerun `embgeo train`",
            path.display(),
            state.cfg.kind,
            state.cfg.variant,
            want.kind,
            want.variant
        )));
    }
    Ok(state)
}

fn load_corpus(cfg: &RunConfig, state: &TrainState) -> Result<Corpus> {
    let path = require(cfg.out.join(PAIRS_FILE), "generated data", "gen-data")?;
    read_pairs(&path, state.encoder(Modality::Text).in_dim())
}

pub fn analyze(cfg: &RunConfig) -> Result<String> {
    let state = load_checkpoint(cfg)?;
    let corpus = load_corpus(cfg, &state)?;
    let out = prepare_out(cfg)?;
    let g = &state.cfg;
    let texts = state.embed(Modality::Text, &corpus.text_features)?;
    let images = state.embed(Modality::Image, &corpus.image_features)?;

    let dump = EmbeddingDump {
        dim: state.encoder(Modality::Text).out_dim(),
        kind: g.kind,
        rows: (0..texts.len())
            .flat_map(|k| {
                [
                    DumpRow {
                        id: k.to_string(),
                        modality: Modality::Text,
                        values: texts[k].clone(),
                    },
                    DumpRow {
                        id: k.to_string(),
                        modality: Modality::Image,
                        values: images[k].clone(),
                    },
                ]
            })
            .collect(),
    };
    write_embeddings(&out.join(EMBEDDINGS_FILE), &dump)?;

    let root = compute_root(g, &texts, &images)?;
    let distances = |embs: &[Vec<f64>], modality| -> Result<Vec<f64>> {
        embs.iter()
            .map(|e| Ok(root_distance(g, e, &root, modality)?))
            .collect()
    };
    let dt = distances(&texts, Modality::Text)?;
    let di = distances(&images, Modality::Image)?;

    let hist = distance_histogram(&dt, &di, cfg.analysis.bins)?;
    let path = out.join(HISTOGRAM_FILE);
    let mut w = writer(&path)?;
    put(&mut w, &path, ["bin_lo", "bin_hi", "count_text", "count_image"])?;
    for b in 0..hist.text.len() {
        put(
            &mut w,
            &path,
            [
                num(hist.edges[b]),
                num(hist.edges[b + 1]),
                hist.text[b].to_string(),
                hist.image[b].to_string(),
            ],
        )?;
    }
    finish(w, &path)?;

    let gap = modality_gap(&dt, &di)?;
    let path = out.join(GAP_FILE);
    let mut w = writer(&path)?;
    put(&mut w, &path, ["median_text", "median_image", "ratio"])?;
    put(
        &mut w,
        &path,
        [num(gap.median_text), num(gap.median_image), num(gap.ratio)],
    )?;
    finish(w, &path)?;

    Ok(format!(
        "median root distance: text {:.4}, image {:.4}, ratio {:.3}",
        gap.median_text, gap.median_image, gap.ratio
    ))
}

struct Captioned {
    ids: Vec<String>,
    labels: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

/// Captions (texts) and images to traverse, from the configured embedding
/// dump or else from the encoded corpus.
fn traversal_inputs(cfg: &RunConfig, state: &TrainState) -> Result<(Captioned, Captioned)> {
    let n = state.encoder(Modality::Text).out_dim();
    let mut captions = Captioned {
        ids: Vec::new(),
        labels: Vec::new(),
        vectors: Vec::new(),
    };
    let mut images = Captioned {
        ids: Vec::new(),
        labels: Vec::new(),
        vectors: Vec::new(),
    };
    if let Some(path) = &cfg.analysis.corpus {
        let dump = read_embeddings(path)?;
        if dump.kind != state.cfg.kind || dump.dim != n {
            return Err(CliError::Config(format!(
                "{} holds {} embeddings of dimension {}, but the checkpoint is {} with dimension {n}",
                path.display(),
                dump.kind,
                dump.dim,
                state.cfg.kind
            )));
        }
        for row in dump.rows {
            let side = match row.modality {
                Modality::Text => &mut captions,
                Modality::Image => &mut images,
            };
            side.labels.push(row.id.clone());
            side.ids.push(row.id);
            side.vectors.push(row.values);
        }
    } else {
        let corpus = load_corpus(cfg, state)?;
        captions.vectors = state.embed(Modality::Text, &corpus.text_features)?;
        images.vectors = state.embed(Modality::Image, &corpus.image_features)?;
        captions.ids = (0..captions.vectors.len()).map(|k| k.to_string()).collect();
        images.ids = captions.ids.clone();
        captions.labels = corpus.text_labels;
        images.labels = corpus.image_labels;
    }
    if captions.vectors.is_empty() || images.vectors.is_empty() {
        return Err(CliError::Config("traversal needs at least one caption and one image".into()));
    }
    Ok((captions, images))
}

pub fn traverse(cfg: &RunConfig) -> Result<String> {
    let state = load_checkpoint(cfg)?;
    let (captions, images) = traversal_inputs(cfg, &state)?;
    let out = prepare_out(cfg)?;
    let g = &state.cfg;
    let root = compute_root(g, &captions.vectors, &images.vectors)?;
    let opts = TraversalOptions {
        filter_k: cfg.analysis.filter_k,
        include_root: cfg.analysis.include_root,
    };

    let dir = out.join(TRAVERSAL_DIR);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(CliError::io(&dir))?;
    }
    std::fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;

    let hit_fields = |hit: &Hit| -> (String, String) {
        match hit {
            Hit::Caption(c) => (captions.ids[*c].clone(), captions.labels[*c].clone()),
            Hit::Root => ("root".into(), "[ROOT]".into()),
            Hit::NoCaption => (String::new(), String::new()),
        }
    };

    let summary_path = out.join(TRAVERSAL_SUMMARY_FILE);
    let mut summary = writer(&summary_path)?;
    put(&mut summary, &summary_path, ["image", "image_id", "image_label", "distinct", "captions"])?;
    let count = cfg.analysis.images.min(images.vectors.len());
    let mut total_distinct = 0;
    for k in 0..count {
        let result = traverse_image(g, &images.vectors[k], &root, &captions.vectors, &opts)?;
        let path = dir.join(format!("image_{k}.csv"));
        let mut w = writer(&path)?;
        put(&mut w, &path, ["step", "t", "caption_id", "caption_label"])?;
        for (s, hit) in result.steps.iter().enumerate() {
            let (id, label) = hit_fields(hit);
            put(&mut w, &path, [s.to_string(), num(step_t(s)), id, label])?;
        }
        finish(w, &path)?;
        let walk: Vec<String> = result.unique.iter().map(|h| hit_fields(h).1).collect();
        put(
            &mut summary,
            &summary_path,
            [
                k.to_string(),
                images.ids[k].clone(),
                images.labels[k].clone(),
                result.distinct.to_string(),
                walk.join(" > "),
            ],
        )?;
        total_distinct += result.distinct;
    }
    finish(summary, &summary_path)?;
    Ok(format!(
        "traversed {count} images; {:.2} distinct captions per image",
        total_distinct as f64 / count.max(1) as f64
    ))
}
