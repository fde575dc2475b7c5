//! Comma-delimited tables read and written by the commands. Floats are
//! written in their shortest round-trip form, so reading a table back gives
//! the exact values.

use std::fs::File;
use std::path::Path;

use embgeo_core::{GeometryKind, Modality, PairBatch, Tree, TreeSpec};

use crate::error::{CliError, Result};

pub(crate) fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(CliError::io(path))?;
    Ok(csv::WriterBuilder::new().flexible(true).from_writer(file))
}

pub(crate) fn put<I, S>(w: &mut csv::Writer<File>, path: &Path, record: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(record).map_err(|e| CliError::Io {
        path: path.into(),
        source: e.into(),
    })
}

pub(crate) fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(CliError::io(path))
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(CliError::io(path))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file))
}

fn malformed(path: &Path, detail: impl Into<String>) -> CliError {
    CliError::Malformed {
        path: path.into(),
        detail: detail.into(),
    }
}

fn records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    reader(path)?
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| malformed(path, e.to_string()))
}

fn floats(path: &Path, line: usize, fields: impl Iterator<Item = String>) -> Result<Vec<f64>> {
    fields
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| malformed(path, format!("line {line}: `{f}` is not a number")))
        })
        .collect()
}

fn numbered(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |k| format!("{prefix}{k}"))
}

fn expect_header(path: &Path, rows: &[csv::StringRecord], expected: &[String]) -> Result<()> {
    let found: Vec<&str> = rows.first().map(|r| r.iter().collect()).unwrap_or_default();
    if found != expected {
        return Err(malformed(
            path,
            format!("expected header `{}`, found `{}`", expected.join(","), found.join(",")),
        ));
    }
    Ok(())
}

/// Shortest round-trip form, in exponent notation for very small or large magnitudes.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

fn fmt_all(v: &[f64]) -> impl Iterator<Item = String> + '_ {
    v.iter().copied().map(num)
}

/// `id,depth,parent,label,x1..xm`; the root has an empty parent.
pub fn write_tree(path: &Path, tree: &Tree) -> Result<()> {
    let m = tree.spec().raw_dim;
    let mut w = writer(path)?;
    let header = ["id", "depth", "parent", "label"].map(String::from);
    put(&mut w, path, header.into_iter().chain(numbered("x", m)))?;
    for node in 0..tree.len() {
        let fixed = [
            node.to_string(),
            tree.depth_of(node).to_string(),
            tree.parent(node).map(|p| p.to_string()).unwrap_or_default(),
            tree.label(node),
        ];
        put(&mut w, path, fixed.into_iter().chain(fmt_all(tree.prototype(node))))?;
    }
    finish(w, path)
}

pub fn read_tree(path: &Path, spec: &TreeSpec) -> Result<Tree> {
    let rows = records(path)?;
    let header: Vec<String> = ["id", "depth", "parent", "label"]
        .map(String::from)
        .into_iter()
        .chain(numbered("x", spec.raw_dim))
        .collect();
    expect_header(path, &rows, &header)?;
    let mut prototypes = Vec::with_capacity(rows.len() - 1);
    for (k, row) in rows.iter().enumerate().skip(1) {
        if row.len() != header.len() || row[0] != (k - 1).to_string() {
            return Err(malformed(path, format!("line {}: bad node row", k + 1)));
        }
        prototypes.push(floats(path, k + 1, row.iter().skip(4).map(String::from))?);
    }
    Tree::from_prototypes(spec.clone(), prototypes).map_err(|e| {
        malformed(
            path,
            format!("{e}; it was generated with a different [tree] section, rerun `embgeo gen-data`"),
        )
    })
}

/// Encoder inputs of a corpus with the tree labels of their nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub text_features: Vec<Vec<f64>>,
    pub image_features: Vec<Vec<f64>>,
    pub text_labels: Vec<String>,
    pub image_labels: Vec<String>,
}

/// `pair,modality,node,label,x1..xm`, text row then image row for each pair.
pub fn write_pairs(path: &Path, tree: &Tree, batch: &PairBatch) -> Result<()> {
    let m = tree.spec().raw_dim;
    let mut w = writer(path)?;
    let header = ["pair", "modality", "node", "label"].map(String::from);
    put(&mut w, path, header.into_iter().chain(numbered("x", m)))?;
    for pair in 0..batch.len() {
        let sides = [
            (Modality::Text, batch.text_node_ids[pair], &batch.text_features[pair]),
            (Modality::Image, batch.image_node_ids[pair], &batch.image_features[pair]),
        ];
        for (modality, node, feats) in sides {
            let fixed = [
                pair.to_string(),
                modality.as_str().to_string(),
                node.to_string(),
                tree.label(node),
            ];
            put(&mut w, path, fixed.into_iter().chain(fmt_all(feats)))?;
        }
    }
    finish(w, path)
}

pub fn read_pairs(path: &Path, raw_dim: usize) -> Result<Corpus> {
    let rows = records(path)?;
    let header: Vec<String> = ["pair", "modality", "node", "label"]
        .map(String::from)
        .into_iter()
        .chain(numbered("x", raw_dim))
        .collect();
    expect_header(path, &rows, &header)?;
    let mut corpus = Corpus {
        text_features: Vec::new(),
        image_features: Vec::new(),
        text_labels: Vec::new(),
        image_labels: Vec::new(),
    };
    for (k, row) in rows.iter().enumerate().skip(1) {
        let pair = (k - 1) / 2;
        let expected = if k % 2 == 1 { "text" } else { "image" };
        if row.len() != header.len() || row[0] != pair.to_string() || &row[1] != expected {
            return Err(malformed(path, format!("line {}: expected the {expected} row of pair {pair}", k + 1)));
        }
        let feats = floats(path, k + 1, row.iter().skip(4).map(String::from))?;
        if k % 2 == 1 {
            corpus.text_features.push(feats);
            corpus.text_labels.push(row[3].to_string());
        } else {
            corpus.image_features.push(feats);
            corpus.image_labels.push(row[3].to_string());
        }
    }
    if corpus.text_features.is_empty() || corpus.text_features.len() != corpus.image_features.len() {
        return Err(malformed(path, "no complete text/image pairs"));
    }
    Ok(corpus)
}

/// One row of an embedding dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpRow {
    pub id: String,
    pub modality: Modality,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub dim: usize,
    pub kind: GeometryKind,
    pub rows: Vec<DumpRow>,
}

/// Header `n=<dim>,kind=<geometry>`, then `id,modality,v1..vn`.
pub fn write_embeddings(path: &Path, dump: &EmbeddingDump) -> Result<()> {
    let mut w = writer(path)?;
    put(&mut w, path, [format!("n={}", dump.dim), format!("kind={}", dump.kind)])?;
    for row in &dump.rows {
        let fixed = [row.id.clone(), row.modality.as_str().to_string()];
        put(&mut w, path, fixed.into_iter().chain(fmt_all(&row.values)))?;
    }
    finish(w, path)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingDump> {
    let rows = records(path)?;
    let head = rows.first().ok_or_else(|| malformed(path, "empty file"))?;
    let field = |k: usize, key: &str| -> Result<String> {
        head.get(k)
            .and_then(|f| f.strip_prefix(key))
            .map(String::from)
            .ok_or_else(|| malformed(path, "header must be `n=<dim>,kind=<geometry>`"))
    };
    let dim: usize = field(0, "n=")?
        .parse()
        .map_err(|_| malformed(path, "dimension in the header is not an integer"))?;
    let kind: GeometryKind = field(1, "kind=")?
        .parse()
        .map_err(|e: embgeo_core::Error| malformed(path, e.to_string()))?;
    let mut out = Vec::with_capacity(rows.len() - 1);
    for (k, row) in rows.iter().enumerate().skip(1) {
        if row.len() != dim + 2 {
            return Err(malformed(path, format!("line {}: expected {} fields", k + 1, dim + 2)));
        }
        let modality = match &row[1] {
            "text" => Modality::Text,
            "image" => Modality::Image,
            other => return Err(malformed(path, format!("line {}: unknown modality `{other}`", k + 1))),
        };
        out.push(DumpRow {
            id: row[0].to_string(),
            modality,
            values: floats(path, k + 1, row.iter().skip(2).map(String::from))?,
        });
    }
    Ok(EmbeddingDump { dim, kind, rows: out })
}
