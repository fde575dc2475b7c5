//! Synthetic hierarchical text/image features.
//!
//! A complete tree of Gaussian prototypes is generated by a random walk from
//! the root. Images are noisy copies of leaves; texts are noisy copies of an
//! ancestor of that leaf, so texts are systematically more generic than the
//! images they describe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trees with more nodes than this are rejected.
pub const MAX_NODES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeSpec {
    pub depth: usize,
    pub branching: usize,
    pub raw_dim: usize,
    /// Standard deviation of each parent→child step.
    pub sigma: f64,
    /// Standard deviation of the per-sample noise around a prototype.
    pub leaf_noise: f64,
    pub seed: u64,
}

impl Default for TreeSpec {
    fn default() -> Self {
        Self {
            depth: 4,
            branching: 3,
            raw_dim: 64,
            sigma: 1.0,
            leaf_noise: 0.1,
            seed: 0,
        }
    }
}

impl TreeSpec {
    /// `(b^(d+1) - 1)/(b - 1)`, or an error past [`MAX_NODES`].
    pub fn node_count(&self) -> Result<usize> {
        let mut total: usize = 0;
        let mut level: usize = 1;
        for _ in 0..=self.depth {
            total = total
                .checked_add(level)
                .filter(|&t| t <= MAX_NODES)
                .ok_or_else(|| self.too_big())?;
            level = level.saturating_mul(self.branching);
        }
        Ok(total)
    }

    fn too_big(&self) -> Error {
        Error::Config(format!(
            "tree with depth {} and branching {} exceeds {MAX_NODES} nodes",
            self.depth, self.branching
        ))
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("tree depth must be ≥ 1".into()));
        }
        if self.branching < 2 {
            return Err(Error::Config("tree branching must be ≥ 2".into()));
        }
        if self.raw_dim < 1 {
            return Err(Error::Config("raw feature dimension must be ≥ 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be ≥ 0, got {}", self.sigma)));
        }
        if !(self.leaf_noise > 0.0 && self.leaf_noise.is_finite()) {
            return Err(Error::Config(format!(
                "leaf noise must be > 0, got {}",
                self.leaf_noise
            )));
        }
        self.node_count().map(|_| ())
    }
}

/// Node prototypes of a complete tree, numbered breadth-first: the root is 0
/// and the children of node `k` are `k·b + 1 ..= k·b + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    spec: TreeSpec,
    prototypes: Vec<Vec<f64>>,
    depths: Vec<usize>,
}

pub fn gen_tree(spec: &TreeSpec) -> Result<Tree> {
    spec.validate()?;
    let count = spec.node_count()?;
    let b = spec.branching;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut prototypes = Vec::with_capacity(count);
    let mut depths = Vec::with_capacity(count);
    prototypes.push(vec![0.0; spec.raw_dim]);
    depths.push(0);
    for node in 1..count {
        let parent = (node - 1) / b;
        let proto: Vec<f64> = prototypes[parent]
            .iter()
            .map(|p| p + spec.sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        prototypes.push(proto);
        depths.push(depths[parent] + 1);
    }
    Ok(Tree {
        spec: spec.clone(),
        prototypes,
        depths,
    })
}

impl Tree {
    /// Rebuild a tree from stored prototypes, e.g. ones read back from disk.
    pub fn from_prototypes(spec: TreeSpec, prototypes: Vec<Vec<f64>>) -> Result<Self> {
        spec.validate()?;
        let count = spec.node_count()?;
        if prototypes.len() != count {
            return Err(Error::Config(format!(
                "tree needs {count} prototypes, got {}",
                prototypes.len()
            )));
        }
        if let Some(bad) = prototypes.iter().find(|p| p.len() != spec.raw_dim) {
            return Err(Error::DimMismatch {
                expected: spec.raw_dim,
                got: bad.len(),
            });
        }
        if prototypes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tree prototypes".into()));
        }
        let mut depths = vec![0; count];
        for node in 1..count {
            depths[node] = depths[(node - 1) / spec.branching] + 1;
        }
        Ok(Tree {
            spec,
            prototypes,
            depths,
        })
    }

    pub fn spec(&self) -> &TreeSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn prototype(&self, node: usize) -> &[f64] {
        &self.prototypes[node]
    }

    pub fn depth_of(&self, node: usize) -> usize {
        self.depths[node]
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        (node > 0).then(|| (node - 1) / self.spec.branching)
    }

    /// Ids of the nodes at the bottom level.
    pub fn leaves(&self) -> std::ops::Range<usize> {
        let first = (self.spec.branching.pow(self.spec.depth as u32) - 1) / (self.spec.branching - 1);
        first..self.len()
    }

    /// The ancestor of `node` at `depth` (the node itself when the depths match).
    pub fn ancestor_at(&self, mut node: usize, depth: usize) -> usize {
        while self.depths[node] > depth {
            node = (node - 1) / self.spec.branching;
        }
        node
    }

    pub fn is_ancestor_or_self(&self, ancestor: usize, node: usize) -> bool {
        ancestor < self.len()
            && node < self.len()
            && self.depths[ancestor] <= self.depths[node]
            && self.ancestor_at(node, self.depths[ancestor]) == ancestor
    }

    /// Short human-readable tag for a node, e.g. `d2:n7`.
    pub fn label(&self, node: usize) -> String {
        format!("d{}:n{}", self.depths[node], node)
    }
}

/// Distribution of the depth of the ancestor a text is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AncestorDepth {
    /// Uniform over `0..=depth`.
    #[default]
    Uniform,
    Fixed(usize),
    /// Unnormalized weights for depths `0, 1, ...`.
    Weights(Vec<f64>),
}

impl AncestorDepth {
    fn sample(&self, depth: usize, rng: &mut impl Rng) -> Result<usize> {
        match self {
            AncestorDepth::Uniform => Ok(rng.random_range(0..=depth)),
            AncestorDepth::Fixed(d) if *d <= depth => Ok(*d),
            AncestorDepth::Fixed(d) => Err(Error::Config(format!(
                "ancestor depth {d} is below the leaves at depth {depth}"
            ))),
            AncestorDepth::Weights(w) => {
                if w.len() != depth + 1 {
                    return Err(Error::Config(format!(
                        "ancestor depth weights need {} entries, got {}",
                        depth + 1,
                        w.len()
                    )));
                }
                if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                    return Err(Error::Config("ancestor depth weights must be finite and ≥ 0".into()));
                }
                let total: f64 = w.iter().sum();
                if total <= 0.0 {
                    return Err(Error::Config("ancestor depth weights sum to 0".into()));
                }
                let mut u = rng.random::<f64>() * total;
                for (d, x) in w.iter().enumerate() {
                    if u < *x {
                        return Ok(d);
                    }
                    u -= x;
                }
                Ok(w.iter().rposition(|x| *x > 0.0).unwrap_or(depth))
            }
        }
    }
}

/// `B` aligned text/image feature pairs with the tree nodes they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub text_features: Vec<Vec<f64>>,
    pub image_features: Vec<Vec<f64>>,
    pub text_node_ids: Vec<usize>,
    pub image_node_ids: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.text_features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text_features.is_empty()
    }

    /// Whether every text node is an ancestor-or-self of its image's leaf.
    pub fn ancestry_holds(&self, tree: &Tree) -> bool {
        self.text_node_ids
            .iter()
            .zip(&self.image_node_ids)
            .all(|(&t, &i)| tree.is_ancestor_or_self(t, i))
    }
}

pub fn sample_batch(tree: &Tree, b: usize, seed: u64, ancestors: &AncestorDepth) -> Result<PairBatch> {
    if b == 0 {
        return Err(Error::Config("batch size must be ≥ 1".into()));
    }
    let spec = &tree.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaves = tree.leaves();
    let noisy = |node: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        tree.prototype(node)
            .iter()
            .map(|p| p + spec.leaf_noise * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect()
    };
    let mut batch = PairBatch {
        text_features: Vec::with_capacity(b),
        image_features: Vec::with_capacity(b),
        text_node_ids: Vec::with_capacity(b),
        image_node_ids: Vec::with_capacity(b),
    };
    for _ in 0..b {
        let leaf = rng.random_range(leaves.clone());
        let depth = ancestors.sample(spec.depth, &mut rng)?;
        let text_node = tree.ancestor_at(leaf, depth);
        batch.image_features.push(noisy(leaf, &mut rng));
        batch.text_features.push(noisy(text_node, &mut rng));
        batch.image_node_ids.push(leaf);
        batch.text_node_ids.push(text_node);
    }
    Ok(batch)
}
