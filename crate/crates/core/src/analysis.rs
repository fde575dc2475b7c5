//! Root distances, modality gap statistics and image-to-root traversal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    check_dims, cosine_sim, elliptic_sim, euclidean_sim, exp_map_origin, lift, lorentz_distance,
    lorentz_sim, norm, GeometryConfig, GeometryKind, LorentzPoint, Modality,
};
use crate::losses::{pair_entail_euclid, pair_entail_hyper};

/// Number of interpolation steps in a traversal, endpoints included.
pub const TRAVERSAL_STEPS: usize = 50;

/// The `[ROOT]` of an embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RootPoint {
    /// The origin (euclidean) or the hyperboloid apex it lifts to (hyperbolic).
    Origin,
    /// Mean of the L2-normalized corpus, not re-normalized (clip, elliptic).
    Mean(Vec<f64>),
}

impl RootPoint {
    /// The root as an `n`-vector in encoder-output coordinates.
    pub fn vector(&self, n: usize) -> Vec<f64> {
        match self {
            RootPoint::Origin => vec![0.0; n],
            RootPoint::Mean(m) => m.clone(),
        }
    }
}

pub fn compute_root<T: AsRef<[f64]>>(cfg: &GeometryConfig, texts: &[T], images: &[T]) -> Result<RootPoint> {
    match cfg.kind {
        GeometryKind::Euclidean | GeometryKind::Hyperbolic => Ok(RootPoint::Origin),
        GeometryKind::Clip | GeometryKind::Elliptic => {
            let mut all = texts.iter().chain(images).map(AsRef::as_ref);
            let first = all
                .next()
                .ok_or_else(|| Error::Degenerate("root of an empty corpus".into()))?;
            let mut sum = vec![0.0; first.len()];
            let mut count = 0usize;
            for e in std::iter::once(first).chain(all) {
                check_dims(first, e)?;
                let r = norm(e);
                if r == 0.0 {
                    return Err(Error::domain("compute_root", "zero-norm embedding"));
                }
                sum.iter_mut().zip(e).for_each(|(s, v)| *s += v / r);
                count += 1;
            }
            Ok(RootPoint::Mean(sum.into_iter().map(|s| s / count as f64).collect()))
        }
    }
}

/// Distance from `e` to the root: `‖e‖/√n` (euclidean), the geodesic
/// distance from the lifted point to the apex (hyperbolic), or
/// `(1 - cos(e, root))/2` (clip, elliptic).
pub fn root_distance(cfg: &GeometryConfig, e: &[f64], root: &RootPoint, modality: Modality) -> Result<f64> {
    match cfg.kind {
        GeometryKind::Euclidean => Ok(norm(e) / (e.len() as f64).sqrt()),
        GeometryKind::Hyperbolic => {
            let p = lift(cfg, e, modality)?;
            let apex = LorentzPoint::apex(e.len(), cfg.curvature())?;
            lorentz_distance(&p, &apex)
        }
        GeometryKind::Clip | GeometryKind::Elliptic => {
            let RootPoint::Mean(r) = root else {
                return Err(Error::Config(format!("{} root must be a mean vector", cfg.kind)));
            };
            Ok(((1.0 - cosine_sim(e, r)?) / 2.0).clamp(0.0, 1.0))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` uniform edges over `[0, max]`.
    pub edges: Vec<f64>,
    pub text: Vec<usize>,
    pub image: Vec<usize>,
}

/// Per-modality counts over shared uniform bins on `[0, max]`, where `max`
/// is the largest distance of either modality. The last bin is closed.
pub fn distance_histogram(text: &[f64], image: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if let Some(v) = text.iter().chain(image).find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Domain {
            op: "distance_histogram",
            detail: format!("distance {v} is not a finite non-negative number"),
        });
    }
    let max = text.iter().chain(image).copied().fold(0.0, f64::max);
    let edges = (0..=bins).map(|k| max * k as f64 / bins as f64).collect();
    let count = |values: &[f64]| {
        let mut counts = vec![0; bins];
        for &v in values {
            let k = if max > 0.0 { (v / max * bins as f64) as usize } else { 0 };
            counts[k.min(bins - 1)] += 1;
        }
        counts
    };
    Ok(Histogram {
        edges,
        text: count(text),
        image: count(image),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityGap {
    pub median_text: f64,
    pub median_image: f64,
    /// `median_image / median_text`.
    pub ratio: f64,
}

pub fn modality_gap(text: &[f64], image: &[f64]) -> Result<ModalityGap> {
    let median_text = median(text)?;
    let median_image = median(image)?;
    Ok(ModalityGap {
        median_text,
        median_image,
        ratio: median_image / median_text,
    })
}

fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Degenerate("median of no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// What a traversal step retrieved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hit {
    Caption(usize),
    /// The root itself, when it is offered as a candidate.
    Root,
    /// Filtering left nothing to retrieve.
    NoCaption,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TraversalOptions {
    /// Keep only captions whose cone with minimum radius `K` contains the step.
    pub filter_k: Option<f64>,
    /// Offer the root as an extra candidate after the captions.
    pub include_root: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalResult {
    /// One hit per step, image end first.
    pub steps: Vec<Hit>,
    /// Hits in first-occurrence order, without `NoCaption`.
    pub unique: Vec<Hit>,
    /// Distinct captions retrieved, not counting the root.
    pub distinct: usize,
}

/// Interpolation parameter of step `k`.
pub fn step_t(k: usize) -> f64 {
    k as f64 / (TRAVERSAL_STEPS - 1) as f64
}

/// The 50 traversal points from the image (t = 0) to the root (t = 1).
/// Clip and elliptic points are unit vectors; euclidean points are raw
/// embeddings; hyperbolic points are the `α`-scaled vectors before lifting.
pub fn traversal_path(cfg: &GeometryConfig, image: &[f64], root: &RootPoint) -> Result<Vec<Vec<f64>>> {
    let n = image.len();
    let target = root.vector(n);
    check_dims(image, &target)?;
    let start: Vec<f64> = match cfg.kind {
        GeometryKind::Clip | GeometryKind::Elliptic => {
            let r = norm(image);
            if r == 0.0 {
                return Err(Error::domain("traversal_path", "zero-norm image embedding"));
            }
            image.iter().map(|v| v / r).collect()
        }
        GeometryKind::Euclidean => image.to_vec(),
        GeometryKind::Hyperbolic => {
            let a = cfg.alpha_img();
            image.iter().map(|v| a * v).collect()
        }
    };
    (0..TRAVERSAL_STEPS)
        .map(|k| {
            let t = step_t(k);
            let p: Vec<f64> = start
                .iter()
                .zip(&target)
                .map(|(s, r)| (1.0 - t) * s + t * r)
                .collect();
            match cfg.kind {
                GeometryKind::Clip | GeometryKind::Elliptic => {
                    let r = norm(&p);
                    if r == 0.0 {
                        return Err(Error::Degenerate(format!(
                            "traversal step {k} passes through the origin"
                        )));
                    }
                    Ok(p.into_iter().map(|v| v / r).collect())
                }
                _ => Ok(p),
            }
        })
        .collect()
}

enum Points {
    Flat(Vec<Vec<f64>>),
    Lorentz(Vec<LorentzPoint>),
}

pub fn traverse_image<T: AsRef<[f64]>>(
    cfg: &GeometryConfig,
    image: &[f64],
    root: &RootPoint,
    captions: &[T],
    opts: &TraversalOptions,
) -> Result<TraversalResult> {
    cfg.validate()?;
    if let Some(k) = opts.filter_k {
        if !cfg.kind.supports_entailment() {
            return Err(Error::Config(format!(
                "{} geometry has no entailment cones to filter with",
                cfg.kind
            )));
        }
        if k.is_nan() || k < 0.0 {
            return Err(Error::Config(format!("filter K must be ≥ 0, got {k}")));
        }
    }
    let n = image.len();
    for c in captions {
        check_dims(image, c.as_ref())?;
    }
    let path = traversal_path(cfg, image, root)?;
    let mut candidates: Vec<Vec<f64>> = captions.iter().map(|c| c.as_ref().to_vec()).collect();
    let root_vec = root.vector(n);
    let (cands, steps) = match cfg.kind {
        GeometryKind::Hyperbolic => {
            let c = cfg.curvature();
            let mut pts = candidates
                .iter()
                .map(|e| lift(cfg, e, Modality::Text))
                .collect::<Result<Vec<_>>>()?;
            if opts.include_root {
                pts.push(LorentzPoint::apex(n, c)?);
            }
            let steps = path
                .iter()
                .map(|u| exp_map_origin(u, c))
                .collect::<Result<Vec<_>>>()?;
            (Points::Lorentz(pts), Points::Lorentz(steps))
        }
        _ => {
            if opts.include_root {
                candidates.push(root_vec);
            }
            (Points::Flat(candidates), Points::Flat(path))
        }
    };
    let n_captions = captions.len();
    let root_id = n_captions;

    let mut hits = Vec::with_capacity(TRAVERSAL_STEPS);
    for k in 0..TRAVERSAL_STEPS {
        let mut best: Option<(usize, f64)> = None;
        let n_cands = n_captions + usize::from(opts.include_root);
        for id in 0..n_cands {
            if let (Some(kf), false) = (opts.filter_k, id == root_id) {
                let loss = match (&cands, &steps) {
                    (Points::Flat(c), Points::Flat(s)) => pair_entail_euclid(&c[id], &s[k], kf)?,
                    (Points::Lorentz(c), Points::Lorentz(s)) => pair_entail_hyper(&c[id], &s[k], kf)?,
                    _ => unreachable!(),
                };
                if loss != 0.0 {
                    continue;
                }
            }
            let sim = match (&cands, &steps) {
                (Points::Flat(c), Points::Flat(s)) => match cfg.kind {
                    GeometryKind::Clip => cosine_sim(&c[id], &s[k])?,
                    GeometryKind::Elliptic => elliptic_sim(&c[id], &s[k])?,
                    _ => euclidean_sim(&c[id], &s[k], cfg.variant)?,
                },
                (Points::Lorentz(c), Points::Lorentz(s)) => lorentz_sim(&c[id], &s[k], cfg.variant)?,
                _ => unreachable!(),
            };
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((id, sim));
            }
        }
        hits.push(match best {
            None => Hit::NoCaption,
            Some((id, _)) if id == root_id => Hit::Root,
            Some((id, _)) => Hit::Caption(id),
        });
    }

    let mut unique: Vec<Hit> = Vec::new();
    for h in &hits {
        if *h != Hit::NoCaption && !unique.contains(h) {
            unique.push(*h);
        }
    }
    let distinct = unique.iter().filter(|h| matches!(h, Hit::Caption(_))).count();
    Ok(TraversalResult {
        steps: hits,
        unique,
        distinct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LogitVariant;

    fn euclid() -> GeometryConfig {
        GeometryConfig::new(GeometryKind::Euclidean, LogitVariant::D2, 2)
    }

    #[test]
    fn roots_per_kind() {
        let e: [Vec<f64>; 0] = [];
        assert_eq!(compute_root(&euclid(), &e, &e).unwrap(), RootPoint::Origin);
        let clip = GeometryConfig::clip();
        let root = compute_root(&clip, &[vec![1.0, 0.0]], &[vec![0.0, 1.0]]).unwrap();
        assert_eq!(root, RootPoint::Mean(vec![0.5, 0.5]));
        let one = compute_root(&clip, &[vec![3.0, 4.0]], &e).unwrap();
        assert_eq!(one, RootPoint::Mean(vec![0.6, 0.8]));
        assert!(compute_root(&clip, &e, &e).is_err());
    }

    #[test]
    fn root_distance_examples() {
        let d = root_distance(&euclid(), &[0.0, 0.0], &RootPoint::Origin, Modality::Text).unwrap();
        assert_eq!(d, 0.0);
        let clip = GeometryConfig::clip();
        let root = RootPoint::Mean(vec![0.5, 0.5]);
        assert!(root_distance(&clip, &[2.0, 2.0], &root, Modality::Image).unwrap().abs() < 1e-15);
        assert!((root_distance(&clip, &[-1.0, -1.0], &root, Modality::Image).unwrap() - 1.0).abs() < 1e-15);
        assert!(root_distance(&clip, &[0.0, 0.0], &root, Modality::Image).is_err());

        let mut hyp = GeometryConfig::new(GeometryKind::Hyperbolic, LogitVariant::D, 4);
        hyp.log_alpha_img = 0.0;
        let d = root_distance(&hyp, &[1.0, 0.0, 0.0, 0.0], &RootPoint::Origin, Modality::Image).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_examples() {
        let h = distance_histogram(&[0.3], &[], 4).unwrap();
        assert_eq!(h.text, vec![0, 0, 0, 1]);
        let t = [0.1, 0.5, 0.9, 0.2, 0.0];
        let h = distance_histogram(&t, &t, 3).unwrap();
        assert_eq!(h.text, h.image);
        assert_eq!(h.text.iter().sum::<usize>(), 5);
        assert_eq!(h.edges.len(), 4);
        assert_eq!(h.edges[3], 0.9);
        assert!(distance_histogram(&t, &t, 0).is_err());
    }

    #[test]
    fn gap_examples() {
        let g = modality_gap(&[0.1; 5], &[0.2; 7]).unwrap();
        assert_eq!(g.ratio, 2.0);
        let g = modality_gap(&[0.3, 0.1, 0.2, 0.4], &[0.4, 0.3, 0.2, 0.1]).unwrap();
        assert_eq!((g.median_text, g.ratio), (0.25, 1.0));
        assert!(modality_gap(&[], &[1.0]).is_err());
    }

    #[test]
    fn clip_path_is_unit_norm_and_ends_at_root_direction() {
        let clip = GeometryConfig::clip();
        let root = RootPoint::Mean(vec![0.2, 0.3, 0.1]);
        let path = traversal_path(&clip, &[1.0, -2.0, 0.5], &root).unwrap();
        assert_eq!(path.len(), TRAVERSAL_STEPS);
        for p in &path {
            assert!((norm(p) - 1.0).abs() <= 1e-12);
        }
        let end = &path[TRAVERSAL_STEPS - 1];
        assert!((cosine_sim(end, &root.vector(3)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn euclidean_path_approaches_origin_strictly() {
        let path = traversal_path(&euclid(), &[1.5, -0.5], &RootPoint::Origin).unwrap();
        assert_eq!(path[0], vec![1.5, -0.5]);
        assert_eq!(path[TRAVERSAL_STEPS - 1], vec![0.0, 0.0]);
        for w in path.windows(2) {
            assert!(norm(&w[1]) < norm(&w[0]));
        }
    }

    #[test]
    fn traversal_endpoints_and_filter() {
        let cfg = euclid();
        let captions = [vec![2.0, 0.1], vec![0.05, 0.0], vec![-1.0, 1.0], vec![1.0, 0.0]];
        let image = [2.1, 0.0];
        let plain = traverse_image(&cfg, &image, &RootPoint::Origin, &captions, &TraversalOptions::default()).unwrap();
        assert_eq!(plain.steps[0], Hit::Caption(0));
        assert_eq!(plain.steps[49], Hit::Caption(1));
        assert_eq!(plain.unique, vec![Hit::Caption(0), Hit::Caption(3), Hit::Caption(1)]);
        assert_eq!(plain.distinct, 3);

        let opts = TraversalOptions {
            filter_k: Some(0.3),
            include_root: true,
        };
        let filtered = traverse_image(&cfg, &image, &RootPoint::Origin, &captions, &opts).unwrap();
        assert_eq!(filtered.steps[49], Hit::Root);
        assert!(!filtered.unique.contains(&Hit::Caption(2)));
        assert!(filtered.distinct <= 3);
    }

    #[test]
    fn huge_filter_radius_still_excludes_steps_behind_a_caption() {
        // the aperture saturates at π/2, so a cone never reaches back past its apex's tangent plane
        let cfg = euclid();
        let captions = [vec![2.0, 0.1], vec![0.05, 0.0]];
        let opts = TraversalOptions {
            filter_k: Some(1e9),
            include_root: false,
        };
        let r = traverse_image(&cfg, &[2.1, 0.3], &RootPoint::Origin, &captions, &opts).unwrap();
        assert_eq!(r.steps[0], Hit::Caption(0));
        assert_eq!(r.steps[TRAVERSAL_STEPS - 1], Hit::NoCaption);
    }

    #[test]
    fn ties_go_to_the_lowest_caption_id() {
        let cfg = euclid();
        let captions = [vec![1.0, 1.0], vec![1.0, 1.0]];
        let r = traverse_image(&cfg, &[1.0, 1.0], &RootPoint::Origin, &captions, &TraversalOptions::default()).unwrap();
        assert!(r.steps.iter().all(|h| *h == Hit::Caption(0)));
        assert_eq!(r.distinct, 1);
    }

    #[test]
    fn filtering_a_clip_space_is_rejected() {
        let opts = TraversalOptions {
            filter_k: Some(0.5),
            include_root: false,
        };
        let root = RootPoint::Mean(vec![0.5, 0.5]);
        let r = traverse_image(&GeometryConfig::clip(), &[1.0, 0.0], &root, &[vec![0.0, 1.0]], &opts);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
