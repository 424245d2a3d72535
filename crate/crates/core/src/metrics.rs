//! Recall@K, mean Recall@K and zero-shot Recall@K over scene graphs.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::model::Task;
use crate::synth::Dataset;
use crate::types::{ClassTriplet, RankedPredictions, SceneGraph, ScoredTriplet, Vocabulary};

pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];

/// A ground-truth graph keyed by image id.
#[derive(Debug, Clone, Copy)]
pub struct GtImage<'a> {
    pub image_id: &'a str,
    pub graph: &'a SceneGraph,
}

pub fn gt_images(data: &Dataset) -> Vec<GtImage<'_>> {
    data.images
        .iter()
        .map(|i| GtImage {
            image_id: &i.image_id,
            graph: &i.graph,
        })
        .collect()
}

/// The ranked list that enters the top-K cut. Under the graph constraint only
/// the best triplet of each ordered pair is kept.
pub fn ranked_list(preds: &RankedPredictions, graph_constraint: bool) -> Vec<&ScoredTriplet> {
    let mut seen = HashSet::new();
    preds
        .triplets
        .iter()
        .filter(|t| !graph_constraint || seen.insert((t.subject_idx(), t.object_idx())))
        .collect()
}

/// 0-based rank of the first matching triplet for every GT relation.
pub fn gt_ranks(
    preds: &RankedPredictions,
    gt: &SceneGraph,
    graph_constraint: bool,
) -> Vec<Option<usize>> {
    let mut first: HashMap<(usize, usize, usize, usize, usize), usize> = HashMap::new();
    for (r, t) in ranked_list(preds, graph_constraint).into_iter().enumerate() {
        first
            .entry((
                t.subject_idx(),
                t.subject_class(),
                t.predicate(),
                t.object_idx(),
                t.object_class(),
            ))
            .or_insert(r);
    }
    gt.relations
        .iter()
        .map(|rel| {
            let (s, o) = (rel.subject(), rel.object());
            let key = (
                s,
                gt.entities.get(s)?.class,
                rel.predicate(),
                o,
                gt.entities.get(o)?.class,
            );
            first.get(&key).copied()
        })
        .collect()
}

/// Matched GT relations within the top `k`, and the GT count.
pub fn recall_at_k(
    preds: &RankedPredictions,
    gt: &SceneGraph,
    k: usize,
    graph_constraint: bool,
) -> (usize, usize) {
    let ranks = gt_ranks(preds, gt, graph_constraint);
    (
        ranks
            .iter()
            .filter(|r| matches!(r, Some(r) if *r < k))
            .count(),
        ranks.len(),
    )
}

struct Indexed<'a> {
    by_id: HashMap<&'a str, &'a RankedPredictions>,
    empty: RankedPredictions,
}

impl<'a> Indexed<'a> {
    fn new(preds: &'a [RankedPredictions]) -> Self {
        Indexed {
            by_id: preds.iter().map(|p| (p.image_id.as_str(), p)).collect(),
            empty: RankedPredictions {
                image_id: String::new(),
                triplets: Vec::new(),
            },
        }
    }

    fn get(&self, id: &str) -> &RankedPredictions {
        self.by_id.get(id).copied().unwrap_or(&self.empty)
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Dataset R@K: per-image recall averaged over images with at least one GT
/// relation. `None` if there are none.
pub fn dataset_recall_at_k(
    preds: &[RankedPredictions],
    gts: &[GtImage],
    k: usize,
    graph_constraint: bool,
) -> Option<f64> {
    let idx = Indexed::new(preds);
    let per_image: Vec<f64> = gts
        .iter()
        .filter(|g| !g.graph.relations.is_empty())
        .map(|g| {
            let (h, n) = recall_at_k(idx.get(g.image_id), g.graph, k, graph_constraint);
            h as f64 / n as f64
        })
        .collect();
    mean(&per_image)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRecall {
    /// Mean over predicates with at least one GT instance; 0 if none.
    pub mean: f64,
    /// Indexed by predicate; `None` where the predicate has no GT instance.
    pub per_predicate: Vec<Option<f64>>,
}

/// Per-predicate R@K (GT restricted to the predicate, predictions unchanged),
/// averaged over the predicates present.
pub fn mean_recall_at_k(
    preds: &[RankedPredictions],
    gts: &[GtImage],
    k: usize,
    n_predicates: usize,
    graph_constraint: bool,
) -> MeanRecall {
    let idx = Indexed::new(preds);
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); n_predicates];
    for g in gts {
        if g.graph.relations.is_empty() {
            continue;
        }
        let ranks = gt_ranks(idx.get(g.image_id), g.graph, graph_constraint);
        let mut hits = vec![(0usize, 0usize); n_predicates];
        for (rel, r) in g.graph.relations.iter().zip(&ranks) {
            if let Some(h) = hits.get_mut(rel.predicate()) {
                h.1 += 1;
                if matches!(r, Some(r) if *r < k) {
                    h.0 += 1;
                }
            }
        }
        for (p, (h, n)) in hits.into_iter().enumerate() {
            if n > 0 {
                per[p].push(h as f64 / n as f64);
            }
        }
    }
    let per_predicate: Vec<Option<f64>> = per.iter().map(|v| mean(v)).collect();
    let present: Vec<f64> = per_predicate.iter().flatten().copied().collect();
    MeanRecall {
        mean: mean(&present).unwrap_or(0.0),
        per_predicate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotRecall {
    pub value: Option<f64>,
    pub n_images: usize,
}

/// R@K over GT relations whose class triplet is absent from `registry`;
/// images without such relations are skipped.
pub fn zero_shot_recall_at_k(
    preds: &[RankedPredictions],
    gts: &[GtImage],
    registry: &BTreeSet<ClassTriplet>,
    k: usize,
    graph_constraint: bool,
) -> ZeroShotRecall {
    let idx = Indexed::new(preds);
    let mut per_image = Vec::new();
    for g in gts {
        let unseen: Vec<bool> = g
            .graph
            .relations
            .iter()
            .map(|r| {
                let cls = |e: usize| g.graph.entities.get(e).map(|x| x.class);
                match (cls(r.subject()), cls(r.object())) {
                    (Some(s), Some(o)) => !registry.contains(&ClassTriplet(s, r.predicate(), o)),
                    _ => false,
                }
            })
            .collect();
        let n = unseen.iter().filter(|u| **u).count();
        if n == 0 {
            continue;
        }
        let ranks = gt_ranks(idx.get(g.image_id), g.graph, graph_constraint);
        let h = ranks
            .iter()
            .zip(&unseen)
            .filter(|(r, u)| **u && matches!(r, Some(r) if *r < k))
            .count();
        per_image.push(h as f64 / n as f64);
    }
    ZeroShotRecall {
        value: mean(&per_image),
        n_images: per_image.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateRecall {
    pub predicate: String,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub method: String,
    pub ks: Vec<usize>,
    pub graph_constraint: bool,
    /// Keyed by K.
    pub recall: BTreeMap<usize, Option<f64>>,
    pub mean_recall: BTreeMap<usize, f64>,
    pub per_predicate_recall: BTreeMap<usize, Vec<PredicateRecall>>,
    pub zero_shot_recall: BTreeMap<usize, Option<f64>>,
    pub zero_shot_images: usize,
    pub n_images: usize,
    pub n_gt_triplets: usize,
}

impl EvalReport {
    pub fn mean_recall_at(&self, k: usize) -> f64 {
        self.mean_recall.get(&k).copied().unwrap_or(0.0)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    preds: &[RankedPredictions],
    gts: &[GtImage],
    registry: &BTreeSet<ClassTriplet>,
    ks: &[usize],
    predicates: &Vocabulary,
    task: Task,
    method: &str,
    graph_constraint: bool,
) -> EvalReport {
    let n_pred = predicates.len();
    let mut report = EvalReport {
        task,
        method: method.to_string(),
        ks: ks.to_vec(),
        graph_constraint,
        recall: BTreeMap::new(),
        mean_recall: BTreeMap::new(),
        per_predicate_recall: BTreeMap::new(),
        zero_shot_recall: BTreeMap::new(),
        zero_shot_images: 0,
        n_images: gts.iter().filter(|g| !g.graph.relations.is_empty()).count(),
        n_gt_triplets: gts.iter().map(|g| g.graph.relations.len()).sum(),
    };
    for &k in ks {
        report
            .recall
            .insert(k, dataset_recall_at_k(preds, gts, k, graph_constraint));
        let mr = mean_recall_at_k(preds, gts, k, n_pred, graph_constraint);
        report.mean_recall.insert(k, mr.mean);
        report.per_predicate_recall.insert(
            k,
            mr.per_predicate
                .iter()
                .enumerate()
                .skip(1)
                .map(|(p, r)| PredicateRecall {
                    predicate: predicates.names[p].clone(),
                    recall: *r,
                })
                .collect(),
        );
        let zs = zero_shot_recall_at_k(preds, gts, registry, k, graph_constraint);
        report.zero_shot_recall.insert(k, zs.value);
        report.zero_shot_images = zs.n_images;
    }
    report
}
