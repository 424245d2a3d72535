//! Domain types shared by every stage: vocabularies, boxes, detected objects,
//! pair samples, scene graphs, logits and ranked triplet predictions.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Predicate index reserved for "no relation".
pub const BACKGROUND: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabKind {
    Object,
    Predicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub names: Vec<String>,
    pub kind: VocabKind,
}

impl Vocabulary {
    pub fn new(names: Vec<String>, kind: VocabKind) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::config(format!("duplicate vocabulary entry {n:?}")));
            }
        }
        match kind {
            VocabKind::Predicate if names.len() < 2 => Err(Error::config(
                "predicate vocabulary needs background plus at least one class",
            )),
            VocabKind::Object if names.is_empty() => {
                Err(Error::config("object vocabulary is empty"))
            }
            _ => Ok(Vocabulary { names, kind }),
        }
    }

    /// `obj_0 .. obj_{n-1}`.
    pub fn synthetic_objects(n: usize) -> Result<Self> {
        Self::new(
            (0..n).map(|i| format!("obj_{i}")).collect(),
            VocabKind::Object,
        )
    }

    /// `__background__, pred_1 .. pred_{n-1}`.
    pub fn synthetic_predicates(n: usize) -> Result<Self> {
        let names = std::iter::once("__background__".to_string())
            .chain((1..n).map(|i| format!("pred_{i}")))
            .collect();
        Self::new(names, VocabKind::Predicate)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::data(format!(
                "degenerate box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    /// Coordinates divided by a square canvas side.
    pub fn normalized(&self, canvas: f64) -> [f64; 4] {
        [
            self.x1 / canvas,
            self.y1 / canvas,
            self.x2 / canvas,
            self.y2 / canvas,
        ]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub raw_feature: Vec<f64>,
    pub tentative_label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_feature: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub subject_idx: usize,
    pub object_idx: usize,
    pub union_context: Vec<f64>,
    pub gt_predicate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// `(subject entity, predicate, object entity)`, serialized as a 3-array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation(pub usize, pub usize, pub usize);

impl Relation {
    pub fn subject(&self) -> usize {
        self.0
    }

    pub fn predicate(&self) -> usize {
        self.1
    }

    pub fn object(&self) -> usize {
        self.2
    }
}

/// Class-level triplet `(subject class, predicate, object class)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassTriplet(pub usize, pub usize, pub usize);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EntityClassOutOfRange { entity: usize, class: usize },
    EndpointOutOfRange { relation: usize, endpoint: usize },
    PredicateOutOfRange { relation: usize, predicate: usize },
    SelfRelation { relation: usize },
    BackgroundPredicate { relation: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EntityClassOutOfRange { entity, class } => {
                write!(f, "entity {entity} has out-of-range class {class}")
            }
            Violation::EndpointOutOfRange { relation, endpoint } => {
                write!(
                    f,
                    "relation {relation} references missing entity {endpoint}"
                )
            }
            Violation::PredicateOutOfRange {
                relation,
                predicate,
            } => write!(
                f,
                "relation {relation} has out-of-range predicate {predicate}"
            ),
            Violation::SelfRelation { relation } => {
                write!(f, "self-relation at relation {relation}")
            }
            Violation::BackgroundPredicate { relation } => {
                write!(f, "background predicate stored at relation {relation}")
            }
        }
    }
}

/// Every invariant violation of `g`, in entity then relation order. Empty means valid.
pub fn validate_scene_graph(
    g: &SceneGraph,
    obj_vocab: &Vocabulary,
    pred_vocab: &Vocabulary,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, e) in g.entities.iter().enumerate() {
        if e.class >= obj_vocab.len() {
            out.push(Violation::EntityClassOutOfRange {
                entity: i,
                class: e.class,
            });
        }
    }
    let n = g.entities.len();
    for (r, rel) in g.relations.iter().enumerate() {
        for endpoint in [rel.subject(), rel.object()] {
            if endpoint >= n {
                out.push(Violation::EndpointOutOfRange {
                    relation: r,
                    endpoint,
                });
            }
        }
        if rel.subject() == rel.object() {
            out.push(Violation::SelfRelation { relation: r });
        }
        if rel.predicate() == BACKGROUND {
            out.push(Violation::BackgroundPredicate { relation: r });
        } else if rel.predicate() >= pred_vocab.len() {
            out.push(Violation::PredicateOutOfRange {
                relation: r,
                predicate: rel.predicate(),
            });
        }
    }
    out
}

/// Deduplicated class-level triplets of a valid graph.
pub fn canonical_triplet_set(g: &SceneGraph) -> BTreeSet<ClassTriplet> {
    g.relations
        .iter()
        .map(|r| {
            ClassTriplet(
                g.entities[r.subject()].class,
                r.predicate(),
                g.entities[r.object()].class,
            )
        })
        .collect()
}

/// Predicate logits including the background slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    pub fn zeros(n: usize) -> Self {
        Logits(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Logits) -> Logits {
        debug_assert_eq!(self.len(), other.len());
        Logits(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn max_abs_diff(&self, other: &Logits) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// One scored triplet: `[s_idx, s_cls, p, o_idx, o_cls, score]` on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet(
    pub usize,
    pub usize,
    pub usize,
    pub usize,
    pub usize,
    pub f64,
);

impl ScoredTriplet {
    pub fn subject_idx(&self) -> usize {
        self.0
    }
    pub fn subject_class(&self) -> usize {
        self.1
    }
    pub fn predicate(&self) -> usize {
        self.2
    }
    pub fn object_idx(&self) -> usize {
        self.3
    }
    pub fn object_class(&self) -> usize {
        self.4
    }
    pub fn score(&self) -> f64 {
        self.5
    }

    /// Score descending, then (subject idx, object idx, predicate) ascending.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        other
            .score()
            .total_cmp(&self.score())
            .then(self.subject_idx().cmp(&other.subject_idx()))
            .then(self.object_idx().cmp(&other.object_idx()))
            .then(self.predicate().cmp(&other.predicate()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPredictions {
    pub image_id: String,
    pub triplets: Vec<ScoredTriplet>,
}

impl RankedPredictions {
    /// Sorts into canonical order and drops repeated `(s, p, o)` index triplets,
    /// keeping the highest-ranked copy.
    pub fn canonical(image_id: impl Into<String>, mut triplets: Vec<ScoredTriplet>) -> Self {
        triplets.sort_by(ScoredTriplet::canonical_cmp);
        let mut seen = HashSet::new();
        triplets.retain(|t| seen.insert((t.subject_idx(), t.predicate(), t.object_idx())));
        RankedPredictions {
            image_id: image_id.into(),
            triplets,
        }
    }

    pub fn is_canonical(&self) -> bool {
        let ordered = self
            .triplets
            .windows(2)
            .all(|w| w[0].canonical_cmp(&w[1]) == Ordering::Less);
        let mut seen = HashSet::new();
        ordered
            && self
                .triplets
                .iter()
                .all(|t| seen.insert((t.subject_idx(), t.predicate(), t.object_idx())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocabs() -> (Vocabulary, Vocabulary) {
        (
            Vocabulary::synthetic_objects(5).unwrap(),
            Vocabulary::synthetic_predicates(4).unwrap(),
        )
    }

    fn bx() -> BoundingBox {
        BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap()
    }

    fn graph(classes: &[usize], rels: &[(usize, usize, usize)]) -> SceneGraph {
        SceneGraph {
            entities: classes
                .iter()
                .map(|&class| Entity { class, bbox: bx() })
                .collect(),
            relations: rels.iter().map(|&(s, p, o)| Relation(s, p, o)).collect(),
        }
    }

    #[test]
    fn self_relation_is_reported() {
        let (ov, pv) = vocabs();
        let v = validate_scene_graph(&graph(&[1], &[(0, 3, 0)]), &ov, &pv);
        assert_eq!(v, vec![Violation::SelfRelation { relation: 0 }]);
        assert_eq!(v[0].to_string(), "self-relation at relation 0");
    }

    #[test]
    fn background_predicate_is_reported() {
        let (ov, pv) = vocabs();
        let v = validate_scene_graph(&graph(&[1, 2], &[(0, 0, 1)]), &ov, &pv);
        assert_eq!(v, vec![Violation::BackgroundPredicate { relation: 0 }]);
        assert!(v[0].to_string().contains("background predicate stored"));
    }

    #[test]
    fn empty_graph_is_valid() {
        let (ov, pv) = vocabs();
        assert!(validate_scene_graph(&SceneGraph::default(), &ov, &pv).is_empty());
    }

    #[test]
    fn out_of_range_indices_are_located() {
        let (ov, pv) = vocabs();
        let v = validate_scene_graph(&graph(&[9, 1], &[(0, 7, 3)]), &ov, &pv);
        assert_eq!(
            v,
            vec![
                Violation::EntityClassOutOfRange {
                    entity: 0,
                    class: 9
                },
                Violation::EndpointOutOfRange {
                    relation: 0,
                    endpoint: 3
                },
                Violation::PredicateOutOfRange {
                    relation: 0,
                    predicate: 7
                },
            ]
        );
    }

    #[test]
    fn triplet_set_dedups_by_class() {
        // person=0 ride=1 bike=2
        let g = graph(&[0, 2, 0, 2], &[(0, 1, 1), (2, 1, 3)]);
        assert_eq!(canonical_triplet_set(&g).len(), 1);
        assert!(canonical_triplet_set(&SceneGraph::default()).is_empty());
        let g = graph(&[3, 4], &[(0, 1, 1), (0, 2, 1)]);
        assert_eq!(canonical_triplet_set(&g).len(), 2);
    }

    #[test]
    fn vocab_invariants() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into()], VocabKind::Object).is_err());
        assert!(Vocabulary::new(vec!["bg".into()], VocabKind::Predicate).is_err());
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
    }

    #[test]
    fn scene_graph_json_shape() {
        let g = graph(&[3, 1], &[(0, 2, 1)]);
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(
            s,
            r#"{"entities":[{"class":3,"box":[0.0,0.0,10.0,10.0]},{"class":1,"box":[0.0,0.0,10.0,10.0]}],"relations":[[0,2,1]]}"#
        );
        let back: SceneGraph = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        let bad = r#"{"entities":[{"class":0,"box":[5,0,1,1]}],"relations":[]}"#;
        assert!(serde_json::from_str::<SceneGraph>(bad).is_err());
    }

    #[test]
    fn ranked_predictions_json_shape_and_order() {
        let rp = RankedPredictions::canonical(
            "img0",
            vec![
                ScoredTriplet(1, 4, 2, 0, 3, 0.5),
                ScoredTriplet(0, 3, 1, 1, 4, 0.5),
                ScoredTriplet(0, 3, 1, 1, 4, 0.2),
                ScoredTriplet(0, 3, 2, 1, 4, 0.9),
            ],
        );
        assert!(rp.is_canonical());
        let s = serde_json::to_string(&rp).unwrap();
        assert_eq!(
            s,
            r#"{"image_id":"img0","triplets":[[0,3,2,1,4,0.9],[0,3,1,1,4,0.5],[1,4,2,0,3,0.5]]}"#
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_graph() -> impl Strategy<Value = SceneGraph> {
            (1usize..6).prop_flat_map(|n| {
                let ents = prop::collection::vec(
                    (
                        0usize..5,
                        0.0f64..500.0,
                        0.0f64..500.0,
                        1.0f64..300.0,
                        1.0f64..300.0,
                    ),
                    n,
                );
                let rels = prop::collection::vec((0..n, 1usize..4, 0..n), 0..6);
                (ents, rels).prop_map(|(ents, rels)| SceneGraph {
                    entities: ents
                        .into_iter()
                        .map(|(class, x, y, w, h)| Entity {
                            class,
                            bbox: BoundingBox::new(x, y, x + w, y + h).unwrap(),
                        })
                        .collect(),
                    relations: rels
                        .into_iter()
                        .filter(|(s, _, o)| s != o)
                        .map(|(s, p, o)| Relation(s, p, o))
                        .collect(),
                })
            })
        }

        proptest! {
            #[test]
            fn scene_graph_round_trips(g in arb_graph()) {
                let s = serde_json::to_string(&g).unwrap();
                let back: SceneGraph = serde_json::from_str(&s).unwrap();
                prop_assert_eq!(back, g);
            }

            #[test]
            fn canonical_order_is_idempotent(
                raw in prop::collection::vec((0usize..4, 0usize..4, 0usize..3, 0u8..4), 0..30)
            ) {
                let ts: Vec<_> = raw
                    .into_iter()
                    .map(|(s, o, p, q)| ScoredTriplet(s, 0, p, o, 0, f64::from(q) * 0.25))
                    .collect();
                let once = RankedPredictions::canonical("x", ts);
                prop_assert!(once.is_canonical());
                let twice = RankedPredictions::canonical("x", once.triplets.clone());
                prop_assert_eq!(once, twice);
            }
        }
    }
}
