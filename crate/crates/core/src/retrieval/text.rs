//! Text-side vocabulary with synonyms, and the structural derivation of
//! noisy text scene graphs from ground-truth graphs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::types::{SceneGraph, VocabKind, Vocabulary, BACKGROUND};

/// Text entity index reserved for unknown tokens.
pub const UNKNOWN_ENTITY: usize = 0;
/// Text predicate index reserved for unknown tokens (0 stays background).
pub const UNKNOWN_PREDICATE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Image,
    Text,
}

/// Entity and predicate vocabularies of one side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroVocab {
    pub side: Side,
    pub entities: Vocabulary,
    pub predicates: Vocabulary,
}

impl HeteroVocab {
    pub fn image(n_objects: usize, n_predicates: usize) -> Result<Self> {
        Ok(HeteroVocab {
            side: Side::Image,
            entities: Vocabulary::synthetic_objects(n_objects)?,
            predicates: Vocabulary::synthetic_predicates(n_predicates)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    /// Each image class gets between 1 and this many synonyms.
    pub max_synonyms: usize,
    pub drop_relation: f64,
    pub unknown_rate: f64,
    /// Redraws of a graph that came out empty before falling back to the
    /// entity-only graph.
    pub max_redraws: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            max_synonyms: 3,
            drop_relation: 0.3,
            unknown_rate: 0.05,
            max_redraws: 16,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_synonyms == 0 {
            return Err(Error::config("max_synonyms must be at least 1"));
        }
        for (name, p) in [
            ("drop_relation", self.drop_relation),
            ("unknown_rate", self.unknown_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// The text vocabulary and the synonym map from image classes into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextVocab {
    pub vocab: HeteroVocab,
    /// Text entity ids per image object class.
    pub entity_synonyms: Vec<Vec<usize>>,
    /// Text predicate ids per image predicate (empty for background).
    pub predicate_synonyms: Vec<Vec<usize>>,
}

impl TextVocab {
    /// Seeded synonym map: every image class and foreground predicate gets
    /// `1..=max_synonyms` fresh text tokens.
    pub fn build(image: &HeteroVocab, max_synonyms: usize, seed: u64) -> Result<Self> {
        if max_synonyms == 0 {
            return Err(Error::config("max_synonyms must be at least 1"));
        }
        let mut r = rng::stream(seed, &[tag::TEXT_VOCAB]);
        let mut entity_names = vec!["UNKNOWN".to_string()];
        let mut entity_synonyms = Vec::new();
        for name in &image.entities.names {
            let k = r.random_range(1..=max_synonyms);
            let ids = (0..k)
                .map(|s| {
                    entity_names.push(format!("{name}~{s}"));
                    entity_names.len() - 1
                })
                .collect();
            entity_synonyms.push(ids);
        }
        let mut predicate_names = vec!["__background__".to_string(), "UNKNOWN".to_string()];
        let mut predicate_synonyms = vec![Vec::new()];
        for name in image.predicates.names.iter().skip(1) {
            let k = r.random_range(1..=max_synonyms);
            let ids = (0..k)
                .map(|s| {
                    predicate_names.push(format!("{name}~{s}"));
                    predicate_names.len() - 1
                })
                .collect();
            predicate_synonyms.push(ids);
        }
        Ok(TextVocab {
            vocab: HeteroVocab {
                side: Side::Text,
                entities: Vocabulary::new(entity_names, VocabKind::Object)?,
                predicates: Vocabulary::new(predicate_names, VocabKind::Predicate)?,
            },
            entity_synonyms,
            predicate_synonyms,
        })
    }
}

fn relabel(
    g: &SceneGraph,
    vocab: &TextVocab,
    cfg: &TextConfig,
    r: &mut impl Rng,
) -> Result<SceneGraph> {
    let pick = |ids: &[usize], unknown: usize, r: &mut dyn rand::RngCore| -> usize {
        let id = ids[r.random_range(0..ids.len())];
        if r.random_bool(cfg.unknown_rate) {
            unknown
        } else {
            id
        }
    };
    let mut keep_rel = Vec::new();
    for rel in &g.relations {
        if !r.random_bool(cfg.drop_relation) {
            keep_rel.push(*rel);
        }
    }
    let mut used = vec![false; g.entities.len()];
    for rel in &keep_rel {
        used[rel.subject()] = true;
        used[rel.object()] = true;
    }
    let mut remap = vec![usize::MAX; g.entities.len()];
    let mut entities = Vec::new();
    for (i, e) in g.entities.iter().enumerate() {
        if used[i] {
            let syn = vocab
                .entity_synonyms
                .get(e.class)
                .ok_or_else(|| Error::data(format!("class {} has no text synonym", e.class)))?;
            remap[i] = entities.len();
            let mut te = e.clone();
            te.class = pick(syn, UNKNOWN_ENTITY, r);
            entities.push(te);
        }
    }
    let relations = keep_rel
        .iter()
        .map(|rel| {
            let syn = vocab
                .predicate_synonyms
                .get(rel.predicate())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| {
                    Error::data(format!("predicate {} has no text synonym", rel.predicate()))
                })?;
            Ok(crate::types::Relation(
                remap[rel.subject()],
                pick(syn, UNKNOWN_PREDICATE, r),
                remap[rel.object()],
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneGraph {
        entities,
        relations,
    })
}

/// Relabels `gt` into text tokens, drops relations and the entities left
/// isolated, and replaces tokens by UNKNOWN at random. Empty outcomes are
/// redrawn; after `max_redraws` the entity-only relabeling is returned.
pub fn derive_text_sg(
    gt: &SceneGraph,
    vocab: &TextVocab,
    cfg: &TextConfig,
    seed: u64,
) -> Result<SceneGraph> {
    cfg.validate()?;
    if gt.entities.is_empty() {
        return Err(Error::data("cannot describe a graph without entities"));
    }
    if gt.relations.iter().any(|r| r.predicate() == BACKGROUND) {
        return Err(Error::data(
            "ground-truth graph stores a background relation",
        ));
    }
    let mut r = rng::stream(seed, &[tag::TEXT_SG]);
    for _ in 0..=cfg.max_redraws {
        let g = relabel(gt, vocab, cfg, &mut r)?;
        if !g.entities.is_empty() {
            return Ok(g);
        }
    }
    let mut entities = gt.entities.clone();
    for e in &mut entities {
        let syn = &vocab.entity_synonyms[e.class];
        e.class = syn[r.random_range(0..syn.len())];
    }
    Ok(SceneGraph {
        entities,
        relations: Vec::new(),
    })
}
