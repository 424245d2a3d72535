//! Sentence-to-graph retrieval: text-SG queries against a gallery of
//! predicted image-SGs, embedded by a shared bilinear-attention encoder.

pub mod ban;
pub mod text;

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::effects::{effect, foreground_probabilities, EffectKind};
use crate::error::{Error, Result};
use crate::model::{CausalModel, Task};
use crate::rng::{self, tag};
use crate::synth::{Dataset, ImageRecord};
use crate::types::{Entity, Relation, SceneGraph};

pub use ban::{
    ban_layer, build_connection, l1_distance, triplet_gradient_check, BanLayer, EmbedShape,
    Pooling, SgEmbedder, Triplet,
};
pub use text::{derive_text_sg, HeteroVocab, Side, TextConfig, TextVocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgEmbedConfig {
    pub embed_dim: usize,
    pub residual_layers: usize,
    pub glimpses: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub pooling: Pooling,
    pub init_std: f64,
    pub margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Zero-based epochs at which the learning rate is divided.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Batch gradients whose global L2 norm exceeds this are rescaled to it.
    pub max_grad_norm: Option<f64>,
    /// Minimum foreground probability of a pair's top predicate for it to
    /// enter a predicted image-SG.
    pub predicate_threshold: f64,
    pub gallery_size: usize,
    pub text: TextConfig,
    pub seed: u64,
}

impl Default for SgEmbedConfig {
    fn default() -> Self {
        SgEmbedConfig {
            embed_dim: 512,
            residual_layers: 2,
            glimpses: 8,
            hidden_dim: 1024,
            output_dim: 1024,
            pooling: Pooling::Sum,
            init_std: 0.1,
            margin: 1.0,
            epochs: 30,
            batch_size: 12,
            learning_rate: 0.12,
            lr_decay_epochs: vec![10, 25],
            lr_decay_factor: 10.0,
            max_grad_norm: Some(1.0),
            predicate_threshold: 0.1,
            gallery_size: 100,
            text: TextConfig::default(),
            seed: 42,
        }
    }
}

impl SgEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.glimpses == 0 || self.residual_layers == 0 {
            return Err(Error::config(
                "embed_dim, glimpses and residual_layers must be at least 1",
            ));
        }
        if self.hidden_dim == 0 || self.output_dim == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "hidden_dim, output_dim and batch_size must be at least 1",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(
                "learning_rate must be finite and non-negative",
            ));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor >= 1.0) {
            return Err(Error::config("lr_decay_factor must be at least 1"));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0)
            || !(self.init_std.is_finite() && self.init_std > 0.0)
        {
            return Err(Error::config(
                "margin must be non-negative and init_std positive",
            ));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("max_grad_norm must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.predicate_threshold) {
            return Err(Error::config("predicate_threshold must lie in [0, 1]"));
        }
        if self.gallery_size == 0 {
            return Err(Error::config("gallery_size must be at least 1"));
        }
        self.text.validate()
    }

    pub fn shape(&self) -> ban::EmbedShape {
        ban::EmbedShape {
            embed_dim: self.embed_dim,
            residual_layers: self.residual_layers,
            glimpses: self.glimpses,
            hidden_dim: self.hidden_dim,
            output_dim: self.output_dim,
            pooling: self.pooling,
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate / self.lr_decay_factor.powi(decays as i32)
    }
}

/// Gallery indices by ascending L1 distance, ties by index, with distances.
pub fn rank_gallery(query: &[f64], gallery: &[Vec<f64>]) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(gallery.len());
    for (i, g) in gallery.iter().enumerate() {
        if g.len() != query.len() {
            return Err(Error::data(format!(
                "gallery item {i} has dimension {}, query has {}",
                g.len(),
                query.len()
            )));
        }
        out.push((i, l1_distance(query, g)));
    }
    out.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(out)
}

/// 1-based rank of `target` in the ranking of `gallery` against `query`.
pub fn rank_of(query: &[f64], gallery: &[Vec<f64>], target: usize) -> Result<usize> {
    if target >= gallery.len() {
        return Err(Error::data("target outside the gallery"));
    }
    let ranked = rank_gallery(query, gallery)?;
    Ok(ranked
        .iter()
        .position(|&(i, _)| i == target)
        .expect("target is ranked")
        + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub gallery_size: usize,
    pub n_queries: usize,
    pub recall_at_20: f64,
    pub recall_at_100: f64,
    pub median_rank: usize,
    pub ranks: Vec<usize>,
}

/// Lower median for even counts.
pub fn lower_median(values: &[usize]) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    Some(v[(v.len() - 1) / 2])
}

/// Query `i` matches gallery item `i`.
pub fn retrieve(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<RetrievalReport> {
    if queries.is_empty() || queries.len() > gallery.len() {
        return Err(Error::data("need between 1 and gallery-size queries"));
    }
    let ranks = queries
        .iter()
        .enumerate()
        .map(|(i, q)| rank_of(q, gallery, i))
        .collect::<Result<Vec<_>>>()?;
    let n = ranks.len() as f64;
    let within = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(RetrievalReport {
        gallery_size: gallery.len(),
        n_queries: ranks.len(),
        recall_at_20: within(20),
        recall_at_100: within(100),
        median_rank: lower_median(&ranks).expect("non-empty"),
        ranks,
    })
}

/// The predicted image-SG: every object with its task label, and for each
/// candidate pair its top foreground predicate when that probability reaches
/// `threshold`.
pub fn image_scene_graph(
    model: &CausalModel,
    image: &ImageRecord,
    task: Task,
    kind: EffectKind,
    threshold: f64,
) -> Result<SceneGraph> {
    let ctx = model.image_context(image, task)?;
    let entities = image
        .objects
        .iter()
        .zip(&ctx.labels)
        .map(|(o, &class)| Entity {
            class,
            bbox: o.bbox,
        })
        .collect();
    let mut relations = Vec::new();
    for pair in &image.pairs {
        let e = effect(kind, model, &ctx, pair, task)?;
        let probs = foreground_probabilities(&e.logits);
        let best = crate::nn::argmax(&probs);
        if probs[best] >= threshold {
            relations.push(Relation(pair.subject_idx, best + 1, pair.object_idx));
        }
    }
    Ok(SceneGraph {
        entities,
        relations,
    })
}

/// Aligned text queries and image-SG targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCorpus {
    pub image_ids: Vec<String>,
    pub queries: Vec<SceneGraph>,
    pub gallery: Vec<SceneGraph>,
}

impl RetrievalCorpus {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Text-SGs from the first `limit` images' ground truth, image-SGs from the
/// model's predictions on the same images. Each image's text draw is seeded
/// by its position.
pub fn build_corpus(
    model: &CausalModel,
    data: &Dataset,
    vocab: &TextVocab,
    cfg: &SgEmbedConfig,
    kind: EffectKind,
    limit: usize,
) -> Result<RetrievalCorpus> {
    let mut corpus = RetrievalCorpus {
        image_ids: Vec::new(),
        queries: Vec::new(),
        gallery: Vec::new(),
    };
    let split_key = data.split as u64;
    for (i, img) in data.images.iter().take(limit).enumerate() {
        let seed = rng::derive(cfg.seed, &[tag::TEXT_SG, split_key, i as u64]);
        corpus
            .queries
            .push(derive_text_sg(&img.graph, vocab, &cfg.text, seed)?);
        corpus.gallery.push(image_scene_graph(
            model,
            img,
            Task::SgCls,
            kind,
            cfg.predicate_threshold,
        )?);
        corpus.image_ids.push(img.image_id.clone());
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEpoch {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrainLog {
    pub epochs: Vec<RetrievalEpoch>,
}

/// Mini-batch SGD on the triplet loss. Each anchor takes one negative drawn
/// uniformly from the other items of its batch (from the whole corpus when
/// the batch holds a single item).
pub fn train_embedder(
    model: &mut SgEmbedder,
    corpus: &RetrievalCorpus,
    cfg: &SgEmbedConfig,
) -> Result<RetrievalTrainLog> {
    cfg.validate()?;
    if corpus.len() < 2 {
        return Err(Error::data("retrieval training needs at least two images"));
    }
    let mut log = RetrievalTrainLog { epochs: Vec::new() };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut neg_rng = rng::stream(cfg.seed, &[tag::NEGATIVES, epoch as u64]);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = model.params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for (bi, &a) in batch.iter().enumerate() {
                let n = if batch.len() > 1 {
                    let k = neg_rng.random_range(0..batch.len() - 1);
                    batch[if k >= bi { k + 1 } else { k }]
                } else {
                    let k = neg_rng.random_range(0..corpus.len() - 1);
                    if k >= a {
                        k + 1
                    } else {
                        k
                    }
                };
                let t = Triplet {
                    anchor: &corpus.queries[a],
                    positive: &corpus.gallery[a],
                    negative: &corpus.gallery[n],
                };
                total += ban::triplet_step(model, t, cfg.margin, Some((&mut grad, scale)))?;
            }
            if let Some(c) = cfg.max_grad_norm {
                let n = grad.norm();
                if n > c {
                    grad.scale(c / n);
                }
            }
            model.params.step(&grad, lr);
        }
        if !model.params.is_finite() || !total.is_finite() {
            return Err(Error::Numeric(format!(
                "retrieval training diverged in epoch {epoch}"
            )));
        }
        log.epochs.push(RetrievalEpoch {
            epoch,
            learning_rate: lr,
            loss: total / corpus.len() as f64,
        });
    }
    Ok(log)
}

pub fn embed_all(model: &SgEmbedder, graphs: &[SceneGraph], side: Side) -> Result<Vec<Vec<f64>>> {
    graphs
        .iter()
        .map(|g| Ok(model.embed_graph(g, side)?.vector))
        .collect()
}

/// Embeds the first `cfg.gallery_size` items and ranks each query against
/// that gallery.
pub fn evaluate_corpus(
    model: &SgEmbedder,
    corpus: &RetrievalCorpus,
    gallery_size: usize,
) -> Result<RetrievalReport> {
    let n = gallery_size.min(corpus.len());
    let q = embed_all(model, &corpus.queries[..n], Side::Text)?;
    let g = embed_all(model, &corpus.gallery[..n], Side::Image)?;
    retrieve(&q, &g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn own_embedding_ranks_first_at_distance_zero() {
        let g = vec![vec![1.0, 2.0], vec![0.5, 0.5], vec![3.0, -1.0]];
        let ranked = rank_gallery(&g[2], &g).unwrap();
        assert_eq!(ranked[0], (2, 0.0));
        assert_eq!(rank_of(&g[2], &g, 2).unwrap(), 1);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let g = vec![vec![1.0], vec![-1.0], vec![1.0]];
        assert_eq!(rank_of(&[0.0], &g, 1).unwrap(), 2);
        assert_eq!(rank_of(&[0.0], &g, 0).unwrap(), 1);
        assert_eq!(rank_of(&[0.0], &g, 2).unwrap(), 3);
    }

    #[test]
    fn report_fields() {
        let g: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64]).collect();
        // query i sits on gallery item 29 - i; its target i is preceded by
        // the 29 - i items strictly closer
        let q: Vec<Vec<f64>> = (0..4).map(|i| vec![29.0 - i as f64]).collect();
        let r = retrieve(&q, &g).unwrap();
        assert_eq!(r.ranks, vec![30, 29, 28, 27]);
        assert_eq!(r.recall_at_20, 0.0);
        assert_eq!(r.recall_at_100, 1.0);
        assert_eq!(r.median_rank, 28);
        assert!(retrieve(&[vec![0.0, 1.0]], &g).is_err());
    }

    #[test]
    fn lower_median_convention() {
        assert_eq!(lower_median(&[4, 1, 3, 2]), Some(2));
        assert_eq!(lower_median(&[5, 1, 3]), Some(3));
        assert_eq!(lower_median(&[]), None);
    }

    #[test]
    fn learning_rate_schedule() {
        let c = SgEmbedConfig::default();
        assert_eq!(c.learning_rate_at(0), 0.12);
        assert_eq!(c.learning_rate_at(9), 0.12);
        assert!((c.learning_rate_at(10) - 0.012).abs() < 1e-15);
        assert!((c.learning_rate_at(25) - 0.0012).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(SgEmbedConfig::default().validate().is_ok());
        for bad in [
            SgEmbedConfig {
                embed_dim: 0,
                ..Default::default()
            },
            SgEmbedConfig {
                glimpses: 0,
                ..Default::default()
            },
            SgEmbedConfig {
                residual_layers: 0,
                ..Default::default()
            },
            SgEmbedConfig {
                lr_decay_factor: 0.5,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
