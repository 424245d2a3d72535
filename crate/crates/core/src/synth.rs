//! Seeded synthetic scene-graph worlds with a long-tailed predicate
//! distribution and object-pair context bias.
//!
//! Every object carries a class prototype plus the prototypes of the
//! predicates it takes part in (mixed through fixed subject/object maps), so
//! the fine-grained predicate is recoverable from the pair features. The
//! union-region context mixes a weaker predicate signal with a pair-class
//! signature, which gives the context branches a shortcut to exploit.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::rng::{self, tag};
use crate::types::{
    canonical_triplet_set, BoundingBox, ClassTriplet, DetectedObject, Entity, PairSample, Relation,
    SceneGraph, Vocabulary, BACKGROUND,
};

/// Canvas side used for box generation and normalization.
pub const CANVAS: f64 = 1024.0;

/// Background pairs materialized per foreground pair.
pub const BACKGROUND_RATIO: usize = 3;

/// Probability that the detector's tentative label is the true class.
pub const TENTATIVE_LABEL_ACCURACY: f64 = 0.9;

const HOLDOUT_RESAMPLE_LIMIT: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_object_classes: usize,
    /// Includes the background predicate.
    pub n_predicates: usize,
    pub d_r: usize,
    pub d_x: usize,
    pub d_v: usize,
    pub zipf_s: f64,
    pub context_mix: f64,
    pub signal_strength: f64,
    pub noise_sigma: f64,
    /// Per-component standard deviation of the predicate prototypes.
    pub predicate_scale: f64,
    /// Scale of the predicate signal inside the union context.
    pub union_signal: f64,
    /// Scale of the pair-class signature inside the union context.
    pub union_signature: f64,
    /// Inclusive `[min, max]`.
    pub objects_per_image: [usize; 2],
    /// Inclusive `[min, max]`.
    pub fg_relations_per_image: [usize; 2],
    pub zero_shot_holdout: Vec<ClassTriplet>,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_object_classes: 15,
            n_predicates: 11,
            d_r: 32,
            d_x: 32,
            d_v: 32,
            zipf_s: 1.5,
            context_mix: 0.7,
            signal_strength: 1.0,
            noise_sigma: 0.3,
            predicate_scale: 0.08,
            union_signal: 0.5,
            union_signature: 1.0,
            objects_per_image: [4, 8],
            fg_relations_per_image: [2, 5],
            zero_shot_holdout: default_holdout(),
            seed: 42,
        }
    }
}

fn default_holdout() -> Vec<ClassTriplet> {
    vec![
        ClassTriplet(0, 1, 1),
        ClassTriplet(2, 1, 3),
        ClassTriplet(4, 1, 5),
        ClassTriplet(6, 1, 7),
        ClassTriplet(8, 1, 9),
    ]
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.n_predicates < 2 {
            return bad("n_predicates must be at least 2");
        }
        if self.n_object_classes == 0 {
            return bad("n_object_classes must be positive");
        }
        if self.d_r == 0 || self.d_x == 0 || self.d_v == 0 {
            return bad("feature dimensions must be positive");
        }
        if !(self.zipf_s > 0.0 && self.zipf_s.is_finite()) {
            return bad("zipf_s must be positive");
        }
        if !(0.0..=1.0).contains(&self.context_mix) {
            return bad("context_mix must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.signal_strength.is_finite()) {
            return bad("noise_sigma must be non-negative and signal_strength finite");
        }
        let scales = [
            self.predicate_scale,
            self.union_signal,
            self.union_signature,
        ];
        if !scales.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return bad(
                "predicate_scale, union_signal and union_signature must be finite and non-negative",
            );
        }
        let [omin, omax] = self.objects_per_image;
        let [fmin, fmax] = self.fg_relations_per_image;
        if omin < 2 || omin > omax {
            return bad("objects_per_image must be an ordered range starting at 2 or more");
        }
        if fmin > fmax {
            return bad("fg_relations_per_image must be an ordered range");
        }
        if fmax > omin * (omin - 1) {
            return Err(Error::config(format!(
                "fg_relations_per_image max {fmax} exceeds the {} ordered pairs of a {omin}-object image",
                omin * (omin - 1)
            )));
        }
        for t in &self.zero_shot_holdout {
            if t.1 == BACKGROUND || t.1 >= self.n_predicates {
                return Err(Error::config(format!(
                    "holdout triplet {t:?} must use a foreground predicate"
                )));
            }
            if t.0 >= self.n_object_classes || t.2 >= self.n_object_classes {
                return Err(Error::config(format!(
                    "holdout triplet {t:?} has a bad class"
                )));
            }
        }
        Ok(())
    }

    pub fn n_foreground(&self) -> usize {
        self.n_predicates - 1
    }

    pub fn object_vocab(&self) -> Vocabulary {
        Vocabulary::synthetic_objects(self.n_object_classes).expect("validated size")
    }

    pub fn predicate_vocab(&self) -> Vocabulary {
        Vocabulary::synthetic_predicates(self.n_predicates).expect("validated size")
    }
}

/// Seeded permutation of ranks `1..=K` for one ordered class pair.
/// Entry `k` is the pair-specific rank of foreground predicate `k + 1`.
pub fn pair_rank(cfg: &WorldConfig, subject: usize, object: usize) -> Vec<usize> {
    let mut ranks: Vec<usize> = (1..=cfg.n_foreground()).collect();
    let mut r = rng::stream(cfg.seed, &[tag::PAIR_RANK, subject as u64, object as u64]);
    ranks.shuffle(&mut r);
    ranks
}

/// Probability over foreground predicates `1..n_predicates` (entry `k` is
/// predicate `k + 1`): a Zipf head-biased global ranking mixed with a
/// pair-specific shuffled ranking.
pub fn predicate_prior(cfg: &WorldConfig, subject: usize, object: usize) -> Vec<f64> {
    let zipf = |r: usize| (r as f64).powf(-cfg.zipf_s);
    let pair = pair_rank(cfg, subject, object);
    let raw: Vec<f64> = pair
        .iter()
        .enumerate()
        .map(|(k, &pr)| cfg.context_mix * zipf(k + 1) + (1.0 - cfg.context_mix) * zipf(pr))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn key(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One image: detector outputs, candidate pairs and the ground-truth graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub objects: Vec<DetectedObject>,
    pub pairs: Vec<PairSample>,
    pub graph: SceneGraph,
}

impl ImageRecord {
    pub fn gt_labels(&self) -> Vec<usize> {
        self.graph.entities.iter().map(|e| e.class).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: Split,
    pub world: WorldConfig,
    pub images: Vec<ImageRecord>,
    /// Class-level triplets seen in the training split.
    pub train_triplet_registry: BTreeSet<ClassTriplet>,
}

impl Dataset {
    /// Pair counts per predicate index (background included).
    pub fn predicate_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.world.n_predicates];
        for img in &self.images {
            for p in &img.pairs {
                counts[p.gt_predicate] += 1;
            }
        }
        counts
    }

    /// Per-class object counts.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.world.n_object_classes];
        for img in &self.images {
            for e in &img.graph.entities {
                counts[e.class] += 1;
            }
        }
        counts
    }

    pub fn n_pairs(&self) -> usize {
        self.images.iter().map(|i| i.pairs.len()).sum()
    }
}

/// The fixed latent structure of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    /// `n_object_classes x d_r`.
    pub class_prototypes: Vec<Vec<f64>>,
    /// `n_predicates x d_r`; row 0 (background) is zero.
    pub predicate_prototypes: Vec<Vec<f64>>,
    /// `d_r x d_r`, injects predicate signal into the subject feature.
    pub subject_mix: Linear,
    /// `d_r x d_r`, injects predicate signal into the object feature.
    pub object_mix: Linear,
    /// `d_v x d_r`, predicate signal of the union region.
    pub union_map: Linear,
    /// `d_v x d_v`, maps pair signatures into the union region.
    pub signature_map: Linear,
}

fn normal_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, &[tag::WORLD]);
        let class_prototypes = (0..config.n_object_classes)
            .map(|_| normal_vec(&mut r, config.d_r))
            .collect();
        let predicate_prototypes = (0..config.n_predicates)
            .map(|p| {
                let v = normal_vec(&mut r, config.d_r);
                if p == BACKGROUND {
                    vec![0.0; config.d_r]
                } else {
                    v.into_iter().map(|x| x * config.predicate_scale).collect()
                }
            })
            .collect();
        let mix_std = 1.0 / (config.d_r as f64).sqrt();
        let subject_mix = Linear::gaussian(config.d_r, config.d_r, mix_std, &mut r);
        let object_mix = Linear::gaussian(config.d_r, config.d_r, mix_std, &mut r);
        let union_map = Linear::gaussian(config.d_v, config.d_r, mix_std, &mut r);
        let signature_map = Linear::gaussian(
            config.d_v,
            config.d_v,
            1.0 / (config.d_v as f64).sqrt(),
            &mut r,
        );
        Ok(World {
            config,
            class_prototypes,
            predicate_prototypes,
            subject_mix,
            object_mix,
            union_map,
            signature_map,
        })
    }

    /// Pair-class signature vector, keyed by `(seed, subject, object)`.
    pub fn pair_signature(&self, subject: usize, object: usize) -> Vec<f64> {
        let mut r = rng::stream(
            self.config.seed,
            &[tag::SIGNATURE, subject as u64, object as u64],
        );
        normal_vec(&mut r, self.config.d_v)
    }

    fn union_context(
        &self,
        r: &mut ChaCha8Rng,
        noise: &Normal<f64>,
        cs: usize,
        co: usize,
        predicate: usize,
    ) -> Vec<f64> {
        let cfg = &self.config;
        let sig = self.signature_map.forward(&self.pair_signature(cs, co));
        let pred = self
            .union_map
            .forward(&self.predicate_prototypes[predicate]);
        sig.iter()
            .zip(&pred)
            .map(|(s, p)| {
                let signal = if predicate == BACKGROUND {
                    0.0
                } else {
                    cfg.union_signal * p
                };
                cfg.union_signature * s + signal + noise.sample(r)
            })
            .collect()
    }

    /// Builds image `index` of `split`. Depends only on `(seed, split, index)`.
    pub fn generate_image(&self, split: Split, index: usize) -> ImageRecord {
        let cfg = &self.config;
        let mut r = rng::stream(cfg.seed, &[tag::IMAGE, split.key(), index as u64]);
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");

        let n = r.random_range(cfg.objects_per_image[0]..=cfg.objects_per_image[1]);
        let classes: Vec<usize> = (0..n)
            .map(|_| r.random_range(0..cfg.n_object_classes))
            .collect();
        let boxes: Vec<BoundingBox> = (0..n)
            .map(|_| {
                let x1 = r.random_range(0.0..CANVAS - 32.0);
                let y1 = r.random_range(0.0..CANVAS - 32.0);
                let x2 = r.random_range(x1 + 16.0..CANVAS);
                let y2 = r.random_range(y1 + 16.0..CANVAS);
                BoundingBox::new(x1, y1, x2, y2).expect("non-degenerate by construction")
            })
            .collect();
        let mut raw: Vec<Vec<f64>> = classes
            .iter()
            .map(|&c| {
                self.class_prototypes[c]
                    .iter()
                    .map(|v| v + noise.sample(&mut r))
                    .collect()
            })
            .collect();

        let mut candidates: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        candidates.shuffle(&mut r);
        let n_fg = r
            .random_range(cfg.fg_relations_per_image[0]..=cfg.fg_relations_per_image[1])
            .min(candidates.len());

        let mut relations = Vec::with_capacity(n_fg);
        for &(i, j) in &candidates[..n_fg] {
            let prior = predicate_prior(cfg, classes[i], classes[j]);
            let mut chosen = None;
            for _ in 0..HOLDOUT_RESAMPLE_LIMIT {
                let p = 1 + sample_index(&mut r, &prior);
                let held = split == Split::Train
                    && cfg
                        .zero_shot_holdout
                        .contains(&ClassTriplet(classes[i], p, classes[j]));
                if !held {
                    chosen = Some(p);
                    break;
                }
            }
            if let Some(p) = chosen {
                relations.push(Relation(i, p, j));
            }
        }

        let s = cfg.signal_strength;
        for rel in &relations {
            let mu = &self.predicate_prototypes[rel.predicate()];
            let sub = self.subject_mix.forward(mu);
            let obj = self.object_mix.forward(mu);
            raw[rel.subject()]
                .iter_mut()
                .zip(&sub)
                .for_each(|(v, d)| *v += s * d);
            raw[rel.object()]
                .iter_mut()
                .zip(&obj)
                .for_each(|(v, d)| *v += s * d);
        }

        let n_bg = (BACKGROUND_RATIO * n_fg).min(candidates.len() - n_fg);
        let mut pair_specs: Vec<(usize, usize, usize)> = relations
            .iter()
            .map(|rel| (rel.subject(), rel.object(), rel.predicate()))
            .collect();
        pair_specs.extend(
            candidates[n_fg..n_fg + n_bg]
                .iter()
                .map(|&(i, j)| (i, j, BACKGROUND)),
        );
        pair_specs.sort_unstable();
        let pairs = pair_specs
            .into_iter()
            .map(|(i, j, p)| PairSample {
                subject_idx: i,
                object_idx: j,
                union_context: self.union_context(&mut r, &noise, classes[i], classes[j], p),
                gt_predicate: p,
            })
            .collect();

        let objects = (0..n)
            .map(|i| {
                let tentative =
                    if r.random_bool(TENTATIVE_LABEL_ACCURACY) || cfg.n_object_classes == 1 {
                        classes[i]
                    } else {
                        let wrong = r.random_range(0..cfg.n_object_classes - 1);
                        if wrong >= classes[i] {
                            wrong + 1
                        } else {
                            wrong
                        }
                    };
                DetectedObject {
                    bbox: boxes[i],
                    raw_feature: raw[i].clone(),
                    tentative_label: tentative,
                    context_feature: None,
                    refined_label: None,
                }
            })
            .collect();

        relations.sort_unstable_by_key(|rel| (rel.subject(), rel.object(), rel.predicate()));
        let graph = SceneGraph {
            entities: classes
                .iter()
                .zip(&boxes)
                .map(|(&class, &bbox)| Entity { class, bbox })
                .collect(),
            relations,
        };
        ImageRecord {
            image_id: format!("{}_{index:05}", split.name()),
            objects,
            pairs,
            graph,
        }
    }

    fn split(&self, split: Split, count: usize) -> Vec<ImageRecord> {
        (0..count).map(|i| self.generate_image(split, i)).collect()
    }

    /// Train, validation and test splits. The registry built from the
    /// training split is attached to all three.
    pub fn generate(
        &self,
        n_train: usize,
        n_val: usize,
        n_test: usize,
    ) -> Result<(Dataset, Dataset, Dataset)> {
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(Error::config("every split needs at least one image"));
        }
        let train = self.split(Split::Train, n_train);
        let registry: BTreeSet<ClassTriplet> = train
            .iter()
            .flat_map(|img| canonical_triplet_set(&img.graph))
            .collect();
        let make = |split, images| Dataset {
            split,
            world: self.config.clone(),
            images,
            train_triplet_registry: registry.clone(),
        };
        Ok((
            make(Split::Train, train),
            make(Split::Val, self.split(Split::Val, n_val)),
            make(Split::Test, self.split(Split::Test, n_test)),
        ))
    }
}

/// Convenience wrapper: builds the world and all three splits.
pub fn generate_dataset(
    cfg: &WorldConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
) -> Result<(Dataset, Dataset, Dataset)> {
    World::new(cfg.clone())?.generate(n_train, n_val, n_test)
}

fn sample_index<R: Rng + ?Sized>(r: &mut R, probs: &[f64]) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_scene_graph;

    fn small_cfg() -> WorldConfig {
        WorldConfig {
            zero_shot_holdout: vec![],
            ..WorldConfig::default()
        }
    }

    #[test]
    fn prior_matches_analytic_zipf() {
        let cfg = WorldConfig {
            n_predicates: 4,
            zipf_s: 2.0,
            context_mix: 1.0,
            ..small_cfg()
        };
        let p = predicate_prior(&cfg, 0, 1);
        let z = 49.0 / 36.0;
        let want = [1.0 / z, 0.25 / z, (1.0 / 9.0) / z];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p[0] - 0.7347).abs() < 1e-4);
        assert!((p[1] - 0.1837).abs() < 1e-4);
        assert!((p[2] - 0.0816).abs() < 1e-4);
    }

    #[test]
    fn pure_pair_prior_is_a_permutation() {
        let cfg = WorldConfig {
            context_mix: 0.0,
            ..small_cfg()
        };
        let sorted = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v
        };
        let a = predicate_prior(&cfg, 1, 2);
        let b = predicate_prior(&cfg, 5, 3);
        assert_ne!(a, b);
        let (sa, sb) = (sorted(a), sorted(b));
        for (x, y) in sa.iter().zip(&sb) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn prior_regression_default_pair() {
        let p = predicate_prior(&WorldConfig::default(), 2, 7);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // frozen from the first run of this generator (seed 42)
        let frozen = [
            0.3642657858230765,
            0.12878740365487198,
            0.08630878219550722,
            0.19420283310223768,
            0.03694665773264961,
            0.030514762583197956,
            0.02706056091074144,
            0.025734173845539363,
            0.06615021754180209,
            0.04002882261037623,
        ];
        for (a, b) in p.iter().zip(frozen) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(WorldConfig::default().validate().is_ok());
        let too_many = WorldConfig {
            objects_per_image: [2, 3],
            fg_relations_per_image: [1, 3],
            ..small_cfg()
        };
        assert!(matches!(too_many.validate(), Err(Error::Config(_))));
        let bg_holdout = WorldConfig {
            zero_shot_holdout: vec![ClassTriplet(0, 0, 1)],
            ..small_cfg()
        };
        assert!(bg_holdout.validate().is_err());
        assert!(WorldConfig {
            n_predicates: 1,
            ..small_cfg()
        }
        .validate()
        .is_err());
        assert!(WorldConfig {
            context_mix: 1.5,
            ..small_cfg()
        }
        .validate()
        .is_err());
        assert!(WorldConfig {
            zipf_s: 0.0,
            ..small_cfg()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn degenerate_world_has_identical_features() {
        let cfg = WorldConfig {
            n_object_classes: 1,
            noise_sigma: 0.0,
            signal_strength: 0.0,
            ..small_cfg()
        };
        let (train, _, _) = generate_dataset(&cfg, 20, 1, 1).unwrap();
        let first = &train.images[0].objects[0].raw_feature;
        for img in &train.images {
            for o in &img.objects {
                assert_eq!(&o.raw_feature, first);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig::default();
        let a = generate_dataset(&cfg, 30, 5, 5).unwrap();
        let b = generate_dataset(&cfg, 30, 5, 5).unwrap();
        assert_eq!(a, b);
        // per-image keying: a longer split shares its prefix
        let c = generate_dataset(&cfg, 40, 5, 5).unwrap();
        assert_eq!(a.0.images[..], c.0.images[..30]);
    }

    #[test]
    fn generated_images_respect_invariants() {
        let cfg = WorldConfig::default();
        let (train, val, test) = generate_dataset(&cfg, 60, 10, 10).unwrap();
        let ov = cfg.object_vocab();
        let pv = cfg.predicate_vocab();
        for ds in [&train, &val, &test] {
            for img in &ds.images {
                assert!(validate_scene_graph(&img.graph, &ov, &pv).is_empty());
                let n_fg = img.pairs.iter().filter(|p| p.gt_predicate != 0).count();
                let n_bg = img.pairs.len() - n_fg;
                assert_eq!(n_fg, img.graph.relations.len());
                assert!(n_bg <= BACKGROUND_RATIO * n_fg);
                for p in &img.pairs {
                    assert_ne!(p.subject_idx, p.object_idx);
                    assert_eq!(p.union_context.len(), cfg.d_v);
                    if p.gt_predicate != 0 {
                        assert!(img.graph.relations.contains(&Relation(
                            p.subject_idx,
                            p.gt_predicate,
                            p.object_idx
                        )));
                    }
                }
                for o in &img.objects {
                    assert_eq!(o.raw_feature.len(), cfg.d_r);
                    assert!(o.raw_feature.iter().all(|v| v.is_finite()));
                }
            }
        }
    }
}
