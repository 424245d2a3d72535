//! Counterfactual effects as differences of logits under two or three
//! scenarios, and the ranked predictions they induce.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CausalModel, ImageContext, Scenario, Task, XMode, ZMode};
use crate::nn::softmax;
use crate::synth::{predicate_prior, Dataset, ImageRecord, WorldConfig};
use crate::types::{Logits, PairSample, RankedPredictions, ScoredTriplet, BACKGROUND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    Tde,
    Te,
    Nie,
    Tie,
    Nde,
    X2y,
    Baseline,
}

impl EffectKind {
    pub const ALL: [EffectKind; 7] = [
        EffectKind::Baseline,
        EffectKind::Tde,
        EffectKind::Te,
        EffectKind::Nie,
        EffectKind::Tie,
        EffectKind::Nde,
        EffectKind::X2y,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EffectKind::Tde => "tde",
            EffectKind::Te => "te",
            EffectKind::Nie => "nie",
            EffectKind::Tie => "tie",
            EffectKind::Nde => "nde",
            EffectKind::X2y => "x2y",
            EffectKind::Baseline => "baseline",
        }
    }

    /// Signed scenario terms of the defining difference. `X2Y` has none: it
    /// reads the `X -> Y` branch directly.
    pub fn terms(self) -> Vec<(f64, Scenario)> {
        let obs = Scenario::OBSERVED;
        let x_bar_z = Scenario::new(XMode::Intervened, ZMode::Factual);
        let x_bar_z_bar = Scenario::new(XMode::Intervened, ZMode::Mean);
        let x_z_bar = Scenario::new(XMode::Observed, ZMode::Mean);
        match self {
            EffectKind::Baseline => vec![(1.0, obs)],
            EffectKind::Tde => vec![(1.0, obs), (-1.0, x_bar_z)],
            EffectKind::Te => vec![(1.0, obs), (-1.0, x_bar_z_bar)],
            EffectKind::Nie => vec![(1.0, x_bar_z), (-1.0, x_bar_z_bar)],
            EffectKind::Tie => vec![(1.0, obs), (-1.0, x_z_bar)],
            EffectKind::Nde => vec![(1.0, x_z_bar), (-1.0, x_bar_z_bar)],
            EffectKind::X2y => Vec::new(),
        }
    }
}

impl std::str::FromStr for EffectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EffectKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(format!("unknown effect kind {s:?}")))
    }
}

impl std::fmt::Display for EffectKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceTerm {
    pub sign: f64,
    pub term: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectResult {
    pub kind: EffectKind,
    pub logits: Logits,
    pub trace: Vec<TraceTerm>,
}

/// Effect logits for one pair of an image whose context is `ctx`.
pub fn effect(
    kind: EffectKind,
    model: &CausalModel,
    ctx: &ImageContext,
    pair: &PairSample,
    task: Task,
) -> Result<EffectResult> {
    if kind == EffectKind::X2y {
        let t = model.scenario_terms(ctx, pair, Scenario::OBSERVED, task)?;
        return Ok(EffectResult {
            kind,
            logits: Logits(t.x_term),
            trace: vec![TraceTerm {
                sign: 1.0,
                term: "W_x x'(u)".into(),
            }],
        });
    }
    let mut out: Option<Logits> = None;
    let mut trace = Vec::new();
    for (sign, scenario) in kind.terms() {
        let y = model.forward(ctx, pair, scenario, task)?;
        out = Some(match out {
            None if sign > 0.0 => y,
            None => Logits(y.0.iter().map(|v| -v).collect()),
            Some(acc) if sign > 0.0 => Logits(acc.0.iter().zip(&y.0).map(|(a, b)| a + b).collect()),
            Some(acc) => acc.sub(&y),
        });
        trace.push(TraceTerm {
            sign,
            term: scenario.notation().to_string(),
        });
    }
    let logits = out.expect("every non-X2Y kind has at least one term");
    if !logits.is_finite() {
        return Err(Error::Numeric(format!("non-finite {kind} logits")));
    }
    Ok(EffectResult {
        kind,
        logits,
        trace,
    })
}

/// Softmax over the foreground slots only; entry `k` is predicate `k + 1`.
pub fn foreground_probabilities(logits: &Logits) -> Vec<f64> {
    softmax(&logits.0[BACKGROUND + 1..])
}

/// Every foreground triplet of every candidate pair, scored from the effect
/// logits: `p(predicate)` in PredCls, `p(subject) p(object) p(predicate)` in SGCls.
pub fn unbiased_predict(
    model: &CausalModel,
    image: &ImageRecord,
    task: Task,
    kind: EffectKind,
) -> Result<RankedPredictions> {
    let ctx = model.image_context(image, task)?;
    let mut triplets = Vec::with_capacity(image.pairs.len() * model.dims.n_predicates);
    for pair in &image.pairs {
        let e = effect(kind, model, &ctx, pair, task)?;
        let (i, j) = (pair.subject_idx, pair.object_idx);
        let label_score = ctx.label_probs[i] * ctx.label_probs[j];
        for (k, p) in foreground_probabilities(&e.logits).into_iter().enumerate() {
            triplets.push(ScoredTriplet(
                i,
                ctx.labels[i],
                k + 1,
                j,
                ctx.labels[j],
                label_score * p,
            ));
        }
    }
    Ok(RankedPredictions::canonical(
        image.image_id.clone(),
        triplets,
    ))
}

pub fn predict_dataset(
    model: &CausalModel,
    data: &Dataset,
    task: Task,
    kind: EffectKind,
) -> Result<Vec<RankedPredictions>> {
    data.images
        .iter()
        .map(|img| unbiased_predict(model, img, task, kind))
        .collect()
}

/// Frequency baseline: each candidate pair scored by the generator's
/// predicate prior for its ground-truth class pair (PredCls setting).
pub fn prior_predict(world: &WorldConfig, image: &ImageRecord) -> RankedPredictions {
    let labels = image.gt_labels();
    let mut triplets = Vec::new();
    for pair in &image.pairs {
        let (i, j) = (pair.subject_idx, pair.object_idx);
        for (k, p) in predicate_prior(world, labels[i], labels[j])
            .into_iter()
            .enumerate()
        {
            triplets.push(ScoredTriplet(i, labels[i], k + 1, j, labels[j], p));
        }
    }
    RankedPredictions::canonical(image.image_id.clone(), triplets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BaselineSource, Dims, Fusion, Table};
    use crate::nn::Linear;
    use crate::synth::generate_dataset;
    use proptest::prelude::*;

    fn model_and_data(fusion: Fusion, seed: u64) -> (CausalModel, Dataset) {
        let (train, _, _) = generate_dataset(&WorldConfig::default(), 4, 1, 1).unwrap();
        let mut m = CausalModel::init(Dims::from_world(&train.world), fusion, Task::SgCls, seed);
        m.params
            .blocks_mut()
            .into_iter()
            .for_each(|(_, b)| b.iter_mut().for_each(|v| *v *= 40.0));
        m.freeze_counterfactuals(&train.images, BaselineSource::TrainingMean)
            .unwrap();
        (m, train)
    }

    fn all_pairs(data: &Dataset) -> impl Iterator<Item = (&ImageRecord, &PairSample)> {
        data.images
            .iter()
            .flat_map(|i| i.pairs.iter().map(move |p| (i, p)))
    }

    #[test]
    fn zero_direct_branch_gives_zero_tde() {
        let (mut m, data) = model_and_data(Fusion::Sum, 1);
        let d = m.dims;
        m.params.w_x = Linear::zeros(d.n_predicates, d.d_p);
        for task in [Task::PredCls, Task::SgCls] {
            for (img, p) in all_pairs(&data) {
                let ctx = m.image_context(img, task).unwrap();
                let tde = effect(EffectKind::Tde, &m, &ctx, p, task).unwrap();
                assert!(tde.logits.0.iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn sum_tde_isolates_direct_branch() {
        let (m, data) = model_and_data(Fusion::Sum, 2);
        let xb = &m.baseline.as_ref().unwrap().value;
        for (img, p) in all_pairs(&data) {
            let ctx = m.image_context(img, Task::SgCls).unwrap();
            let tde = effect(EffectKind::Tde, &m, &ctx, p, Task::SgCls).unwrap();
            let a = m
                .params
                .w_x
                .forward(&m.pair_feature(&ctx.xs[p.subject_idx], &ctx.xs[p.object_idx]));
            let b = m.params.w_x.forward(&m.pair_feature(xb, xb));
            for k in 0..a.len() {
                assert!((tde.logits.0[k] - (a[k] - b[k])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decomposition_and_linear_equivalence() {
        for fusion in [Fusion::Sum, Fusion::Gate] {
            let (m, data) = model_and_data(fusion, 3);
            let mut nonlinear = false;
            for task in [Task::PredCls, Task::SgCls] {
                for (img, p) in all_pairs(&data) {
                    let ctx = m.image_context(img, task).unwrap();
                    let e = |k| effect(k, &m, &ctx, p, task).unwrap().logits;
                    let (tde, te, nie, tie, nde) = (
                        e(EffectKind::Tde),
                        e(EffectKind::Te),
                        e(EffectKind::Nie),
                        e(EffectKind::Tie),
                        e(EffectKind::Nde),
                    );
                    for k in 0..te.len() {
                        assert!((te.0[k] - (tde.0[k] + nie.0[k])).abs() < 1e-12);
                        // second decomposition
                        assert!((te.0[k] - (tie.0[k] + nde.0[k])).abs() < 1e-12);
                    }
                    if fusion == Fusion::Sum {
                        assert!(tde.max_abs_diff(&nde) < 1e-9);
                        assert!(tie.max_abs_diff(&nie) < 1e-9);
                    } else if tde.max_abs_diff(&nde) > 1e-6 {
                        nonlinear = true;
                    }
                }
            }
            assert_eq!(nonlinear, fusion == Fusion::Gate);
        }
    }

    #[test]
    fn tde_ignores_context_shift_under_sum() {
        let (m, data) = model_and_data(Fusion::Sum, 4);
        let mut shifted = m.clone();
        let shift = [0.7, -1.3, 2.0, 0.1, 0.0, 5.0, -0.4, 0.9, 1.1, -2.2, 0.3];
        let n = shifted.params.w_z.rows;
        for r in 0..n {
            shifted
                .params
                .w_z
                .row_mut(r)
                .iter_mut()
                .zip(shift)
                .for_each(|(v, s)| *v += s);
        }
        let img = &data.images[0];
        for task in [Task::PredCls, Task::SgCls] {
            let c0 = m.image_context(img, task).unwrap();
            let c1 = shifted.image_context(img, task).unwrap();
            for p in &img.pairs {
                let b0 = effect(EffectKind::Baseline, &m, &c0, p, task)
                    .unwrap()
                    .logits;
                let b1 = effect(EffectKind::Baseline, &shifted, &c1, p, task)
                    .unwrap()
                    .logits;
                assert!(b0.max_abs_diff(&b1) > 0.05);
                let t0 = effect(EffectKind::Tde, &m, &c0, p, task).unwrap().logits;
                let t1 = effect(EffectKind::Tde, &shifted, &c1, p, task)
                    .unwrap()
                    .logits;
                assert!(t0.max_abs_diff(&t1) < 1e-9);
            }
        }
    }

    #[test]
    fn trace_lists_defining_terms() {
        let (m, data) = model_and_data(Fusion::Gate, 5);
        let img = &data.images[0];
        let ctx = m.image_context(img, Task::SgCls).unwrap();
        let names = |k| {
            effect(k, &m, &ctx, &img.pairs[0], Task::SgCls)
                .unwrap()
                .trace
                .into_iter()
                .map(|t| (t.sign, t.term))
                .collect::<Vec<_>>()
        };
        let s = |v: &[(f64, &str)]| {
            v.iter()
                .map(|(a, b)| (*a, b.to_string()))
                .collect::<Vec<_>>()
        };
        assert_eq!(names(EffectKind::Baseline), s(&[(1.0, "Y_x(u)")]));
        assert_eq!(
            names(EffectKind::Tde),
            s(&[(1.0, "Y_x(u)"), (-1.0, "Y_{x̄,z}(u)")])
        );
        assert_eq!(
            names(EffectKind::Te),
            s(&[(1.0, "Y_x(u)"), (-1.0, "Y_{x̄,z̄}(u)")])
        );
        assert_eq!(
            names(EffectKind::Nie),
            s(&[(1.0, "Y_{x̄,z}(u)"), (-1.0, "Y_{x̄,z̄}(u)")])
        );
        assert_eq!(
            names(EffectKind::Tie),
            s(&[(1.0, "Y_x(u)"), (-1.0, "Y_{x,z̄}(u)")])
        );
        assert_eq!(
            names(EffectKind::Nde),
            s(&[(1.0, "Y_{x,z̄}(u)"), (-1.0, "Y_{x̄,z̄}(u)")])
        );
        assert_eq!(names(EffectKind::X2y), s(&[(1.0, "W_x x'(u)")]));
    }

    #[test]
    fn baseline_ranking_and_ties() {
        let (mut m, data) = model_and_data(Fusion::Sum, 6);
        let img = &data.images[0];
        let preds = unbiased_predict(&m, img, Task::PredCls, EffectKind::Baseline).unwrap();
        assert!(preds.is_canonical());
        let ctx = m.image_context(img, Task::PredCls).unwrap();
        let top = &preds.triplets[0];
        let pair = img
            .pairs
            .iter()
            .find(|p| p.subject_idx == top.subject_idx() && p.object_idx == top.object_idx())
            .unwrap();
        let y = m
            .forward(&ctx, pair, Scenario::OBSERVED, Task::PredCls)
            .unwrap();
        let probs = foreground_probabilities(&y);
        assert!((probs[top.predicate() - 1] - top.score()).abs() < 1e-15);

        // all-zero effect logits: every triplet ties, index rule decides
        let d = m.dims;
        m.params.w_x = Linear::zeros(d.n_predicates, d.d_p);
        m.params.w_v = Linear::zeros(d.n_predicates, d.d_v);
        m.params.w_z = Table::zeros(d.n_objects * d.n_objects, d.n_predicates);
        let preds = unbiased_predict(&m, img, Task::PredCls, EffectKind::Baseline).unwrap();
        let keys: Vec<_> = preds
            .triplets
            .iter()
            .map(|t| (t.subject_idx(), t.object_idx(), t.predicate()))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn unknown_kind_is_usage_error() {
        assert!(matches!("ate".parse::<EffectKind>(), Err(Error::Usage(_))));
        assert_eq!("TDE".parse::<EffectKind>().unwrap(), EffectKind::Tde);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn te_is_tde_plus_nie(seed in 0u64..1000, gate in any::<bool>(), shift in -3.0f64..3.0) {
            let fusion = if gate { Fusion::Gate } else { Fusion::Sum };
            let (m, data) = model_and_data(fusion, seed);
            let img = &data.images[(seed % 4) as usize];
            let mut pair = img.pairs[0].clone();
            pair.union_context.iter_mut().for_each(|v| *v += shift);
            let ctx = m.image_context(img, Task::SgCls).unwrap();
            let e = |k| effect(k, &m, &ctx, &pair, Task::SgCls).unwrap().logits;
            let (te, tde, nie) = (e(EffectKind::Te), e(EffectKind::Tde), e(EffectKind::Nie));
            for k in 0..te.len() {
                prop_assert!((te.0[k] - tde.0[k] - nie.0[k]).abs() < 1e-12);
            }
        }
    }
}
