//! Mini-batch SGD over pair samples with auxiliary per-branch losses, the
//! conventional debiasing variants, and a finite-difference gradient check.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::effects::{predict_dataset, EffectKind};
use crate::error::{Error, Result};
use crate::loss::{class_weights_inverse_fraction, cross_entropy_grad, PredicateLoss};
use crate::metrics::{gt_images, mean_recall_at_k};
use crate::model::{BaselineSource, CausalModel, Fusion, Params};
use crate::nn::sigmoid;
use crate::rng::{self, tag};
use crate::synth::Dataset;
use crate::types::BACKGROUND;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebiasMode {
    None,
    Focal,
    Reweight,
    Resample,
    X2yTr,
}

impl DebiasMode {
    pub fn name(self) -> &'static str {
        match self {
            DebiasMode::None => "none",
            DebiasMode::Focal => "focal",
            DebiasMode::Reweight => "reweight",
            DebiasMode::Resample => "resample",
            DebiasMode::X2yTr => "x2y_tr",
        }
    }
}

impl std::str::FromStr for DebiasMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(DebiasMode::None),
            "focal" => Ok(DebiasMode::Focal),
            "reweight" => Ok(DebiasMode::Reweight),
            "resample" => Ok(DebiasMode::Resample),
            "x2y_tr" | "x2ytr" => Ok(DebiasMode::X2yTr),
            _ => Err(Error::Usage(format!("unknown debias mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub max_lr_decays: usize,
    /// Epochs without validation mR@50 improvement before a decay.
    pub plateau_patience: usize,
    pub aux_loss_weight: f64,
    pub debias_mode: DebiasMode,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub baseline_source: BaselineSource,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 12,
            learning_rate: 0.12,
            lr_decay_factor: 10.0,
            max_lr_decays: 2,
            plateau_patience: 3,
            aux_loss_weight: 1.0,
            debias_mode: DebiasMode::None,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            baseline_source: BaselineSource::TrainingMean,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate must be finite and non-negative",
            ));
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor < 1.0 {
            return Err(Error::config("lr_decay_factor must be at least 1"));
        }
        if !(self.aux_loss_weight >= 0.0 && self.aux_loss_weight.is_finite()) {
            return Err(Error::config(
                "aux_loss_weight must be finite and non-negative",
            ));
        }
        if self.debias_mode == DebiasMode::Focal
            && !(self.focal_gamma >= 0.0 && self.focal_alpha > 0.0 && self.focal_alpha <= 1.0)
        {
            return Err(Error::config(
                "focal loss needs gamma >= 0 and alpha in (0, 1]",
            ));
        }
        Ok(())
    }
}

/// Mean loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub predicate_ce: f64,
    pub object_ce: f64,
    pub aux_x: f64,
    pub aux_v: f64,
    pub aux_z: f64,
}

impl LossReport {
    pub fn total(&self, aux_weight: f64) -> f64 {
        self.predicate_ce + self.object_ce + aux_weight * (self.aux_x + self.aux_v + self.aux_z)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.predicate_ce,
            self.object_ce,
            self.aux_x,
            self.aux_v,
            self.aux_z,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    fn add_scaled(&mut self, o: &LossReport, s: f64) {
        self.predicate_ce += s * o.predicate_ce;
        self.object_ce += s * o.object_ce;
        self.aux_x += s * o.aux_x;
        self.aux_v += s * o.aux_v;
        self.aux_z += s * o.aux_z;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub loss: LossReport,
    pub val_mean_recall_50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    pub lr_decays: usize,
}

/// One pair sample of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairRef {
    pub image: usize,
    pub pair: usize,
    pub predicate: usize,
}

pub fn pair_refs(data: &Dataset) -> Vec<PairRef> {
    data.images
        .iter()
        .enumerate()
        .flat_map(|(i, img)| {
            img.pairs.iter().enumerate().map(move |(p, s)| PairRef {
                image: i,
                pair: p,
                predicate: s.gt_predicate,
            })
        })
        .collect()
}

/// Foreground pairs of predicate `k` repeated `round(max(1, c_max / c_k))`
/// times (at most 20), background pairs once, then shuffled.
pub fn resample_schedule(pairs: &[PairRef], counts: &[usize], seed: u64) -> Vec<PairRef> {
    let c_max = counts.iter().skip(1).copied().max().unwrap_or(0) as f64;
    let repeats: Vec<usize> = counts
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            if k == BACKGROUND || c == 0 {
                1
            } else {
                ((c_max / c as f64).max(1.0).round() as usize).min(20)
            }
        })
        .collect();
    let mut out: Vec<PairRef> = pairs
        .iter()
        .flat_map(|p| std::iter::repeat_n(*p, repeats.get(p.predicate).copied().unwrap_or(1)))
        .collect();
    out.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE]));
    out
}

/// How the fused predicate logits are scored, derived from the debias mode.
pub fn predicate_loss_for(cfg: &TrainConfig, train: &Dataset) -> PredicateLoss {
    match cfg.debias_mode {
        DebiasMode::Focal => PredicateLoss::Focal {
            gamma: cfg.focal_gamma,
            alpha: cfg.focal_alpha,
        },
        DebiasMode::Reweight => PredicateLoss::Weighted {
            weights: class_weights_inverse_fraction(&train.predicate_counts()),
        },
        DebiasMode::None | DebiasMode::Resample | DebiasMode::X2yTr => PredicateLoss::CrossEntropy,
    }
}

/// Loss of one pair sample. With `grad`, accumulates `scale * dL/dθ`.
pub fn pair_loss(
    model: &CausalModel,
    data: &Dataset,
    r: PairRef,
    loss: &PredicateLoss,
    aux_weight: f64,
    grad: Option<(&mut Params, f64)>,
) -> Result<LossReport> {
    let img = data
        .images
        .get(r.image)
        .ok_or_else(|| Error::data(format!("image {} out of range", r.image)))?;
    let pair = img
        .pairs
        .get(r.pair)
        .ok_or_else(|| Error::data(format!("pair {} out of range", r.pair)))?;
    let (i, j) = (pair.subject_idx, pair.object_idx);
    if i >= img.objects.len() || j >= img.objects.len() || i == j {
        return Err(Error::data(format!(
            "bad pair ({i}, {j}) in {}",
            img.image_id
        )));
    }
    let p = &model.params;
    let labels = [img.graph.entities[i].class, img.graph.entities[j].class];
    let inputs = [
        model.encoder_input(&img.objects[i])?,
        model.encoder_input(&img.objects[j])?,
    ];
    let enc: Vec<(Vec<f64>, Vec<f64>)> = inputs.iter().map(|u| model.encode_input(u)).collect();
    let (xs, xo) = (&enc[0].1, &enc[1].1);

    let mut report = LossReport::default();
    let mut d_obj_logits = Vec::with_capacity(2);
    for (e, label) in enc.iter().zip(labels) {
        let (l, g) = cross_entropy_grad(&p.object_classifier.forward(&e.1), label);
        report.object_ce += 0.5 * l;
        d_obj_logits.push(g);
    }

    let (pair_pre, xp) = model.pair_feature_pre(xs, xo);
    let target = pair.gt_predicate;
    let t_x = p.w_x.forward(&xp);
    let n = model.dims.n_predicates;
    let mut d_tx = vec![0.0; n];
    let mut d_tv = vec![0.0; n];
    let mut d_tz = vec![0.0; n];
    let mut d_gate = Vec::new();
    let zrow = labels[0] * model.dims.n_objects + labels[1];

    if model.x_only {
        let (l, g) = loss.value_and_grad(&t_x, target);
        report.predicate_ce = l;
        d_tx = g;
    } else {
        let t_v = p.w_v.forward(&pair.union_context);
        let t_z = p.w_z.row(zrow);
        let s: Vec<f64> = (0..n).map(|k| t_x[k] + t_v[k] + t_z[k]).collect();
        let (l, dy) = match model.fusion {
            Fusion::Sum => loss.value_and_grad(&s, target),
            Fusion::Gate => {
                let gate = p.w_r.forward(&xp);
                let sig: Vec<f64> = s.iter().map(|v| sigmoid(*v)).collect();
                let y: Vec<f64> = (0..n).map(|k| gate[k] * sig[k]).collect();
                let (l, dy) = loss.value_and_grad(&y, target);
                d_gate = (0..n).map(|k| dy[k] * sig[k]).collect();
                let ds = (0..n)
                    .map(|k| dy[k] * gate[k] * sig[k] * (1.0 - sig[k]))
                    .collect();
                (l, ds)
            }
        };
        report.predicate_ce = l;
        let (lx, gx) = cross_entropy_grad(&t_x, target);
        let (lv, gv) = cross_entropy_grad(&t_v, target);
        let (lz, gz) = cross_entropy_grad(t_z, target);
        report.aux_x = lx;
        report.aux_v = lv;
        report.aux_z = lz;
        for k in 0..n {
            d_tx[k] = dy[k] + aux_weight * gx[k];
            d_tv[k] = dy[k] + aux_weight * gv[k];
            d_tz[k] = dy[k] + aux_weight * gz[k];
        }
    }

    let Some((g, scale)) = grad else {
        return Ok(report);
    };
    let sc = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x *= scale);
    sc(&mut d_tx);
    let mut d_xp = vec![0.0; model.dims.d_p];
    p.w_x.backward(&xp, &d_tx, &mut g.w_x, Some(&mut d_xp));
    if !model.x_only {
        sc(&mut d_tv);
        sc(&mut d_tz);
        p.w_v.backward(&pair.union_context, &d_tv, &mut g.w_v, None);
        crate::nn::axpy(1.0, &d_tz, g.w_z.row_mut(zrow));
        if model.fusion == Fusion::Gate {
            sc(&mut d_gate);
            p.w_r.backward(&xp, &d_gate, &mut g.w_r, Some(&mut d_xp));
        }
    }
    if model.rectify_pair_branch {
        for (d, pre) in d_xp.iter_mut().zip(&pair_pre) {
            if *pre <= 0.0 {
                *d = 0.0;
            }
        }
    }
    let mut d_x = [vec![0.0; model.dims.d_x], vec![0.0; model.dims.d_x]];
    p.fc_object
        .backward(xs, &d_xp, &mut g.fc_object, Some(&mut d_x[0]));
    let neg: Vec<f64> = d_xp.iter().map(|v| -v).collect();
    p.fc_subject
        .backward(xo, &neg, &mut g.fc_subject, Some(&mut d_x[1]));
    for e in 0..2 {
        let dl: Vec<f64> = d_obj_logits[e].iter().map(|v| 0.5 * scale * v).collect();
        p.object_classifier
            .backward(&enc[e].1, &dl, &mut g.object_classifier, Some(&mut d_x[e]));
        if model.rectify_objects {
            for (d, pre) in d_x[e].iter_mut().zip(&enc[e].0) {
                if *pre <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        p.object_encoder
            .backward(&inputs[e], &d_x[e], &mut g.object_encoder, None);
    }
    Ok(report)
}

/// Mean loss over `batch`; with `grad`, accumulates the mean gradient.
pub fn batch_loss(
    model: &CausalModel,
    data: &Dataset,
    batch: &[PairRef],
    loss: &PredicateLoss,
    aux_weight: f64,
    mut grad: Option<&mut Params>,
) -> Result<LossReport> {
    let s = 1.0 / batch.len().max(1) as f64;
    let mut out = LossReport::default();
    for r in batch {
        let g = grad.as_deref_mut().map(|g| (g, s));
        out.add_scaled(&pair_loss(model, data, *r, loss, aux_weight, g)?, s);
    }
    Ok(out)
}

/// Validation mR@50 of the biased (`BASELINE`) predictions in the model's task.
pub fn validation_mean_recall(model: &CausalModel, val: &Dataset) -> Result<f64> {
    let preds = predict_dataset(model, val, model.task, EffectKind::Baseline)?;
    Ok(mean_recall_at_k(&preds, &gt_images(val), 50, val.world.n_predicates, true).mean)
}

/// Trains `model` in place and freezes `x̄` and the label marginal afterwards.
pub fn train(
    model: &mut CausalModel,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    model.validate()?;
    if train.images.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    model.x_only = cfg.debias_mode == DebiasMode::X2yTr;
    let loss = predicate_loss_for(cfg, train);
    let pairs = pair_refs(train);
    let counts = train.predicate_counts();
    let mut lr = cfg.learning_rate;
    let mut decays = 0;
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut grad = model.params.zeros_like();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = match cfg.debias_mode {
            DebiasMode::Resample => {
                resample_schedule(&pairs, &counts, rng::derive(cfg.seed, &[epoch as u64]))
            }
            _ => {
                let mut o = pairs.clone();
                o.shuffle(&mut rng::stream(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
                o
            }
        };
        let mut sum = LossReport::default();
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            grad.blocks_mut()
                .into_iter()
                .for_each(|(_, b)| b.iter_mut().for_each(|v| *v = 0.0));
            let rep = batch_loss(
                model,
                train,
                batch,
                &loss,
                cfg.aux_loss_weight,
                Some(&mut grad),
            )?;
            if !rep.is_finite() || !grad.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged at epoch {epoch}, step {steps}"
                )));
            }
            model.params.step(&grad, lr);
            sum.add_scaled(&rep, 1.0);
            steps += 1;
        }
        if !model.params.is_finite() {
            return Err(Error::Numeric(format!(
                "parameters diverged at epoch {epoch}"
            )));
        }
        let mut mean = LossReport::default();
        mean.add_scaled(&sum, 1.0 / steps.max(1) as f64);

        let val_mr = match val {
            Some(v) if !v.images.is_empty() => Some(validation_mean_recall(model, v)?),
            _ => None,
        };
        epochs.push(EpochLog {
            epoch,
            learning_rate: lr,
            steps,
            loss: mean,
            val_mean_recall_50: val_mr,
        });
        if let Some(m) = val_mr {
            if m > best {
                best = m;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.plateau_patience && decays < cfg.max_lr_decays {
                    lr /= cfg.lr_decay_factor;
                    decays += 1;
                    stale = 0;
                }
            }
        }
    }
    model.freeze_counterfactuals(&train.images, cfg.baseline_source)?;
    Ok(TrainLog {
        config: cfg.clone(),
        epochs,
        lr_decays: decays,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_block: String,
    pub coordinates_checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`. The floor sits above the round-off of
/// `h = 1e-4` central differences on losses of order 100 (about 1e-10), so
/// an exactly cancelling gradient does not read as a relative error of 1.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences (`h = 1e-4`) against the analytic gradient of the
/// mean batch loss, over `coords_per_block` random coordinates of every
/// parameter block (all coordinates if the block is smaller). Relative
/// error is [`relative_error`].
pub fn gradient_check(
    model: &CausalModel,
    data: &Dataset,
    batch: &[PairRef],
    loss: &PredicateLoss,
    aux_weight: f64,
    coords_per_block: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let h = 1e-4;
    let mut analytic = model.params.zeros_like();
    batch_loss(model, data, batch, loss, aux_weight, Some(&mut analytic))?;
    let objective = |m: &CausalModel| -> Result<f64> {
        Ok(batch_loss(m, data, batch, loss, aux_weight, None)?.total(aux_weight))
    };
    let mut probe = model.clone();
    let mut r = rng::stream(seed, &[]);
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let names: Vec<(&'static str, usize)> = model
        .params
        .blocks()
        .iter()
        .map(|(n, b)| (*n, b.len()))
        .collect();
    for (bi, (name, len)) in names.iter().enumerate() {
        let idx: Vec<usize> = if *len <= coords_per_block {
            (0..*len).collect()
        } else {
            (0..coords_per_block)
                .map(|_| r.random_range(0..*len))
                .collect()
        };
        for c in idx {
            let orig = probe.params.blocks()[bi].1[c];
            probe.params.blocks_mut()[bi].1[c] = orig + h;
            let up = objective(&probe)?;
            probe.params.blocks_mut()[bi].1[c] = orig - h;
            let down = objective(&probe)?;
            probe.params.blocks_mut()[bi].1[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.blocks()[bi].1[c];
            let rel = relative_error(a, numeric);
            if !rel.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
            if rel > worst.0 || worst.1.is_empty() {
                worst = (rel.max(worst.0), name.to_string());
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_block: worst.1,
        coordinates_checked: checked,
    })
}
