//! The branch-structured predicate model over the causal graph
//! `I -> X -> Z -> Y`, `X -> Y`, `I -> Y`, with translation-style pair
//! features and SUM / GATE fusion.
//!
//! Every forward pass is evaluated under a [`Scenario`], which states the
//! value each node takes: observed or intervened pair features, and natural,
//! factual or mean object-label context.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, sigmoid, softmax, Linear};
use crate::rng::{self, tag};
use crate::synth::{ImageRecord, WorldConfig, CANVAS};
use crate::types::{DetectedObject, Logits, PairSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Sum,
    Gate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Ground-truth boxes and labels; the `X -> Z` link is blocked.
    #[serde(rename = "predcls")]
    PredCls,
    /// Ground-truth boxes, labels predicted from `x`.
    #[serde(rename = "sgcls")]
    SgCls,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::PredCls => "predcls",
            Task::SgCls => "sgcls",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "predcls" => Ok(Task::PredCls),
            "sgcls" => Ok(Task::SgCls),
            _ => Err(Error::Usage(format!("unknown task {s:?}"))),
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(Fusion::Sum),
            "gate" => Ok(Fusion::Gate),
            _ => Err(Error::Usage(format!("unknown fusion {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XMode {
    Observed,
    /// Both members of the pair replaced by the frozen baseline `x̄`.
    Intervened,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZMode {
    /// Recomputed from the scenario's `x` through the object classifier
    /// (ground truth in PredCls, where the link is blocked).
    Natural,
    /// Held at the labels the observed `x` produced.
    Factual,
    /// The unseen label context `z̄`: the joint embedding averaged under the
    /// training label marginal.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub x: XMode,
    pub z: ZMode,
}

impl Scenario {
    pub const OBSERVED: Scenario = Scenario {
        x: XMode::Observed,
        z: ZMode::Natural,
    };

    pub const fn new(x: XMode, z: ZMode) -> Self {
        Scenario { x, z }
    }

    /// Potential-outcome notation for reports, e.g. `Y_{x̄,z}(u)`.
    pub fn notation(&self) -> &'static str {
        match (self.x, self.z) {
            (XMode::Observed, ZMode::Natural) | (XMode::Observed, ZMode::Factual) => "Y_x(u)",
            (XMode::Observed, ZMode::Mean) => "Y_{x,z̄}(u)",
            (XMode::Intervened, ZMode::Factual) => "Y_{x̄,z}(u)",
            (XMode::Intervened, ZMode::Natural) => "Y_{x̄}(u)",
            (XMode::Intervened, ZMode::Mean) => "Y_{x̄,z̄}(u)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineSource {
    TrainingMean,
    Zero,
}

/// The intervention value `x̄` for object features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: Vec<f64>,
    pub source: BaselineSource,
}

/// Dense lookup table, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Table {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Table {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let n = Normal::new(0.0, std).expect("finite std");
        Table {
            rows,
            cols,
            data: (0..rows * cols).map(|_| n.sample(rng)).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// All trainable parameters. Gradients use the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// `I -> X`: `(r ‖ b/1024 ‖ onehot(l)) -> x`.
    pub object_encoder: Linear,
    /// `X -> Z`: `x -> object-class logits`.
    pub object_classifier: Linear,
    pub fc_subject: Linear,
    pub fc_object: Linear,
    /// `W_x`: pair feature -> logits.
    pub w_x: Linear,
    /// `W_v`: union context -> logits.
    pub w_v: Linear,
    /// `W_z`: joint label table with `N*N` rows.
    pub w_z: Table,
    /// `W_r`: pair feature -> gate logits (GATE only).
    pub w_r: Linear,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        let z = |l: &Linear| Linear::zeros(l.out, l.inp);
        Params {
            object_encoder: z(&self.object_encoder),
            object_classifier: z(&self.object_classifier),
            fc_subject: z(&self.fc_subject),
            fc_object: z(&self.fc_object),
            w_x: z(&self.w_x),
            w_v: z(&self.w_v),
            w_z: Table::zeros(self.w_z.rows, self.w_z.cols),
            w_r: z(&self.w_r),
        }
    }

    /// Named flat views over every parameter block.
    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("object_encoder.w", &mut self.object_encoder.w[..]),
            ("object_encoder.b", &mut self.object_encoder.b[..]),
            ("object_classifier.w", &mut self.object_classifier.w[..]),
            ("object_classifier.b", &mut self.object_classifier.b[..]),
            ("fc_subject.w", &mut self.fc_subject.w[..]),
            ("fc_subject.b", &mut self.fc_subject.b[..]),
            ("fc_object.w", &mut self.fc_object.w[..]),
            ("fc_object.b", &mut self.fc_object.b[..]),
            ("w_x.w", &mut self.w_x.w[..]),
            ("w_x.b", &mut self.w_x.b[..]),
            ("w_v.w", &mut self.w_v.w[..]),
            ("w_v.b", &mut self.w_v.b[..]),
            ("w_z", &mut self.w_z.data[..]),
            ("w_r.w", &mut self.w_r.w[..]),
            ("w_r.b", &mut self.w_r.b[..]),
        ]
    }

    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("object_encoder.w", &self.object_encoder.w[..]),
            ("object_encoder.b", &self.object_encoder.b[..]),
            ("object_classifier.w", &self.object_classifier.w[..]),
            ("object_classifier.b", &self.object_classifier.b[..]),
            ("fc_subject.w", &self.fc_subject.w[..]),
            ("fc_subject.b", &self.fc_subject.b[..]),
            ("fc_object.w", &self.fc_object.w[..]),
            ("fc_object.b", &self.fc_object.b[..]),
            ("w_x.w", &self.w_x.w[..]),
            ("w_x.b", &self.w_x.b[..]),
            ("w_v.w", &self.w_v.w[..]),
            ("w_v.b", &self.w_v.b[..]),
            ("w_z", &self.w_z.data[..]),
            ("w_r.w", &self.w_r.w[..]),
            ("w_r.b", &self.w_r.b[..]),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    /// `self -= lr * grad`.
    pub fn step(&mut self, grad: &Params, lr: f64) {
        let grads = grad.blocks();
        for ((_, p), (_, g)) in self.blocks_mut().into_iter().zip(grads) {
            crate::nn::axpy(-lr, g, p);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub n_objects: usize,
    pub n_predicates: usize,
    pub d_r: usize,
    pub d_x: usize,
    pub d_p: usize,
    pub d_v: usize,
}

impl Dims {
    pub fn from_world(w: &WorldConfig) -> Self {
        Dims {
            n_objects: w.n_object_classes,
            n_predicates: w.n_predicates,
            d_r: w.d_r,
            d_x: w.d_x,
            d_p: w.d_x,
            d_v: w.d_v,
        }
    }

    /// Width of the object-encoder input `r ‖ box ‖ onehot(l)`.
    pub fn encoder_input(&self) -> usize {
        self.d_r + 4 + self.n_objects
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalModel {
    pub dims: Dims,
    pub params: Params,
    pub fusion: Fusion,
    /// Task the model was trained for; recorded in checkpoints.
    pub task: Task,
    pub rectify_objects: bool,
    pub rectify_pair_branch: bool,
    /// Only the `X -> Y` branch produces logits (X2Y-Tr surgery).
    pub x_only: bool,
    /// Frozen `x̄`.
    pub baseline: Option<Baseline>,
    /// Training marginal over object labels, used to build `z̄`.
    pub label_marginal: Option<Vec<f64>>,
}

/// The three Logits-space branch terms plus the gate input.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchTerms {
    /// `W_x x'_e`
    pub x_term: Vec<f64>,
    /// `W_v v'_e`
    pub v_term: Vec<f64>,
    /// `z'_e`
    pub z_term: Vec<f64>,
    /// `W_r x'_e`
    pub gate_term: Vec<f64>,
}

/// Label context entering the joint embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelContext {
    Labels(usize, usize),
    /// A precomputed `z'_e` row, e.g. the `z̄` expectation.
    Embedded(Vec<f64>),
}

/// Per-image cache of the observed object features and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageContext {
    pub xs: Vec<Vec<f64>>,
    /// Labels `z_i` under the task (ground truth for PredCls).
    pub labels: Vec<usize>,
    /// Probability of `labels[i]` (1 for PredCls).
    pub label_probs: Vec<f64>,
}

impl CausalModel {
    /// Seeded Gaussian weights (std 0.02), zero biases.
    pub fn init(dims: Dims, fusion: Fusion, task: Task, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[tag::INIT]);
        let std = 0.02;
        let params = Params {
            object_encoder: Linear::gaussian(dims.d_x, dims.encoder_input(), std, &mut r),
            object_classifier: Linear::gaussian(dims.n_objects, dims.d_x, std, &mut r),
            fc_subject: Linear::gaussian(dims.d_p, dims.d_x, std, &mut r),
            fc_object: Linear::gaussian(dims.d_p, dims.d_x, std, &mut r),
            w_x: Linear::gaussian(dims.n_predicates, dims.d_p, std, &mut r),
            w_v: Linear::gaussian(dims.n_predicates, dims.d_v, std, &mut r),
            w_z: Table::gaussian(
                dims.n_objects * dims.n_objects,
                dims.n_predicates,
                std,
                &mut r,
            ),
            w_r: Linear::gaussian(dims.n_predicates, dims.d_p, std, &mut r),
        };
        CausalModel {
            dims,
            params,
            fusion,
            task,
            rectify_objects: false,
            rectify_pair_branch: false,
            x_only: false,
            baseline: None,
            label_marginal: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let p = &self.params;
        let shapes = [
            (
                "object_encoder",
                &p.object_encoder,
                d.d_x,
                d.encoder_input(),
            ),
            (
                "object_classifier",
                &p.object_classifier,
                d.n_objects,
                d.d_x,
            ),
            ("fc_subject", &p.fc_subject, d.d_p, d.d_x),
            ("fc_object", &p.fc_object, d.d_p, d.d_x),
            ("w_x", &p.w_x, d.n_predicates, d.d_p),
            ("w_v", &p.w_v, d.n_predicates, d.d_v),
            ("w_r", &p.w_r, d.n_predicates, d.d_p),
        ];
        for (name, l, out, inp) in shapes {
            if l.out != out || l.inp != inp || l.w.len() != out * inp || l.b.len() != out {
                return Err(Error::config(format!(
                    "{name} has shape {}x{}, expected {out}x{inp}",
                    l.out, l.inp
                )));
            }
        }
        if p.w_z.rows != d.n_objects * d.n_objects
            || p.w_z.cols != d.n_predicates
            || p.w_z.data.len() != p.w_z.rows * p.w_z.cols
        {
            return Err(Error::config("joint label table has the wrong shape"));
        }
        if !p.is_finite() {
            return Err(Error::Numeric("non-finite parameters".into()));
        }
        if let Some(b) = &self.baseline {
            if b.value.len() != d.d_x {
                return Err(Error::config("baseline dimension differs from d_x"));
            }
        }
        if let Some(m) = &self.label_marginal {
            if m.len() != d.n_objects {
                return Err(Error::config("label marginal has the wrong length"));
            }
        }
        Ok(())
    }

    /// Encoder input `r ‖ b/1024 ‖ onehot(l)`.
    pub fn encoder_input(&self, obj: &DetectedObject) -> Result<Vec<f64>> {
        let d = &self.dims;
        if obj.raw_feature.len() != d.d_r {
            return Err(Error::config(format!(
                "raw feature has {} components, model expects {}",
                obj.raw_feature.len(),
                d.d_r
            )));
        }
        if obj.tentative_label >= d.n_objects {
            return Err(Error::data(format!(
                "tentative label {} out of range",
                obj.tentative_label
            )));
        }
        let mut input = Vec::with_capacity(d.encoder_input());
        input.extend_from_slice(&obj.raw_feature);
        input.extend_from_slice(&obj.bbox.normalized(CANVAS));
        input.extend((0..d.n_objects).map(|c| if c == obj.tentative_label { 1.0 } else { 0.0 }));
        Ok(input)
    }

    /// Pre-rectification encoder output and the final `x_i`.
    pub(crate) fn encode_input(&self, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pre = self.params.object_encoder.forward(input);
        let mut x = pre.clone();
        if self.rectify_objects {
            crate::nn::relu_in_place(&mut x);
        }
        (pre, x)
    }

    pub fn encode_object(&self, obj: &DetectedObject) -> Result<Vec<f64>> {
        Ok(self.encode_input(&self.encoder_input(obj)?).1)
    }

    /// `I -> X` for every object.
    pub fn encode_objects(&self, objects: &[DetectedObject]) -> Result<Vec<Vec<f64>>> {
        objects.iter().map(|o| self.encode_object(o)).collect()
    }

    /// Like [`Self::encode_objects`] but also stores `x_i` and `z_i` on the objects.
    pub fn annotate_objects(&self, objects: &mut [DetectedObject]) -> Result<()> {
        for o in objects.iter_mut() {
            let x = self.encode_object(o)?;
            let (logits, label) = self.classify(&x);
            debug_assert_eq!(logits.len(), self.dims.n_objects);
            o.refined_label = Some(label);
            o.context_feature = Some(x);
        }
        Ok(())
    }

    /// `X -> Z` for one object: class logits and the argmax label (lowest index on ties).
    pub fn classify(&self, x: &[f64]) -> (Vec<f64>, usize) {
        let logits = self.params.object_classifier.forward(x);
        let label = argmax(&logits);
        (logits, label)
    }

    /// Object logits and labels. With `gt_labels` (PredCls) the labels are
    /// taken verbatim and the classifier output does not influence them.
    pub fn classify_objects(
        &self,
        xs: &[Vec<f64>],
        gt_labels: Option<&[usize]>,
    ) -> (Vec<Vec<f64>>, Vec<usize>) {
        let (logits, predicted): (Vec<_>, Vec<_>) = xs.iter().map(|x| self.classify(x)).unzip();
        let labels = match gt_labels {
            Some(gt) => gt.to_vec(),
            None => predicted,
        };
        (logits, labels)
    }

    /// `x'_e = FC_o(x_i) - FC_s(x_j)` for subject `i`, object `j`.
    /// Returns the pre-rectification value as well.
    pub(crate) fn pair_feature_pre(
        &self,
        x_subject: &[f64],
        x_object: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let a = self.params.fc_object.forward(x_subject);
        let b = self.params.fc_subject.forward(x_object);
        let pre: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a - b).collect();
        let mut out = pre.clone();
        if self.rectify_pair_branch {
            crate::nn::relu_in_place(&mut out);
        }
        (pre, out)
    }

    pub fn pair_feature(&self, x_subject: &[f64], x_object: &[f64]) -> Vec<f64> {
        self.pair_feature_pre(x_subject, x_object).1
    }

    /// `z'_e = W_z[z_i ⊗ z_j]`, i.e. row `z_i * N + z_j`.
    pub fn pair_class_embed(&self, z_subject: usize, z_object: usize) -> Vec<f64> {
        self.params
            .w_z
            .row(z_subject * self.dims.n_objects + z_object)
            .to_vec()
    }

    /// Expected joint embedding under the training label marginal.
    pub fn mean_class_embed(&self) -> Result<Vec<f64>> {
        let q = self
            .label_marginal
            .as_ref()
            .ok_or_else(|| Error::config("model has no frozen label marginal"))?;
        let n = self.dims.n_objects;
        let mut out = vec![0.0; self.dims.n_predicates];
        for a in 0..n {
            for b in 0..n {
                let w = q[a] * q[b];
                if w != 0.0 {
                    crate::nn::axpy(w, self.params.w_z.row(a * n + b), &mut out);
                }
            }
        }
        Ok(out)
    }

    pub fn branch_terms(
        &self,
        x_pair: &[f64],
        union_context: &[f64],
        z: &LabelContext,
    ) -> BranchTerms {
        let z_term = match z {
            LabelContext::Labels(a, b) => self.pair_class_embed(*a, *b),
            LabelContext::Embedded(row) => row.clone(),
        };
        BranchTerms {
            x_term: self.params.w_x.forward(x_pair),
            v_term: self.params.w_v.forward(union_context),
            z_term,
            gate_term: match self.fusion {
                Fusion::Gate => self.params.w_r.forward(x_pair),
                Fusion::Sum => Vec::new(),
            },
        }
    }

    pub fn fuse_terms(&self, t: &BranchTerms) -> Logits {
        if self.x_only {
            return Logits(t.x_term.clone());
        }
        let sum: Vec<f64> = t
            .x_term
            .iter()
            .zip(&t.v_term)
            .zip(&t.z_term)
            .map(|((a, b), c)| a + b + c)
            .collect();
        match self.fusion {
            Fusion::Sum => Logits(sum),
            Fusion::Gate => Logits(fuse_gate(&t.gate_term, &sum)),
        }
    }

    /// Observed features and task labels for one image.
    pub fn image_context(&self, image: &ImageRecord, task: Task) -> Result<ImageContext> {
        let xs = self.encode_objects(&image.objects)?;
        let (label_probs, labels) = match task {
            Task::PredCls => (vec![1.0; xs.len()], image.gt_labels()),
            Task::SgCls => xs
                .iter()
                .map(|x| {
                    let (logits, label) = self.classify(x);
                    (softmax(&logits)[label], label)
                })
                .unzip(),
        };
        Ok(ImageContext {
            xs,
            labels,
            label_probs,
        })
    }

    /// Predicate logits for `pair` under `scenario`.
    pub fn forward(
        &self,
        ctx: &ImageContext,
        pair: &PairSample,
        scenario: Scenario,
        task: Task,
    ) -> Result<Logits> {
        Ok(self.fuse_terms(&self.scenario_terms(ctx, pair, scenario, task)?))
    }

    pub fn scenario_terms(
        &self,
        ctx: &ImageContext,
        pair: &PairSample,
        scenario: Scenario,
        task: Task,
    ) -> Result<BranchTerms> {
        let (i, j) = (pair.subject_idx, pair.object_idx);
        if i >= ctx.xs.len() || j >= ctx.xs.len() || i == j {
            return Err(Error::data(format!("bad pair ({i}, {j})")));
        }
        if pair.union_context.len() != self.dims.d_v {
            return Err(Error::config("union context dimension differs from d_v"));
        }
        let (xs, xo) = match scenario.x {
            XMode::Observed => (&ctx.xs[i][..], &ctx.xs[j][..]),
            XMode::Intervened => {
                let b = self
                    .baseline
                    .as_ref()
                    .ok_or_else(|| Error::config("model has no frozen baseline x̄"))?;
                (&b.value[..], &b.value[..])
            }
        };
        let z = match scenario.z {
            ZMode::Factual => LabelContext::Labels(ctx.labels[i], ctx.labels[j]),
            ZMode::Natural => match (task, scenario.x) {
                (Task::PredCls, _) | (Task::SgCls, XMode::Observed) => {
                    LabelContext::Labels(ctx.labels[i], ctx.labels[j])
                }
                (Task::SgCls, XMode::Intervened) => {
                    LabelContext::Labels(self.classify(xs).1, self.classify(xo).1)
                }
            },
            ZMode::Mean => LabelContext::Embedded(self.mean_class_embed()?),
        };
        let x_pair = self.pair_feature(xs, xo);
        Ok(self.branch_terms(&x_pair, &pair.union_context, &z))
    }

    /// Mean encoded feature over every object of `images`.
    pub fn mean_object_feature<'a>(
        &self,
        images: impl IntoIterator<Item = &'a ImageRecord>,
    ) -> Result<Vec<f64>> {
        let mut sum = vec![0.0; self.dims.d_x];
        let mut n = 0usize;
        for img in images {
            for o in &img.objects {
                crate::nn::axpy(1.0, &self.encode_object(o)?, &mut sum);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::data("no objects to average"));
        }
        Ok(sum.into_iter().map(|v| v / n as f64).collect())
    }

    /// Freezes `x̄` and the label marginal from the training images.
    pub fn freeze_counterfactuals<'a>(
        &mut self,
        images: impl IntoIterator<Item = &'a ImageRecord> + Clone,
        source: BaselineSource,
    ) -> Result<()> {
        let value = match source {
            BaselineSource::TrainingMean => self.mean_object_feature(images.clone())?,
            BaselineSource::Zero => vec![0.0; self.dims.d_x],
        };
        let mut counts = vec![0.0; self.dims.n_objects];
        for img in images {
            for e in &img.graph.entities {
                counts[e.class] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        if total == 0.0 {
            return Err(Error::data("no labels to build the marginal"));
        }
        self.baseline = Some(Baseline { value, source });
        self.label_marginal = Some(counts.into_iter().map(|c| c / total).collect());
        Ok(())
    }
}

/// `g ⊙ σ(s)` elementwise.
pub fn fuse_gate(gate: &[f64], sum: &[f64]) -> Vec<f64> {
    gate.iter().zip(sum).map(|(g, s)| g * sigmoid(*s)).collect()
}

/// SUM fusion of already-computed Logits-space terms.
pub fn fuse_sum(x_term: &[f64], v_term: &[f64], z_term: &[f64]) -> Vec<f64> {
    x_term
        .iter()
        .zip(v_term)
        .zip(z_term)
        .map(|((a, b), c)| a + b + c)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, WorldConfig};
    use crate::types::BoundingBox;

    fn dims() -> Dims {
        Dims {
            n_objects: 15,
            n_predicates: 5,
            d_r: 6,
            d_x: 6,
            d_p: 6,
            d_v: 4,
        }
    }

    fn object(raw: Vec<f64>, label: usize) -> DetectedObject {
        DetectedObject {
            bbox: BoundingBox::new(0.0, 0.0, 512.0, 256.0).unwrap(),
            raw_feature: raw,
            tentative_label: label,
            context_feature: None,
            refined_label: None,
        }
    }

    fn seeded_model(fusion: Fusion) -> CausalModel {
        let mut m = CausalModel::init(dims(), fusion, Task::SgCls, 7);
        // larger weights so that regression values are not all ~0
        m.params
            .blocks_mut()
            .into_iter()
            .for_each(|(_, b)| b.iter_mut().for_each(|v| *v *= 25.0));
        m
    }

    #[test]
    fn zero_encoder_gives_zero_features() {
        let mut m = CausalModel::init(dims(), Fusion::Sum, Task::PredCls, 1);
        m.params.object_encoder = Linear::zeros(6, dims().encoder_input());
        let xs = m
            .encode_objects(&[object(vec![1.0; 6], 2), object(vec![-3.0; 6], 4)])
            .unwrap();
        assert!(xs.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_block_encoder_copies_raw_features() {
        let mut m = CausalModel::init(dims(), Fusion::Sum, Task::PredCls, 1);
        let inp = dims().encoder_input();
        let mut enc = Linear::zeros(6, inp);
        for i in 0..6 {
            enc.w[i * inp + i] = 1.0;
        }
        m.params.object_encoder = enc;
        let raw = vec![0.5, -1.0, 2.0, 3.0, -4.0, 0.25];
        assert_eq!(m.encode_object(&object(raw.clone(), 3)).unwrap(), raw);
    }

    #[test]
    fn encoder_rejects_dimension_mismatch() {
        let m = CausalModel::init(dims(), Fusion::Sum, Task::PredCls, 1);
        assert!(matches!(
            m.encode_object(&object(vec![0.0; 3], 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn encoder_regression() {
        let m = seeded_model(Fusion::Sum);
        let x = m
            .encode_object(&object(vec![1.0, -0.5, 0.25, 2.0, 0.0, -1.0], 3))
            .unwrap();
        let frozen = [
            0.3102726528280768,
            -1.9892940083995843,
            1.7940777293434742,
            -1.4057642725155062,
            -0.48473275834952384,
            1.2537452213974456,
        ];
        for (a, b) in x.iter().zip(frozen) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_ties_and_blocking() {
        let mut m = CausalModel::init(dims(), Fusion::Sum, Task::PredCls, 1);
        m.params.object_classifier = Linear::zeros(15, 6);
        let (_, label) = m.classify(&[1.0; 6]);
        assert_eq!(label, 0);
        let xs = vec![vec![0.3; 6], vec![-0.2; 6]];
        let (_, labels) = m.classify_objects(&xs, Some(&[3, 7]));
        assert_eq!(labels, vec![3, 7]);
    }

    #[test]
    fn classifier_regression() {
        let m = seeded_model(Fusion::Sum);
        let xs = vec![
            vec![1.0, 0.0, -1.0, 0.5, 0.5, 2.0],
            vec![-2.0, 1.0, 0.0, 0.0, 1.5, -0.5],
        ];
        let (_, labels) = m.classify_objects(&xs, None);
        assert_eq!(labels, vec![0, 12]);
    }

    #[test]
    fn pair_feature_cases() {
        let mut m = CausalModel::init(dims(), Fusion::Sum, Task::PredCls, 1);
        m.params.fc_object = Linear::identity(6);
        m.params.fc_subject = Linear::identity(6);
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert!(m.pair_feature(&x, &x).iter().all(|v| *v == 0.0));
        m.params.fc_subject = Linear::zeros(6, 6);
        assert_eq!(m.pair_feature(&x, &[9.0; 6]), x.to_vec());
    }

    #[test]
    fn pair_feature_regression() {
        let m = seeded_model(Fusion::Sum);
        let v = m.pair_feature(
            &[1.0, 0.0, -1.0, 0.5, 0.5, 2.0],
            &[0.0, 1.0, 1.0, -1.0, 0.0, 0.5],
        );
        let frozen = [
            -3.7531129385491053,
            0.7293992425188691,
            -1.6244671928367531,
            -2.188879990760809,
            -0.24986506426754712,
            -0.2168969597717451,
        ];
        for (a, b) in v.iter().zip(frozen) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_table_lookup() {
        let mut m = CausalModel::init(dims(), Fusion::Sum, Task::PredCls, 1);
        m.params.w_z = Table::zeros(225, 5);
        assert!(m.pair_class_embed(3, 7).iter().all(|v| *v == 0.0));
        m.params.w_z.row_mut(3 * 15 + 7)[2] = 1.0;
        assert_eq!(m.pair_class_embed(3, 7), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(3 * 15 + 7, 52);
    }

    #[test]
    fn fusion_cases() {
        assert_eq!(
            fuse_sum(&[1.0, 2.0], &[0.0, 0.0], &[-1.0, 3.0]),
            vec![0.0, 5.0]
        );
        assert_eq!(fuse_gate(&[2.0, 2.0], &[0.0, 0.0]), vec![1.0, 1.0]);
        let g = fuse_gate(&[1.0, 1.0], &[3f64.ln(), -(3f64.ln())]);
        // oracle: 1 / (1 + e^{-ln 3}) = 3/4
        assert!((g[0] - 0.75).abs() < 1e-15 && (g[1] - 0.25).abs() < 1e-15);
    }

    fn trained_like(fusion: Fusion) -> (CausalModel, crate::synth::ImageRecord) {
        let (train, _, _) = generate_dataset(&WorldConfig::default(), 5, 1, 1).unwrap();
        let mut m = CausalModel::init(Dims::from_world(&train.world), fusion, Task::SgCls, 3);
        m.params
            .blocks_mut()
            .into_iter()
            .for_each(|(_, b)| b.iter_mut().for_each(|v| *v *= 30.0));
        m.freeze_counterfactuals(&train.images, BaselineSource::TrainingMean)
            .unwrap();
        (m, train.images[0].clone())
    }

    #[test]
    fn sum_counterfactual_cancels_context_branches() {
        let (m, img) = trained_like(Fusion::Sum);
        for task in [Task::PredCls, Task::SgCls] {
            let ctx = m.image_context(&img, task).unwrap();
            for pair in &img.pairs {
                let fact = m.forward(&ctx, pair, Scenario::OBSERVED, task).unwrap();
                let cf = m
                    .forward(
                        &ctx,
                        pair,
                        Scenario::new(XMode::Intervened, ZMode::Factual),
                        task,
                    )
                    .unwrap();
                let xb = &m.baseline.as_ref().unwrap().value;
                let x_obs = m
                    .params
                    .w_x
                    .forward(&m.pair_feature(&ctx.xs[pair.subject_idx], &ctx.xs[pair.object_idx]));
                let x_bar = m.params.w_x.forward(&m.pair_feature(xb, xb));
                let diff = fact.sub(&cf);
                for k in 0..diff.len() {
                    assert!((diff.0[k] - (x_obs[k] - x_bar[k])).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn scenario_locality() {
        let (m, img) = trained_like(Fusion::Gate);
        let ctx = m.image_context(&img, Task::SgCls).unwrap();
        let pair = &img.pairs[0];
        let mut moved = pair.clone();
        moved.union_context.iter_mut().for_each(|v| *v += 3.0);
        let a = m
            .scenario_terms(&ctx, pair, Scenario::OBSERVED, Task::SgCls)
            .unwrap();
        let b = m
            .scenario_terms(&ctx, &moved, Scenario::OBSERVED, Task::SgCls)
            .unwrap();
        assert_eq!(a.x_term, b.x_term);
        assert_eq!(a.z_term, b.z_term);
        assert_ne!(a.v_term, b.v_term);
        // x changes under fixed z leave z' untouched
        let c = m
            .scenario_terms(
                &ctx,
                pair,
                Scenario::new(XMode::Intervened, ZMode::Factual),
                Task::SgCls,
            )
            .unwrap();
        assert_eq!(a.z_term, c.z_term);
    }

    #[test]
    fn predcls_ignores_object_classifier() {
        let (mut m, img) = trained_like(Fusion::Gate);
        let ctx = m.image_context(&img, Task::PredCls).unwrap();
        let before: Vec<_> = img
            .pairs
            .iter()
            .map(|p| {
                m.forward(&ctx, p, Scenario::OBSERVED, Task::PredCls)
                    .unwrap()
            })
            .collect();
        let mut r = rng::stream(99, &[]);
        m.params.object_classifier = Linear::gaussian(15, 32, 5.0, &mut r);
        let ctx = m.image_context(&img, Task::PredCls).unwrap();
        for (p, b) in img.pairs.iter().zip(before) {
            assert_eq!(
                m.forward(&ctx, p, Scenario::OBSERVED, Task::PredCls)
                    .unwrap(),
                b
            );
        }
    }

    #[test]
    fn sum_fusion_is_additive_in_x_term() {
        let m = seeded_model(Fusion::Sum);
        let xp = vec![0.3, -0.2, 0.1, 0.0, 0.5, 1.0];
        let v = vec![1.0, 2.0, -1.0, 0.5];
        let t = m.branch_terms(&xp, &v, &LabelContext::Labels(1, 2));
        let mut t2 = t.clone();
        let delta = [0.5, -1.0, 0.25, 2.0, 0.0];
        t2.x_term.iter_mut().zip(delta).for_each(|(a, d)| *a += d);
        let diff = m.fuse_terms(&t2).sub(&m.fuse_terms(&t));
        for (a, d) in diff.0.iter().zip(delta) {
            assert!((a - d).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (m, img) = trained_like(Fusion::Gate);
        let ctx = m.image_context(&img, Task::SgCls).unwrap();
        let a = m
            .forward(&ctx, &img.pairs[0], Scenario::OBSERVED, Task::SgCls)
            .unwrap();
        let b = m
            .forward(&ctx, &img.pairs[0], Scenario::OBSERVED, Task::SgCls)
            .unwrap();
        let bits = |l: &Logits| l.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
