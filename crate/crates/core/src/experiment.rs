//! The end-to-end pipeline: generate, train every debias mode, evaluate each
//! (method, task) cell, run retrieval, and write a byte-deterministic bundle.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::effects::{predict_dataset, prior_predict, EffectKind};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{evaluate, gt_images, EvalReport, DEFAULT_KS};
use crate::model::{CausalModel, Dims, Fusion, Task};
use crate::retrieval::{
    build_corpus, evaluate_corpus, train_embedder, HeteroVocab, RetrievalReport, RetrievalTrainLog,
    SgEmbedConfig, SgEmbedder, TextVocab,
};
use crate::synth::{generate_dataset, Dataset, Split, WorldConfig};
use crate::train::{train, DebiasMode, TrainConfig, TrainLog};
use crate::types::{RankedPredictions, Vocabulary};

pub const CONFIG_FILE: &str = "config.json";
pub const FINGERPRINT_FILE: &str = "fingerprint.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub fusion: Fusion,
    pub train: TrainConfig,
    /// One checkpoint per mode; `none` is the biased model the effects are
    /// computed on.
    pub debias_modes: Vec<DebiasMode>,
    /// Effects evaluated on the biased model.
    pub methods: Vec<EffectKind>,
    pub tasks: Vec<Task>,
    pub ks: Vec<usize>,
    pub graph_constraint: bool,
    /// Adds the generator-prior row on PredCls.
    pub frequency_baseline: bool,
    pub embed: SgEmbedConfig,
    /// Image-SG sources for retrieval; empty skips retrieval.
    pub retrieval_methods: Vec<EffectKind>,
    pub gallery_sizes: Vec<usize>,
    /// Method compared against the baseline in the per-predicate CSV.
    pub barchart_method: EffectKind,
    pub barchart_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            n_train: 500,
            n_val: 100,
            n_test: 200,
            fusion: Fusion::Sum,
            train: TrainConfig::default(),
            debias_modes: vec![
                DebiasMode::None,
                DebiasMode::Focal,
                DebiasMode::Reweight,
                DebiasMode::Resample,
                DebiasMode::X2yTr,
            ],
            methods: vec![
                EffectKind::Baseline,
                EffectKind::X2y,
                EffectKind::Te,
                EffectKind::Nie,
                EffectKind::Tde,
            ],
            tasks: vec![Task::PredCls, Task::SgCls],
            ks: DEFAULT_KS.to_vec(),
            graph_constraint: true,
            frequency_baseline: true,
            embed: SgEmbedConfig::default(),
            retrieval_methods: vec![EffectKind::Baseline, EffectKind::Tde],
            gallery_sizes: vec![100, 500],
            barchart_method: EffectKind::Tde,
            barchart_k: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.embed.validate()?;
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::config("every split needs at least one image"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::config(
                "ks must be a non-empty list of positive values",
            ));
        }
        if !self.ks.contains(&self.barchart_k) {
            return Err(Error::config("barchart_k must be one of ks"));
        }
        if !self.debias_modes.contains(&DebiasMode::None) {
            return Err(Error::config("debias_modes must include none"));
        }
        if self.methods.is_empty() || self.tasks.is_empty() {
            return Err(Error::config("methods and tasks must be non-empty"));
        }
        if self.gallery_sizes.contains(&0) {
            return Err(Error::config("gallery sizes must be positive"));
        }
        Ok(())
    }

    /// Sets every seed in the config.
    pub fn override_seed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.train.seed = seed;
        self.embed.seed = seed;
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_text(path)?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical JSON of the config.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    pub fn image_vocab(&self) -> Result<HeteroVocab> {
        HeteroVocab::image(self.world.n_object_classes, self.world.n_predicates)
    }

    pub fn text_vocab(&self) -> Result<TextVocab> {
        TextVocab::build(
            &self.image_vocab()?,
            self.embed.text.max_synonyms,
            self.embed.seed,
        )
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn generate(cfg: &ExperimentConfig) -> Result<Splits> {
    let (train, val, test) = generate_dataset(&cfg.world, cfg.n_train, cfg.n_val, cfg.n_test)?;
    Ok(Splits { train, val, test })
}

/// A fresh model trained in `mode`.
pub fn train_mode(
    cfg: &ExperimentConfig,
    splits: &Splits,
    mode: DebiasMode,
) -> Result<(CausalModel, TrainLog)> {
    let mut model = CausalModel::init(
        Dims::from_world(&cfg.world),
        cfg.fusion,
        Task::PredCls,
        cfg.train.seed,
    );
    let tc = TrainConfig {
        debias_mode: mode,
        ..cfg.train.clone()
    };
    let val = (!splits.val.images.is_empty()).then_some(&splits.val);
    let log = train(&mut model, &splits.train, val, &tc)?;
    Ok((model, log))
}

pub fn evaluate_predictions(
    cfg: &ExperimentConfig,
    preds: &[RankedPredictions],
    data: &Dataset,
    registry: &Dataset,
    task: Task,
    label: &str,
) -> Result<EvalReport> {
    let vocab = Vocabulary::synthetic_predicates(cfg.world.n_predicates)?;
    Ok(evaluate(
        preds,
        &gt_images(data),
        &registry.train_triplet_registry,
        &cfg.ks,
        &vocab,
        task,
        label,
        cfg.graph_constraint,
    ))
}

/// Row label of a (mode, method) cell: the method on the biased model, the
/// mode otherwise.
pub fn row_label(mode: DebiasMode, kind: EffectKind) -> String {
    if mode == DebiasMode::None {
        kind.name().to_ascii_lowercase()
    } else {
        mode.name().to_string()
    }
}

/// `predicate,train_fraction,baseline_r@k,method_r@k,delta`, sorted by
/// descending training fraction. Predicates without test instances are
/// omitted.
pub fn emit_predicate_barchart_data(
    baseline: &EvalReport,
    method: &EvalReport,
    train_counts: &[usize],
    k: usize,
) -> Result<String> {
    let b = baseline
        .per_predicate_recall
        .get(&k)
        .ok_or_else(|| Error::data(format!("baseline report has no K = {k}")))?;
    let m = method
        .per_predicate_recall
        .get(&k)
        .ok_or_else(|| Error::data(format!("method report has no K = {k}")))?;
    if b.len() != m.len() || b.iter().zip(m).any(|(x, y)| x.predicate != y.predicate) {
        return Err(Error::data("reports use different predicate vocabularies"));
    }
    if train_counts.len() != b.len() + 1 {
        return Err(Error::data(
            "training counts do not match the predicate vocabulary",
        ));
    }
    let fg_total: usize = train_counts[1..].iter().sum();
    let mut rows = Vec::new();
    for (i, (x, y)) in b.iter().zip(m).enumerate() {
        if let (Some(rb), Some(rm)) = (x.recall, y.recall) {
            let frac = train_counts[i + 1] as f64 / fg_total.max(1) as f64;
            rows.push((i, &x.predicate, frac, rb, rm));
        }
    }
    rows.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let mut out = format!("predicate,train_fraction,baseline_r@{k},method_r@{k},delta\n");
    for (_, name, frac, rb, rm) in rows {
        writeln!(out, "{},{frac},{rb},{rm},{}", csv_field(name), rm - rb).expect("string write");
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub method: String,
    pub galleries: Vec<RetrievalReport>,
    /// Requested sizes larger than the test split.
    pub skipped_gallery_sizes: Vec<usize>,
    pub train_log: RetrievalTrainLog,
}

/// Trains an embedder on training-split image-SGs predicted with `kind` and
/// evaluates it on test-split galleries.
pub fn retrieval_cell(
    cfg: &ExperimentConfig,
    model: &CausalModel,
    splits: &Splits,
    kind: EffectKind,
) -> Result<(SgEmbedder, RetrievalSummary)> {
    let iv = cfg.image_vocab()?;
    let tv = cfg.text_vocab()?;
    let train_corpus = build_corpus(model, &splits.train, &tv, &cfg.embed, kind, usize::MAX)?;
    let largest = cfg
        .gallery_sizes
        .iter()
        .copied()
        .filter(|&g| g <= splits.test.images.len())
        .max();
    let test_corpus = build_corpus(
        model,
        &splits.test,
        &tv,
        &cfg.embed,
        kind,
        largest.unwrap_or(0),
    )?;
    let mut embedder = SgEmbedder::init(
        cfg.embed.shape(),
        &iv,
        &tv.vocab,
        cfg.embed.init_std,
        cfg.embed.seed,
    )?;
    let train_log = train_embedder(&mut embedder, &train_corpus, &cfg.embed)?;
    let mut summary = RetrievalSummary {
        method: kind.name().to_ascii_lowercase(),
        galleries: Vec::new(),
        skipped_gallery_sizes: Vec::new(),
        train_log,
    };
    for &g in &cfg.gallery_sizes {
        if g <= test_corpus.len() {
            summary
                .galleries
                .push(evaluate_corpus(&embedder, &test_corpus, g)?);
        } else {
            summary.skipped_gallery_sizes.push(g);
        }
    }
    Ok((embedder, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub fingerprint: String,
    /// Relative path to SHA-256 of every file written.
    pub files: BTreeMap<String, String>,
    /// Row label, then task name, to report.
    pub reports: BTreeMap<String, BTreeMap<String, EvalReport>>,
    pub retrieval: Vec<RetrievalSummary>,
}

struct Writer {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl Writer {
    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        io::write_text(&self.root.join(rel), text)?;
        self.files
            .insert(rel.to_string(), sha256_hex(text.as_bytes()));
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        self.text(rel, &io::to_json_string(value)?)
    }

    fn jsonl<T: Serialize>(&mut self, rel: &str, items: &[T]) -> Result<()> {
        let mut s = String::new();
        for item in items {
            s.push_str(&serde_json::to_string(item)?);
            s.push('\n');
        }
        self.text(rel, &s)
    }
}

/// Refuses an output directory that already holds a bundle of another
/// config.
pub fn check_fingerprint(out: &Path, fingerprint: &str) -> Result<bool> {
    let p = out.join(FINGERPRINT_FILE);
    if !p.exists() {
        return Ok(false);
    }
    let existing = io::read_text(&p)?;
    if existing.trim() != fingerprint {
        return Err(Error::config(format!(
            "{} holds artifacts of a different config (fingerprint {}); refusing to reuse it",
            out.display(),
            existing.trim()
        )));
    }
    Ok(true)
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Runs the whole grid into `out`. A directory from an earlier run of the
/// same config has its checkpoints reused; one from another config is
/// refused.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Bundle> {
    stage("config", cfg.validate())?;
    let fingerprint = cfg.fingerprint()?;
    let reuse = check_fingerprint(out, &fingerprint)?;
    let mut w = Writer {
        root: out.to_path_buf(),
        files: BTreeMap::new(),
    };
    w.json(CONFIG_FILE, cfg)?;
    w.text(FINGERPRINT_FILE, &format!("{fingerprint}\n"))?;

    let splits = stage("generate", generate(cfg))?;
    w.json("data/world.json", &cfg.world)?;
    w.json("data/registry.json", &splits.train.train_triplet_registry)?;
    for d in [&splits.train, &splits.val, &splits.test] {
        w.jsonl(&format!("data/{}", io::split_file(d.split)), &d.images)?;
    }
    let counts = splits.train.predicate_counts();
    w.json("data/predicate_counts.json", &counts)?;

    let mut models = BTreeMap::new();
    for &mode in &cfg.debias_modes {
        let ckpt = format!("checkpoints/{}.json", mode.name());
        let log_file = format!("logs/train_{}.json", mode.name());
        let (model, log): (CausalModel, TrainLog) =
            if reuse && out.join(&ckpt).exists() && out.join(&log_file).exists() {
                (
                    io::read_json(&out.join(&ckpt))?,
                    io::read_json(&out.join(&log_file))?,
                )
            } else {
                stage(
                    &format!("train:{}", mode.name()),
                    train_mode(cfg, &splits, mode),
                )?
            };
        w.json(&ckpt, &model)?;
        w.json(&log_file, &log)?;
        models.insert(mode.name(), (mode, model));
    }

    let mut reports: BTreeMap<String, BTreeMap<String, EvalReport>> = BTreeMap::new();
    let mut row_order = Vec::new();
    let mut cells: Vec<(String, &CausalModel, EffectKind)> = Vec::new();
    let biased = &models[DebiasMode::None.name()].1;
    for &kind in &cfg.methods {
        cells.push((row_label(DebiasMode::None, kind), biased, kind));
    }
    for (mode, model) in models.values() {
        if *mode != DebiasMode::None {
            cells.push((
                row_label(*mode, EffectKind::Baseline),
                model,
                EffectKind::Baseline,
            ));
        }
    }
    if cfg.frequency_baseline {
        let preds: Vec<_> = splits
            .test
            .images
            .iter()
            .map(|i| prior_predict(&cfg.world, i))
            .collect();
        let r = stage(
            "eval:freq",
            evaluate_predictions(
                cfg,
                &preds,
                &splits.test,
                &splits.train,
                Task::PredCls,
                "freq",
            ),
        )?;
        w.json("reports/eval/freq_predcls.json", &r)?;
        reports
            .entry("freq".into())
            .or_default()
            .insert(task_name(Task::PredCls).into(), r);
        row_order.push("freq".to_string());
    }
    for (label, model, kind) in &cells {
        for &task in &cfg.tasks {
            let name = format!("eval:{label}:{}", task_name(task));
            let preds = stage(&name, predict_dataset(model, &splits.test, task, *kind))?;
            let r = stage(
                &name,
                evaluate_predictions(cfg, &preds, &splits.test, &splits.train, task, label),
            )?;
            w.json(
                &format!("reports/eval/{label}_{}.json", task_name(task)),
                &r,
            )?;
            reports
                .entry(label.clone())
                .or_default()
                .insert(task_name(task).into(), r);
        }
        row_order.push(label.clone());
    }

    let chart_label = row_label(DebiasMode::None, cfg.barchart_method);
    for &task in &cfg.tasks {
        let t = task_name(task);
        if let (Some(b), Some(m)) = (
            reports.get("baseline").and_then(|r| r.get(t)),
            reports.get(&chart_label).and_then(|r| r.get(t)),
        ) {
            let csv = stage(
                "barchart",
                emit_predicate_barchart_data(b, m, &counts, cfg.barchart_k),
            )?;
            w.text(&format!("reports/barchart_{chart_label}_{t}.csv"), &csv)?;
        }
    }

    let mut retrieval_summaries = Vec::new();
    if !cfg.retrieval_methods.is_empty() {
        let tv = cfg.text_vocab()?;
        w.json("retrieval/text_vocab.json", &tv)?;
        for &kind in &cfg.retrieval_methods {
            let name = format!("retrieval:{}", kind.name().to_ascii_lowercase());
            let (_, summary) = stage(&name, retrieval_cell(cfg, biased, &splits, kind))?;
            retrieval_summaries.push(summary);
        }
        w.json("reports/retrieval.json", &retrieval_summaries)?;
    }

    w.text(
        "reports/summary.md",
        &summary_markdown(cfg, &row_order, &reports, &retrieval_summaries),
    )?;
    let files = w.files.clone();
    w.json(
        MANIFEST_FILE,
        &serde_json::json!({ "fingerprint": fingerprint, "files": files }),
    )?;
    Ok(Bundle {
        fingerprint,
        files: w.files,
        reports,
        retrieval: retrieval_summaries,
    })
}

pub fn task_name(task: Task) -> &'static str {
    match task {
        Task::PredCls => "predcls",
        Task::SgCls => "sgcls",
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x))
        .unwrap_or_else(|| "-".into())
}

/// Mean recall per task and K (rows: method), recall and zero-shot recall
/// at the largest K, and the retrieval table.
pub fn summary_markdown(
    cfg: &ExperimentConfig,
    rows: &[String],
    reports: &BTreeMap<String, BTreeMap<String, EvalReport>>,
    retrieval: &[RetrievalSummary],
) -> String {
    let mut s = String::from("# Results\n\n## Mean recall\n\n| Method |");
    for &t in &cfg.tasks {
        for k in &cfg.ks {
            write!(s, " {} mR@{k} |", task_name(t)).expect("string write");
        }
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(cfg.tasks.len() * cfg.ks.len()));
    s.push('\n');
    for row in rows {
        write!(s, "| {row} |").expect("string write");
        for &t in &cfg.tasks {
            for k in &cfg.ks {
                let v = reports
                    .get(row)
                    .and_then(|r| r.get(task_name(t)))
                    .map(|r| r.mean_recall_at(*k));
                write!(s, " {} |", pct(v)).expect("string write");
            }
        }
        s.push('\n');
    }
    let kmax = *cfg.ks.iter().max().expect("validated");
    s.push_str(&format!(
        "\n## Recall and zero-shot recall at K = {kmax}\n\n| Method |"
    ));
    for &t in &cfg.tasks {
        write!(s, " {0} R@{kmax} | {0} ZS-R@{kmax} |", task_name(t)).expect("string write");
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(2 * cfg.tasks.len()));
    s.push('\n');
    for row in rows {
        write!(s, "| {row} |").expect("string write");
        for &t in &cfg.tasks {
            let r = reports.get(row).and_then(|r| r.get(task_name(t)));
            let rec = r.and_then(|r| r.recall.get(&kmax).copied().flatten());
            let zs = r.and_then(|r| r.zero_shot_recall.get(&kmax).copied().flatten());
            write!(s, " {} | {} |", pct(rec), pct(zs)).expect("string write");
        }
        s.push('\n');
    }
    if !retrieval.is_empty() {
        s.push_str("\n## Sentence-to-graph retrieval\n\n| Image-SGs | Gallery | R@20 | R@100 | Med |\n|---|---:|---:|---:|---:|\n");
        for r in retrieval {
            for g in &r.galleries {
                writeln!(
                    s,
                    "| {} | {} | {} | {} | {} |",
                    r.method,
                    g.gallery_size,
                    pct(Some(g.recall_at_20)),
                    pct(Some(g.recall_at_100)),
                    g.median_rank
                )
                .expect("string write");
            }
        }
    }
    s
}

/// Splits from a bundle's data directory.
pub fn load_splits(data_dir: &Path) -> Result<Splits> {
    Ok(Splits {
        train: io::load_split(data_dir, Split::Train)?,
        val: io::load_split(data_dir, Split::Val)?,
        test: io::load_split(data_dir, Split::Test)?,
    })
}
