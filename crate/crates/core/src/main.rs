use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sgg_causal::effects::{predict_dataset, EffectKind};
use sgg_causal::error::{Error, Result};
use sgg_causal::experiment::{
    self, check_fingerprint, emit_predicate_barchart_data, load_splits, row_label, run_experiment,
    summary_markdown, task_name, ExperimentConfig, CONFIG_FILE, FINGERPRINT_FILE,
};
use sgg_causal::io;
use sgg_causal::metrics::EvalReport;
use sgg_causal::model::{CausalModel, Task};
use sgg_causal::retrieval::{
    build_corpus, embed_all, retrieve, train_embedder, RetrievalCorpus, SgEmbedder, Side,
};
use sgg_causal::train::DebiasMode;
use sgg_causal::types::RankedPredictions;

#[derive(Parser)]
#[command(
    name = "sgg-causal",
    version,
    about = "Counterfactual debiasing of scene-graph predicates on a synthetic world"
)]
struct Cli {
    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Working directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Cell {
    /// Effect used for prediction.
    #[arg(long, default_value = "tde")]
    method: EffectKind,
    #[arg(long, default_value = "predcls", value_parser = parse_task)]
    task: Task,
    /// Training mode of the checkpoint to use.
    #[arg(long, default_value = "none")]
    mode: DebiasMode,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test splits.
    GenData,
    /// Train one checkpoint.
    Train {
        #[arg(long, default_value = "none")]
        mode: DebiasMode,
    },
    /// Predict the test split with an effect; writes ranked predictions.
    Eval(Cell),
    /// Score ranked predictions against the test split.
    Score {
        #[command(flatten)]
        cell: Cell,
        /// Predictions file; defaults to the one `eval` writes.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Train the graph embedder on image-SGs predicted with an effect.
    RetrieveTrain {
        #[arg(long, default_value = "tde")]
        method: EffectKind,
    },
    /// Rank test galleries with a trained embedder.
    RetrieveEval {
        #[arg(long, default_value = "tde")]
        method: EffectKind,
    },
    /// Run the whole grid and write the report bundle.
    RunExperiment,
    /// Rebuild the summary table and per-predicate CSVs from scored reports.
    Report,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    match s.to_ascii_lowercase().as_str() {
        "predcls" => Ok(Task::PredCls),
        "sgcls" => Ok(Task::SgCls),
        _ => Err(format!("unknown task {s:?} (expected predcls or sgcls)")),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The working directory must have been created by `gen-data` with the
/// same config.
fn require_workspace(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    if !check_fingerprint(out, &cfg.fingerprint()?)? {
        return Err(Error::data(format!(
            "{} has no {FINGERPRINT_FILE}; run gen-data first",
            out.display()
        )));
    }
    Ok(())
}

fn checkpoint_path(out: &Path, mode: DebiasMode) -> PathBuf {
    out.join(format!("checkpoints/{}.json", mode.name()))
}

fn predictions_path(out: &Path, label: &str, task: Task) -> PathBuf {
    out.join(format!("predictions/{label}_{}.jsonl", task_name(task)))
}

fn retrieval_dir(out: &Path, method: EffectKind) -> PathBuf {
    out.join(format!("retrieval/{}", method.name().to_ascii_lowercase()))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::GenData => {
            check_fingerprint(out, &cfg.fingerprint()?)?;
            let s = experiment::generate(&cfg)?;
            io::save_dataset(&out.join("data"), &[&s.train, &s.val, &s.test])?;
            io::write_json(&out.join(CONFIG_FILE), &cfg)?;
            io::write_text(
                &out.join(FINGERPRINT_FILE),
                &format!("{}\n", cfg.fingerprint()?),
            )?;
            println!(
                "wrote {} train / {} val / {} test images to {}",
                s.train.images.len(),
                s.val.images.len(),
                s.test.images.len(),
                out.join("data").display()
            );
        }
        Command::Train { mode } => {
            require_workspace(out, &cfg)?;
            let s = load_splits(&out.join("data"))?;
            let (model, log) = experiment::train_mode(&cfg, &s, *mode)?;
            io::write_json(&checkpoint_path(out, *mode), &model)?;
            io::write_json(&out.join(format!("logs/train_{}.json", mode.name())), &log)?;
            let last = log.epochs.last();
            println!(
                "trained {} for {} epochs (lr decays {}, final loss {:.4})",
                mode.name(),
                log.epochs.len(),
                log.lr_decays,
                last.map(|e| e.loss.total(cfg.train.aux_loss_weight))
                    .unwrap_or(f64::NAN)
            );
        }
        Command::Eval(c) => {
            require_workspace(out, &cfg)?;
            let s = load_splits(&out.join("data"))?;
            let model: CausalModel = io::read_json(&checkpoint_path(out, c.mode))?;
            let preds = predict_dataset(&model, &s.test, c.task, c.method)?;
            let label = row_label(c.mode, c.method);
            let p = predictions_path(out, &label, c.task);
            io::write_jsonl(&p, &preds)?;
            println!(
                "wrote {} ranked prediction lists to {}",
                preds.len(),
                p.display()
            );
        }
        Command::Score {
            cell: c,
            predictions,
        } => {
            require_workspace(out, &cfg)?;
            let s = load_splits(&out.join("data"))?;
            let label = row_label(c.mode, c.method);
            let p = predictions
                .clone()
                .unwrap_or_else(|| predictions_path(out, &label, c.task));
            let preds: Vec<RankedPredictions> = io::read_jsonl(&p)?;
            let r =
                experiment::evaluate_predictions(&cfg, &preds, &s.test, &s.train, c.task, &label)?;
            io::write_json(
                &out.join(format!("reports/eval/{label}_{}.json", task_name(c.task))),
                &r,
            )?;
            for k in &cfg.ks {
                println!(
                    "{label} {} R@{k} {:?} mR@{k} {:.4} ZS-R@{k} {:?}",
                    task_name(c.task),
                    r.recall[k],
                    r.mean_recall_at(*k),
                    r.zero_shot_recall[k]
                );
            }
        }
        Command::RetrieveTrain { method } => {
            require_workspace(out, &cfg)?;
            let s = load_splits(&out.join("data"))?;
            let model: CausalModel = io::read_json(&checkpoint_path(out, DebiasMode::None))?;
            let tv = cfg.text_vocab()?;
            let train_corpus =
                build_corpus(&model, &s.train, &tv, &cfg.embed, *method, usize::MAX)?;
            let test_corpus = build_corpus(&model, &s.test, &tv, &cfg.embed, *method, usize::MAX)?;
            let mut e = SgEmbedder::init(
                cfg.embed.shape(),
                &cfg.image_vocab()?,
                &tv.vocab,
                cfg.embed.init_std,
                cfg.embed.seed,
            )?;
            let log = train_embedder(&mut e, &train_corpus, &cfg.embed)?;
            let dir = retrieval_dir(out, *method);
            io::write_json(&dir.join("text_vocab.json"), &tv)?;
            io::write_json(&dir.join("embedder.json"), &e)?;
            io::write_json(&dir.join("train_log.json"), &log)?;
            io::write_jsonl(&dir.join("queries.jsonl"), &test_corpus.queries)?;
            io::write_jsonl(&dir.join("gallery.jsonl"), &test_corpus.gallery)?;
            let last = log.epochs.last().map(|e| e.loss).unwrap_or(f64::NAN);
            println!(
                "trained embedder on {} graphs, final loss {last:.4}",
                train_corpus.len()
            );
        }
        Command::RetrieveEval { method } => {
            require_workspace(out, &cfg)?;
            let dir = retrieval_dir(out, *method);
            let e: SgEmbedder = io::read_json(&dir.join("embedder.json"))?;
            let corpus = RetrievalCorpus {
                image_ids: Vec::new(),
                queries: io::read_jsonl(&dir.join("queries.jsonl"))?,
                gallery: io::read_jsonl(&dir.join("gallery.jsonl"))?,
            };
            let mut reports = Vec::new();
            for &g in &cfg.gallery_sizes {
                if g > corpus.len() {
                    eprintln!(
                        "skipping gallery size {g}: only {} test graphs",
                        corpus.len()
                    );
                    continue;
                }
                let q = embed_all(&e, &corpus.queries[..g], Side::Text)?;
                let gal = embed_all(&e, &corpus.gallery[..g], Side::Image)?;
                let r = retrieve(&q, &gal)?;
                println!(
                    "gallery {g}: R@20 {:.4} R@100 {:.4} Med {}",
                    r.recall_at_20, r.recall_at_100, r.median_rank
                );
                reports.push(r);
            }
            let name = method.name().to_ascii_lowercase();
            io::write_json(
                &out.join(format!("reports/retrieval_{name}.json")),
                &reports,
            )?;
        }
        Command::RunExperiment => {
            let b = run_experiment(&cfg, out)?;
            println!(
                "wrote {} files to {} (fingerprint {})",
                b.files.len(),
                out.display(),
                b.fingerprint
            );
            print!("{}", io::read_text(&out.join("reports/summary.md"))?);
        }
        Command::Report => {
            require_workspace(out, &cfg)?;
            report(&cfg, out)?;
        }
    }
    Ok(())
}

fn report(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    use std::collections::BTreeMap;
    let dir = out.join("reports/eval");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    entries.sort();
    let mut reports: BTreeMap<String, BTreeMap<String, EvalReport>> = BTreeMap::new();
    let mut rows = Vec::new();
    for p in entries {
        let r: EvalReport = io::read_json(&p)?;
        if !rows.contains(&r.method) {
            rows.push(r.method.clone());
        }
        reports
            .entry(r.method.clone())
            .or_default()
            .insert(task_name(r.task).into(), r);
    }
    if reports.is_empty() {
        return Err(Error::data(format!(
            "no scored reports under {}",
            dir.display()
        )));
    }
    let md = summary_markdown(cfg, &rows, &reports, &[]);
    io::write_text(&out.join("reports/summary.md"), &md)?;
    let s = io::load_split(&out.join("data"), sgg_causal::synth::Split::Train)?;
    let counts = s.predicate_counts();
    let chart = row_label(DebiasMode::None, cfg.barchart_method);
    for (task, b) in reports.get("baseline").into_iter().flatten() {
        if let Some(m) = reports.get(&chart).and_then(|r| r.get(task)) {
            let csv = emit_predicate_barchart_data(b, m, &counts, cfg.barchart_k)?;
            io::write_text(
                &out.join(format!("reports/barchart_{chart}_{task}.csv")),
                &csv,
            )?;
        }
    }
    print!("{md}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
