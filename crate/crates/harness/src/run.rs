//! Corpus generation, pretraining, fine-tuning and evaluation runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use semvlp_core::checkpoint::{self, Checkpoint};
use semvlp_core::encoder::{Mode, SharedParams};
use semvlp_core::finetune::{
    balanced_split, eval_nlvr, eval_qa, eval_retrieval, finetune_nlvr, finetune_qa, finetune_retrieval, init_similarity_head,
    rank_pools, recall_at, two_stage_finetune, EvalReport, FinetuneConfig, NlvrHead, QaHead, RetrievalPool, SimilarityHead,
    StepLog, Task,
};
use semvlp_core::pretrain::{itm_accuracy, ItmInputs, ModeMix, PretrainHeads, Pretrainer, StepRecord, TextKind};
use semvlp_core::seed;
use semvlp_core::synthworld::corpus::CORPUS_FILE;
use semvlp_core::synthworld::oracle::caption_score;
use semvlp_core::synthworld::scene::{FEATURE_DIM, NUM_LABELS};
use semvlp_core::synthworld::{build_corpus, corpus_hash, gen_nlvr, Corpus, NlvrItem, Record, Split, Vocab, ANSWERS};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{code_version, write_manifest, Manifest, MetricsWriter, METRICS_FILE};

const INIT_STREAM: u64 = 300;
const NLVR_STREAM: u64 = 301;

pub const MODEL_FILE: &str = "model.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";

/// Exclusive claim on an output directory, released on drop.
pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn claim(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))?;
        let lock = path.join(".lock");
        match fs::File::create_new(&lock) {
            Ok(_) => Ok(RunDir {
                path: path.to_path_buf(),
                lock,
            }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(HarnessError::Invariant(format!(
                "{} is owned by another run (remove {} if that run is dead)",
                path.display(),
                lock.display()
            ))),
            Err(e) => Err(HarnessError::io(&lock, e)),
        }
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

fn config_error(msg: String) -> HarnessError {
    semvlp_core::Error::Config(msg).into()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| HarnessError::io(path, e))
}

/// Builds the corpus described by the config and returns its hash.
pub fn gen_corpus(cfg: &RunConfig) -> Result<String> {
    let corpus = build_corpus(cfg.corpus.n_scenes, cfg.corpus.split, cfg.corpus.seed)?;
    corpus.write(&cfg.corpus.dir)?;
    Ok(corpus_hash(&cfg.corpus.dir)?)
}

/// Reads the configured corpus and checks it against an encoder vocabulary.
pub fn load_corpus(cfg: &RunConfig, vocab_size: usize) -> Result<(Corpus, String)> {
    let dir = &cfg.corpus.dir;
    if !dir.join(CORPUS_FILE).exists() {
        return Err(config_error(format!("no corpus at {}; run gen-corpus first", dir.display())));
    }
    let corpus = Corpus::read(dir)?;
    if corpus.vocab.len() != vocab_size {
        return Err(config_error(format!(
            "corpus vocab has {} tokens but the encoder expects {vocab_size}",
            corpus.vocab.len()
        )));
    }
    if corpus.train.len() < 2 || corpus.dev.len() < 2 {
        return Err(config_error("corpus needs at least two train and two dev scenes".into()));
    }
    Ok((corpus, corpus_hash(dir)?))
}

fn manifest(cfg: &RunConfig, command: &str, corpus_hash: String, checkpoint: Option<&Path>) -> Manifest {
    Manifest {
        command: command.into(),
        seed: cfg.seed,
        corpus_hash,
        code_version: code_version(),
        checkpoint: checkpoint.map(Path::to_path_buf),
        config: cfg.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItmRow {
    pub split: Split,
    pub mode: Mode,
    pub kind: TextKind,
    pub masked: bool,
    pub accuracy: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: u64,
    pub mode_mix: ModeMix,
    pub seconds: f64,
    /// Mean total loss over the first and last `window` steps of this run.
    pub window: usize,
    pub first_window_loss: f64,
    pub last_window_loss: f64,
    pub itm: Vec<ItmRow>,
    /// Mode with the best masked caption matching on dev.
    pub itm_mode: Mode,
    /// Masked caption matching accuracy on test in `itm_mode`.
    pub itm_heldout: f64,
    pub checkpoint: PathBuf,
}

impl PretrainSummary {
    pub fn loss_ratio(&self) -> f64 {
        self.last_window_loss / self.first_window_loss
    }
}

/// Caption-matching accuracy on dev and test, masked and clean, per mode.
pub fn itm_report(params: &SharedParams, heads: &PretrainHeads, corpus: &Corpus, cfg: &RunConfig) -> Result<Vec<ItmRow>> {
    let mut rows = Vec::new();
    for split in [Split::Dev, Split::Test] {
        let records = corpus.split(split);
        if records.len() < 2 {
            continue;
        }
        for mode in Mode::BOTH {
            for kind in [TextKind::Coarse, TextKind::Fine] {
                for masked in [true, false] {
                    let inputs = if masked {
                        ItmInputs::like(&cfg.pretrain)
                    } else {
                        ItmInputs::Clean
                    };
                    rows.push(ItmRow {
                        split,
                        mode,
                        kind,
                        masked,
                        accuracy: itm_accuracy(params, heads, records, mode, kind, inputs, cfg.eval.seed)?,
                        n_pairs: records.len() - records.len() % 2,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Mean masked caption accuracy of `mode` on `split`.
pub fn masked_caption_accuracy(rows: &[ItmRow], split: Split, mode: Mode) -> Option<f64> {
    let hits: Vec<f64> = rows
        .iter()
        .filter(|r| r.split == split && r.mode == mode && r.masked)
        .map(|r| r.accuracy)
        .collect();
    (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
}

/// Argmax over both modes of `score`; exact ties go to single stream.
pub fn dev_argmax(score: impl Fn(Mode) -> f64) -> Mode {
    let [s, t] = Mode::BOTH.map(&score);
    if t > s {
        Mode::TwoStream
    } else {
        Mode::SingleStream
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(HarnessError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(checkpoint::load(path)?)
}

/// Pretrains from the config seed, or resumes from `resume` (parameters and
/// optimizer state), and writes checkpoints, metrics and a summary into
/// `cfg.out_dir`.
pub fn pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<PretrainSummary> {
    cfg.validate()?;
    let (corpus, hash) = load_corpus(cfg, cfg.encoder.vocab_size)?;
    let dir = RunDir::claim(&cfg.out_dir)?;
    write_manifest(&dir.path, &manifest(cfg, "pretrain", hash, resume))?;

    let (mut params, adam) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.params.config != cfg.encoder {
                return Err(config_error(format!(
                    "checkpoint {} has a different encoder config",
                    path.display()
                )));
            }
            (ck.params, ck.optimizer)
        }
        None => (
            SharedParams::init(&cfg.encoder, &mut seed::derived_rng(cfg.seed, INIT_STREAM, 0))?,
            None,
        ),
    };
    let mut trainer = Pretrainer::new(&mut params, cfg.pretrain.clone(), NUM_LABELS, ANSWERS.len(), cfg.seed)?;
    if let Some(adam) = adam {
        trainer.adam = adam;
    }

    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| HarnessError::io(&ckpt_dir, e))?;
    let mut metrics = MetricsWriter::open(&dir.join(METRICS_FILE))?;
    let mut totals = Vec::new();
    let start = Instant::now();
    while trainer.adam.step < trainer.config.steps {
        let rec: StepRecord = trainer.step(&mut params, &corpus.train)?;
        metrics.write(&rec)?;
        totals.push(rec.losses.total);
        let done = trainer.adam.step;
        if done % cfg.checkpoint_every == 0 && done < trainer.config.steps {
            let meta = serde_json::json!({"stage": "pretrain", "step": done, "seed": cfg.seed});
            checkpoint::save(
                &ckpt_dir.join(format!("step_{done:06}.ckpt")),
                &params,
                Some(&trainer.adam),
                meta,
            )?;
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let model = dir.join(MODEL_FILE);
    let meta = serde_json::json!({
        "stage": "pretrain",
        "step": trainer.adam.step,
        "seed": cfg.seed,
        "mode_mix": cfg.pretrain.mode_mix,
    });
    checkpoint::save(&model, &params, Some(&trainer.adam), meta)?;

    let window = (totals.len() / 2).clamp(1, 100);
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let itm = itm_report(&params, &trainer.heads, &corpus, cfg)?;
    let itm_mode = dev_argmax(|m| masked_caption_accuracy(&itm, Split::Dev, m).unwrap_or(0.0));
    let summary = PretrainSummary {
        steps: trainer.adam.step,
        mode_mix: cfg.pretrain.mode_mix,
        seconds,
        window,
        first_window_loss: mean(&totals[..window.min(totals.len())]),
        last_window_loss: mean(&totals[totals.len().saturating_sub(window)..]),
        itm_heldout: masked_caption_accuracy(&itm, Split::Test, itm_mode)
            .or_else(|| masked_caption_accuracy(&itm, Split::Dev, itm_mode))
            .unwrap_or(f64::NAN),
        itm,
        itm_mode,
        checkpoint: model,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub split: Split,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub task: Task,
    pub mode: Mode,
    pub seed: u64,
    pub steps: u64,
    pub reports: Vec<ReportRow>,
    /// Retrieval only: the same model and pools before fine-tuning.
    #[serde(default)]
    pub baseline: Vec<ReportRow>,
    /// Retrieval only: a caption/scene consistency oracle on the same pools.
    #[serde(default)]
    pub oracle: Vec<ReportRow>,
    pub checkpoint: PathBuf,
}

impl FinetuneSummary {
    /// The first metric reported on `split` whose name ends with `suffix`.
    pub fn metric(&self, split: Split, suffix: &str) -> Option<f64> {
        find_metric(&self.reports, split, suffix)
    }
}

pub fn find_metric(rows: &[ReportRow], split: Split, suffix: &str) -> Option<f64> {
    rows.iter()
        .find(|r| r.split == split && r.report.metric_name.ends_with(suffix))
        .map(|r| r.report.value)
}

/// Name of a parameter every checkpoint carrying `task`'s head has.
fn head_marker(task: Task) -> String {
    let name = match task {
        Task::Vqa | Task::Gqa2Stage | Task::Nlvr => format!("{}.hidden.weight", task.as_str()),
        Task::Retrieval => "similarity.weight".into(),
    };
    format!("{}{name}", semvlp_core::encoder::HEAD_PREFIX)
}

fn eval_splits(corpus: &Corpus) -> Vec<(Split, &[Record])> {
    [Split::Dev, Split::Test]
        .into_iter()
        .map(|s| (s, corpus.split(s)))
        .filter(|(_, r)| r.len() >= 2)
        .collect()
}

fn nlvr_items(records: &[Record], vocab: &Vocab, run_seed: u64, split: Split) -> Result<Vec<NlvrItem>> {
    Ok(gen_nlvr(records, seed::derive(run_seed, NLVR_STREAM, split as u64), vocab)?)
}

fn row(split: Split, report: EvalReport) -> ReportRow {
    ReportRow { split, report }
}

fn oracle_rows(
    pools: &[RetrievalPool],
    records: &[Record],
    ft: &FinetuneConfig,
    vocab: &Vocab,
    split: Split,
    eval_seed: u64,
) -> Result<Vec<ReportRow>> {
    let mut pools = pools.to_vec();
    let r = &ft.retrieval;
    rank_pools(&mut pools, |q, c| {
        let (text, objects) = r.direction.pair(records, r.level, q, c);
        let words: Vec<String> = vocab.decode(text).into_iter().skip(1).take(text.num_words()).collect();
        Ok(caption_score(&words, objects))
    })?;
    Ok([1, 5, 10]
        .into_iter()
        .map(|k| {
            row(
                split,
                EvalReport {
                    task: Task::Retrieval,
                    mode: ft.mode,
                    metric_name: format!("oracle_r@{k}"),
                    value: recall_at(&pools, k),
                    n_examples: pools.len(),
                    seed: eval_seed,
                },
            )
        })
        .collect())
}

/// Evaluates `task`'s head already present in `params` on dev and test.
pub fn evaluate(params: &mut SharedParams, cfg: &RunConfig, corpus: &Corpus, ft: &FinetuneConfig) -> Result<Vec<ReportRow>> {
    if !params.store.contains(&head_marker(ft.task)) {
        return Err(config_error(format!("checkpoint has no {} head", ft.task)));
    }
    // The heads exist, so `ensure` only looks them up.
    let mut rng = seed::rng(0);
    let mut rows = Vec::new();
    for (split, records) in eval_splits(corpus) {
        match ft.task {
            Task::Vqa | Task::Gqa2Stage => {
                let head = QaHead::ensure(params, ft.task, ft.answer_set_size, &mut rng)?;
                rows.push(row(split, eval_qa(params, &head, ft.task, ft.mode, records, cfg.eval.seed)?));
            }
            Task::Retrieval => {
                let head = SimilarityHead::ensure(params, &mut rng)?;
                let (reports, _) = eval_retrieval(params, &head, ft.mode, records, &ft.retrieval, cfg.eval.seed)?;
                rows.extend(reports.into_iter().map(|r| row(split, r)));
            }
            Task::Nlvr => {
                let head = NlvrHead::ensure(params, &mut rng)?;
                let items = nlvr_items(records, &corpus.vocab, cfg.eval.seed, split)?;
                rows.push(row(split, eval_nlvr(params, &head, ft.mode, &items, records, cfg.eval.seed)?));
            }
        }
    }
    Ok(rows)
}

/// Fine-tunes `task` in `mode` from `checkpoint` and reports dev and test
/// metrics; everything is written into `cfg.out_dir`.
pub fn finetune(cfg: &RunConfig, checkpoint_path: &Path, task: Task, mode: Mode) -> Result<FinetuneSummary> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint_path)?;
    let done_task = ck.meta.get("task").and_then(|t| t.as_str());
    let resume_stage_b = match done_task {
        None => false,
        Some("gqa2stage_a") if task == Task::Gqa2Stage => true,
        Some(t) => {
            return Err(config_error(format!(
                "checkpoint was already fine-tuned for {t}; start {task} from a pretrained checkpoint"
            )))
        }
    };
    let mut params = ck.params;
    if params.config.object_feature_dim != FEATURE_DIM {
        return Err(config_error(format!(
            "checkpoint expects {}-d object features, the corpus has {FEATURE_DIM}",
            params.config.object_feature_dim
        )));
    }
    let (corpus, hash) = load_corpus(cfg, params.config.vocab_size)?;
    let dir = RunDir::claim(&cfg.out_dir)?;
    write_manifest(
        &dir.path,
        &manifest(cfg, &format!("finetune {task} {mode}"), hash, Some(checkpoint_path)),
    )?;

    let ft = cfg.finetune_config(task, mode);
    ft.validate()?;
    let run_seed = cfg.seed;
    let mut metrics = MetricsWriter::open(&dir.join(METRICS_FILE))?;
    let mut steps = 0u64;
    let mut on_step = |s: &StepLog| -> semvlp_core::Result<()> {
        steps += 1;
        metrics
            .write(s)
            .map_err(|e| semvlp_core::Error::Io(std::io::Error::other(e.to_string())))
    };
    let mut baseline = Vec::new();
    let mut oracle = Vec::new();
    match task {
        Task::Vqa => {
            finetune_qa(&mut params, &ft, &corpus.train, run_seed, &mut on_step)?;
        }
        Task::Gqa2Stage => {
            let balanced = balanced_split(&corpus.train, run_seed);
            if !resume_stage_b {
                let mut only_a = ft.clone();
                only_a.stages[1].epochs = 0;
                two_stage_finetune(&mut params, &only_a, &corpus.train, &balanced, run_seed, &mut on_step)?;
                let meta = serde_json::json!({"task": "gqa2stage_a", "mode": mode, "seed": run_seed});
                checkpoint::save(&dir.join("stage_a.ckpt"), &params, None, meta)?;
            }
            let mut only_b = ft.clone();
            only_b.stages[0].epochs = 0;
            two_stage_finetune(&mut params, &only_b, &corpus.train, &balanced, run_seed, &mut on_step)?;
        }
        Task::Retrieval => {
            let head = init_similarity_head(&mut params, run_seed)?;
            for (split, records) in eval_splits(&corpus) {
                let (reports, pools) = eval_retrieval(&params, &head, mode, records, &ft.retrieval, cfg.eval.seed)?;
                baseline.extend(reports.into_iter().map(|r| row(split, r)));
                oracle.extend(oracle_rows(&pools, records, &ft, &corpus.vocab, split, cfg.eval.seed)?);
            }
            finetune_retrieval(&mut params, &ft, &corpus.train, run_seed, &mut on_step)?;
        }
        Task::Nlvr => {
            let items = nlvr_items(&corpus.train, &corpus.vocab, run_seed, Split::Train)?;
            finetune_nlvr(&mut params, &ft, &items, &corpus.train, run_seed, &mut on_step)?;
        }
    }
    let reports = evaluate(&mut params, cfg, &corpus, &ft)?;
    let model = dir.join(MODEL_FILE);
    let meta = serde_json::json!({"task": task, "mode": mode, "seed": run_seed});
    checkpoint::save(&model, &params, None, meta)?;
    let summary = FinetuneSummary {
        task,
        mode,
        seed: run_seed,
        steps,
        reports,
        baseline,
        oracle,
        checkpoint: model,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Evaluates a fine-tuned checkpoint; the report goes to `cfg.out_dir`.
pub fn eval(cfg: &RunConfig, checkpoint_path: &Path, task: Task, mode: Mode) -> Result<Vec<ReportRow>> {
    let ck = load_checkpoint(checkpoint_path)?;
    let mut params = ck.params;
    let (corpus, _) = load_corpus(cfg, params.config.vocab_size)?;
    let ft = cfg.finetune_config(task, mode);
    let rows = evaluate(&mut params, cfg, &corpus, &ft)?;
    let dir = RunDir::claim(&cfg.out_dir)?;
    write_json(&dir.join("eval.json"), &rows)?;
    Ok(rows)
}
