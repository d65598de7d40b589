//! Continual-unlearning engine: fine-tune and retain-train phases, then the
//! sequential request loop — filter → importance-based method selection →
//! layer attribution → restricted composite steps — with audit logs,
//! checkpoint evaluation against matched retain baselines, and a run
//! directory that captures everything needed to reproduce the run.

use crate::attribution::{apply_selection, attribute, default_k, AttributionError, AttributionReport};
use crate::corpus::{
    self, generate_corpus, make_request_stream, CorpusError, Request, Sample, Split,
};
use crate::filter::{filter_request, EmbeddingIndex, FilterConfig, FilterError};
use crate::importance::{
    calibrate, imp, select_method, BinThresholds, ImpAuditRow, ImportanceError, MethodMap,
};
use crate::metrics::{
    aggregate, eval_set, qa_seq, token_accuracy, MetricBundle, MetricsError,
};
use crate::model::{BlockPart, GradMode, ModelConfig, ModelError, ToyLm};
use crate::objectives::{
    composite_step, draw_rlabel_targets, ObjectiveConfig, ObjectiveError, ObjectiveKind, StepLog,
    DEFAULT_RETAIN_BATCH, DEFAULT_STEPS_PER_REQUEST,
};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule, OptimError};
use crate::seeded::seed_stream;
use crate::tensor::Tensor;
use crate::tokenizer::Seq;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_TARGET_ACC: f64 = 0.9;
pub const DEFAULT_MIN_ACC: f64 = 0.5;
pub const DEFAULT_CHECKPOINT_INTERVAL: usize = 10;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("filter: {0}")]
    Filter(#[from] FilterError),
    #[error("importance: {0}")]
    Importance(#[from] ImportanceError),
    #[error("objective: {0}")]
    Objective(#[from] ObjectiveError),
    #[error("attribution: {0}")]
    Attribution(#[from] AttributionError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("optimizer: {0}")]
    Optim(#[from] OptimError),
    #[error("tensor: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    BadConfig(String),
    #[error("training stalled: {split} accuracy {acc:.3} below {min:.3} after {epochs} epochs")]
    TrainStalled {
        split: &'static str,
        acc: f64,
        min: f64,
        epochs: usize,
    },
    #[error("request {id}: {source}")]
    Request {
        id: String,
        #[source]
        source: Box<EngineError>,
    },
}

// ── configuration ───────────────────────────────────────────────────────

/// Supervised QA training phase (fine-tune and retain-train share it).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epoch_cap: usize,
    /// Stop once every split present in the training set reaches this
    /// token accuracy.
    pub target_acc: f64,
    /// Diagnostic floor: erroring out if still below it at the cap.
    pub min_acc: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            batch: 8,
            epoch_cap: 400,
            target_acc: DEFAULT_TARGET_ACC,
            min_acc: DEFAULT_MIN_ACC,
            shuffle_seed: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    /// Retrain a fresh model on the still-retained ids at every checkpoint.
    ExactRetrain,
    /// Interpolate base metrics between the fine-tuned endpoint and a single
    /// retain model, weighted by the fraction of requests processed.
    Interpolation,
}

/// Pipeline-stage kill switches; all three on = naive sequential baseline.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Ablations {
    /// Skip redundancy filtering: every chunk survives, history unused.
    pub no_filter: bool,
    /// Skip importance scoring and always use this objective.
    pub fixed_method: Option<ObjectiveKind>,
    /// Skip layer attribution: every block is trainable.
    pub full_update: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // corpus + request stream
    pub corpus_seed: u64,
    pub per_category: usize,
    pub forget_fraction: f64,
    pub request_size: usize,
    pub stream_seed: u64,
    // model + training phases
    pub model: ModelConfig,
    pub init_seed: u64,
    pub train: TrainConfig,
    // pipeline
    pub filter: FilterConfig,
    pub method_map: MethodMap,
    /// Blocks to select per request; None = quarter of the blocks.
    pub k: Option<usize>,
    pub objective: ObjectiveConfig,
    pub steps_per_request: usize,
    pub retain_batch: usize,
    pub unlearn_lr: f64,
    // evaluation
    pub checkpoint_interval: usize,
    pub baseline: BaselineMode,
    pub ablations: Ablations,
    pub run_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus_seed: 101,
            per_category: 40,
            forget_fraction: 0.5,
            request_size: 5,
            stream_seed: 102,
            model: ModelConfig {
                vocab: crate::tokenizer::MIN_VOCAB,
                d_model: 48,
                n_heads: 4,
                n_blocks: 6,
                d_ff: 96,
                max_seq_len: 160,
            },
            init_seed: 103,
            train: TrainConfig::default(),
            filter: FilterConfig::default(),
            method_map: MethodMap::default(),
            k: None,
            objective: ObjectiveConfig::default(),
            steps_per_request: DEFAULT_STEPS_PER_REQUEST,
            retain_batch: DEFAULT_RETAIN_BATCH,
            unlearn_lr: 5e-4,
            checkpoint_interval: DEFAULT_CHECKPOINT_INTERVAL,
            baseline: BaselineMode::ExactRetrain,
            ablations: Ablations::default(),
            run_seed: 104,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::BadConfig(m.to_string()));
        if self.per_category < 2 {
            return bad("per_category must be ≥ 2");
        }
        if !(self.forget_fraction > 0.0 && self.forget_fraction < 1.0) {
            return bad("forget_fraction must be in (0, 1)");
        }
        if self.request_size == 0 {
            return bad("request_size must be ≥ 1");
        }
        if self.steps_per_request == 0 {
            return bad("steps_per_request must be ≥ 1");
        }
        if self.retain_batch == 0 {
            return bad("retain_batch must be ≥ 1");
        }
        if !(self.unlearn_lr >= 0.0) {
            return bad("unlearn_lr must be ≥ 0");
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be ≥ 1");
        }
        if let Some(k) = self.k {
            if k == 0 {
                return bad("k must be ≥ 1 when set");
            }
        }
        self.filter.validate()?;
        Ok(())
    }

    pub fn snapshot(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

// ── supervised QA training ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training-batch CE for the epoch; evaluation CE for epoch 0.
    pub loss: f64,
    pub forget_acc: Option<f64>,
    pub retain_acc: Option<f64>,
}

impl EpochLog {
    pub fn csv_header() -> &'static str {
        "epoch,loss,forget_acc,retain_acc"
    }

    pub fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{},{}",
            self.epoch,
            self.loss,
            cell(self.forget_acc),
            cell(self.retain_acc)
        )
    }
}

pub(crate) fn lm_seq(sample: &Sample) -> Seq {
    Seq::lm(qa_seq(sample).tokens)
}

/// Mean full-sequence token accuracy over the samples' QA renderings.
pub fn split_accuracy(model: &ToyLm, samples: &[Sample]) -> Result<f64, EngineError> {
    let mut acc = 0.0;
    for s in samples {
        acc += token_accuracy(model, &qa_seq(s).tokens, None)?;
    }
    Ok(acc / samples.len() as f64)
}

fn accuracy_pair(
    model: &ToyLm,
    forget: &[Sample],
    retain: &[Sample],
) -> Result<(Option<f64>, Option<f64>), EngineError> {
    let f = if forget.is_empty() {
        None
    } else {
        Some(split_accuracy(model, forget)?)
    };
    let r = if retain.is_empty() {
        None
    } else {
        Some(split_accuracy(model, retain)?)
    };
    Ok((f, r))
}

/// Train `model` on the QA renderings of `train` until every split present
/// reaches `target_acc` token accuracy, or the epoch cap. Deterministic
/// given the config. The first log row is the untrained evaluation.
pub fn train_qa(
    model: &mut ToyLm,
    train: &[Sample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>, EngineError> {
    if train.is_empty() {
        return Err(EngineError::BadConfig("empty training set".into()));
    }
    let forget: Vec<Sample> = train.iter().filter(|s| s.split == Split::Forget).cloned().collect();
    let retain: Vec<Sample> = train.iter().filter(|s| s.split == Split::Retain).cloned().collect();
    let seqs: Vec<Seq> = train.iter().map(lm_seq).collect();
    let batch = cfg.batch.min(seqs.len()).max(1);
    let steps_per_epoch = seqs.len().div_ceil(batch);
    let mut opt = AdamW::new(
        AdamWConfig::with_lr(cfg.lr),
        CosineSchedule::new(cfg.lr, (cfg.epoch_cap * steps_per_epoch).max(1)),
        model.param_count(),
    )?;
    let mut rng = seed_stream(cfg.shuffle_seed, "train-qa");
    let mut log = Vec::with_capacity(cfg.epoch_cap + 1);
    let (f0, r0) = accuracy_pair(model, &forget, &retain)?;
    log.push(EpochLog {
        epoch: 0,
        loss: model.mean_ce(&seqs)?,
        forget_acc: f0,
        retain_acc: r0,
    });
    let done = |f: Option<f64>, r: Option<f64>| {
        f.map_or(true, |a| a >= cfg.target_acc) && r.map_or(true, |a| a >= cfg.target_acc)
    };
    if done(f0, r0) {
        return Ok(log);
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 1..=cfg.epoch_cap {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for ids in order.chunks(batch) {
            let bseqs: Vec<Seq> = ids.iter().map(|&i| seqs[i].clone()).collect();
            epoch_loss += sgd_step(model, &mut opt, &bseqs)?;
        }
        let (fa, ra) = accuracy_pair(model, &forget, &retain)?;
        log.push(EpochLog {
            epoch,
            loss: epoch_loss / steps_per_epoch as f64,
            forget_acc: fa,
            retain_acc: ra,
        });
        if done(fa, ra) {
            return Ok(log);
        }
    }
    // cap reached without hitting the target: diagnose which split stalled
    let last = log.last().unwrap();
    for (split, acc) in [("forget", last.forget_acc), ("retain", last.retain_acc)] {
        if let Some(a) = acc {
            if a < cfg.min_acc {
                return Err(EngineError::TrainStalled {
                    split,
                    acc: a,
                    min: cfg.min_acc,
                    epochs: cfg.epoch_cap,
                });
            }
        }
    }
    Ok(log)
}

pub(crate) fn sgd_step(model: &mut ToyLm, opt: &mut AdamW, batch: &[Seq]) -> Result<f64, EngineError> {
    let mut tape = crate::tensor::Tape::new();
    let pv = model.register(&mut tape, GradMode::All);
    let loss = model.build_mean_ce(&mut tape, &pv, batch)?;
    let value = tape.value(loss).as_scalar()?;
    let grads = tape.backward(loss)?;
    let slots: Vec<Option<Tensor>> = pv.in_order().iter().map(|v| grads.get(*v).cloned()).collect();
    opt.step(&slots, |f| model.for_each_param_mut(|_, t| f(t)))?;
    Ok(value)
}

/// Fine-tune on the whole corpus (both splits must be present).
pub fn finetune(
    model: &mut ToyLm,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>, EngineError> {
    if !samples.iter().any(|s| s.split == Split::Forget)
        || !samples.iter().any(|s| s.split == Split::Retain)
    {
        return Err(EngineError::BadConfig(
            "finetune needs both forget and retain samples".into(),
        ));
    }
    train_qa(model, samples, cfg)
}

/// Fresh model trained with the same regimen on `ids` only. With the same
/// seeds and the full id set this reproduces the fine-tune bit-for-bit.
pub fn train_retain_model(
    model_cfg: &ModelConfig,
    init_seed: u64,
    samples: &[Sample],
    ids: &BTreeSet<String>,
    cfg: &TrainConfig,
) -> Result<(ToyLm, Vec<EpochLog>), EngineError> {
    let subset: Vec<Sample> = samples.iter().filter(|s| ids.contains(&s.id)).cloned().collect();
    if subset.is_empty() {
        return Err(EngineError::BadConfig("empty retain id set".into()));
    }
    let mut model = ToyLm::init(*model_cfg, init_seed)?;
    let log = train_qa(&mut model, &subset, cfg)?;
    Ok((model, log))
}

// ── run state and the request loop ──────────────────────────────────────

pub struct RunState {
    pub model: ToyLm,
    /// Frozen fine-tuned model: NPO/KL reference and filter embedder.
    pub reference: ToyLm,
    pub history: EmbeddingIndex,
    /// Requests processed so far.
    pub t: usize,
    /// Ids of every sample requested so far (filtered-to-empty included).
    pub forget_done: BTreeSet<String>,
    pub thresholds: BinThresholds,
    /// Retain endpoint for interpolation-mode baselines.
    pub interp_retain: Option<ToyLm>,
    rlabel_rng: ChaCha8Rng,
    retain_rng: ChaCha8Rng,
}

impl RunState {
    pub fn new(finetuned: ToyLm, thresholds: BinThresholds, run_seed: u64) -> Self {
        RunState {
            reference: finetuned.clone(),
            model: finetuned,
            history: EmbeddingIndex::new(),
            t: 0,
            forget_done: BTreeSet::new(),
            thresholds,
            interp_retain: None,
            rlabel_rng: seed_stream(run_seed, "rlabel"),
            retain_rng: seed_stream(run_seed, "retain-batch"),
        }
    }
}

/// Per-request audit trail: one CSV row set per pipeline stage.
#[derive(Debug, Clone)]
pub struct RequestAudit {
    pub request_id: String,
    pub surviving_ids: Vec<String>,
    pub skipped_empty: bool,
    pub objective: Option<ObjectiveKind>,
    pub filter_rows: Vec<String>,
    pub imp_row: String,
    pub attribution_rows: Vec<String>,
    pub step_rows: Vec<String>,
}

/// IMP every stream request against the fine-tuned model and calibrate the
/// low/medium/high thresholds — runs once, before the first request.
pub fn calibrate_stream(
    model: &ToyLm,
    samples: &[Sample],
    stream: &[Request],
) -> Result<BinThresholds, EngineError> {
    let mut scores = Vec::with_capacity(stream.len());
    for (i, req) in stream.iter().enumerate() {
        let seqs = request_qa_seqs(req, samples, None)?;
        scores.push(imp(model, &format!("r{:03}", i + 1), &seqs)?);
    }
    Ok(calibrate(&scores, "pre-run stream")?)
}

fn find_sample<'a>(samples: &'a [Sample], id: &str) -> Result<&'a Sample, EngineError> {
    samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| EngineError::Corpus(CorpusError::UnknownSample(id.to_string())))
}

/// QA sequences of a request's samples, optionally restricted to survivors.
fn request_qa_seqs(
    req: &Request,
    samples: &[Sample],
    keep: Option<&BTreeSet<String>>,
) -> Result<Vec<Seq>, EngineError> {
    let mut out = Vec::new();
    for id in &req.ids {
        if keep.map_or(true, |k| k.contains(id)) {
            out.push(qa_seq(find_sample(samples, id)?));
        }
    }
    Ok(out)
}

fn all_block_pairs(n_blocks: usize) -> Vec<(usize, BlockPart)> {
    (0..n_blocks)
        .flat_map(|b| [(b, BlockPart::Attention), (b, BlockPart::Mlp)])
        .collect()
}

/// Process one unlearning request end to end. The model is untouched when
/// filtering discards everything; the request's ids are counted either way.
pub fn process_request(
    state: &mut RunState,
    cfg: &RunConfig,
    samples: &[Sample],
    request: &Request,
) -> Result<RequestAudit, EngineError> {
    let request_id = format!("r{:03}", state.t + 1);
    let rid = request_id.clone();
    let result = process_request_inner(state, cfg, samples, request, &request_id);
    state.t += 1;
    state.forget_done.extend(request.ids.iter().cloned());
    result.map_err(|source| EngineError::Request {
        id: rid,
        source: Box::new(source),
    })
}

fn process_request_inner(
    state: &mut RunState,
    cfg: &RunConfig,
    samples: &[Sample],
    request: &Request,
    request_id: &str,
) -> Result<RequestAudit, EngineError> {
    // 1. redundancy filter over the request's chunks
    let chunks = corpus::request_chunks(request, samples, cfg.filter.chunk_tokens)?;
    let (filter_rows, survivors): (Vec<String>, BTreeSet<String>) = if cfg.ablations.no_filter {
        (
            chunks
                .iter()
                .map(|c| format!("{request_id},{},,,unfiltered", c.id()))
                .collect(),
            request.ids.iter().cloned().collect(),
        )
    } else {
        let (kept, decisions) = filter_request(
            &state.reference,
            &state.model,
            &mut state.history,
            request_id,
            &chunks,
            &cfg.filter,
        )?;
        (
            decisions.iter().map(|d| d.csv_row()).collect(),
            kept.iter().map(|c| c.parent.clone()).collect(),
        )
    };

    if survivors.is_empty() {
        return Ok(RequestAudit {
            request_id: request_id.to_string(),
            surviving_ids: Vec::new(),
            skipped_empty: true,
            objective: None,
            filter_rows,
            imp_row: format!("{request_id},,skipped-empty,"),
            attribution_rows: vec![format!("{request_id},,,skipped-empty")],
            step_rows: Vec::new(),
        })
    }
    let forget_seqs = request_qa_seqs(request, samples, Some(&survivors))?;

    // 2. importance score → unlearning method (unless pinned by ablation)
    let (objective, imp_row) = if let Some(kind) = cfg.ablations.fixed_method {
        (kind, format!("{request_id},,fixed,{}", kind.as_str()))
    } else {
        let score = imp(&state.model, request_id, &forget_seqs)?;
        let (bin, kind) = select_method(&score, &state.thresholds, &cfg.method_map);
        let row = ImpAuditRow {
            request_id: request_id.to_string(),
            value: score.value,
            bin,
            objective: kind,
        };
        (kind, row.csv_row())
    };

    // 3. layer attribution → trainable set (unless ablated to full update)
    let attribution_rows = if cfg.ablations.full_update {
        state.model.set_trainable(&all_block_pairs(cfg.model.n_blocks))?;
        (0..cfg.model.n_blocks)
            .map(|b| format!("{request_id},{b},,true"))
            .collect()
    } else {
        let k = cfg.k.unwrap_or_else(|| default_k(cfg.model.n_blocks));
        let report: AttributionReport =
            attribute(&mut state.model, request_id, &forget_seqs, k)?;
        apply_selection(&mut state.model, &report)?;
        report.csv_rows()
    };

    // 4. restricted unlearning steps; fresh optimizer per request
    let retain_pool: Vec<&Sample> = samples.iter().filter(|s| s.split == Split::Retain).collect();
    let mut opt = AdamW::new(
        AdamWConfig::with_lr(cfg.unlearn_lr),
        CosineSchedule::new(cfg.unlearn_lr, cfg.steps_per_request),
        state.model.param_count(),
    )?;
    let mut step_rows = Vec::with_capacity(cfg.steps_per_request);
    for _ in 0..cfg.steps_per_request {
        // rngs advance only for the branches the objective actually uses,
        // so ablated configs replay bit-identically as hand-rolled loops
        let retain_seqs: Vec<Seq> = if objective.uses_retain() {
            let n = cfg.retain_batch.min(retain_pool.len());
            retain_pool
                .choose_multiple(&mut state.retain_rng, n)
                .map(|s| qa_seq(s))
                .collect()
        } else {
            Vec::new()
        };
        let labels = if objective == ObjectiveKind::RLabel {
            Some(draw_rlabel_targets(
                &forget_seqs,
                cfg.model.vocab,
                &mut state.rlabel_rng,
            ))
        } else {
            None
        };
        let log: StepLog = composite_step(
            &mut state.model,
            &state.reference,
            &mut opt,
            objective,
            &cfg.objective,
            &forget_seqs,
            &retain_seqs,
            labels.as_deref(),
        )?;
        step_rows.push(log.csv_row(request_id));
    }

    Ok(RequestAudit {
        request_id: request_id.to_string(),
        surviving_ids: survivors.into_iter().collect(),
        skipped_empty: false,
        objective: Some(objective),
        filter_rows,
        imp_row,
        attribution_rows,
        step_rows,
    })
}

// ── checkpoint evaluation ───────────────────────────────────────────────

/// One evaluated checkpoint: the bundle plus the sets it was computed on.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub t: usize,
    pub bundle: MetricBundle,
}

pub fn metrics_csv_header() -> &'static str {
    "t,f,r,fq,rq,fd,ru,\
     uf_prob,uf_rouge,uf_acc,ur_prob,ur_rouge,ur_acc,\
     bf_prob,bf_rouge,bf_acc,br_prob,br_rouge,br_acc"
}

pub fn metrics_csv_row(t: usize, b: &MetricBundle) -> String {
    let mut row = format!(
        "{t},{},{},{},{},{},{}",
        b.f, b.r, b.fq, b.rq, b.fd, b.ru
    );
    for m in [
        &b.unlearned_forget,
        &b.unlearned_retain,
        &b.baseline_forget,
        &b.baseline_retain,
    ] {
        write!(row, ",{},{},{}", m.prob, m.rouge_l, m.acc).unwrap();
    }
    row
}

/// Evaluate the current model against the matched retain baseline. The
/// forget set is everything requested so far (the full stream's ids before
/// the first request, so t=0 is well defined); the retain side is the
/// complement within the corpus.
pub fn checkpoint_eval(
    state: &RunState,
    cfg: &RunConfig,
    samples: &[Sample],
    total_requests: usize,
) -> Result<Checkpoint, EngineError> {
    let forget_ids: BTreeSet<String> = if state.forget_done.is_empty() {
        samples
            .iter()
            .filter(|s| s.split == Split::Forget)
            .map(|s| s.id.clone())
            .collect()
    } else {
        state.forget_done.clone()
    };
    let forget_set: Vec<Sample> = samples
        .iter()
        .filter(|s| forget_ids.contains(&s.id))
        .cloned()
        .collect();
    let retain_set: Vec<Sample> = samples
        .iter()
        .filter(|s| !forget_ids.contains(&s.id))
        .cloned()
        .collect();

    let uf = eval_set(&state.model, &forget_set)?;
    let ur = eval_set(&state.model, &retain_set)?;
    let (bf, br) = match cfg.baseline {
        BaselineMode::ExactRetrain => {
            let keep: BTreeSet<String> = samples
                .iter()
                .map(|s| s.id.clone())
                .filter(|id| !state.forget_done.contains(id))
                .collect();
            let (baseline, _) =
                train_retain_model(&cfg.model, cfg.init_seed, samples, &keep, &cfg.train)?;
            (eval_set(&baseline, &forget_set)?, eval_set(&baseline, &retain_set)?)
        }
        BaselineMode::Interpolation => {
            let endpoint = state.interp_retain.as_ref().ok_or_else(|| {
                EngineError::BadConfig("interpolation mode needs a retain endpoint".into())
            })?;
            let alpha = (state.t as f64 / total_requests.max(1) as f64).min(1.0);
            let bf = eval_set(&state.reference, &forget_set)?
                .lerp(&eval_set(endpoint, &forget_set)?, alpha);
            let br = eval_set(&state.reference, &retain_set)?
                .lerp(&eval_set(endpoint, &retain_set)?, alpha);
            (bf, br)
        }
    };
    Ok(Checkpoint {
        t: state.t,
        bundle: aggregate(uf, ur, bf, br)?,
    })
}

// ── whole-run orchestration ─────────────────────────────────────────────

pub struct RunOutcome {
    pub corpus: Vec<Sample>,
    pub stream: Vec<Request>,
    pub finetune_log: Vec<EpochLog>,
    pub audits: Vec<RequestAudit>,
    pub checkpoints: Vec<Checkpoint>,
    pub state: RunState,
}

impl RunOutcome {
    pub fn metrics_rows(&self) -> Vec<String> {
        let mut rows = vec![metrics_csv_header().to_string()];
        rows.extend(
            self.checkpoints
                .iter()
                .map(|c| metrics_csv_row(c.t, &c.bundle)),
        );
        rows
    }
}

/// Generate, fine-tune, then drive the full request stream with checkpoint
/// evaluations; optionally write the run directory.
pub fn run(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunOutcome, EngineError> {
    cfg.validate()?;
    let corpus = generate_corpus(cfg.corpus_seed, cfg.per_category, cfg.forget_fraction)?;
    let forget: Vec<Sample> = corpus.iter().filter(|s| s.split == Split::Forget).cloned().collect();
    let stream = make_request_stream(&forget, cfg.request_size, cfg.stream_seed)?;

    let mut model = ToyLm::init(cfg.model, cfg.init_seed)?;
    let finetune_log = finetune(&mut model, &corpus, &cfg.train)?;
    let thresholds = calibrate_stream(&model, &corpus, &stream)?;
    let mut state = RunState::new(model, thresholds, cfg.run_seed);
    if cfg.baseline == BaselineMode::Interpolation {
        let retain_ids: BTreeSet<String> = corpus
            .iter()
            .filter(|s| s.split == Split::Retain)
            .map(|s| s.id.clone())
            .collect();
        let (endpoint, _) =
            train_retain_model(&cfg.model, cfg.init_seed, &corpus, &retain_ids, &cfg.train)?;
        state.interp_retain = Some(endpoint);
    }

    let mut audits = Vec::with_capacity(stream.len());
    let mut checkpoints = Vec::new();
    let mut saved = Vec::new();
    checkpoints.push(checkpoint_eval(&state, cfg, &corpus, stream.len())?);
    saved.push((0, state.model.clone()));
    for req in &stream {
        audits.push(process_request(&mut state, cfg, &corpus, req)?);
        if state.t % cfg.checkpoint_interval == 0 || state.t == stream.len() {
            checkpoints.push(checkpoint_eval(&state, cfg, &corpus, stream.len())?);
            saved.push((state.t, state.model.clone()));
        }
    }

    let outcome = RunOutcome {
        corpus,
        stream,
        finetune_log,
        audits,
        checkpoints,
        state,
    };
    if let Some(dir) = out_dir {
        write_run_dir(dir, cfg, &outcome, &saved)?;
    }
    Ok(outcome)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), EngineError> {
    let mut text = lines.join("\n");
    text.push('\n');
    Ok(std::fs::write(path, text)?)
}

fn write_run_dir(
    dir: &Path,
    cfg: &RunConfig,
    outcome: &RunOutcome,
    saved: &[(usize, ToyLm)],
) -> Result<(), EngineError> {
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    std::fs::write(dir.join("config.json"), cfg.snapshot())?;

    let mut ft = vec![EpochLog::csv_header().to_string()];
    ft.extend(outcome.finetune_log.iter().map(|e| e.csv_row()));
    write_lines(&dir.join("finetune.csv"), &ft)?;

    let mut filter_rows = vec![crate::filter::FilterDecision::csv_header().to_string()];
    let mut imp_rows = vec![ImpAuditRow::csv_header().to_string()];
    let mut attr_rows = vec![AttributionReport::csv_header().to_string()];
    let mut step_rows = vec![StepLog::csv_header().to_string()];
    for a in &outcome.audits {
        filter_rows.extend(a.filter_rows.iter().cloned());
        imp_rows.push(a.imp_row.clone());
        attr_rows.extend(a.attribution_rows.iter().cloned());
        step_rows.extend(a.step_rows.iter().cloned());
    }
    write_lines(&dir.join("filter.csv"), &filter_rows)?;
    write_lines(&dir.join("imp.csv"), &imp_rows)?;
    write_lines(&dir.join("attribution.csv"), &attr_rows)?;
    write_lines(&dir.join("steps.csv"), &step_rows)?;
    write_lines(&dir.join("metrics.csv"), &outcome.metrics_rows())?;

    for (t, m) in saved {
        crate::model::save_checkpoint(m, &dir.join(format!("checkpoints/ckpt-{t:04}.bin")))?;
    }
    Ok(())
}

/// Partition invariant: requested ⊎ remaining = corpus ids, no overlap.
pub fn partition_ok(state: &RunState, samples: &[Sample]) -> bool {
    let all: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    state.forget_done.iter().all(|id| all.contains(id.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::model_hash;
    use std::sync::OnceLock;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            corpus_seed: 11,
            per_category: 4,
            forget_fraction: 0.5,
            request_size: 2,
            stream_seed: 12,
            model: ModelConfig {
                vocab: crate::tokenizer::MIN_VOCAB,
                d_model: 16,
                n_heads: 2,
                n_blocks: 2,
                d_ff: 32,
                max_seq_len: 160,
            },
            init_seed: 13,
            train: TrainConfig {
                lr: 1e-2,
                batch: 6,
                epoch_cap: 300,
                target_acc: 0.9,
                min_acc: 0.5,
                shuffle_seed: 14,
            },
            filter: FilterConfig::default(),
            method_map: MethodMap::default(),
            k: None,
            objective: ObjectiveConfig::default(),
            steps_per_request: 2,
            retain_batch: 4,
            unlearn_lr: 5e-4,
            checkpoint_interval: 3,
            baseline: BaselineMode::ExactRetrain,
            ablations: Ablations::default(),
            run_seed: 15,
        }
    }

    struct Fx {
        cfg: RunConfig,
        corpus: Vec<Sample>,
        stream: Vec<Request>,
        finetuned: ToyLm,
        finetune_log: Vec<EpochLog>,
        thresholds: BinThresholds,
    }

    fn fx() -> &'static Fx {
        static FX: OnceLock<Fx> = OnceLock::new();
        FX.get_or_init(|| {
            let cfg = tiny_cfg();
            let corpus =
                generate_corpus(cfg.corpus_seed, cfg.per_category, cfg.forget_fraction).unwrap();
            let forget: Vec<Sample> =
                corpus.iter().filter(|s| s.split == Split::Forget).cloned().collect();
            let stream = make_request_stream(&forget, cfg.request_size, cfg.stream_seed).unwrap();
            let mut finetuned = ToyLm::init(cfg.model, cfg.init_seed).unwrap();
            let finetune_log = finetune(&mut finetuned, &corpus, &cfg.train).unwrap();
            let thresholds = calibrate_stream(&finetuned, &corpus, &stream).unwrap();
            Fx {
                cfg,
                corpus,
                stream,
                finetuned,
                finetune_log,
                thresholds,
            }
        })
    }

    fn fresh_state(f: &Fx) -> RunState {
        let mut s = RunState::new(f.finetuned.clone(), f.thresholds.clone(), f.cfg.run_seed);
        s.model = f.finetuned.clone();
        s
    }

    #[test]
    fn finetune_reaches_target_from_near_random_start() {
        let f = fx();
        let first = f.finetune_log.first().unwrap();
        let last = f.finetune_log.last().unwrap();
        // untrained accuracy is essentially random over a 261-way vocabulary
        assert!(first.forget_acc.unwrap() < 0.1, "epoch 0 forget {first:?}");
        assert!(first.retain_acc.unwrap() < 0.1, "epoch 0 retain {first:?}");
        assert!(last.forget_acc.unwrap() >= 0.9);
        assert!(last.retain_acc.unwrap() >= 0.9);
        // on-average monotone rise: 5-epoch windows of the mean accuracy
        let accs: Vec<f64> = f
            .finetune_log
            .iter()
            .map(|e| (e.forget_acc.unwrap() + e.retain_acc.unwrap()) / 2.0)
            .collect();
        if accs.len() >= 10 {
            let w = 5;
            let windows: Vec<f64> = accs
                .chunks(w)
                .filter(|c| c.len() == w)
                .map(|c| c.iter().sum::<f64>() / w as f64)
                .collect();
            for pair in windows.windows(2) {
                assert!(
                    pair[1] >= pair[0] - 0.02,
                    "window mean regressed: {windows:?}"
                );
            }
        }
    }

    #[test]
    fn finetune_is_deterministic() {
        let f = fx();
        let mut again = ToyLm::init(f.cfg.model, f.cfg.init_seed).unwrap();
        finetune(&mut again, &f.corpus, &f.cfg.train).unwrap();
        assert_eq!(model_hash(&again), model_hash(&f.finetuned));
    }

    #[test]
    fn retrain_on_all_ids_reproduces_the_finetune() {
        let f = fx();
        let all: BTreeSet<String> = f.corpus.iter().map(|s| s.id.clone()).collect();
        let (m, _) =
            train_retain_model(&f.cfg.model, f.cfg.init_seed, &f.corpus, &all, &f.cfg.train)
                .unwrap();
        assert_eq!(model_hash(&m), model_hash(&f.finetuned));
    }

    #[test]
    fn retain_model_keeps_a_forget_gap() {
        let f = fx();
        let retain_ids: BTreeSet<String> = f
            .corpus
            .iter()
            .filter(|s| s.split == Split::Retain)
            .map(|s| s.id.clone())
            .collect();
        let (m, log) =
            train_retain_model(&f.cfg.model, f.cfg.init_seed, &f.corpus, &retain_ids, &f.cfg.train)
                .unwrap();
        let forget: Vec<Sample> =
            f.corpus.iter().filter(|s| s.split == Split::Forget).cloned().collect();
        let retain: Vec<Sample> =
            f.corpus.iter().filter(|s| s.split == Split::Retain).cloned().collect();
        let fa = split_accuracy(&m, &forget).unwrap();
        let ra = split_accuracy(&m, &retain).unwrap();
        assert!(ra >= 0.9, "retain acc {ra}");
        assert!(ra - fa >= 0.2, "no gap: retain {ra} vs forget {fa}");
        // the retain log never saw a forget sample
        assert!(log.iter().all(|e| e.forget_acc.is_none()));
        // disjointness audit: no forget id in the retain id set
        assert!(forget.iter().all(|s| !retain_ids.contains(&s.id)));
    }

    #[test]
    fn duplicate_partner_request_is_discarded_and_leaves_model_untouched() {
        let f = fx();
        // corpus stress pair: identical texts, ids ...-000/-001 (copyright)
        let dup: Vec<&Sample> = f
            .corpus
            .iter()
            .filter(|s| s.stress.starts_with("duplicate:"))
            .collect();
        let (a, b) = (dup[0], dup[1]);
        assert_eq!(a.text, b.text);
        let mut state = fresh_state(f);
        let r1 = Request { ids: vec![a.id.clone()] };
        let r2 = Request { ids: vec![b.id.clone()] };
        let audit1 = process_request(&mut state, &f.cfg, &f.corpus, &r1).unwrap();
        assert!(!audit1.skipped_empty);
        let hash = model_hash(&state.model);
        let audit2 = process_request(&mut state, &f.cfg, &f.corpus, &r2).unwrap();
        assert!(audit2.skipped_empty, "{:?}", audit2.filter_rows);
        assert!(audit2.filter_rows.iter().all(|r| r.ends_with("discarded")));
        assert_eq!(model_hash(&state.model), hash);
        // still counted into the cumulative forget set
        assert!(state.forget_done.contains(&b.id));
        assert_eq!(state.t, 2);
    }

    #[test]
    fn all_ablations_reproduce_a_naive_ga_loop() {
        let f = fx();
        let mut cfg = f.cfg.clone();
        cfg.ablations = Ablations {
            no_filter: true,
            fixed_method: Some(ObjectiveKind::Ga),
            full_update: true,
        };
        let mut state = fresh_state(f);
        for req in &f.stream {
            process_request(&mut state, &cfg, &f.corpus, req).unwrap();
        }
        // hand-rolled naive loop: every block trainable, GA on each request
        let mut naive = f.finetuned.clone();
        let reference = f.finetuned.clone();
        for req in &f.stream {
            naive.set_trainable(&all_block_pairs(cfg.model.n_blocks)).unwrap();
            let seqs = request_qa_seqs(req, &f.corpus, None).unwrap();
            let mut opt = AdamW::new(
                AdamWConfig::with_lr(cfg.unlearn_lr),
                CosineSchedule::new(cfg.unlearn_lr, cfg.steps_per_request),
                naive.param_count(),
            )
            .unwrap();
            for _ in 0..cfg.steps_per_request {
                composite_step(
                    &mut naive,
                    &reference,
                    &mut opt,
                    ObjectiveKind::Ga,
                    &cfg.objective,
                    &seqs,
                    &[],
                    None,
                )
                .unwrap();
            }
        }
        assert_eq!(model_hash(&state.model), model_hash(&naive));
    }

    #[test]
    fn audit_covers_every_request_exactly_once() {
        let f = fx();
        let mut state = fresh_state(f);
        let mut audits = Vec::new();
        for req in &f.stream {
            audits.push(process_request(&mut state, &f.cfg, &f.corpus, req).unwrap());
        }
        assert!(partition_ok(&state, &f.corpus));
        let forget_total: BTreeSet<String> = f
            .corpus
            .iter()
            .filter(|s| s.split == Split::Forget)
            .map(|s| s.id.clone())
            .collect();
        assert_eq!(state.forget_done, forget_total);
        for (i, a) in audits.iter().enumerate() {
            let rid = format!("r{:03}", i + 1);
            assert_eq!(a.request_id, rid);
            assert!(!a.filter_rows.is_empty());
            assert!(a.filter_rows.iter().all(|r| r.starts_with(&format!("{rid},"))));
            assert!(a.imp_row.starts_with(&format!("{rid},")));
            assert!(!a.attribution_rows.is_empty());
            assert!(a.skipped_empty || a.step_rows.len() == f.cfg.steps_per_request);
        }
        let once = |rows: Vec<&String>, rid: &str| {
            rows.iter().filter(|r| r.starts_with(&format!("{rid},"))).count()
        };
        let imp_all: Vec<&String> = audits.iter().map(|a| &a.imp_row).collect();
        for i in 0..audits.len() {
            assert_eq!(once(imp_all.clone(), &format!("r{:03}", i + 1)), 1);
        }
    }

    #[test]
    fn checkpoint_at_start_scores_one_on_both_axes() {
        let f = fx();
        let state = fresh_state(f);
        let ck = checkpoint_eval(&state, &f.cfg, &f.corpus, f.stream.len()).unwrap();
        assert_eq!(ck.t, 0);
        // baseline retrains on every id with the same seeds → same model
        assert_eq!(ck.bundle.fd, 1.0);
        assert_eq!(ck.bundle.ru, 1.0);
        assert_eq!(ck.bundle.f, ck.bundle.fq);
        assert_eq!(ck.bundle.r, ck.bundle.rq);
    }

    #[test]
    fn interpolation_endpoints_match_exact_retrain() {
        let f = fx();
        let mut cfg = f.cfg.clone();
        cfg.request_size = 3;
        cfg.checkpoint_interval = 2;
        cfg.steps_per_request = 1;
        let exact = run(&cfg, None).unwrap();
        cfg.baseline = BaselineMode::Interpolation;
        let interp = run(&cfg, None).unwrap();
        // same pipeline → same unlearned-model metrics at every checkpoint
        let (e_last, i_last) = (
            exact.checkpoints.last().unwrap(),
            interp.checkpoints.last().unwrap(),
        );
        assert_eq!(e_last.t, i_last.t);
        assert_eq!(e_last.bundle.f, i_last.bundle.f);
        assert_eq!(e_last.bundle.r, i_last.bundle.r);
        // at the final checkpoint α = 1: the interpolation endpoint IS the
        // exact retrain on the retain split, trained with the same seeds
        assert_eq!(e_last.bundle.fq, i_last.bundle.fq);
        assert_eq!(e_last.bundle.rq, i_last.bundle.rq);
        assert!((0.0..=1.0).contains(&i_last.bundle.ru));
    }

    #[test]
    fn run_writes_a_complete_directory_and_is_bit_deterministic() {
        let f = fx();
        let mut cfg = f.cfg.clone();
        cfg.request_size = 3;
        cfg.checkpoint_interval = 2;
        cfg.steps_per_request = 1;
        let dir = tempfile::tempdir().unwrap();
        let a = run(&cfg, Some(dir.path())).unwrap();
        let b = run(&cfg, None).unwrap();
        assert_eq!(
            model_hash(&a.state.model),
            model_hash(&b.state.model),
            "end models differ"
        );
        assert_eq!(a.metrics_rows(), b.metrics_rows());
        for name in [
            "config.json",
            "finetune.csv",
            "filter.csv",
            "imp.csv",
            "attribution.csv",
            "steps.csv",
            "metrics.csv",
        ] {
            assert!(dir.path().join(name).is_file(), "{name} missing");
        }
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(
            metrics.lines().count(),
            a.checkpoints.len() + 1,
            "one row per checkpoint plus header"
        );
        let ckpts: Vec<_> = std::fs::read_dir(dir.path().join("checkpoints"))
            .unwrap()
            .collect();
        assert_eq!(ckpts.len(), a.checkpoints.len());
        let snap: RunConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap())
                .unwrap();
        assert_eq!(snap, cfg);
    }

    #[test]
    fn desk_schedule_checkpoint_count() {
        // interval 10 over 40 requests → t=0 plus 4 evals
        let mut points = vec![0usize];
        let (total, interval) = (40usize, 10usize);
        for t in 1..=total {
            if t % interval == 0 || t == total {
                points.push(t);
            }
        }
        assert_eq!(points, vec![0, 10, 20, 30, 40]);
    }

    #[test]
    fn config_snapshot_round_trips() {
        let cfg = tiny_cfg();
        let back: RunConfig = serde_json::from_str(&cfg.snapshot()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        for f in [
            |c: &mut RunConfig| c.request_size = 0,
            |c: &mut RunConfig| c.steps_per_request = 0,
            |c: &mut RunConfig| c.retain_batch = 0,
            |c: &mut RunConfig| c.checkpoint_interval = 0,
            |c: &mut RunConfig| c.unlearn_lr = -1.0,
            |c: &mut RunConfig| c.forget_fraction = 1.0,
            |c: &mut RunConfig| c.k = Some(0),
            |c: &mut RunConfig| c.filter.tau = 2.0,
        ] {
            let mut cfg = tiny_cfg();
            f(&mut cfg);
            assert!(cfg.validate().is_err());
        }
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn unknown_request_id_carries_request_context() {
        let f = fx();
        let mut state = fresh_state(f);
        let req = Request { ids: vec!["nope".into()] };
        let err = process_request(&mut state, &f.cfg, &f.corpus, &req).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("r001"), "{msg}");
        // even a failed request advances the counter and is owed deletion
        assert_eq!(state.t, 1);
    }
}
