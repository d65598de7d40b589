//! Post-unlearning recovery attacks: relearning via fine-tuning on
//! retain/unrelated/mixed data, and low-bit weight quantization. Both run on
//! model copies held by the caller and are re-scored with the standard metric
//! bundle afterwards.

use crate::corpus::{generate_corpus, CorpusError, Sample, Split};
use crate::engine::{lm_seq, sgd_step, EngineError};
use crate::metrics::{aggregate, eval_set, MetricBundle, MetricsError};
use crate::model::{ModelError, ToyLm};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule, OptimError};
use crate::seeded::seed_stream;
use crate::tensor::Tensor;
use crate::tokenizer::Seq;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

pub const DEFAULT_RELEARN_EPOCHS: usize = 3;
pub const DEFAULT_QUANT_BITS: u32 = 4;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("optimizer: {0}")]
    Optim(#[from] OptimError),
    #[error("training: {0}")]
    Engine(#[from] EngineError),
    #[error("relearn data includes forget-split sample `{0}`")]
    ForgetLeak(String),
    #[error("relearn data is empty")]
    EmptyData,
    #[error("quantization bit width {0} unsupported (need 2..=8)")]
    BadBits(u32),
    #[error("config: {0}")]
    BadConfig(String),
}

// ── relearning via fine-tuning ──────────────────────────────────────────

/// What the attacker fine-tunes on. The forget split is never an option:
/// attacker access to deleted data is out of the threat model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelearnData {
    RetainOnly,
    UnrelatedOnly,
    /// 50/50 interleave of retain and unrelated samples.
    Mixed,
}

impl RelearnData {
    pub fn arm_label(&self) -> &'static str {
        match self {
            RelearnData::RetainOnly => "relearn-retain-only",
            RelearnData::UnrelatedOnly => "relearn-unrelated-only",
            RelearnData::Mixed => "relearn-mixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelearnSpec {
    pub data: RelearnData,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Seed for the unrelated corpus; sample ids embed it, so any id overlap
    /// with the lab corpus would require the same seed.
    pub unrelated_seed: u64,
    pub unrelated_per_category: usize,
    pub shuffle_seed: u64,
}

impl Default for RelearnSpec {
    fn default() -> Self {
        RelearnSpec {
            data: RelearnData::Mixed,
            epochs: DEFAULT_RELEARN_EPOCHS,
            lr: 1e-3,
            batch: 8,
            unrelated_seed: 97,
            unrelated_per_category: 4,
            shuffle_seed: 98,
        }
    }
}

impl RelearnSpec {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AttackError::BadConfig(format!("relearn lr {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(AttackError::BadConfig("relearn batch 0".into()));
        }
        if self.unrelated_per_category < 2 {
            return Err(AttackError::BadConfig(format!(
                "unrelated_per_category {} below corpus minimum 2",
                self.unrelated_per_category
            )));
        }
        Ok(())
    }
}

/// What the attacker actually trained on, for the provenance audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelearnAudit {
    pub arm: String,
    pub data_ids: Vec<String>,
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
}

/// Draw the attack training set per the spec: the lab corpus supplies the
/// retain split, a disjoint-seed corpus supplies unrelated samples (relabeled
/// retain — they belong to no forget set), and mixed interleaves the two at
/// equal counts.
pub fn assemble_relearn_data(
    corpus: &[Sample],
    spec: &RelearnSpec,
) -> Result<Vec<Sample>, AttackError> {
    spec.validate()?;
    let retain: Vec<Sample> =
        corpus.iter().filter(|s| s.split == Split::Retain).cloned().collect();
    let unrelated = || -> Result<Vec<Sample>, AttackError> {
        let mut fresh = generate_corpus(spec.unrelated_seed, spec.unrelated_per_category, 0.5)?;
        for s in &mut fresh {
            s.split = Split::Retain;
        }
        Ok(fresh)
    };
    let data = match spec.data {
        RelearnData::RetainOnly => retain,
        RelearnData::UnrelatedOnly => unrelated()?,
        RelearnData::Mixed => {
            let other = unrelated()?;
            let n = retain.len().min(other.len());
            retain
                .into_iter()
                .take(n)
                .zip(other.into_iter().take(n))
                .flat_map(|(r, u)| [r, u])
                .collect()
        }
    };
    if data.is_empty() {
        return Err(AttackError::EmptyData);
    }
    Ok(data)
}

/// Fine-tune `model` on pre-assembled attack data for a fixed number of
/// epochs with the standard optimizer. Hard-errors if any sample is
/// forget-split or carries a forget id; zero epochs leaves the model
/// untouched.
pub fn relearn_with_data(
    model: &mut ToyLm,
    data: &[Sample],
    forget_ids: &BTreeSet<String>,
    spec: &RelearnSpec,
) -> Result<RelearnAudit, AttackError> {
    spec.validate()?;
    if data.is_empty() {
        return Err(AttackError::EmptyData);
    }
    for s in data {
        if s.split == Split::Forget || forget_ids.contains(&s.id) {
            return Err(AttackError::ForgetLeak(s.id.clone()));
        }
    }
    let mut audit = RelearnAudit {
        arm: spec.data.arm_label().into(),
        data_ids: data.iter().map(|s| s.id.clone()).collect(),
        epochs: spec.epochs,
        epoch_losses: Vec::with_capacity(spec.epochs),
    };
    if spec.epochs == 0 {
        return Ok(audit);
    }
    let seqs: Vec<Seq> = data.iter().map(lm_seq).collect();
    let batch = spec.batch.min(seqs.len());
    let steps_per_epoch = seqs.len().div_ceil(batch);
    let mut opt = AdamW::new(
        AdamWConfig::with_lr(spec.lr),
        CosineSchedule::new(spec.lr, spec.epochs * steps_per_epoch),
        model.param_count(),
    )?;
    let mut rng = seed_stream(spec.shuffle_seed, "relearn");
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for ids in order.chunks(batch) {
            let bseqs: Vec<Seq> = ids.iter().map(|&i| seqs[i].clone()).collect();
            epoch_loss += sgd_step(model, &mut opt, &bseqs)?;
        }
        audit.epoch_losses.push(epoch_loss / steps_per_epoch as f64);
    }
    Ok(audit)
}

/// Assemble the attack set from `corpus` per `spec`, audit it against the
/// corpus's forget split, and fine-tune `model` on it in place.
pub fn relearn(
    model: &mut ToyLm,
    corpus: &[Sample],
    spec: &RelearnSpec,
) -> Result<RelearnAudit, AttackError> {
    let data = assemble_relearn_data(corpus, spec)?;
    let forget_ids: BTreeSet<String> = corpus
        .iter()
        .filter(|s| s.split == Split::Forget)
        .map(|s| s.id.clone())
        .collect();
    relearn_with_data(model, &data, &forget_ids, spec)
}

// ── weight quantization ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizeSpec {
    pub bits: u32,
    /// One scale per row (dim 0) of rank-2 tensors instead of one per tensor.
    pub per_channel: bool,
}

impl Default for QuantizeSpec {
    fn default() -> Self {
        QuantizeSpec { bits: DEFAULT_QUANT_BITS, per_channel: false }
    }
}

/// One parameter tensor as symmetric integer codes plus scales. `scales` has
/// one entry per row when quantized per-channel, otherwise exactly one.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub codes: Vec<i8>,
    pub scales: Vec<f64>,
}

impl QTensor {
    /// Row length used for scale lookup: dim-1 extent for rank-2 tensors
    /// under per-channel scaling, else the whole tensor.
    fn row_len(&self) -> usize {
        if self.scales.len() == 1 {
            self.codes.len()
        } else {
            self.shape[1]
        }
    }

    pub fn scale_for(&self, flat_idx: usize) -> f64 {
        self.scales[flat_idx / self.row_len().max(1)]
    }

    pub fn dequant(&self) -> Tensor {
        let data: Vec<f64> =
            (0..self.codes.len()).map(|i| self.codes[i] as f64 * self.scale_for(i)).collect();
        Tensor::from_vec(&self.shape, data).expect("shape preserved from source tensor")
    }
}

/// The quantized model: integer codes and scales per tensor, plus the
/// dequantized weights ready for evaluation.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub bits: u32,
    pub per_channel: bool,
    pub tensors: Vec<QTensor>,
    model: ToyLm,
}

impl QuantizedModel {
    /// Model carrying the dequantized weights.
    pub fn model(&self) -> &ToyLm {
        &self.model
    }

    pub fn into_model(self) -> ToyLm {
        self.model
    }
}

/// Symmetric round-to-nearest-even quantization of one tensor. The scale is
/// max|w|/qmax (1.0 for an all-zero extent so codes stay zero), codes are
/// clamped to [−2^(b−1), 2^(b−1)−1].
pub fn quantize_tensor(
    name: &str,
    t: &Tensor,
    bits: u32,
    per_channel: bool,
) -> Result<QTensor, AttackError> {
    if !(2..=8).contains(&bits) {
        return Err(AttackError::BadBits(bits));
    }
    let qmax = (1i32 << (bits - 1)) - 1;
    let qmin = -(1i32 << (bits - 1));
    let data = t.data();
    let row_len = if per_channel && t.shape().len() == 2 { t.shape()[1] } else { data.len() };
    let mut codes = Vec::with_capacity(data.len());
    let mut scales = Vec::new();
    for row in data.chunks(row_len.max(1)) {
        let m = row.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        let s = if m == 0.0 { 1.0 } else { m / qmax as f64 };
        scales.push(s);
        for &w in row {
            let c = (w / s).round_ties_even().clamp(qmin as f64, qmax as f64);
            codes.push(c as i8);
        }
    }
    Ok(QTensor { name: name.into(), shape: t.shape().to_vec(), codes, scales })
}

/// Quantize every parameter tensor of `model`; the result carries both the
/// codes and a copy of the model with dequantized weights.
pub fn quantize(model: &ToyLm, spec: &QuantizeSpec) -> Result<QuantizedModel, AttackError> {
    let mut tensors = Vec::new();
    let mut err = None;
    model.for_each_param(|name, _, t| {
        if err.is_some() {
            return;
        }
        match quantize_tensor(name, t, spec.bits, spec.per_channel) {
            Ok(q) => tensors.push(q),
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let mut dq = model.clone();
    let mut i = 0;
    // for_each_param_mut walks the same canonical order as for_each_param
    dq.for_each_param_mut(|_, t| {
        let q = &tensors[i];
        for (j, w) in t.data_mut().iter_mut().enumerate() {
            *w = q.codes[j] as f64 * q.scale_for(j);
        }
        i += 1;
    });
    Ok(QuantizedModel { bits: spec.bits, per_channel: spec.per_channel, tensors, model: dq })
}

// ── arms and reporting ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttackSpec {
    Relearn(RelearnSpec),
    Quantize(QuantizeSpec),
}

impl AttackSpec {
    pub fn arm_label(&self) -> String {
        match self {
            AttackSpec::Relearn(r) => r.data.arm_label().into(),
            AttackSpec::Quantize(q) => format!("int{}", q.bits),
        }
    }
}

/// Run one attack arm on a copy of `model` and return the attacked model.
/// `corpus` supplies relearn data and the forget-id audit; quantization
/// ignores it.
pub fn run_attack(
    model: &ToyLm,
    corpus: &[Sample],
    spec: &AttackSpec,
) -> Result<ToyLm, AttackError> {
    let mut copy = model.clone();
    match spec {
        AttackSpec::Relearn(r) => {
            relearn(&mut copy, corpus, r)?;
            Ok(copy)
        }
        AttackSpec::Quantize(q) => Ok(quantize(&copy, q)?.into_model()),
    }
}

/// Metric bundle of `model` scored against `baseline` on the given splits —
/// the pre/post halves of an attack report row.
pub fn eval_against(
    model: &ToyLm,
    baseline: &ToyLm,
    forget: &[Sample],
    retain: &[Sample],
) -> Result<MetricBundle, AttackError> {
    let uf = eval_set(model, forget)?;
    let ur = eval_set(model, retain)?;
    let bf = eval_set(baseline, forget)?;
    let br = eval_set(baseline, retain)?;
    Ok(aggregate(uf, ur, bf, br)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub arm: String,
    pub pre: MetricBundle,
    pub post: MetricBundle,
}

pub fn attack_report_header() -> &'static str {
    "arm,pre_fd,post_fd,pre_ru,post_ru"
}

impl AttackOutcome {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.arm, self.pre.fd, self.post.fd, self.pre.ru, self.post.ru
        )
    }
}

// ── tests ───────────────────────────────────────────────────────────────
