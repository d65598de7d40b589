//! Evaluation: three base metrics (normalized answer probability, ROUGE-L
//! F1, teacher-forced token accuracy), their geometric-mean summaries, and
//! the symmetric forgetting/utility scores that compare an unlearned model
//! against a retain-model baseline. One code path serves both splits — the
//! only parameter is the sample list.

use crate::corpus::Sample;
use crate::model::{GradMode, ModelError, ToyLm};
use crate::tensor::{logsumexp, Tape};
use crate::tokenizer::{self, render_prompt, render_qa, Seq};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("answer tokenizes to zero tokens")]
    EmptyAnswer,
    #[error("metric evaluated over an empty sample set")]
    EmptySet,
    #[error("sequence too short or fully masked for accuracy")]
    NothingToScore,
    #[error("{0} is zero — baseline ratio undefined")]
    ZeroBaseline(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseMetrics {
    pub prob: f64,
    pub rouge_l: f64,
    pub acc: f64,
}

impl BaseMetrics {
    /// Geometric mean of the three components; any zero component forces 0.
    pub fn geo_mean(&self) -> f64 {
        (self.prob * self.rouge_l * self.acc).cbrt()
    }

    /// Per-component linear interpolation toward `other`; exact at both
    /// endpoints (α=0 → self, α=1 → other, bit-for-bit).
    pub fn lerp(&self, other: &BaseMetrics, alpha: f64) -> BaseMetrics {
        let l = |a: f64, b: f64| (1.0 - alpha) * a + alpha * b;
        BaseMetrics {
            prob: l(self.prob, other.prob),
            rouge_l: l(self.rouge_l, other.rouge_l),
            acc: l(self.acc, other.acc),
        }
    }
}

/// Everything a checkpoint evaluation produces. `f`/`r` summarize the
/// unlearned model on the forget/retain split, `fq`/`rq` the retain-model
/// baseline on the same splits, `fd`/`ru` the clamped symmetric ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub unlearned_forget: BaseMetrics,
    pub unlearned_retain: BaseMetrics,
    pub baseline_forget: BaseMetrics,
    pub baseline_retain: BaseMetrics,
    pub f: f64,
    pub r: f64,
    pub fq: f64,
    pub rq: f64,
    pub fd: f64,
    pub ru: f64,
}

// ── base metrics ────────────────────────────────────────────────────────

/// Length-normalized answer probability P(a|q)^(1/|a|), computed in
/// log-space over the answer's byte tokens with the rendered question as
/// context.
pub fn answer_probability(model: &ToyLm, question: &str, answer: &str) -> Result<f64, MetricsError> {
    let logps = answer_token_logps(model, question, answer)?;
    Ok(normalized_prob(&logps))
}

/// exp(mean of log-probabilities) — the log-space form of (∏p)^(1/n).
pub fn normalized_prob(logps: &[f64]) -> f64 {
    if logps.is_empty() {
        return 0.0;
    }
    (logps.iter().sum::<f64>() / logps.len() as f64).exp()
}

/// Per-token conditional log-probabilities of the answer tokens given the
/// question prompt (teacher-forced).
pub fn answer_token_logps(
    model: &ToyLm,
    question: &str,
    answer: &str,
) -> Result<Vec<f64>, MetricsError> {
    let prompt = render_prompt(question);
    let ans = tokenizer::encode_bytes(answer);
    if ans.is_empty() {
        return Err(MetricsError::EmptyAnswer);
    }
    let mut tokens = prompt.clone();
    tokens.extend(&ans);
    let mut tape = Tape::new();
    let pv = model.register(&mut tape, GradMode::None);
    let fwd = model.forward(&mut tape, &pv, &tokens)?;
    let logits = tape.value(fwd.logits);
    let v = model.cfg.vocab;
    let mut out = Vec::with_capacity(ans.len());
    for (k, &tok) in ans.iter().enumerate() {
        // row (prompt.len()-1+k) predicts the k-th answer token
        let row = &logits.data()[(prompt.len() - 1 + k) * v..(prompt.len() + k) * v];
        let lse = logsumexp(row).expect("logits finite");
        out.push(row[tok as usize] - lse);
    }
    Ok(out)
}

/// ROUGE-L F1 over token ids: longest common subsequence λ, precision
/// λ/|pred|, recall λ/|ref|, F1 = 2PR/(P+R); 0 when λ = 0 or either side is
/// empty.
pub fn rouge_l(pred: &[u32], reference: &[u32]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lambda = lcs_len(pred, reference) as f64;
    if lambda == 0.0 {
        return 0.0;
    }
    let p = lambda / pred.len() as f64;
    let r = lambda / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
        cur[0] = 0;
    }
    prev[b.len()]
}

/// Teacher-forced next-token accuracy: fraction of positions 2..T whose
/// argmax prediction (lowest-id tie-break) equals the actual token, over
/// positions where `mask` is true. `mask[t]` gates position t of `tokens`;
/// pass `None` to score every position.
pub fn token_accuracy(
    model: &ToyLm,
    tokens: &[u32],
    mask: Option<&[bool]>,
) -> Result<f64, MetricsError> {
    if tokens.len() < 2 {
        return Err(MetricsError::NothingToScore);
    }
    if let Some(m) = mask {
        assert_eq!(m.len(), tokens.len(), "mask length must match tokens");
    }
    let mut tape = Tape::new();
    let pv = model.register(&mut tape, GradMode::None);
    let fwd = model.forward(&mut tape, &pv, tokens)?;
    let logits = tape.value(fwd.logits);
    let v = model.cfg.vocab;
    let (mut hits, mut total) = (0usize, 0usize);
    for t in 1..tokens.len() {
        if let Some(m) = mask {
            if !m[t] {
                continue;
            }
        }
        let row = &logits.data()[(t - 1) * v..t * v];
        let mut best = 0usize;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        total += 1;
        if best as u32 == tokens[t] {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(MetricsError::NothingToScore);
    }
    Ok(hits as f64 / total as f64)
}

/// The QA rendering a sample is scored on.
pub fn qa_seq(sample: &Sample) -> Seq {
    let r = render_qa(&sample.question, &sample.answer);
    Seq::spanned(r.tokens, r.answer)
}

/// All three base metrics for one model over one sample set (unweighted
/// means). Generation for ROUGE-L is greedy with budget |reference| + 8.
pub fn eval_set(model: &ToyLm, samples: &[Sample]) -> Result<BaseMetrics, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let (mut prob, mut rouge, mut acc) = (0.0, 0.0, 0.0);
    for s in samples {
        prob += answer_probability(model, &s.question, &s.answer)?;
        let reference = tokenizer::encode_bytes(&s.answer);
        let pred = model.generate_greedy(&render_prompt(&s.question), reference.len() + 8)?;
        rouge += rouge_l(&pred, &reference);
        acc += token_accuracy(model, &qa_seq(s).tokens, None)?;
    }
    let n = samples.len() as f64;
    Ok(BaseMetrics {
        prob: prob / n,
        rouge_l: rouge / n,
        acc: acc / n,
    })
}

// ── aggregates ──────────────────────────────────────────────────────────

/// The clamped symmetric score max(0, 1 − |ratio − 1|).
pub fn symmetric_score(ratio: f64) -> f64 {
    (1.0 - (ratio - 1.0).abs()).max(0.0)
}

/// Assemble the bundle from the four base-metric evaluations. Errors when a
/// baseline geometric mean is zero (the ratio would be undefined).
pub fn aggregate(
    unlearned_forget: BaseMetrics,
    unlearned_retain: BaseMetrics,
    baseline_forget: BaseMetrics,
    baseline_retain: BaseMetrics,
) -> Result<MetricBundle, MetricsError> {
    let f = unlearned_forget.geo_mean();
    let r = unlearned_retain.geo_mean();
    let fq = baseline_forget.geo_mean();
    let rq = baseline_retain.geo_mean();
    if fq == 0.0 {
        return Err(MetricsError::ZeroBaseline("FQ"));
    }
    if rq == 0.0 {
        return Err(MetricsError::ZeroBaseline("RQ"));
    }
    Ok(MetricBundle {
        unlearned_forget,
        unlearned_retain,
        baseline_forget,
        baseline_retain,
        f,
        r,
        fq,
        rq,
        fd: symmetric_score(f / fq),
        ru: symmetric_score(r / rq),
    })
}

/// Mean probability the model assigns to each tracked token at its probe
/// position. A probe is (context prefix, expected next token).
pub fn shared_token_probability(
    model: &ToyLm,
    probes: &[(Vec<u32>, u32)],
) -> Result<f64, MetricsError> {
    if probes.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let mut sum = 0.0;
    for (prefix, token) in probes {
        let mut tape = Tape::new();
        let pv = model.register(&mut tape, GradMode::None);
        let fwd = model.forward(&mut tape, &pv, prefix)?;
        let logits = tape.value(fwd.logits);
        let v = model.cfg.vocab;
        let row = &logits.data()[(prefix.len() - 1) * v..prefix.len() * v];
        let lse = logsumexp(row).expect("logits finite");
        sum += (row[*token as usize] - lse).exp();
    }
    Ok(sum / probes.len() as f64)
}

/// Teacher-forced probes over a QA pair: one probe per answer token.
pub fn qa_probes(question: &str, answer: &str) -> Vec<(Vec<u32>, u32)> {
    let prompt = render_prompt(question);
    let ans = tokenizer::encode_bytes(answer);
    let mut out = Vec::with_capacity(ans.len());
    for (k, &tok) in ans.iter().enumerate() {
        let mut prefix = prompt.clone();
        prefix.extend(&ans[..k]);
        out.push((prefix, tok));
    }
    out
}
