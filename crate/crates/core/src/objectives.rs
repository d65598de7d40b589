//! The six unlearning objectives, built as differentiable tape graphs over
//! the current model with an optional frozen reference model: gradient
//! ascent (GA), GA with gradient descent on retain (GA+GD), GA with a KL
//! anchor (GA+KL), negative preference optimization (NPO), NPO with the KL
//! anchor (NPO+KL), and random-label CE (RLabel). Composite objectives are
//! forget term + λ · retain term.
//!
//! Reference-model quantities (per-sequence answer log-probs, per-position
//! next-token distributions) are computed off-tape and injected as
//! constants, so gradients flow only through the current model.

use crate::model::{GradMode, ModelError, ParamVars, ToyLm};
use crate::optim::{AdamW, OptimError};
use crate::tensor::{logsumexp, Tape, Tensor, TensorError, Var};
use crate::tokenizer::Seq;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_STEPS_PER_REQUEST: usize = 5;
pub const DEFAULT_RETAIN_BATCH: usize = 8;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("forget batch is empty")]
    EmptyForget,
    #[error("{0} requires a nonempty retain batch")]
    EmptyRetain(&'static str),
    #[error("beta must be > 0, got {0}")]
    BadBeta(f64),
    #[error("random-label targets missing or shaped wrong for the forget batch")]
    BadLabels,
    #[error("unknown objective name {0:?}")]
    UnknownName(String),
    #[error("{0} term failed: {1}")]
    TermFailed(&'static str, Box<ObjectiveError>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Ga,
    GaGd,
    GaKl,
    Npo,
    NpoKl,
    #[serde(rename = "rlabel")]
    RLabel,
}

pub const ALL_OBJECTIVES: [ObjectiveKind; 6] = [
    ObjectiveKind::Ga,
    ObjectiveKind::GaGd,
    ObjectiveKind::GaKl,
    ObjectiveKind::Npo,
    ObjectiveKind::NpoKl,
    ObjectiveKind::RLabel,
];

impl ObjectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::Ga => "GA",
            ObjectiveKind::GaGd => "GA+GD",
            ObjectiveKind::GaKl => "GA+KL",
            ObjectiveKind::Npo => "NPO",
            ObjectiveKind::NpoKl => "NPO+KL",
            ObjectiveKind::RLabel => "RLabel",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ObjectiveError> {
        match s.to_ascii_lowercase().as_str() {
            "ga" => Ok(ObjectiveKind::Ga),
            "ga+gd" | "ga-gd" => Ok(ObjectiveKind::GaGd),
            "ga+kl" | "ga-kl" => Ok(ObjectiveKind::GaKl),
            "npo" => Ok(ObjectiveKind::Npo),
            "npo+kl" | "npo-kl" => Ok(ObjectiveKind::NpoKl),
            "rlabel" => Ok(ObjectiveKind::RLabel),
            _ => Err(ObjectiveError::UnknownName(s.to_string())),
        }
    }

    /// Whether the objective carries a retain-side anchor term.
    pub fn uses_retain(&self) -> bool {
        matches!(
            self,
            ObjectiveKind::GaGd | ObjectiveKind::GaKl | ObjectiveKind::NpoKl
        )
    }

    pub fn uses_reference(&self) -> bool {
        matches!(
            self,
            ObjectiveKind::GaKl | ObjectiveKind::Npo | ObjectiveKind::NpoKl
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// NPO inverse temperature.
    pub beta: f64,
    /// Retain-term weight in composite objectives.
    pub lambda: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            beta: DEFAULT_BETA,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

// ── reference-model constants ───────────────────────────────────────────

/// Summed answer-span NLL of each sequence under a frozen model.
fn frozen_nll_sums(model: &ToyLm, seqs: &[Seq]) -> Result<Vec<f64>, ObjectiveError> {
    let mut tape = Tape::new();
    let pv = model.register(&mut tape, GradMode::None);
    let nlls = model.build_seq_nll_sums(&mut tape, &pv, seqs)?;
    let mut out = Vec::with_capacity(nlls.len());
    for v in nlls {
        out.push(tape.value(v).as_scalar()?);
    }
    Ok(out)
}

/// Frozen next-token distributions over one sequence's target rows:
/// probability matrix [target_len, vocab] and the summed plogp term.
fn frozen_target_dist(model: &ToyLm, seq: &Seq) -> Result<(Tensor, f64), ObjectiveError> {
    let mut tape = Tape::new();
    let pv = model.register(&mut tape, GradMode::None);
    let fwd = model.forward(&mut tape, &pv, &seq.tokens)?;
    let logits = tape.value(fwd.logits);
    let v = model.cfg.vocab;
    let (s, e) = seq.target;
    let len = e - s;
    let mut probs = Vec::with_capacity(len * v);
    let mut plogp = 0.0;
    for r in (s - 1)..(e - 1) {
        let row = &logits.data()[r * v..(r + 1) * v];
        let lse = logsumexp(row).expect("logits finite");
        for &x in row {
            let lp = x - lse;
            let p = lp.exp();
            probs.push(p);
            plogp += p * lp;
        }
    }
    Ok((Tensor::from_vec(&[len, v], probs)?, plogp))
}

// ── term builders ───────────────────────────────────────────────────────

/// Gradient ascent: −meanCE over the forget batch.
pub fn build_ga(
    tape: &mut Tape,
    pv: &ParamVars,
    model: &ToyLm,
    forget: &[Seq],
) -> Result<Var, ObjectiveError> {
    if forget.is_empty() {
        return Err(ObjectiveError::EmptyForget);
    }
    let ce = model.build_mean_ce(tape, pv, forget)?;
    Ok(tape.scale(ce, -1.0)?)
}

/// Gradient descent on retain: meanCE over the retain batch.
pub fn build_gd(
    tape: &mut Tape,
    pv: &ParamVars,
    model: &ToyLm,
    retain: &[Seq],
) -> Result<Var, ObjectiveError> {
    if retain.is_empty() {
        return Err(ObjectiveError::EmptyRetain("GD"));
    }
    Ok(model.build_mean_ce(tape, pv, retain)?)
}

/// NPO: (2/β) · mean over sequences of softplus(β · (log πθ − log πref)),
/// with per-sequence answer-span log-probs. Equals (2/β)·ln 2 when the
/// model matches the reference.
pub fn build_npo(
    tape: &mut Tape,
    pv: &ParamVars,
    model: &ToyLm,
    reference: &ToyLm,
    forget: &[Seq],
    beta: f64,
) -> Result<Var, ObjectiveError> {
    if forget.is_empty() {
        return Err(ObjectiveError::EmptyForget);
    }
    if !(beta > 0.0) {
        return Err(ObjectiveError::BadBeta(beta));
    }
    let ref_nlls = frozen_nll_sums(reference, forget)?;
    let nlls = model.build_seq_nll_sums(tape, pv, forget)?;
    let mut acc: Option<Var> = None;
    for (nll, rn) in nlls.into_iter().zip(ref_nlls) {
        // log πθ − log πref = nll_ref − nll_θ
        let c = tape.constant(Tensor::scalar(rn));
        let ratio = tape.sub(c, nll)?;
        let x = tape.scale(ratio, beta)?;
        // softplus(x) = −logσ(−x)
        let nx = tape.scale(x, -1.0)?;
        let ls = tape.log_sigmoid(nx)?;
        let sp = tape.scale(ls, -1.0)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, sp)?,
            None => sp,
        });
    }
    let total = acc.expect("nonempty batch");
    Ok(tape.scale(total, 2.0 / (beta * forget.len() as f64))?)
}

/// KL anchor: mean token-level KL(πref ‖ πθ) over the retain batch's target
/// positions. Zero when the model matches the reference.
pub fn build_kl(
    tape: &mut Tape,
    pv: &ParamVars,
    model: &ToyLm,
    reference: &ToyLm,
    retain: &[Seq],
) -> Result<Var, ObjectiveError> {
    if retain.is_empty() {
        return Err(ObjectiveError::EmptyRetain("KL"));
    }
    let mut cross: Option<Var> = None; // Σ_t Σ_v pref · log pθ
    let mut plogp = 0.0; // Σ_t Σ_v pref · log pref
    let mut rows = 0usize;
    for seq in retain {
        let (pref, h) = frozen_target_dist(reference, seq)?;
        plogp += h;
        rows += pref.rows();
        let fwd = model.forward(tape, pv, &seq.tokens)?;
        let (s, e) = seq.target;
        let span = tape.slice_rows(fwd.logits, s - 1, e - s)?;
        let lp = tape.row_log_softmax(span)?;
        let pc = tape.constant(pref);
        let prod = tape.mul(lp, pc)?;
        let sum = tape.sum(prod)?;
        cross = Some(match cross {
            Some(a) => tape.add(a, sum)?,
            None => sum,
        });
    }
    let cross = cross.expect("nonempty batch");
    let h = tape.constant(Tensor::scalar(plogp));
    let kl_sum = tape.sub(h, cross)?;
    Ok(tape.scale(kl_sum, 1.0 / rows as f64)?)
}

/// Random-label CE: meanCE toward the provided per-sequence target-span
/// labels (drawn uniformly over the vocabulary, resampled every step by the
/// caller; passing the same draw twice rebuilds the same loss).
pub fn build_rlabel(
    tape: &mut Tape,
    pv: &ParamVars,
    model: &ToyLm,
    forget: &[Seq],
    labels: &[Vec<u32>],
) -> Result<Var, ObjectiveError> {
    if forget.is_empty() {
        return Err(ObjectiveError::EmptyForget);
    }
    if labels.len() != forget.len()
        || labels
            .iter()
            .zip(forget)
            .any(|(l, s)| l.len() != s.target_len())
    {
        return Err(ObjectiveError::BadLabels);
    }
    let mut acc: Option<Var> = None;
    let mut total = 0usize;
    for (seq, lab) in forget.iter().zip(labels) {
        let fwd = model.forward(tape, pv, &seq.tokens)?;
        let (s, e) = seq.target;
        let span = tape.slice_rows(fwd.logits, s - 1, e - s)?;
        let nll = tape.cross_entropy_nll(span, lab)?;
        let ones = tape.constant(Tensor::from_vec(&[lab.len()], vec![1.0; lab.len()])?);
        let sum = tape.dot(nll, ones)?;
        total += lab.len();
        acc = Some(match acc {
            Some(a) => tape.add(a, sum)?,
            None => sum,
        });
    }
    let sum = acc.expect("nonempty batch");
    Ok(tape.scale(sum, 1.0 / total as f64)?)
}

/// Uniform-random target-span labels for an RLabel step.
pub fn draw_rlabel_targets(forget: &[Seq], vocab: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    forget
        .iter()
        .map(|s| {
            (0..s.target_len())
                .map(|_| rng.gen_range(0..vocab as u32))
                .collect()
        })
        .collect()
}

/// Dispatch one unlearning objective. `retain` may be empty for kinds that
/// ignore it; `rlabel_targets` is required for RLabel only.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    tape: &mut Tape,
    pv: &ParamVars,
    model: &ToyLm,
    reference: &ToyLm,
    forget: &[Seq],
    retain: &[Seq],
    kind: ObjectiveKind,
    cfg: &ObjectiveConfig,
    rlabel_targets: Option<&[Vec<u32>]>,
) -> Result<Var, ObjectiveError> {
    let forget_term = match kind {
        ObjectiveKind::Ga | ObjectiveKind::GaGd | ObjectiveKind::GaKl => {
            build_ga(tape, pv, model, forget)?
        }
        ObjectiveKind::Npo | ObjectiveKind::NpoKl => {
            build_npo(tape, pv, model, reference, forget, cfg.beta)?
        }
        ObjectiveKind::RLabel => {
            let labels = rlabel_targets.ok_or(ObjectiveError::BadLabels)?;
            build_rlabel(tape, pv, model, forget, labels)?
        }
    };
    let retain_term = match kind {
        ObjectiveKind::GaGd => Some(build_gd(tape, pv, model, retain)?),
        ObjectiveKind::GaKl | ObjectiveKind::NpoKl => {
            Some(build_kl(tape, pv, model, reference, retain)?)
        }
        _ => None,
    };
    match retain_term {
        Some(rt) => {
            let scaled = tape.scale(rt, cfg.lambda)?;
            Ok(tape.add(forget_term, scaled)?)
        }
        None => Ok(forget_term),
    }
}

/// One optimizer step on forget term + λ·retain term, restricted to the
/// model's trainable set. Returns the logged (forget, retain, lr) triple; a
/// non-finite loss aborts before any parameter changes and names the term.
pub fn composite_step(
    model: &mut ToyLm,
    reference: &ToyLm,
    optimizer: &mut AdamW,
    kind: ObjectiveKind,
    cfg: &ObjectiveConfig,
    forget: &[Seq],
    retain: &[Seq],
    rlabel_targets: Option<&[Vec<u32>]>,
) -> Result<StepLog, ObjectiveError> {
    let mut tape = Tape::new();
    let pv = model.register(&mut tape, GradMode::Trainable);
    let forget_term = (|| match kind {
        ObjectiveKind::Ga | ObjectiveKind::GaGd | ObjectiveKind::GaKl => {
            build_ga(&mut tape, &pv, model, forget)
        }
        ObjectiveKind::Npo | ObjectiveKind::NpoKl => {
            build_npo(&mut tape, &pv, model, reference, forget, cfg.beta)
        }
        ObjectiveKind::RLabel => {
            let labels = rlabel_targets.ok_or(ObjectiveError::BadLabels)?;
            build_rlabel(&mut tape, &pv, model, forget, labels)
        }
    })()
    .map_err(|e| ObjectiveError::TermFailed("forget", Box::new(e)))?;
    let retain_term = (|| match kind {
        ObjectiveKind::GaGd => Ok(Some(build_gd(&mut tape, &pv, model, retain)?)),
        ObjectiveKind::GaKl | ObjectiveKind::NpoKl => {
            Ok(Some(build_kl(&mut tape, &pv, model, reference, retain)?))
        }
        _ => Ok(None),
    })()
    .map_err(|e: ObjectiveError| ObjectiveError::TermFailed("retain", Box::new(e)))?;
    let forget_val = tape.value(forget_term).as_scalar()?;
    let (total, retain_val) = match retain_term {
        Some(rt) => {
            let rv = tape.value(rt).as_scalar()?;
            let scaled = tape.scale(rt, cfg.lambda)?;
            (tape.add(forget_term, scaled)?, rv)
        }
        None => (forget_term, 0.0),
    };
    let grads = tape.backward(total)?;
    let slots: Vec<Option<Tensor>> = pv
        .in_order()
        .iter()
        .map(|v| grads.get(*v).cloned())
        .collect();
    let lr = optimizer.next_lr();
    optimizer.step(&slots, |f| model.for_each_param_mut(|_, t| f(t)))?;
    Ok(StepLog {
        step: optimizer.steps_taken(),
        forget_term: forget_val,
        retain_term: retain_val,
        lr,
    })
}

/// Per-step loss record for the unlearning audit log.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepLog {
    /// Optimizer step count after this update.
    pub step: usize,
    pub forget_term: f64,
    pub retain_term: f64,
    pub lr: f64,
}

impl StepLog {
    pub fn csv_header() -> &'static str {
        "request_id,step,forget_term,retain_term,lr"
    }

    pub fn csv_row(&self, request_id: &str) -> String {
        format!(
            "{},{},{:.9},{:.9},{:.9e}",
            request_id, self.step, self.forget_term, self.retain_term, self.lr
        )
    }
}

/// Scalar NPO oracle from per-sequence log-ratios (log πθ − log πref).
pub fn npo_value(log_ratios: &[f64], beta: f64) -> f64 {
    let softplus = |x: f64| {
        if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        }
    };
    let mean = log_ratios.iter().map(|&r| softplus(beta * r)).sum::<f64>() / log_ratios.len() as f64;
    2.0 / beta * mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::grad_check;
    use crate::tokenizer::render_qa;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab: 300,
            d_model: 32,
            n_heads: 2,
            n_blocks: 2,
            d_ff: 64,
            max_seq_len: 64,
        }
    }

    /// Dimensions and weight draw pinned for the finite-difference checks.
    /// Healthy-scale weights (std 0.5) keep checked gradients above the
    /// centered-difference noise floor; the seed is scanned — many draws put
    /// some near-cancelled composite-gradient entry at the noise floor, and
    /// (5, 6) leaves a ~5x margin on the worst entry across all six
    /// objectives.
    fn fd_cfg() -> ModelConfig {
        ModelConfig {
            vocab: 261,
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            d_ff: 16,
            max_seq_len: 32,
        }
    }

    fn healthy(seed: u64) -> ToyLm {
        let mut m = ToyLm::init(fd_cfg(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 0.5).unwrap();
        m.for_each_param_mut(|_, t| {
            for x in t.data_mut() {
                *x = dist.sample(&mut rng);
            }
        });
        m
    }

    fn qa(q: &str, a: &str) -> Seq {
        let r = render_qa(q, a);
        Seq::spanned(r.tokens, r.answer)
    }

    fn forget_seqs() -> Vec<Seq> {
        vec![qa("who is x?", "ann reyes"), qa("where now?", "oslo dock 3")]
    }

    fn retain_seqs() -> Vec<Seq> {
        vec![qa("what pie?", "rhubarb")]
    }

    #[test]
    fn ga_is_negated_mean_ce() {
        let m = ToyLm::init(tiny_cfg(), 1).unwrap();
        let seqs = forget_seqs();
        let mut tape = Tape::new();
        let pv = m.register(&mut tape, GradMode::None);
        let v = build_ga(&mut tape, &pv, &m, &seqs).unwrap();
        let got = tape.value(v).as_scalar().unwrap();
        let want = -m.mean_ce(&seqs).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(matches!(
            build_ga(&mut Tape::new(), &pv, &m, &[]),
            Err(ObjectiveError::EmptyForget)
        ));
    }

    #[test]
    fn npo_at_reference_is_two_over_beta_ln2() {
        let m = ToyLm::init(tiny_cfg(), 2).unwrap();
        let seqs = forget_seqs();
        let beta = 0.1;
        let mut tape = Tape::new();
        let pv = m.register(&mut tape, GradMode::None);
        let v = build_npo(&mut tape, &pv, &m, &m, &seqs, beta).unwrap();
        let got = tape.value(v).as_scalar().unwrap();
        let want = 2.0 / beta * std::f64::consts::LN_2;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn npo_rejects_nonpositive_beta() {
        let m = ToyLm::init(tiny_cfg(), 3).unwrap();
        let seqs = forget_seqs();
        for beta in [0.0, -0.5] {
            let mut tape = Tape::new();
            let pv = m.register(&mut tape, GradMode::None);
            assert!(matches!(
                build_npo(&mut tape, &pv, &m, &m, &seqs, beta),
                Err(ObjectiveError::BadBeta(_))
            ));
        }
    }

    #[test]
    fn npo_matches_scalar_oracle_and_its_properties() {
        let m = ToyLm::init(tiny_cfg(), 4).unwrap();
        let r = ToyLm::init(tiny_cfg(), 5).unwrap();
        let seqs = forget_seqs();
        let beta = 0.1;
        let mut tape = Tape::new();
        let pv = m.register(&mut tape, GradMode::None);
        let v = build_npo(&mut tape, &pv, &m, &r, &seqs, beta).unwrap();
        let got = tape.value(v).as_scalar().unwrap();
        // oracle from off-tape per-sequence log-ratios
        let nll_m = frozen_nll_sums(&m, &seqs).unwrap();
        let nll_r = frozen_nll_sums(&r, &seqs).unwrap();
        let ratios: Vec<f64> = nll_r.iter().zip(&nll_m).map(|(a, b)| a - b).collect();
        let want = npo_value(&ratios, beta);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        // monotone increasing in the log-ratio, bounded below by zero
        let mut prev = npo_value(&[-50.0], beta);
        assert!(prev > 0.0);
        for i in -49..=50 {
            let cur = npo_value(&[i as f64], beta);
            assert!(cur > prev);
            assert!(cur > 0.0);
            prev = cur;
        }
    }

    #[test]
    fn kl_vanishes_at_reference_and_detects_divergence() {
        let m = ToyLm::init(tiny_cfg(), 6).unwrap();
        let seqs = retain_seqs();
        let mut tape = Tape::new();
        let pv = m.register(&mut tape, GradMode::None);
        let v = build_kl(&mut tape, &pv, &m, &m, &seqs).unwrap();
        assert!(tape.value(v).as_scalar().unwrap().abs() < 1e-12);
        let other = ToyLm::init(tiny_cfg(), 7).unwrap();
        let mut tape = Tape::new();
        let pv = other.register(&mut tape, GradMode::None);
        let v = build_kl(&mut tape, &pv, &other, &m, &seqs).unwrap();
        assert!(tape.value(v).as_scalar().unwrap() > 1e-4);
    }

    #[test]
    fn kl_matches_manual_oracle() {
        let m = ToyLm::init(tiny_cfg(), 8).unwrap();
        let r = ToyLm::init(tiny_cfg(), 9).unwrap();
        let seqs = retain_seqs();
        let mut tape = Tape::new();
        let pv = m.register(&mut tape, GradMode::None);
        let v = build_kl(&mut tape, &pv, &m, &r, &seqs).unwrap();
        let got = tape.value(v).as_scalar().unwrap();
        // manual: per target row, Σ pref (log pref − log pθ)
        let mut want = 0.0;
        let mut rows = 0;
        for seq in &seqs {
            let row_logps = |model: &ToyLm| {
                let mut t = Tape::new();
                let pv = model.register(&mut t, GradMode::None);
                let fwd = model.forward(&mut t, &pv, &seq.tokens).unwrap();
                t.value(fwd.logits).clone()
            };
            let lm = row_logps(&m);
            let lr = row_logps(&r);
            let vsz = m.cfg.vocab;
            let (s, e) = seq.target;
            for row in (s - 1)..(e - 1) {
                let xm = &lm.data()[row * vsz..(row + 1) * vsz];
                let xr = &lr.data()[row * vsz..(row + 1) * vsz];
                let (zm, zr) = (logsumexp(xm).unwrap(), logsumexp(xr).unwrap());
                for i in 0..vsz {
                    let pr = (xr[i] - zr).exp();
                    want += pr * ((xr[i] - zr) - (xm[i] - zm));
                }
                rows += 1;
            }
        }
        want /= rows as f64;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn rlabel_matches_manual_ce_and_freezes_draws() {
        let m = ToyLm::init(tiny_cfg(), 10).unwrap();
        let seqs = forget_seqs();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let labels = draw_rlabel_targets(&seqs, m.cfg.vocab, &mut rng);
        let mut rng2 = ChaCha8Rng::seed_from_u64(77);
        assert_eq!(labels, draw_rlabel_targets(&seqs, m.cfg.vocab, &mut rng2));

        let mut tape = Tape::new();
        let pv = m.register(&mut tape, GradMode::None);
        let v = build_rlabel(&mut tape, &pv, &m, &seqs, &labels).unwrap();
        let got = tape.value(v).as_scalar().unwrap();
        // manual CE toward the drawn labels
        let (mut want, mut n) = (0.0, 0);
        for (seq, lab) in seqs.iter().zip(&labels) {
            let mut t = Tape::new();
            let pv = m.register(&mut t, GradMode::None);
            let fwd = m.forward(&mut t, &pv, &seq.tokens).unwrap();
            let logits = t.value(fwd.logits);
            let vsz = m.cfg.vocab;
            let (s, e) = seq.target;
            for (k, row) in ((s - 1)..(e - 1)).enumerate() {
                let x = &logits.data()[row * vsz..(row + 1) * vsz];
                let z = logsumexp(x).unwrap();
                want -= x[lab[k] as usize] - z;
                n += 1;
            }
        }
        want /= n as f64;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        // shape mismatch rejected
        assert!(matches!(
            build_rlabel(&mut Tape::new(), &pv, &m, &seqs, &labels[..1]),
            Err(ObjectiveError::BadLabels)
        ));
    }

    #[test]
    fn composites_add_their_terms() {
        let m = ToyLm::init(tiny_cfg(), 11).unwrap();
        let r = ToyLm::init(tiny_cfg(), 12).unwrap();
        let (f, ret) = (forget_seqs(), retain_seqs());
        for lambda in [1.0, 2.5] {
            let cfg = ObjectiveConfig {
                lambda,
                ..Default::default()
            };
            let value = |kind| {
                let mut tape = Tape::new();
                let pv = m.register(&mut tape, GradMode::None);
                let v =
                    build_objective(&mut tape, &pv, &m, &r, &f, &ret, kind, &cfg, None).unwrap();
                tape.value(v).as_scalar().unwrap()
            };
            let term = |f: &dyn Fn(&mut Tape, &ParamVars) -> Var| {
                let mut tape = Tape::new();
                let pv = m.register(&mut tape, GradMode::None);
                let v = f(&mut tape, &pv);
                tape.value(v).as_scalar().unwrap()
            };
            let ga = term(&|t, pv| build_ga(t, pv, &m, &f).unwrap());
            let gd = term(&|t, pv| build_gd(t, pv, &m, &ret).unwrap());
            let kl = term(&|t, pv| build_kl(t, pv, &m, &r, &ret).unwrap());
            let npo = term(&|t, pv| build_npo(t, pv, &m, &r, &f, cfg.beta).unwrap());
            assert!((value(ObjectiveKind::GaGd) - (ga + lambda * gd)).abs() < 1e-12);
            assert!((value(ObjectiveKind::GaKl) - (ga + lambda * kl)).abs() < 1e-12);
            assert!((value(ObjectiveKind::NpoKl) - (npo + lambda * kl)).abs() < 1e-12);
            assert!((value(ObjectiveKind::Ga) - ga).abs() < 1e-12);
            assert!((value(ObjectiveKind::Npo) - npo).abs() < 1e-12);
        }
    }

    #[test]
    fn gd_is_bitwise_identical_to_mean_ce() {
        let m = ToyLm::init(tiny_cfg(), 13).unwrap();
        let ret = retain_seqs();
        let mut tape = Tape::new();
        let pv = m.register(&mut tape, GradMode::None);
        let gd = build_gd(&mut tape, &pv, &m, &ret).unwrap();
        let gd_val = tape.value(gd).as_scalar().unwrap();
        assert_eq!(gd_val, m.mean_ce(&ret).unwrap());
    }

    #[test]
    fn rlabel_on_uniform_logits_averages_ln_vocab() {
        // zero head → uniform next-token distribution → CE toward any label
        // is exactly ln V, so the Monte-Carlo mean over label draws is ln V
        let mut m = ToyLm::init(tiny_cfg(), 14).unwrap();
        m.head = Tensor::zeros(m.head.shape());
        let seqs = forget_seqs();
        let ln_v = (m.cfg.vocab as f64).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // spot-check the full tape path on a few draws
        for _ in 0..5 {
            let labels = draw_rlabel_targets(&seqs, m.cfg.vocab, &mut rng);
            let mut tape = Tape::new();
            let pv = m.register(&mut tape, GradMode::None);
            let v = build_rlabel(&mut tape, &pv, &m, &seqs, &labels).unwrap();
            assert!((tape.value(v).as_scalar().unwrap() - ln_v).abs() < 1e-12);
        }
        // Monte-Carlo over 1000 draws straight from the cached logits
        let mut mc = 0.0;
        let logits: Vec<Tensor> = seqs
            .iter()
            .map(|s| {
                let mut tape = Tape::new();
                let pv = m.register(&mut tape, GradMode::None);
                let fwd = m.forward(&mut tape, &pv, &s.tokens).unwrap();
                tape.value(fwd.logits).clone()
            })
            .collect();
        for _ in 0..1000 {
            let labels = draw_rlabel_targets(&seqs, m.cfg.vocab, &mut rng);
            let (mut sum, mut n) = (0.0, 0);
            for ((seq, lab), lg) in seqs.iter().zip(&labels).zip(&logits) {
                let vsz = m.cfg.vocab;
                let (s, e) = seq.target;
                for (k, row) in ((s - 1)..(e - 1)).enumerate() {
                    let x = &lg.data()[row * vsz..(row + 1) * vsz];
                    sum += logsumexp(x).unwrap() - x[lab[k] as usize];
                    n += 1;
                }
            }
            mc += sum / n as f64;
        }
        mc /= 1000.0;
        assert!((mc - ln_v).abs() < 1e-12, "MC mean {mc} vs {ln_v}");
    }

    #[test]
    fn step_with_zero_lambda_matches_forget_only_bitwise() {
        use crate::optim::{AdamWConfig, CosineSchedule};
        let seeds = forget_seqs();
        let ret = retain_seqs();
        let reference = ToyLm::init(tiny_cfg(), 15).unwrap();
        let mk = || {
            let mut m = ToyLm::init(tiny_cfg(), 16).unwrap();
            m.set_trainable(&[(0, crate::model::BlockPart::Attention), (1, crate::model::BlockPart::Mlp)])
                .unwrap();
            m
        };
        let mk_opt = |n| {
            AdamW::new(
                AdamWConfig::default(),
                CosineSchedule::constant(1e-3),
                n,
            )
            .unwrap()
        };
        let mut a = mk();
        let mut oa = mk_opt(a.param_count());
        let cfg0 = ObjectiveConfig { lambda: 0.0, ..Default::default() };
        composite_step(&mut a, &reference, &mut oa, ObjectiveKind::GaGd, &cfg0, &seeds, &ret, None)
            .unwrap();
        let mut b = mk();
        let mut ob = mk_opt(b.param_count());
        composite_step(&mut b, &reference, &mut ob, ObjectiveKind::Ga, &cfg0, &seeds, &ret, None)
            .unwrap();
        let mut same = true;
        let mut bv = Vec::new();
        b.for_each_param(|_, _, t| bv.push(t.clone()));
        let mut i = 0;
        a.for_each_param(|_, _, t| {
            same &= t.data() == bv[i].data();
            i += 1;
        });
        assert!(same, "lambda=0 composite must match forget-only bit-for-bit");
    }

    #[test]
    fn step_with_zero_lr_changes_nothing() {
        use crate::optim::{AdamWConfig, CosineSchedule};
        let mut m = ToyLm::init(tiny_cfg(), 17).unwrap();
        m.set_trainable(&[(0, crate::model::BlockPart::Attention)]).unwrap();
        let reference = m.clone();
        let before: Vec<Tensor> = {
            let mut v = Vec::new();
            m.for_each_param(|_, _, t| v.push(t.clone()));
            v
        };
        let mut opt = AdamW::new(
            AdamWConfig { lr: 0.0, ..Default::default() },
            CosineSchedule::constant(0.0),
            m.param_count(),
        )
        .unwrap();
        let log = composite_step(
            &mut m,
            &reference,
            &mut opt,
            ObjectiveKind::Ga,
            &ObjectiveConfig::default(),
            &forget_seqs(),
            &retain_seqs(),
            None,
        )
        .unwrap();
        assert_eq!(log.lr, 0.0);
        let mut i = 0;
        m.for_each_param(|_, _, t| {
            assert_eq!(t.data(), before[i].data());
            i += 1;
        });
    }

    #[test]
    fn ga_step_raises_forget_ce_and_freezes_untrainable() {
        use crate::model::BlockPart;
        use crate::optim::{AdamWConfig, CosineSchedule};
        let mut m = ToyLm::init(tiny_cfg(), 18).unwrap();
        m.set_trainable(&[(1, BlockPart::Attention), (1, BlockPart::Mlp)]).unwrap();
        let reference = m.clone();
        let seqs = forget_seqs();
        let before_ce = m.mean_ce(&seqs).unwrap();
        let mut frozen_before = Vec::new();
        m.for_each_param(|n, g, t| {
            if !m.group_trainable(g) {
                frozen_before.push((n.to_string(), t.clone()));
            }
        });
        let mut opt = AdamW::new(
            AdamWConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() },
            CosineSchedule::constant(1e-3),
            m.param_count(),
        )
        .unwrap();
        for _ in 0..3 {
            let log = composite_step(
                &mut m,
                &reference,
                &mut opt,
                ObjectiveKind::Ga,
                &ObjectiveConfig::default(),
                &seqs,
                &[],
                None,
            )
            .unwrap();
            assert!((log.forget_term + log.retain_term).is_finite());
        }
        let after_ce = m.mean_ce(&seqs).unwrap();
        assert!(after_ce > before_ce, "{after_ce} vs {before_ce}");
        let mut i = 0;
        m.for_each_param(|n, g, t| {
            if !m.group_trainable(g) {
                assert_eq!(t.data(), frozen_before[i].1.data(), "{n} moved");
                assert_eq!(n, frozen_before[i].0);
                i += 1;
            }
        });
    }

    #[test]
    fn step_log_renders_csv() {
        let log = StepLog { step: 3, forget_term: -2.5, retain_term: 0.125, lr: 3e-5 };
        let row = log.csv_row("r7");
        assert!(row.starts_with("r7,3,-2.500000000,0.125000000,"));
        assert_eq!(StepLog::csv_header(), "request_id,step,forget_term,retain_term,lr");
    }

    #[test]
    fn names_round_trip() {
        for kind in ALL_OBJECTIVES {
            assert_eq!(ObjectiveKind::parse(kind.as_str()).unwrap(), kind);
        }
        assert!(ObjectiveKind::parse("dpo").is_err());
    }

    /// FD gradcheck for one objective kind at the pinned step/tolerance,
    /// over the block parameters the unlearning pipeline actually trains
    /// (embeddings/head/norms are never trainable there; their backward
    /// paths are covered by the model-level CE check).
    fn objective_grad_check(kind: ObjectiveKind) {
        let report = objective_fd_report(kind, 5, 6);
        assert!(
            report.max_rel_err <= 1e-4,
            "{}: max rel err {:.3e} at {}",
            kind.as_str(),
            report.max_rel_err,
            report.worst
        );
    }

    fn objective_fd_report(
        kind: ObjectiveKind,
        model_seed: u64,
        ref_seed: u64,
    ) -> crate::tensor::GradCheckReport {
        use crate::model::BlockPart;
        let mut m = healthy(model_seed);
        let r = healthy(ref_seed);
        m.set_trainable(&[
            (0, BlockPart::Attention),
            (0, BlockPart::Mlp),
            (1, BlockPart::Attention),
            (1, BlockPart::Mlp),
        ])
        .unwrap();
        let (f, ret) = (forget_seqs(), retain_seqs());
        let cfg = ObjectiveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = draw_rlabel_targets(&f, m.cfg.vocab, &mut rng);

        let mut tape = Tape::new();
        let pv = m.register(&mut tape, GradMode::Trainable);
        let loss =
            build_objective(&mut tape, &pv, &m, &r, &f, &ret, kind, &cfg, Some(&labels)).unwrap();
        let grads = tape.backward(loss).unwrap();

        let mut names_s = Vec::new();
        let mut params = Vec::new();
        let mut keep = Vec::new();
        m.for_each_param(|n, g, t| {
            keep.push(m.group_trainable(g));
            names_s.push(n.to_string());
            params.push(t.clone());
        });
        let vars = pv.in_order();
        let mut fnames = Vec::new();
        let mut fparams = Vec::new();
        let mut analytic = Vec::new();
        let mut sub_idx = vec![usize::MAX; params.len()];
        for i in 0..params.len() {
            if keep[i] {
                sub_idx[i] = fparams.len();
                fnames.push(names_s[i].clone());
                fparams.push(params[i].clone());
                analytic.push(
                    grads
                        .get(vars[i])
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(params[i].shape())),
                );
            }
        }
        let names: Vec<&str> = fnames.iter().map(|s| s.as_str()).collect();
        let mut probe = m.clone();
        grad_check(&names, &fparams, &analytic, 1e-5, move |ps| {
            let mut i = 0;
            probe.for_each_param_mut(|_, t| {
                if keep[i] {
                    *t = ps[sub_idx[i]].clone();
                }
                i += 1;
            });
            let mut tape = Tape::new();
            let pv = probe.register(&mut tape, GradMode::None);
            let loss = build_objective(
                &mut tape,
                &pv,
                &probe,
                &r,
                &f,
                &ret,
                kind,
                &cfg,
                Some(&labels),
            )
            .map_err(|e| e.to_string())?;
            tape.value(loss).as_scalar().map_err(|e| e.to_string())
        })
        .unwrap()
    }

    #[test]
    fn npo_gradients_match_finite_differences() {
        objective_grad_check(ObjectiveKind::Npo);
    }

    #[test]
    fn kl_anchor_gradients_match_finite_differences() {
        objective_grad_check(ObjectiveKind::GaKl);
    }

    #[test]
    fn rlabel_gradients_match_finite_differences() {
        objective_grad_check(ObjectiveKind::RLabel);
    }
}
