//! Importance scoring and objective selection: the IMP score is the ℓ2 norm
//! of the gradient of a request's mean per-token CE taken with respect to
//! the token-embedding activations (not the embedding table), calibrated
//! once into three bins whose thresholds are the 33.3rd/66.7th percentiles
//! of scores over the fine-tuning forget split, then mapped to objectives —
//! low-importance requests get aggressive unlearning, high-importance ones
//! get conservative unlearning.

use crate::model::{GradMode, ModelError, ToyLm};
use crate::objectives::ObjectiveKind;
use crate::tensor::{Tape, TensorError};
use crate::tokenizer::Seq;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("empty request")]
    EmptyRequest,
    #[error("calibration needs at least 3 requests, got {0}")]
    TooFewCalibration(usize),
    #[error("gradient alignment undefined: {0} side has exactly zero gradient")]
    ZeroGradient(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize)]
pub struct ImpScore {
    pub request_id: String,
    /// ℓ2 norm of the embedding-activation gradient; zero iff the gradient
    /// is exactly zero.
    pub value: f64,
    /// value / total token count — diagnostic only, never used for binning.
    pub normalized_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ImpBin {
    Low,
    Medium,
    High,
}

impl ImpBin {
    pub fn as_str(&self) -> &'static str {
        match self {
            ImpBin::Low => "low",
            ImpBin::Medium => "medium",
            ImpBin::High => "high",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BinThresholds {
    pub t_low: f64,
    pub t_high: f64,
    /// Human-readable description of the calibration set.
    pub provenance: String,
}

impl BinThresholds {
    /// Boundary ties bin downward, toward the more aggressive objective.
    pub fn bin(&self, value: f64) -> ImpBin {
        if value <= self.t_low {
            ImpBin::Low
        } else if value <= self.t_high {
            ImpBin::Medium
        } else {
            ImpBin::High
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodMap {
    pub low: ObjectiveKind,
    pub medium: ObjectiveKind,
    pub high: ObjectiveKind,
}

impl Default for MethodMap {
    fn default() -> Self {
        MethodMap {
            low: ObjectiveKind::RLabel,
            medium: ObjectiveKind::Npo,
            high: ObjectiveKind::NpoKl,
        }
    }
}

impl MethodMap {
    /// A degenerate map that pins every bin to one objective (baseline arms).
    pub fn fixed(kind: ObjectiveKind) -> Self {
        MethodMap {
            low: kind,
            medium: kind,
            high: kind,
        }
    }
}

// ── operations ──────────────────────────────────────────────────────────

/// IMP: forward the request's sequences from leaf embedding activations,
/// take mean per-token CE over all target spans, backprop to the activation
/// leaves, and return the ℓ2 norm of the flattened gradient.
pub fn imp(model: &ToyLm, request_id: &str, seqs: &[Seq]) -> Result<ImpScore, ImportanceError> {
    let (grads, _) = embed_grads(model, seqs)?;
    let mut sq = 0.0;
    let mut tokens = 0usize;
    for g in &grads {
        tokens += g.rows();
        for &x in g.data() {
            sq += x * x;
        }
    }
    let value = sq.sqrt();
    Ok(ImpScore {
        request_id: request_id.to_string(),
        value,
        normalized_value: value / tokens as f64,
    })
}

/// Gradients of mean-per-token CE w.r.t. the token-embedding activations,
/// one tensor per distinct token sequence, plus the loss value. Identical
/// sequences share one activation leaf — their embedding is the same object,
/// so duplicate samples accumulate into it and (under mean reduction) leave
/// the score invariant.
fn embed_grads(
    model: &ToyLm,
    seqs: &[Seq],
) -> Result<(Vec<crate::tensor::Tensor>, f64), ImportanceError> {
    if seqs.is_empty() {
        return Err(ImportanceError::EmptyRequest);
    }
    let mut tape = Tape::new();
    let pv = model.register(&mut tape, GradMode::None);
    // (tokens, leaf, fwd) per distinct token sequence, in first-seen order
    let mut distinct: Vec<(Vec<u32>, crate::tensor::Var, crate::model::Fwd)> = Vec::new();
    let mut nlls = Vec::with_capacity(seqs.len());
    let mut total = 0usize;
    for seq in seqs {
        let di = match distinct.iter().position(|(t, _, _)| t == &seq.tokens) {
            Some(i) => i,
            None => {
                let x0 = tape.leaf(model.embed_tokens(&seq.tokens)?, true);
                let fwd = model.forward_from_embed(&mut tape, &pv, x0)?;
                distinct.push((seq.tokens.clone(), x0, fwd));
                distinct.len() - 1
            }
        };
        nlls.push(model.build_span_nll(&mut tape, &distinct[di].2, seq)?);
        total += seq.target_len();
    }
    let mut acc = nlls[0];
    for &n in &nlls[1..] {
        acc = tape.add(acc, n)?;
    }
    let loss = tape.scale(acc, 1.0 / total as f64)?;
    let loss_val = tape.value(loss).as_scalar()?;
    let grads = tape.backward(loss)?;
    let out = distinct
        .iter()
        .map(|(t, v, _)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| crate::tensor::Tensor::zeros(&[t.len(), model.cfg.d_model]))
        })
        .collect();
    Ok((out, loss_val))
}

/// Linear-interpolation percentile (R-7): rank p·(n−1) into the sorted
/// values, fractional part interpolated.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Calibrate bin thresholds from IMP scores over ≥3 calibration requests:
/// t_low and t_high are the 33.3rd and 66.7th percentiles.
pub fn calibrate(scores: &[ImpScore], provenance: &str) -> Result<BinThresholds, ImportanceError> {
    if scores.len() < 3 {
        return Err(ImportanceError::TooFewCalibration(scores.len()));
    }
    let mut vals: Vec<f64> = scores.iter().map(|s| s.value).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(BinThresholds {
        t_low: percentile(&vals, 0.333),
        t_high: percentile(&vals, 0.667),
        provenance: provenance.to_string(),
    })
}

/// Pure per-request lookup: bin the score, read the map.
pub fn select_method(score: &ImpScore, thresholds: &BinThresholds, map: &MethodMap) -> (ImpBin, ObjectiveKind) {
    let bin = thresholds.bin(score.value);
    let kind = match bin {
        ImpBin::Low => map.low,
        ImpBin::Medium => map.medium,
        ImpBin::High => map.high,
    };
    (bin, kind)
}

/// One row of the importance audit log.
#[derive(Debug, Clone, Serialize)]
pub struct ImpAuditRow {
    pub request_id: String,
    pub value: f64,
    pub bin: ImpBin,
    pub objective: ObjectiveKind,
}

impl ImpAuditRow {
    pub fn csv_header() -> &'static str {
        "request_id,imp,bin,objective"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{},{}",
            self.request_id,
            self.value,
            self.bin.as_str(),
            self.objective.as_str()
        )
    }
}

/// Cosine similarity between the flattened parameter gradients of two
/// requests' mean-CE losses — the redundancy diagnostic. Symmetric; errors
/// on an exactly zero gradient.
pub fn grad_alignment(model: &ToyLm, a: &[Seq], b: &[Seq]) -> Result<f64, ImportanceError> {
    if a.is_empty() || b.is_empty() {
        return Err(ImportanceError::EmptyRequest);
    }
    let ga = param_grads(model, a)?;
    let gb = param_grads(model, b)?;
    let dot: f64 = ga.iter().zip(&gb).map(|(x, y)| x * y).sum();
    let na: f64 = ga.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = gb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 {
        return Err(ImportanceError::ZeroGradient("first"));
    }
    if nb == 0.0 {
        return Err(ImportanceError::ZeroGradient("second"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn param_grads(model: &ToyLm, seqs: &[Seq]) -> Result<Vec<f64>, ImportanceError> {
    let mut tape = Tape::new();
    let pv = model.register(&mut tape, GradMode::All);
    let loss = model.build_mean_ce(&mut tape, &pv, seqs)?;
    let grads = tape.backward(loss)?;
    let mut flat = Vec::new();
    let vars = pv.in_order();
    let mut i = 0;
    model.for_each_param(|_, _, t| {
        match grads.get(vars[i]) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(std::iter::repeat(0.0).take(t.numel())),
        }
        i += 1;
    });
    Ok(flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, Category, Split};
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;
    use crate::tokenizer::render_qa;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab: 300,
            d_model: 16,
            n_heads: 2,
            n_blocks: 2,
            d_ff: 32,
            max_seq_len: 160,
        }
    }

    fn qa(q: &str, a: &str) -> Seq {
        let r = render_qa(q, a);
        Seq::spanned(r.tokens, r.answer)
    }

    #[test]
    fn constant_loss_gives_zero_imp() {
        // zero head → logits constant in the embeddings → gradient exactly 0
        let mut m = ToyLm::init(tiny_cfg(), 1).unwrap();
        m.head = Tensor::zeros(m.head.shape());
        let s = imp(&m, "r0", &[qa("q?", "ans")]).unwrap();
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn duplicate_sample_leaves_imp_unchanged() {
        // the duplicate shares the original's embedding leaf, and mean
        // reduction splits the gradient across copies, so the score can't move
        let m = ToyLm::init(tiny_cfg(), 2).unwrap();
        let seq = qa("who lives here?", "marta koch");
        let one = imp(&m, "r0", &[seq.clone()]).unwrap();
        let two = imp(&m, "r0", &[seq.clone(), seq.clone()]).unwrap();
        assert!((two.value - one.value).abs() < 1e-10, "{} vs {}", two.value, one.value);
    }

    #[test]
    fn imp_matches_directional_derivative_oracle() {
        let m = ToyLm::init(tiny_cfg(), 3).unwrap();
        let seqs = vec![qa("where?", "oslo")];
        let (grads, _) = embed_grads(&m, &seqs).unwrap();
        let g = &grads[0];
        let norm = imp(&m, "r", &seqs).unwrap().value;
        // directional derivative along the normalized gradient should equal
        // the gradient norm: d/dh L(x + h·g/‖g‖) = ‖g‖
        let h = 1e-5;
        let loss_at = |offset: f64| {
            let mut tape = Tape::new();
            let pv = m.register(&mut tape, GradMode::None);
            let mut x = m.embed_tokens(&seqs[0].tokens).unwrap();
            for (xi, gi) in x.data_mut().iter_mut().zip(g.data()) {
                *xi += offset * gi / norm;
            }
            let x0 = tape.leaf(x, false);
            let fwd = m.forward_from_embed(&mut tape, &pv, x0).unwrap();
            let nll = m.build_span_nll(&mut tape, &fwd, &seqs[0]).unwrap();
            let v = tape.value(nll).as_scalar().unwrap();
            v / seqs[0].target_len() as f64
        };
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        let rel = (fd - norm).abs() / (fd.abs() + norm.abs() + 1e-12);
        assert!(rel < 1e-4, "fd {fd} vs norm {norm}, rel {rel}");
    }

    #[test]
    fn imp_is_order_invariant() {
        let m = ToyLm::init(tiny_cfg(), 4).unwrap();
        let a = qa("first?", "one");
        let b = qa("second?", "two");
        let x = imp(&m, "r", &[a.clone(), b.clone()]).unwrap();
        let y = imp(&m, "r", &[b, a]).unwrap();
        assert!((x.value - y.value).abs() < 1e-12);
    }

    #[test]
    fn empty_request_is_an_error() {
        let m = ToyLm::init(tiny_cfg(), 5).unwrap();
        assert!(matches!(
            imp(&m, "r", &[]),
            Err(ImportanceError::EmptyRequest)
        ));
    }

    fn score(v: f64) -> ImpScore {
        ImpScore {
            request_id: "s".into(),
            value: v,
            normalized_value: v,
        }
    }

    #[test]
    fn percentile_matches_sort_and_index_oracle() {
        let scores: Vec<ImpScore> = (1..=100).map(|i| score(i as f64)).collect();
        let th = calibrate(&scores, "grid").unwrap();
        // rank 0.333·99 = 32.967 → between the 33rd and 34th values
        assert!((th.t_low - (33.0 + 0.967 * 1.0)).abs() < 1e-9, "{}", th.t_low);
        assert!(th.t_low > 33.0 && th.t_low < 34.001);
        assert!((th.t_high - (1.0 + 0.667 * 99.0)).abs() < 1e-9);
    }

    #[test]
    fn three_point_calibration_brackets_the_middle() {
        let th = calibrate(&[score(1.0), score(2.0), score(3.0)], "abc").unwrap();
        assert!(th.t_low > 1.0 && th.t_low < 2.0, "t_low {}", th.t_low);
        assert!(th.t_high > 2.0 && th.t_high < 3.0, "t_high {}", th.t_high);
        // calibration sorts internally
        let th2 = calibrate(&[score(3.0), score(1.0), score(2.0)], "abc").unwrap();
        assert_eq!(th.t_low, th2.t_low);
        assert_eq!(th.t_high, th2.t_high);
    }

    #[test]
    fn degenerate_distribution_bins_low() {
        let th = calibrate(&[score(4.0), score(4.0), score(4.0), score(4.0)], "same").unwrap();
        assert_eq!(th.t_low, 4.0);
        assert_eq!(th.t_high, 4.0);
        assert_eq!(th.bin(4.0), ImpBin::Low);
        assert_eq!(th.bin(4.0 + 1e-12), ImpBin::High);
    }

    #[test]
    fn too_few_calibration_requests_error() {
        assert!(matches!(
            calibrate(&[score(1.0), score(2.0)], "x"),
            Err(ImportanceError::TooFewCalibration(2))
        ));
    }

    #[test]
    fn binning_is_a_monotone_step_function() {
        let th = BinThresholds {
            t_low: 1.0,
            t_high: 2.0,
            provenance: "fixed".into(),
        };
        assert_eq!(th.bin(0.0), ImpBin::Low);
        assert_eq!(th.bin(1.0), ImpBin::Low); // boundary ties bin downward
        assert_eq!(th.bin(1.5), ImpBin::Medium);
        assert_eq!(th.bin(2.0), ImpBin::Medium);
        assert_eq!(th.bin(2.1), ImpBin::High);
        let mut prev = ImpBin::Low;
        for i in 0..300 {
            let b = th.bin(i as f64 * 0.01);
            assert!(b >= prev, "non-monotone at {i}");
            prev = b;
        }
    }

    #[test]
    fn method_selection_follows_the_map() {
        let th = BinThresholds {
            t_low: 1.0,
            t_high: 2.0,
            provenance: "fixed".into(),
        };
        let map = MethodMap::default();
        assert_eq!(
            select_method(&score(0.0), &th, &map),
            (ImpBin::Low, ObjectiveKind::RLabel)
        );
        assert_eq!(
            select_method(&score(1.0), &th, &map),
            (ImpBin::Low, ObjectiveKind::RLabel)
        );
        assert_eq!(
            select_method(&score(1.5), &th, &map),
            (ImpBin::Medium, ObjectiveKind::Npo)
        );
        assert_eq!(
            select_method(&score(9.0), &th, &map),
            (ImpBin::High, ObjectiveKind::NpoKl)
        );
        // changing the map changes only the emitted objective
        let ga = MethodMap::fixed(ObjectiveKind::Ga);
        assert_eq!(
            select_method(&score(9.0), &th, &ga),
            (ImpBin::High, ObjectiveKind::Ga)
        );
    }

    #[test]
    fn alignment_of_request_with_itself_is_one() {
        let m = ToyLm::init(tiny_cfg(), 6).unwrap();
        let r = vec![qa("self?", "same")];
        let c = grad_alignment(&m, &r, &r).unwrap();
        assert!((c - 1.0).abs() < 1e-9, "cosine {c}");
    }

    #[test]
    fn alignment_is_symmetric_and_separates_near_duplicates() {
        let m = ToyLm::init(tiny_cfg(), 7).unwrap();
        let corpus = generate_corpus(5, 8, 0.5).unwrap();
        let near: Vec<_> = corpus
            .iter()
            .filter(|s| s.stress.starts_with("shared-name"))
            .collect();
        assert!(near.len() >= 2);
        let cross = corpus
            .iter()
            .find(|s| s.category == Category::Copyright && s.split == Split::Forget)
            .unwrap();
        let to_seq = |s: &crate::corpus::Sample| qa(&s.question, &s.answer);
        let a = vec![to_seq(near[0])];
        let b = vec![to_seq(near[1])];
        let c = vec![to_seq(cross)];
        let ab = grad_alignment(&m, &a, &b).unwrap();
        let ba = grad_alignment(&m, &b, &a).unwrap();
        assert_eq!(ab, ba);
        let ac = grad_alignment(&m, &a, &c).unwrap();
        assert!(ab > ac, "shared-name {ab} vs cross-category {ac}");
    }

    #[test]
    fn zero_gradient_alignment_is_an_error() {
        // an all-zero model has exactly zero parameter gradient: the zero
        // final-norm gain annihilates the head gradient and everything above
        let mut m = ToyLm::init(tiny_cfg(), 8).unwrap();
        m.for_each_param_mut(|_, t| *t = Tensor::zeros(t.shape()));
        let r = vec![qa("q?", "a")];
        assert!(matches!(
            grad_alignment(&m, &r, &r),
            Err(ImportanceError::ZeroGradient(_))
        ));
    }

    #[test]
    fn audit_rows_render() {
        let row = ImpAuditRow {
            request_id: "r3".into(),
            value: 1.25,
            bin: ImpBin::Medium,
            objective: ObjectiveKind::Npo,
        };
        assert_eq!(row.csv_row(), "r3,1.250000000,medium,NPO");
    }
}
