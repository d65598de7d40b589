//! Leave-one-out layer attribution: mask each transformer block in turn,
//! measure how far the filtered request's mean CE moves, rank blocks by
//! that deviation, and mark the top K as the trainable set for the
//! subsequent unlearning steps. The mask/evaluate/restore loop leaves the
//! model bit-identical to its entry state.

use crate::model::{BlockPart, ModelError, ToyLm};
use crate::tokenizer::Seq;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("k must be ≥ 1")]
    BadK,
    #[error("empty request")]
    EmptyRequest,
    #[error("masked loss for block {block} failed: {source}")]
    MaskedLoss {
        block: usize,
        source: ModelError,
    },
    #[error("report covers {report} blocks but model has {model}")]
    BlockCountMismatch { report: usize, model: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize)]
pub struct AttributionReport {
    pub request_id: String,
    /// s_ℓ = |L_masked(ℓ) − L_orig| per block.
    pub scores: Vec<f64>,
    /// Block indices sorted by descending score, lower index first on ties.
    pub ranked: Vec<usize>,
    /// The top min(K, n_blocks) of `ranked`.
    pub selected: Vec<usize>,
    pub l_orig: f64,
}

impl AttributionReport {
    pub fn csv_header() -> &'static str {
        "request_id,block,score,selected"
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.scores
            .iter()
            .enumerate()
            .map(|(b, s)| {
                format!(
                    "{},{},{:.9},{}",
                    self.request_id,
                    b,
                    s,
                    self.selected.contains(&b)
                )
            })
            .collect()
    }
}

/// Desk-scale default selection size: a quarter of the blocks, rounded up.
pub fn default_k(n_blocks: usize) -> usize {
    ((n_blocks + 3) / 4).max(1)
}

/// Score every block by leave-one-out masking and select the top K. The
/// model is mutated during the loop but restored exactly; pre-masked blocks
/// keep their mask state.
pub fn attribute(
    model: &mut ToyLm,
    request_id: &str,
    seqs: &[Seq],
    k: usize,
) -> Result<AttributionReport, AttributionError> {
    if k == 0 {
        return Err(AttributionError::BadK);
    }
    if seqs.is_empty() {
        return Err(AttributionError::EmptyRequest);
    }
    let l_orig = model.mean_ce(seqs)?;
    let n = model.cfg.n_blocks;
    let mut scores = Vec::with_capacity(n);
    for b in 0..n {
        let was_masked = model.masked_blocks().contains(&b);
        model.set_block_masked(b, true)?;
        let masked = model.mean_ce(seqs);
        model.set_block_masked(b, was_masked)?;
        let l_masked = masked.map_err(|source| AttributionError::MaskedLoss { block: b, source })?;
        scores.push((l_masked - l_orig).abs());
    }
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let selected = ranked[..k.min(n)].to_vec();
    Ok(AttributionReport {
        request_id: request_id.to_string(),
        scores,
        ranked,
        selected,
        l_orig,
    })
}

/// Mark the report's selected blocks (attention + MLP parts) trainable.
pub fn apply_selection(model: &mut ToyLm, report: &AttributionReport) -> Result<(), AttributionError> {
    if report.scores.len() != model.cfg.n_blocks {
        return Err(AttributionError::BlockCountMismatch {
            report: report.scores.len(),
            model: model.cfg.n_blocks,
        });
    }
    let pairs: Vec<(usize, BlockPart)> = report
        .selected
        .iter()
        .flat_map(|&b| [(b, BlockPart::Attention), (b, BlockPart::Mlp)])
        .collect();
    model.set_trainable(&pairs)?;
    Ok(())
}
