//! Desk-scale decoder-only transformer. Pre-norm residual blocks, learned
//! positional embeddings, untied output head, byte-level vocabulary. Small
//! enough to fine-tune from scratch on one CPU core, big enough to memorize a
//! few hundred QA samples — which is exactly the regime the unlearning
//! pipeline studies.
//!
//! Two capabilities matter beyond plain forward/backward:
//! * blocks can be *masked* (their residual contributions act as zero) and
//!   restored bit-exactly — the layer-attribution scan depends on that;
//! * the trainable set can be restricted to (block, attention|mlp) pairs —
//!   embeddings, norms and the head stay frozen during unlearning.

mod checkpoint;

pub use checkpoint::{load_checkpoint, model_hash, save_checkpoint, CKPT_MAGIC, CKPT_VERSION};

use crate::tensor::{Tape, Tensor, TensorError, Var, NEG_MASK};
use crate::tokenizer::{self, Seq};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} outside vocab {vocab}")]
    BadToken { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SeqTooLong { len: usize, max: usize },
    #[error("prompt must be non-empty")]
    EmptyPrompt,
    #[error("block index {0} out of range")]
    BadBlock(usize),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("invalid sequence: {0}")]
    BadSeq(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 512,
            d_model: 128,
            n_heads: 4,
            n_blocks: 6,
            d_ff: 512,
            max_seq_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab < tokenizer::MIN_VOCAB {
            return Err(ModelError::BadConfig(format!(
                "vocab {} < minimum {} (256 bytes + specials)",
                self.vocab,
                tokenizer::MIN_VOCAB
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_blocks == 0 || self.d_ff == 0 {
            return Err(ModelError::BadConfig("zero-sized dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(ModelError::BadConfig("max_seq_len < 2".into()));
        }
        Ok(())
    }
}

/// The two independently-trainable pieces of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BlockPart {
    Attention,
    Mlp,
}

/// Which parameters a forward pass tracks gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Values only — evaluation.
    None,
    /// Every parameter — fine-tuning and gradient checking.
    All,
    /// Only the current trainable set — unlearning steps.
    Trainable,
}

/// Where a parameter lives; drives trainable gating and checkpoint naming.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Embeddings,
    Attention(usize),
    Mlp(usize),
    Norms,
    Head,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    /// Transient mask flag: when set the whole block contributes nothing to
    /// the residual stream (equivalent to zeroing wo and w_down). Never
    /// serialized.
    pub masked: bool,
}

#[derive(Debug, Clone)]
pub struct ToyLm {
    pub cfg: ModelConfig,
    pub embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head: Tensor,
    trainable: BTreeSet<(usize, BlockPart)>,
}

/// Tape handles for one registration of the model's parameters.
pub struct ParamVars {
    pub embed: Var,
    pub pos: Var,
    pub blocks: Vec<BlockParamVars>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub head: Var,
}

pub struct BlockParamVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w_up: Var,
    pub w_down: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
}

impl ParamVars {
    /// All vars in the model's canonical parameter order.
    pub fn in_order(&self) -> Vec<Var> {
        let mut v = vec![self.embed, self.pos];
        for b in &self.blocks {
            v.extend([
                b.wq, b.wk, b.wv, b.wo, b.w_up, b.w_down, b.ln1_g, b.ln1_b, b.ln2_g, b.ln2_b,
            ]);
        }
        v.extend([self.lnf_g, self.lnf_b, self.head]);
        v
    }
}

/// Results of one sequence forward.
pub struct Fwd {
    /// `[T, vocab]` logits for every position.
    pub logits: Var,
    /// `[T, d_model]` token+position embedding activations (the IMP score
    /// differentiates the loss w.r.t. this node).
    pub embed: Var,
    /// `[T, d_model]` hidden states after the last block, before the final
    /// norm — what the redundancy filter mean-pools.
    pub last_hidden: Var,
}

impl ToyLm {
    /// Fresh model with seeded scaled-normal init: N(0, 0.02) everywhere,
    /// residual-feeding projections (wo, w_down) additionally scaled by
    /// 1/sqrt(2·n_blocks), norm gains 1 and biases 0.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0, 0.02).expect("std > 0");
        let resid_scale = 1.0 / (2.0 * cfg.n_blocks as f64).sqrt();
        let mut draw = |shape: &[usize], scale: f64| -> Tensor {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| base.sample(&mut rng) * scale).collect();
            Tensor::from_vec(shape, data).expect("shape/data agree")
        };
        let d = cfg.d_model;
        let blocks = (0..cfg.n_blocks)
            .map(|_| Block {
                wq: draw(&[d, d], 1.0),
                wk: draw(&[d, d], 1.0),
                wv: draw(&[d, d], 1.0),
                wo: draw(&[d, d], resid_scale),
                w_up: draw(&[d, cfg.d_ff], 1.0),
                w_down: draw(&[cfg.d_ff, d], resid_scale),
                ln1_g: ones(&[d]),
                ln1_b: Tensor::zeros(&[d]),
                ln2_g: ones(&[d]),
                ln2_b: Tensor::zeros(&[d]),
                masked: false,
            })
            .collect();
        Ok(ToyLm {
            embed: draw(&[cfg.vocab, d], 1.0),
            pos: draw(&[cfg.max_seq_len, d], 1.0),
            blocks,
            lnf_g: ones(&[d]),
            lnf_b: Tensor::zeros(&[d]),
            head: draw(&[d, cfg.vocab], 1.0),
            cfg,
            trainable: BTreeSet::new(),
        })
    }

    // ── parameter plumbing ──────────────────────────────────────────────

    /// Visit every parameter in the fixed canonical order. The same order is
    /// used by the optimizer, the checkpoint writer and `register`, so state
    /// arrays line up by index.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, ParamGroup, &Tensor)) {
        f("embed", ParamGroup::Embeddings, &self.embed);
        f("pos", ParamGroup::Embeddings, &self.pos);
        for (b, blk) in self.blocks.iter().enumerate() {
            let n = |s: &str| format!("blk{b}.{s}");
            f(&n("wq"), ParamGroup::Attention(b), &blk.wq);
            f(&n("wk"), ParamGroup::Attention(b), &blk.wk);
            f(&n("wv"), ParamGroup::Attention(b), &blk.wv);
            f(&n("wo"), ParamGroup::Attention(b), &blk.wo);
            f(&n("w_up"), ParamGroup::Mlp(b), &blk.w_up);
            f(&n("w_down"), ParamGroup::Mlp(b), &blk.w_down);
            f(&n("ln1_g"), ParamGroup::Norms, &blk.ln1_g);
            f(&n("ln1_b"), ParamGroup::Norms, &blk.ln1_b);
            f(&n("ln2_g"), ParamGroup::Norms, &blk.ln2_g);
            f(&n("ln2_b"), ParamGroup::Norms, &blk.ln2_b);
        }
        f("lnf_g", ParamGroup::Norms, &self.lnf_g);
        f("lnf_b", ParamGroup::Norms, &self.lnf_b);
        f("head", ParamGroup::Head, &self.head);
    }

    /// Mutable visit in exactly the same order as [`Self::for_each_param`].
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(ParamGroup, &mut Tensor)) {
        f(ParamGroup::Embeddings, &mut self.embed);
        f(ParamGroup::Embeddings, &mut self.pos);
        for (b, blk) in self.blocks.iter_mut().enumerate() {
            f(ParamGroup::Attention(b), &mut blk.wq);
            f(ParamGroup::Attention(b), &mut blk.wk);
            f(ParamGroup::Attention(b), &mut blk.wv);
            f(ParamGroup::Attention(b), &mut blk.wo);
            f(ParamGroup::Mlp(b), &mut blk.w_up);
            f(ParamGroup::Mlp(b), &mut blk.w_down);
            f(ParamGroup::Norms, &mut blk.ln1_g);
            f(ParamGroup::Norms, &mut blk.ln1_b);
            f(ParamGroup::Norms, &mut blk.ln2_g);
            f(ParamGroup::Norms, &mut blk.ln2_b);
        }
        f(ParamGroup::Norms, &mut self.lnf_g);
        f(ParamGroup::Norms, &mut self.lnf_b);
        f(ParamGroup::Head, &mut self.head);
    }

    pub fn param_count(&self) -> usize {
        2 + 10 * self.blocks.len() + 3
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, _, t| n += t.numel());
        n
    }

    /// Is a parameter in `group` currently trainable under the restriction
    /// set? With an empty set nothing is trainable (callers doing full
    /// fine-tuning use `GradMode::All` and the optimizer's all-params scope
    /// instead).
    pub fn group_trainable(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Attention(b) => self.trainable.contains(&(b, BlockPart::Attention)),
            ParamGroup::Mlp(b) => self.trainable.contains(&(b, BlockPart::Mlp)),
            _ => false,
        }
    }

    /// Restrict which (block, part) pairs receive updates. Embeddings, norms
    /// and the head can never be made trainable through this set.
    pub fn set_trainable(&mut self, pairs: &[(usize, BlockPart)]) -> Result<(), ModelError> {
        for &(b, _) in pairs {
            if b >= self.blocks.len() {
                return Err(ModelError::BadBlock(b));
            }
        }
        self.trainable = pairs.iter().cloned().collect();
        Ok(())
    }

    pub fn trainable_set(&self) -> Vec<(usize, BlockPart)> {
        self.trainable.iter().cloned().collect()
    }

    // ── masking ─────────────────────────────────────────────────────────

    /// Mask or unmask a block. Masked blocks contribute nothing to the
    /// residual stream — the same logits as zeroing the block's output
    /// projections — and restoring is bit-exact because no weight is touched.
    pub fn set_block_masked(&mut self, block: usize, on: bool) -> Result<(), ModelError> {
        self.blocks
            .get_mut(block)
            .ok_or(ModelError::BadBlock(block))?
            .masked = on;
        Ok(())
    }

    pub fn masked_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.masked.then_some(i))
            .collect()
    }

    // ── forward ─────────────────────────────────────────────────────────

    /// Put every parameter on the tape once; `mode` decides which leaves
    /// track gradients.
    pub fn register(&self, tape: &mut Tape, mode: GradMode) -> ParamVars {
        let rg = |g: ParamGroup| match mode {
            GradMode::None => false,
            GradMode::All => true,
            GradMode::Trainable => self.group_trainable(g),
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let embed = tape.leaf(self.embed.clone(), rg(ParamGroup::Embeddings));
        let pos = tape.leaf(self.pos.clone(), rg(ParamGroup::Embeddings));
        for (b, blk) in self.blocks.iter().enumerate() {
            blocks.push(BlockParamVars {
                wq: tape.leaf(blk.wq.clone(), rg(ParamGroup::Attention(b))),
                wk: tape.leaf(blk.wk.clone(), rg(ParamGroup::Attention(b))),
                wv: tape.leaf(blk.wv.clone(), rg(ParamGroup::Attention(b))),
                wo: tape.leaf(blk.wo.clone(), rg(ParamGroup::Attention(b))),
                w_up: tape.leaf(blk.w_up.clone(), rg(ParamGroup::Mlp(b))),
                w_down: tape.leaf(blk.w_down.clone(), rg(ParamGroup::Mlp(b))),
                ln1_g: tape.leaf(blk.ln1_g.clone(), rg(ParamGroup::Norms)),
                ln1_b: tape.leaf(blk.ln1_b.clone(), rg(ParamGroup::Norms)),
                ln2_g: tape.leaf(blk.ln2_g.clone(), rg(ParamGroup::Norms)),
                ln2_b: tape.leaf(blk.ln2_b.clone(), rg(ParamGroup::Norms)),
            });
        }
        ParamVars {
            embed,
            pos,
            blocks,
            lnf_g: tape.leaf(self.lnf_g.clone(), rg(ParamGroup::Norms)),
            lnf_b: tape.leaf(self.lnf_b.clone(), rg(ParamGroup::Norms)),
            head: tape.leaf(self.head.clone(), rg(ParamGroup::Head)),
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.cfg.max_seq_len {
            return Err(ModelError::SeqTooLong {
                len: tokens.len(),
                max: self.cfg.max_seq_len,
            });
        }
        for &t in tokens {
            if t as usize >= self.cfg.vocab {
                return Err(ModelError::BadToken {
                    id: t,
                    vocab: self.cfg.vocab,
                });
            }
        }
        Ok(())
    }

    /// Token+position embedding activations as a plain tensor (off-tape).
    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Tensor, ModelError> {
        self.check_tokens(tokens)?;
        let d = self.cfg.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (p, &t) in tokens.iter().enumerate() {
            let e = &self.embed.data()[t as usize * d..(t as usize + 1) * d];
            let q = &self.pos.data()[p * d..(p + 1) * d];
            data.extend(e.iter().zip(q).map(|(a, b)| a + b));
        }
        Ok(Tensor::from_vec(&[tokens.len(), d], data)?)
    }

    /// Full forward for one sequence using already-registered params.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        tokens: &[u32],
    ) -> Result<Fwd, ModelError> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        let t_len = tokens.len();
        let emb = tape.embed_lookup(pv.embed, tokens)?;
        let pos_rows = tape.slice_rows(pv.pos, 0, t_len)?;
        let x0 = tape.add(emb, pos_rows)?;
        self.forward_from_embed(tape, pv, x0)
    }

    /// Forward from given `[T, d_model]` embedding activations. Used directly
    /// by the importance score, which differentiates w.r.t. this node.
    pub fn forward_from_embed(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        x0: Var,
    ) -> Result<Fwd, ModelError> {
        let shape = tape.value(x0).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.d_model {
            return Err(ModelError::BadSeq(format!(
                "embed activations must be [T,{}], got {:?}",
                self.cfg.d_model, shape
            )));
        }
        let t_len = shape[0];
        if t_len > self.cfg.max_seq_len {
            return Err(ModelError::SeqTooLong {
                len: t_len,
                max: self.cfg.max_seq_len,
            });
        }
        let mask = tape.constant(causal_mask(t_len));
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = x0;
        for (b, blk) in self.blocks.iter().enumerate() {
            if blk.masked {
                continue;
            }
            let bv = &pv.blocks[b];
            // attention sublayer
            let h = tape.layer_norm(x, bv.ln1_g, bv.ln1_b)?;
            let q = tape.matmul(h, bv.wq)?;
            let k = tape.matmul(h, bv.wk)?;
            let v = tape.matmul(h, bv.wv)?;
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            for hi in 0..self.cfg.n_heads {
                let qh = tape.slice_cols(q, hi * dh, dh)?;
                let kh = tape.slice_cols(k, hi * dh, dh)?;
                let vh = tape.slice_cols(v, hi * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scaled = tape.scale(scores, scale)?;
                let masked = tape.add(scaled, mask)?;
                let probs = tape.row_softmax(masked)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let attn = tape.concat_cols(&heads)?;
            let proj = tape.matmul(attn, bv.wo)?;
            x = tape.add(x, proj)?;
            // mlp sublayer
            let h2 = tape.layer_norm(x, bv.ln2_g, bv.ln2_b)?;
            let up = tape.matmul(h2, bv.w_up)?;
            let act = tape.gelu(up)?;
            let down = tape.matmul(act, bv.w_down)?;
            x = tape.add(x, down)?;
        }
        let last_hidden = x;
        let xf = tape.layer_norm(x, pv.lnf_g, pv.lnf_b)?;
        let logits = tape.matmul(xf, pv.head)?;
        Ok(Fwd {
            logits,
            embed: x0,
            last_hidden,
        })
    }

    /// Mean per-token cross-entropy over the target positions of `seqs`,
    /// built on the tape (differentiable). Normalizer = total target tokens.
    pub fn build_mean_ce(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        seqs: &[Seq],
    ) -> Result<Var, ModelError> {
        let nlls = self.build_seq_nll_sums(tape, pv, seqs)?;
        let total: usize = seqs.iter().map(|s| s.target_len()).sum();
        let mut acc = nlls[0];
        for &n in &nlls[1..] {
            acc = tape.add(acc, n)?;
        }
        Ok(tape.scale(acc, 1.0 / total as f64)?)
    }

    /// Per-sequence summed NLL over each sequence's target span (tape nodes).
    pub fn build_seq_nll_sums(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        seqs: &[Seq],
    ) -> Result<Vec<Var>, ModelError> {
        if seqs.is_empty() {
            return Err(ModelError::BadSeq("empty batch".into()));
        }
        let mut out = Vec::with_capacity(seqs.len());
        for seq in seqs {
            if !seq.valid() {
                return Err(ModelError::BadSeq(format!(
                    "bad target span {:?} for length {}",
                    seq.target,
                    seq.tokens.len()
                )));
            }
            let fwd = self.forward(tape, pv, &seq.tokens)?;
            out.push(self.build_span_nll(tape, &fwd, seq)?);
        }
        Ok(out)
    }

    /// Summed NLL of one already-forwarded sequence over its target span.
    pub fn build_span_nll(
        &self,
        tape: &mut Tape,
        fwd: &Fwd,
        seq: &Seq,
    ) -> Result<Var, ModelError> {
        let t_len = seq.tokens.len();
        let rows = tape.slice_rows(fwd.logits, 0, t_len - 1)?;
        let nll = tape.cross_entropy_nll(rows, &seq.tokens[1..])?;
        // position p of nll predicts tokens[p+1]; target span (s,e) → rows s-1..e-1
        let mut mask = vec![0.0; t_len - 1];
        for m in mask.iter_mut().take(seq.target.1 - 1).skip(seq.target.0 - 1) {
            *m = 1.0;
        }
        let mask_c = tape.constant(Tensor::from_vec(&[t_len - 1], mask)?);
        Ok(tape.dot(nll, mask_c)?)
    }

    /// Mean per-token CE as a plain number (no gradients).
    pub fn mean_ce(&self, seqs: &[Seq]) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape, GradMode::None);
        let loss = self.build_mean_ce(&mut tape, &pv, seqs)?;
        Ok(tape.value(loss).as_scalar()?)
    }

    /// Greedy decoding. Ties in the logits resolve to the lowest token id.
    /// Returns only the newly generated tokens, without the end-of-text
    /// token; stops at EOS, `max_new`, or the context limit.
    pub fn generate_greedy(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        self.check_tokens(prompt)?;
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && tokens.len() < self.cfg.max_seq_len {
            let mut tape = Tape::new();
            let pv = self.register(&mut tape, GradMode::None);
            let fwd = self.forward(&mut tape, &pv, &tokens)?;
            let logits = tape.value(fwd.logits);
            let v = self.cfg.vocab;
            let last = &logits.data()[(tokens.len() - 1) * v..tokens.len() * v];
            let mut best = 0usize;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            let tok = best as u32;
            if tok == tokenizer::EOS {
                break;
            }
            tokens.push(tok);
            out.push(tok);
        }
        Ok(out)
    }
}

fn ones(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, vec![1.0; n]).expect("shape/data agree")
}

/// `[T,T]` additive causal mask: 0 at or below the diagonal, a huge negative
/// number above it.
fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = NEG_MASK;
        }
    }
    Tensor::from_vec(&[t, t], data).expect("shape/data agree")
}
