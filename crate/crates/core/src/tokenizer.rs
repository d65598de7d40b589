//! Byte-level tokenizer shared by every stage. Ids 0–255 are raw bytes;
//! specials sit just above. One fixed vocabulary, no merges, fully
//! reversible — which keeps "the answer is a verbatim substring of the text"
//! true at the token level too.

/// Padding (only used when explicitly batching to equal length).
pub const PAD: u32 = 256;
/// Beginning-of-sequence.
pub const BOS: u32 = 257;
/// End-of-text.
pub const EOS: u32 = 258;
/// Marks the start of a question.
pub const QSEP: u32 = 259;
/// Separates question from answer.
pub const ASEP: u32 = 260;
/// Smallest vocabulary that fits all byte ids plus the specials.
pub const MIN_VOCAB: usize = 261;

pub fn is_special(id: u32) -> bool {
    id >= 256
}

/// Raw bytes of `s` as token ids.
pub fn encode_bytes(s: &str) -> Vec<u32> {
    s.bytes().map(|b| b as u32).collect()
}

/// Byte tokens back to text; specials are dropped.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// `[BOS] text [EOS]`
pub fn render_text(s: &str) -> Vec<u32> {
    let mut t = Vec::with_capacity(s.len() + 2);
    t.push(BOS);
    t.extend(encode_bytes(s));
    t.push(EOS);
    t
}

/// `[BOS] fragment` — chunks are mid-document fragments, so no EOS.
pub fn render_chunk(s: &str) -> Vec<u32> {
    let mut t = Vec::with_capacity(s.len() + 1);
    t.push(BOS);
    t.extend(encode_bytes(s));
    t
}

/// `[BOS QSEP] question [ASEP]` — the generation prompt for a question.
pub fn render_prompt(question: &str) -> Vec<u32> {
    let mut t = Vec::with_capacity(question.len() + 3);
    t.push(BOS);
    t.push(QSEP);
    t.extend(encode_bytes(question));
    t.push(ASEP);
    t
}

/// A rendered QA pair plus the token index range of the answer bytes.
#[derive(Debug, Clone)]
pub struct RenderedQa {
    pub tokens: Vec<u32>,
    /// `tokens[answer.0..answer.1]` are exactly the answer bytes.
    pub answer: (usize, usize),
}

/// `[BOS QSEP] question [ASEP] answer [EOS]`
pub fn render_qa(question: &str, answer: &str) -> RenderedQa {
    let mut tokens = render_prompt(question);
    let start = tokens.len();
    tokens.extend(encode_bytes(answer));
    let end = tokens.len();
    tokens.push(EOS);
    RenderedQa {
        tokens,
        answer: (start, end),
    }
}

/// A token sequence plus the range of positions that count toward a loss.
/// `target = (s, e)` means tokens `s..e` are predicted (each from its
/// prefix); `s ≥ 1` because position 0 has no context.
#[derive(Debug, Clone)]
pub struct Seq {
    pub tokens: Vec<u32>,
    pub target: (usize, usize),
}

impl Seq {
    /// Every position after the first is a target (plain LM loss).
    pub fn lm(tokens: Vec<u32>) -> Self {
        let end = tokens.len();
        Seq {
            tokens,
            target: (1, end),
        }
    }

    /// Only the given token range is a target (e.g. the answer span).
    pub fn spanned(tokens: Vec<u32>, target: (usize, usize)) -> Self {
        Seq { tokens, target }
    }

    pub fn target_len(&self) -> usize {
        self.target.1 - self.target.0
    }

    pub fn valid(&self) -> bool {
        let (s, e) = self.target;
        s >= 1 && s < e && e <= self.tokens.len() && self.tokens.len() >= 2
    }
}
