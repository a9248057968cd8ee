//! Prompt refinement: score content tokens from attention, keep whole
//! sentences up to a ratio `r`, and describe the result as a per-token mask.
//!
//! The prompt is split into a fixed prefix, a refinable content section and a
//! fixed suffix. Prefix and suffix are always kept. Within the content, a
//! sentence is either fully selected or fully dropped.

mod attention;
pub mod dump;
mod tokenize;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use attention::{
    attention_weights, max_pool, score_tokens, AttentionInputs, AttentionOutput, HeadAggregation,
    ScoringConfig, TokenScores,
};
pub use tokenize::{detokenize, tokenize, tokenize_sentences, Token};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("no attention heads supplied")]
    NoHeads,
    #[error("pooling kernel must be odd and >= 1, got {0}")]
    BadKernel(usize),
    #[error("refinement ratio must be in (0, 1], got {0}")]
    BadRatio(f64),
    #[error("mask length {mask} does not match prompt length {prompt}")]
    LengthMismatch { mask: usize, prompt: usize },
    #[error("score vector length {scores} does not match content length {content}")]
    ScoreLength { scores: usize, content: usize },
    #[error("malformed prompt: {0}")]
    MalformedPrompt(String),
    #[error("attention dump: {0}")]
    Dump(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Prompt split into prefix, content (with sentence indices) and suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPrompt {
    prefix: Vec<Token>,
    content: Vec<Token>,
    sentence_ids: Vec<u32>,
    suffix: Vec<Token>,
}

impl TokenizedPrompt {
    pub fn from_text(prefix: &str, content: &str, suffix: &str) -> Self {
        let (content, sentence_ids) = tokenize_sentences(content);
        Self {
            prefix: tokenize(prefix),
            content,
            sentence_ids,
            suffix: tokenize(suffix),
        }
    }

    pub fn from_parts(
        prefix: Vec<Token>,
        content: Vec<Token>,
        sentence_ids: Vec<u32>,
        suffix: Vec<Token>,
    ) -> Result<Self, RefineError> {
        if content.len() != sentence_ids.len() {
            return Err(RefineError::MalformedPrompt(format!(
                "{} content tokens but {} sentence ids",
                content.len(),
                sentence_ids.len()
            )));
        }
        if let Some(&first) = sentence_ids.first() {
            if first != 0 {
                return Err(RefineError::MalformedPrompt("sentence ids must start at 0".into()));
            }
        }
        if sentence_ids.windows(2).any(|w| w[1] != w[0] && w[1] != w[0] + 1) {
            return Err(RefineError::MalformedPrompt(
                "sentence ids must be contiguous and nondecreasing".into(),
            ));
        }
        Ok(Self {
            prefix,
            content,
            sentence_ids,
            suffix,
        })
    }

    pub fn prefix(&self) -> &[Token] {
        &self.prefix
    }

    pub fn content(&self) -> &[Token] {
        &self.content
    }

    pub fn suffix(&self) -> &[Token] {
        &self.suffix
    }

    pub fn sentence_ids(&self) -> &[u32] {
        &self.sentence_ids
    }

    pub fn len(&self) -> usize {
        self.prefix.len() + self.content.len() + self.suffix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positions of the content section within the full prompt.
    pub fn content_range(&self) -> std::ops::Range<usize> {
        self.prefix.len()..self.prefix.len() + self.content.len()
    }

    pub fn sentence_count(&self) -> usize {
        self.sentence_ids.last().map_or(0, |&s| s as usize + 1)
    }

    /// Content-relative `[start, end)` spans, one per sentence.
    pub fn sentence_spans(&self) -> Vec<std::ops::Range<usize>> {
        let mut spans: Vec<std::ops::Range<usize>> = Vec::with_capacity(self.sentence_count());
        for (i, &id) in self.sentence_ids.iter().enumerate() {
            if spans.len() == id as usize {
                spans.push(i..i + 1);
            } else {
                spans.last_mut().expect("contiguous ids").end = i + 1;
            }
        }
        spans
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.prefix.iter().chain(&self.content).chain(&self.suffix)
    }
}

/// One bit per prompt token, `true` = kept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct SelectionMask {
    bits: Vec<bool>,
}

impl SelectionMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all_ones(len: usize) -> Self {
        Self {
            bits: vec![true; len],
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Check the structural invariants against `prompt`: matching length,
    /// prefix and suffix kept, and no partially selected sentence.
    pub fn check_against(&self, prompt: &TokenizedPrompt) -> Result<(), RefineError> {
        if self.len() != prompt.len() {
            return Err(RefineError::LengthMismatch {
                mask: self.len(),
                prompt: prompt.len(),
            });
        }
        let range = prompt.content_range();
        if !self.bits[..range.start].iter().all(|&b| b) || !self.bits[range.end..].iter().all(|&b| b)
        {
            return Err(RefineError::MalformedPrompt(
                "mask drops a prefix or suffix token".into(),
            ));
        }
        let content = &self.bits[range];
        for span in prompt.sentence_spans() {
            let first = content[span.start];
            if content[span.clone()].iter().any(|&b| b != first) {
                return Err(RefineError::MalformedPrompt(format!(
                    "sentence at content offset {} is partially selected",
                    span.start
                )));
            }
        }
        Ok(())
    }
}

/// `ceil(r * n)` with a small tolerance so that e.g. `0.07 * 100` counts as 7.
pub fn content_budget(r: f64, n: usize) -> usize {
    ((r * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Sentence order used by greedy selection: mean token score descending, then
/// earlier sentence first. Independent of `r`.
pub fn sentence_ranking(prompt: &TokenizedPrompt, scores: &TokenScores) -> Vec<usize> {
    let spans = prompt.sentence_spans();
    let means: Vec<f64> = spans
        .iter()
        .map(|s| scores.scores[s.clone()].iter().sum::<f64>() / s.len() as f64)
        .collect();
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    order
}

/// Keep whole sentences, best first, until at least `ceil(r * |content|)`
/// content tokens are selected.
pub fn select_sentences(
    prompt: &TokenizedPrompt,
    scores: &TokenScores,
    r: f64,
) -> Result<SelectionMask, RefineError> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(RefineError::BadRatio(r));
    }
    let n = prompt.content.len();
    if scores.scores.len() != n {
        return Err(RefineError::ScoreLength {
            scores: scores.scores.len(),
            content: n,
        });
    }
    if scores.scores.iter().any(|s| !s.is_finite()) {
        return Err(RefineError::NonFinite("token scores"));
    }
    let mut bits = vec![true; prompt.len()];
    if n == 0 || r >= 1.0 {
        return Ok(SelectionMask { bits });
    }

    let budget = content_budget(r, n);
    let spans = prompt.sentence_spans();
    let offset = prompt.prefix.len();
    let mut keep = vec![false; spans.len()];
    let mut selected = 0;
    for s in sentence_ranking(prompt, scores) {
        if selected >= budget {
            break;
        }
        keep[s] = true;
        selected += spans[s].len();
    }
    for (span, kept) in spans.iter().zip(keep) {
        for b in &mut bits[offset + span.start..offset + span.end] {
            *b = kept;
        }
    }
    Ok(SelectionMask { bits })
}

/// Selected tokens in original order.
pub fn refined_text(
    prompt: &TokenizedPrompt,
    mask: &SelectionMask,
) -> Result<Vec<Token>, RefineError> {
    if mask.len() != prompt.len() {
        return Err(RefineError::LengthMismatch {
            mask: mask.len(),
            prompt: prompt.len(),
        });
    }
    Ok(prompt
        .tokens()
        .zip(&mask.bits)
        .filter(|(_, &keep)| keep)
        .map(|(t, _)| t.clone())
        .collect())
}

/// Source of per-token importance for the content section.
pub trait ImportanceScorer {
    fn score(&self, prompt: &TokenizedPrompt) -> Result<TokenScores, RefineError>;
}

/// Scores from recorded attention weights, one matrix per head over the full
/// prompt.
#[derive(Debug, Clone)]
pub struct AttentionScorer {
    pub heads: Vec<ndarray::Array2<f64>>,
    pub config: ScoringConfig,
}

impl ImportanceScorer for AttentionScorer {
    fn score(&self, prompt: &TokenizedPrompt) -> Result<TokenScores, RefineError> {
        if let Some(h) = self.heads.first() {
            if h.ncols() != prompt.len() {
                return Err(RefineError::DimensionMismatch(format!(
                    "attention covers {} keys, prompt has {} tokens",
                    h.ncols(),
                    prompt.len()
                )));
            }
        }
        score_tokens(&self.heads, &self.config, prompt.content_range())
    }
}

/// Stand-in for a real model: each sentence gets a seeded importance level
/// plus per-token noise, which yields sentence-clustered masks.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticScorer {
    pub seed: u64,
}

impl ImportanceScorer for SyntheticScorer {
    fn score(&self, prompt: &TokenizedPrompt) -> Result<TokenScores, RefineError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut level: HashMap<u32, f64> = HashMap::new();
        let scores = prompt
            .sentence_ids
            .iter()
            .map(|id| {
                let base = *level.entry(*id).or_insert_with(|| rng.random::<f64>().powi(3));
                base + 0.01 * rng.random::<f64>()
            })
            .collect();
        Ok(TokenScores {
            scores,
            pooling_kernel: 1,
        })
    }
}

/// Score, select, and return the mask.
pub fn refine(
    prompt: &TokenizedPrompt,
    scorer: &dyn ImportanceScorer,
    r: f64,
) -> Result<SelectionMask, RefineError> {
    if r >= 1.0 {
        if r > 1.0 {
            return Err(RefineError::BadRatio(r));
        }
        return Ok(SelectionMask::all_ones(prompt.len()));
    }
    let scores = scorer.score(prompt)?;
    select_sentences(prompt, &scores, r)
}
