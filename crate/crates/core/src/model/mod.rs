//! Base predictors: the abstraction the engine verifies against, plus an
//! explicit Markov table model and a tiny seeded transformer.
//!
//! A forward call takes a block of `k` rows, each `context_len + w` tokens
//! long, and returns for every row the greedy next token after position
//! `context_len - 1` and after each of the `w` speculated positions: a
//! `(k, w + 1)` matrix. Argmax ties always go to the lowest token id.

mod cache;
mod table;
mod toy;

pub use cache::KvCache;
pub use table::TableModel;
pub use toy::{ToyTransformer, MAX_TOY_VOCAB, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::vocab::{TokenId, TokenSeq};

/// Rectangular batch of token rows sharing a context length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBlock {
    rows: Vec<TokenSeq>,
    context_len: usize,
}

impl TokenBlock {
    pub fn new(rows: Vec<TokenSeq>, context_len: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("block has no rows"));
        }
        if context_len < 1 {
            return Err(Error::shape("context length must be at least 1"));
        }
        let len = rows[0].len();
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::shape("rows differ in length"));
        }
        if len < context_len {
            return Err(Error::shape(format!(
                "rows of length {len} are shorter than the context length {context_len}"
            )));
        }
        Ok(TokenBlock { rows, context_len })
    }

    /// `k` copies of `context`, each extended by one draft row.
    pub fn from_drafts(context: &[TokenId], drafts: &[Vec<TokenId>]) -> Result<Self> {
        let rows = drafts
            .iter()
            .map(|d| {
                let mut r = Vec::with_capacity(context.len() + d.len());
                r.extend_from_slice(context);
                r.extend_from_slice(d);
                r
            })
            .collect();
        TokenBlock::new(rows, context.len())
    }

    pub fn rows(&self) -> &[TokenSeq] {
        &self.rows
    }

    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn row_len(&self) -> usize {
        self.rows[0].len()
    }

    /// Number of speculated tokens per row.
    pub fn draft_len(&self) -> usize {
        self.row_len() - self.context_len
    }
}

/// Per-row, per-position next-token scores: `scores[row][t]` is a vector
/// over the vocabulary for the prediction after position `context_len - 1 + t`.
pub type ScoreBlock = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorOutput {
    /// Shape `(k, w + 1)`.
    pub greedy: Vec<Vec<TokenId>>,
    pub scores: Option<ScoreBlock>,
}

/// Borrowed embedding matrices of a predictor.
#[derive(Debug, Clone, Copy)]
pub struct Embeddings<'a> {
    /// `|X| x d`, one input embedding per row.
    pub input: &'a Matrix,
    /// `d x |X|`, one output embedding per column.
    pub output: &'a Matrix,
}

pub trait Predictor: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Floats a cache entry needs for this predictor.
    fn cache_width(&self) -> usize;

    /// Full scores for every predicted position. When `cache` is supplied
    /// its committed positions are reused and the computed positions are
    /// appended to each row's speculative tail.
    fn forward_scores(&self, block: &TokenBlock, cache: Option<&mut KvCache>)
        -> Result<ScoreBlock>;

    fn forward_greedy(
        &self,
        block: &TokenBlock,
        cache: Option<&mut KvCache>,
    ) -> Result<PredictorOutput> {
        let scores = self.forward_scores(block, cache)?;
        let greedy = scores
            .iter()
            .map(|row| row.iter().map(|s| argmax(s)).collect())
            .collect();
        Ok(PredictorOutput {
            greedy,
            scores: None,
        })
    }

    fn embeddings(&self) -> Option<Embeddings<'_>> {
        None
    }

    fn new_cache(&self, capacity: usize) -> KvCache {
        KvCache::new(self.cache_width(), capacity)
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Token ids ordered by descending score, ties by lowest id.
pub fn ranked(scores: &[f64]) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..scores.len() as TokenId).collect();
    ids.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    ids
}

pub fn forward_greedy<P: Predictor + ?Sized>(
    predictor: &P,
    block: &TokenBlock,
    cache: Option<&mut KvCache>,
) -> Result<PredictorOutput> {
    check_tokens(predictor.vocab_size(), block)?;
    predictor.forward_greedy(block, cache)
}

pub(crate) fn check_tokens(vocab_size: usize, block: &TokenBlock) -> Result<()> {
    for row in block.rows() {
        if let Some(&id) = row.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: vocab_size,
            });
        }
    }
    Ok(())
}

/// Process every prompt token except the last into `cache`. Returns whether
/// a model call was made (prompts of one token need none).
pub fn prefill<P: Predictor + ?Sized>(
    predictor: &P,
    prompt: &[TokenId],
    cache: &mut KvCache,
) -> Result<bool> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must hold at least one token"));
    }
    let target = prompt.len() - 1;
    if cache.committed_len() >= target {
        return Ok(false);
    }
    cache.broadcast(1)?;
    let block = TokenBlock::new(vec![prompt[..target].to_vec()], target)?;
    predictor.forward_greedy(&block, Some(cache))?;
    let fresh = cache.pending_len(0);
    cache.commit(0, fresh)?;
    Ok(true)
}

/// Plain greedy decoding: prefill, then `n` calls of block shape `(1, 1)`.
/// Returns the prompt followed by the `n` generated tokens.
pub fn greedy_decode<P: Predictor + ?Sized>(
    predictor: &P,
    prompt: &[TokenId],
    n: usize,
) -> Result<TokenSeq> {
    let mut tokens = prompt.to_vec();
    if n == 0 {
        return Ok(tokens);
    }
    check_tokens(
        predictor.vocab_size(),
        &TokenBlock::new(vec![tokens.clone()], 1)?,
    )?;
    let mut cache = predictor.new_cache(prompt.len() + n);
    prefill(predictor, prompt, &mut cache)?;
    for _ in 0..n {
        let next = greedy_step(predictor, &tokens, &mut cache)?;
        tokens.push(next);
    }
    Ok(tokens)
}

/// One `(1, 1)` call on a cache covering all but the last token.
pub(crate) fn greedy_step<P: Predictor + ?Sized>(
    predictor: &P,
    tokens: &[TokenId],
    cache: &mut KvCache,
) -> Result<TokenId> {
    cache.broadcast(1)?;
    let block = TokenBlock::new(vec![tokens.to_vec()], tokens.len())?;
    let out = predictor.forward_greedy(&block, Some(cache))?;
    cache.commit(0, 1)?;
    Ok(out.greedy[0][0])
}

/// Greedy continuation of `context` computed without any cache, one full
/// recomputation per token. Slow; intended for oracles.
pub fn greedy_decode_uncached<P: Predictor + ?Sized>(
    predictor: &P,
    context: &[TokenId],
    n: usize,
) -> Result<TokenSeq> {
    let mut tokens = context.to_vec();
    for _ in 0..n {
        let block = TokenBlock::new(vec![tokens.clone()], tokens.len())?;
        let out = predictor.forward_greedy(&block, None)?;
        tokens.push(out.greedy[0][0]);
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        assert_eq!(ranked(&[1.0, 3.0, 3.0, 2.0]), vec![1, 2, 3, 0]);
    }

    #[test]
    fn block_validation() {
        assert!(TokenBlock::new(vec![], 1).is_err());
        assert!(TokenBlock::new(vec![vec![1, 2]], 0).is_err());
        assert!(TokenBlock::new(vec![vec![1, 2], vec![1]], 1).is_err());
        assert!(TokenBlock::new(vec![vec![1]], 2).is_err());
        let b = TokenBlock::from_drafts(&[1, 2, 3], &[vec![4, 5], vec![6, 7]]).unwrap();
        assert_eq!((b.k(), b.context_len(), b.draft_len()), (2, 3, 2));
    }
}
