use std::collections::HashMap;

use super::{KvCache, Predictor, ScoreBlock, TokenBlock};
use crate::error::{Error, Result};
use crate::model::PredictorOutput;
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq)]
struct Continuations {
    /// Sparse counts sorted by token id.
    counts: Vec<(TokenId, u32)>,
    greedy: TokenId,
}

/// Order-`m` Markov model whose scores are empirical continuation counts.
///
/// Histories of every length `1..=m` are tabulated; a position preceded by
/// fewer than `m` tokens is scored from its full (shorter) history. Unseen
/// histories fall back to a uniform score vector, whose argmax is token 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TableModel {
    vocab_size: usize,
    order: usize,
    /// `tables[h - 1]` maps length-`h` histories to their continuations.
    tables: Vec<HashMap<Vec<TokenId>, Continuations>>,
}

impl TableModel {
    pub fn from_corpus(corpus: &[TokenId], order: usize, vocab_size: usize) -> Result<Self> {
        if order < 1 {
            return Err(Error::invalid("table model order must be at least 1"));
        }
        if vocab_size < 1 {
            return Err(Error::invalid("vocabulary must not be empty"));
        }
        if corpus.len() <= order {
            return Err(Error::CorpusTooShort {
                len: corpus.len(),
                order,
            });
        }
        if let Some(&id) = corpus.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: vocab_size,
            });
        }

        let mut raw: Vec<HashMap<&[TokenId], HashMap<TokenId, u32>>> = vec![HashMap::new(); order];
        for i in 1..corpus.len() {
            for h in 1..=order.min(i) {
                *raw[h - 1]
                    .entry(&corpus[i - h..i])
                    .or_default()
                    .entry(corpus[i])
                    .or_default() += 1;
            }
        }

        let tables = raw
            .into_iter()
            .map(|level| {
                level
                    .into_iter()
                    .map(|(hist, nexts)| {
                        let mut counts: Vec<(TokenId, u32)> = nexts.into_iter().collect();
                        counts.sort_unstable();
                        let greedy = counts
                            .iter()
                            .fold(
                                (0, 0),
                                |best, &(t, c)| if c > best.1 { (t, c) } else { best },
                            )
                            .0;
                        (hist.to_vec(), Continuations { counts, greedy })
                    })
                    .collect()
            })
            .collect();

        Ok(TableModel {
            vocab_size,
            order,
            tables,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn lookup(&self, prefix: &[TokenId]) -> Option<&Continuations> {
        let h = self.order.min(prefix.len());
        self.tables[h - 1].get(&prefix[prefix.len() - h..])
    }

    /// Continuation counts for the history ending `prefix`; `None` when the
    /// history is unseen.
    pub fn counts(&self, prefix: &[TokenId]) -> Option<Vec<(TokenId, u32)>> {
        self.lookup(prefix).map(|c| c.counts.clone())
    }

    pub fn next_scores(&self, prefix: &[TokenId]) -> Vec<f64> {
        match self.lookup(prefix) {
            Some(c) => {
                let mut s = vec![0.0; self.vocab_size];
                for &(t, n) in &c.counts {
                    s[t as usize] = n as f64;
                }
                s
            }
            None => vec![1.0; self.vocab_size],
        }
    }

    pub fn next_greedy(&self, prefix: &[TokenId]) -> TokenId {
        self.lookup(prefix).map_or(0, |c| c.greedy)
    }

    fn run<T>(
        &self,
        block: &TokenBlock,
        cache: Option<&mut KvCache>,
        mut predict: impl FnMut(&[TokenId]) -> T,
    ) -> Result<Vec<Vec<T>>> {
        if let Some(cache) = cache {
            let start = cache.check_block(block.rows(), block.context_len())?;
            for (i, row) in block.rows().iter().enumerate() {
                for &t in &row[start..] {
                    cache.push(i, t, &[])?;
                }
            }
        }
        let first = block.context_len() - 1;
        Ok(block
            .rows()
            .iter()
            .map(|row| (first..row.len()).map(|p| predict(&row[..=p])).collect())
            .collect())
    }
}

impl Predictor for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn cache_width(&self) -> usize {
        0
    }

    fn forward_scores(
        &self,
        block: &TokenBlock,
        cache: Option<&mut KvCache>,
    ) -> Result<ScoreBlock> {
        self.run(block, cache, |p| self.next_scores(p))
    }

    fn forward_greedy(
        &self,
        block: &TokenBlock,
        cache: Option<&mut KvCache>,
    ) -> Result<PredictorOutput> {
        let greedy = self.run(block, cache, |p| self.next_greedy(p))?;
        Ok(PredictorOutput {
            greedy,
            scores: None,
        })
    }
}
