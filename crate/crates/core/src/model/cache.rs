//! Static key/value cache with batched speculative tails.
//!
//! Committed positions are stored once and shared by every logical row, so a
//! broadcast from one row to `k` rows copies nothing. Each forward call
//! appends per-row speculative entries to that row's tail; `commit` promotes
//! a prefix of the winning row's tail to the shared committed region and
//! drops every tail.

use crate::error::{Error, Result};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Default, PartialEq)]
struct Tail {
    tokens: Vec<TokenId>,
    entries: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    /// Floats stored per position (keys and values concatenated).
    width: usize,
    capacity: usize,
    tokens: Vec<TokenId>,
    committed: Vec<f64>,
    tails: Vec<Tail>,
}

impl KvCache {
    /// An empty single-row cache.
    pub fn new(width: usize, capacity: usize) -> Self {
        KvCache {
            width,
            capacity,
            tokens: Vec::new(),
            committed: Vec::new(),
            tails: vec![Tail::default()],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of logical rows.
    pub fn rows(&self) -> usize {
        self.tails.len()
    }

    pub fn committed_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn committed_tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Speculative (uncommitted) positions held by `row`.
    pub fn pending_len(&self, row: usize) -> usize {
        self.tails.get(row).map_or(0, |t| t.tokens.len())
    }

    pub fn has_pending(&self) -> bool {
        self.tails.iter().any(|t| !t.tokens.is_empty())
    }

    /// Length of `row` as seen through the cache (committed plus pending).
    pub fn row_len(&self, row: usize) -> usize {
        self.committed_len() + self.pending_len(row)
    }

    /// Entry at absolute position `pos` as seen by `row`.
    pub fn entry(&self, row: usize, pos: usize) -> &[f64] {
        let w = self.width;
        let committed = self.committed_len();
        if pos < committed {
            &self.committed[pos * w..(pos + 1) * w]
        } else {
            let p = pos - committed;
            &self.tails[row].entries[p * w..(p + 1) * w]
        }
    }

    /// Token at absolute position `pos` as seen by `row`.
    pub fn token(&self, row: usize, pos: usize) -> TokenId {
        let committed = self.committed_len();
        if pos < committed {
            self.tokens[pos]
        } else {
            self.tails[row].tokens[pos - committed]
        }
    }

    /// Re-view the cache as `k` rows sharing the committed prefix.
    pub fn broadcast(&mut self, k: usize) -> Result<()> {
        if k < 1 {
            return Err(Error::Cache("broadcast to zero rows".into()));
        }
        if self.has_pending() {
            return Err(Error::Cache(
                "cannot broadcast with uncommitted speculative entries".into(),
            ));
        }
        self.tails = vec![Tail::default(); k];
        Ok(())
    }

    /// Keep the first `len` speculative positions of `winner` as committed
    /// context and discard every other speculative entry. All rows become
    /// views of the new committed prefix.
    pub fn commit(&mut self, winner: usize, len: usize) -> Result<()> {
        let rows = self.rows();
        let tail = self.tails.get_mut(winner).ok_or_else(|| {
            Error::Cache(format!("winner row {winner} out of range for {rows} rows"))
        })?;
        if len > tail.tokens.len() {
            return Err(Error::Cache(format!(
                "commit of {len} positions but row {winner} holds {}",
                tail.tokens.len()
            )));
        }
        let tail = std::mem::take(tail);
        self.tokens.extend_from_slice(&tail.tokens[..len]);
        self.committed
            .extend_from_slice(&tail.entries[..len * self.width]);
        for t in &mut self.tails {
            t.tokens.clear();
            t.entries.clear();
        }
        Ok(())
    }

    /// Drop every speculative entry without committing anything.
    pub fn discard_pending(&mut self) {
        for t in &mut self.tails {
            t.tokens.clear();
            t.entries.clear();
        }
    }

    pub(crate) fn push(&mut self, row: usize, token: TokenId, entry: &[f64]) -> Result<()> {
        debug_assert_eq!(entry.len(), self.width);
        if self.row_len(row) >= self.capacity {
            return Err(Error::Cache(format!("capacity {} exceeded", self.capacity)));
        }
        let tail = &mut self.tails[row];
        tail.tokens.push(token);
        tail.entries.extend_from_slice(entry);
        Ok(())
    }

    /// Check that a forward call over `rows` with `context_len` context
    /// tokens can reuse this cache; returns the first position to compute.
    pub(crate) fn check_block(&self, rows: &[Vec<TokenId>], context_len: usize) -> Result<usize> {
        if rows.len() != self.rows() {
            return Err(Error::Cache(format!(
                "block has {} rows but cache has {}",
                rows.len(),
                self.rows()
            )));
        }
        if self.has_pending() {
            return Err(Error::Cache(
                "forward on a cache with uncommitted speculative entries".into(),
            ));
        }
        let committed = self.committed_len();
        if committed >= context_len {
            return Err(Error::Cache(format!(
                "cache committed length {committed} must be below the context length {context_len}"
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row[..committed] != self.tokens[..] {
                return Err(Error::Cache(format!(
                    "row {i} does not extend the committed prefix"
                )));
            }
        }
        Ok(committed)
    }
}
