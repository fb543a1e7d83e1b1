//! Draft batch allocation across strategies.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::context::context_ngram_match;
use crate::drafters::{BigramTable, ExtendedBigramTable, UnigramRanking};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Which drafter produced a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Context,
    ModelBigram,
    Unigram,
    Oracle,
}

impl Provenance {
    pub const ALL: [Provenance; 4] = [
        Provenance::Context,
        Provenance::ModelBigram,
        Provenance::Unigram,
        Provenance::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Provenance::Context => "context",
            Provenance::ModelBigram => "model-bigram",
            Provenance::Unigram => "unigram",
            Provenance::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DraftRow {
    pub tokens: Vec<TokenId>,
    pub provenance: Provenance,
    /// Zero-based rank within the producing strategy's top-k.
    pub rank: usize,
}

/// Rows of equal width `w`, context rows first, no duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DraftBatch {
    w: usize,
    rows: Vec<DraftRow>,
}

impl DraftBatch {
    pub fn new(w: usize, rows: Vec<DraftRow>) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.tokens.len() != w) {
            return Err(Error::shape(format!(
                "draft row of width {} in a batch of width {w}",
                r.tokens.len()
            )));
        }
        Ok(DraftBatch { w, rows })
    }

    pub fn empty(w: usize) -> Self {
        DraftBatch {
            w,
            rows: Vec::new(),
        }
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[DraftRow] {
        &self.rows
    }

    pub fn tokens(&self) -> Vec<Vec<TokenId>> {
        self.rows.iter().map(|r| r.tokens.clone()).collect()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.rows
            .iter()
            .filter(|r| r.provenance == provenance)
            .count()
    }

    pub fn into_rows(self) -> Vec<DraftRow> {
        self.rows
    }
}

/// Strategy selection; parses from `mixed | context | bigram | extended | unigram`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Mixed,
    Context,
    Bigram,
    Extended,
    Unigram,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Mixed,
        StrategyKind::Context,
        StrategyKind::Bigram,
        StrategyKind::Extended,
        StrategyKind::Unigram,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Mixed => "mixed",
            StrategyKind::Context => "context",
            StrategyKind::Bigram => "bigram",
            StrategyKind::Extended => "extended",
            StrategyKind::Unigram => "unigram",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown strategy {s:?} (expected mixed, context, bigram, extended or unigram)"
                ))
            })
    }
}

/// Precomputed model-derived tables available to the drafters.
#[derive(Debug, Clone, Default)]
pub struct DraftTables {
    pub unigram: Option<UnigramRanking>,
    pub bigram: Option<BigramTable>,
    pub extended: Option<ExtendedBigramTable>,
}

impl DraftTables {
    fn extended(&self) -> Result<&ExtendedBigramTable> {
        self.extended
            .as_ref()
            .ok_or_else(|| Error::invalid("strategy needs an extended bigram table"))
    }
}

/// Context matches first, then extended-bigram rows seeded by the last
/// context token in rank order, skipping rows that repeat an earlier row.
pub fn mixed_drafts(
    context: &[TokenId],
    k: usize,
    w: usize,
    q: usize,
    ext: &ExtendedBigramTable,
) -> Result<DraftBatch> {
    let &last = context
        .last()
        .ok_or_else(|| Error::invalid("context must hold at least one token"))?;
    if k < 1 || w < 1 || q < 1 {
        return Err(Error::invalid("k, w and q must be at least 1"));
    }
    if w > ext.depth() {
        return Err(Error::ExceedsBound {
            what: "w",
            requested: w,
            bound: ext.depth(),
        });
    }

    let mut rows: Vec<DraftRow> = context_ngram_match(context, q, w, k)
        .into_iter()
        .enumerate()
        .map(|(rank, m)| DraftRow {
            tokens: m.continuation,
            provenance: Provenance::Context,
            rank,
        })
        .collect();
    let mut seen: HashSet<Vec<TokenId>> = rows.iter().map(|r| r.tokens.clone()).collect();

    for j in 0..ext.k() {
        if rows.len() >= k {
            break;
        }
        let tokens = ext.row(last, j)[..w].to_vec();
        if seen.insert(tokens.clone()) {
            rows.push(DraftRow {
                tokens,
                provenance: Provenance::ModelBigram,
                rank: j,
            });
        }
    }
    DraftBatch::new(w, rows)
}

/// A batch drawn from exactly one strategy (or the mixed allocation).
pub fn single_strategy_drafts(
    kind: StrategyKind,
    context: &[TokenId],
    k: usize,
    w: usize,
    q: usize,
    tables: &DraftTables,
) -> Result<DraftBatch> {
    let &last = context
        .last()
        .ok_or_else(|| Error::invalid("context must hold at least one token"))?;
    if matches!(kind, StrategyKind::Unigram | StrategyKind::Bigram) && w != 1 {
        return Err(Error::invalid(format!(
            "strategy {kind} speculates exactly one token (w = 1), got w = {w}"
        )));
    }
    let rows = match kind {
        StrategyKind::Mixed => return mixed_drafts(context, k, w, q, tables.extended()?),
        StrategyKind::Context => {
            if q < 1 {
                return Err(Error::invalid("q must be at least 1"));
            }
            context_ngram_match(context, q, w, k)
                .into_iter()
                .enumerate()
                .map(|(rank, m)| DraftRow {
                    tokens: m.continuation,
                    provenance: Provenance::Context,
                    rank,
                })
                .collect()
        }
        StrategyKind::Extended => tables.extended()?.speculate(last, k, w)?,
        StrategyKind::Bigram => match (&tables.bigram, &tables.extended) {
            (Some(b), _) => b.speculate(last, k)?,
            (None, Some(e)) => e.speculate(last, k, 1)?,
            (None, None) => return Err(Error::invalid("strategy bigram needs a bigram table")),
        },
        StrategyKind::Unigram => tables
            .unigram
            .as_ref()
            .ok_or_else(|| Error::invalid("strategy unigram needs a unigram ranking"))?
            .topk(k)?,
    };
    DraftBatch::new(w, rows)
}

/// Anything that can propose a draft batch for the current context.
pub trait Drafter: Sync {
    fn draft(&self, context: &[TokenId], k: usize, w: usize) -> Result<DraftBatch>;
}

/// The built-in strategies over a shared set of tables.
#[derive(Debug, Clone, Copy)]
pub struct StrategyDrafter<'a> {
    pub kind: StrategyKind,
    pub q: usize,
    pub tables: &'a DraftTables,
}

impl Drafter for StrategyDrafter<'_> {
    fn draft(&self, context: &[TokenId], k: usize, w: usize) -> Result<DraftBatch> {
        single_strategy_drafts(self.kind, context, k, w, self.q, self.tables)
    }
}
