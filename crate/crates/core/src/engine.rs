//! Guess-and-verify decoding loop.
//!
//! Each step builds a `(k, w + 1)` block of the committed context plus one
//! draft row per speculation, verifies it with a single model call, keeps the
//! row with the longest prefix agreeing with the model's own greedy
//! predictions and emits that prefix plus the model's next token.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    greedy_decode, greedy_step, prefill, KvCache, Predictor, PredictorOutput, TokenBlock,
};
use crate::strategy::{DraftBatch, DraftRow, Drafter, Provenance};
use crate::vocab::{TokenId, TokenSeq};

/// Name used in metrics for steps that ran without drafts.
pub const NO_STRATEGY: &str = "none";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationConfig {
    pub k: usize,
    pub w: usize,
    /// Generation stops after emitting this token.
    pub stop_token: Option<TokenId>,
}

impl GenerationConfig {
    pub fn new(k: usize, w: usize) -> Self {
        GenerationConfig {
            k,
            w,
            stop_token: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceptanceRecord {
    /// Draft tokens committed (`emitted - 1`).
    pub accepted_len: usize,
    pub emitted: usize,
    pub winner_row: usize,
    /// `None` when the step ran without drafts.
    pub winner_strategy: Option<Provenance>,
    pub winner_rank: usize,
    /// Context length at the call.
    pub context_len: usize,
    /// Rows in the verification block.
    pub k: usize,
    /// Draft width of the verification block.
    pub w: usize,
    /// Rows per strategy in the block.
    pub allocation: Vec<(Provenance, usize)>,
}

/// Per-row count of leading draft tokens equal to the model's prediction at
/// the same position.
pub fn verify(output: &PredictorOutput, drafts: &DraftBatch) -> Result<Vec<usize>> {
    if output.greedy.len() != drafts.k() {
        return Err(Error::shape(format!(
            "{} prediction rows for {} drafts",
            output.greedy.len(),
            drafts.k()
        )));
    }
    drafts
        .rows()
        .iter()
        .zip(&output.greedy)
        .map(|(row, pred)| {
            if pred.len() != drafts.w() + 1 {
                return Err(Error::shape(format!(
                    "{} predictions per row for drafts of width {}",
                    pred.len(),
                    drafts.w()
                )));
            }
            Ok(row
                .tokens
                .iter()
                .zip(pred)
                .take_while(|(d, p)| d == p)
                .count())
        })
        .collect()
}

/// Row with the longest acceptance; ties go to the lowest index.
pub fn select_row(accepted: &[usize]) -> Result<usize> {
    if accepted.is_empty() {
        return Err(Error::invalid("no rows to select from"));
    }
    let mut best = 0;
    for (i, &a) in accepted.iter().enumerate().skip(1) {
        if a > accepted[best] {
            best = i;
        }
    }
    Ok(best)
}

/// A single generation: committed tokens plus the cache covering all but the
/// last of them.
pub struct Session<'a, P: Predictor + ?Sized> {
    predictor: &'a P,
    cache: KvCache,
    tokens: TokenSeq,
    prefill_calls: usize,
}

impl<'a, P: Predictor + ?Sized> Session<'a, P> {
    /// Prefill `prompt`; `capacity` bounds the cache in positions.
    pub fn new(predictor: &'a P, prompt: &[TokenId], capacity: usize) -> Result<Self> {
        let block = TokenBlock::new(vec![prompt.to_vec()], prompt.len().max(1))?;
        crate::model::check_tokens(predictor.vocab_size(), &block)?;
        let mut cache = predictor.new_cache(capacity);
        let called = prefill(predictor, prompt, &mut cache)?;
        Ok(Session {
            predictor,
            cache,
            tokens: prompt.to_vec(),
            prefill_calls: called as usize,
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn into_tokens(self) -> TokenSeq {
        self.tokens
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn prefill_calls(&self) -> usize {
        self.prefill_calls
    }

    /// One verification call. With `w == 0` or an empty draft batch this is a
    /// plain `(1, 1)` greedy step.
    pub fn step(
        &mut self,
        drafter: &dyn Drafter,
        k: usize,
        w: usize,
        stop_token: Option<TokenId>,
    ) -> Result<(Vec<TokenId>, AcceptanceRecord)> {
        let context_len = self.tokens.len();
        let drafts = if k == 0 || w == 0 {
            DraftBatch::empty(w)
        } else {
            drafter.draft(&self.tokens, k, w)?
        };

        if drafts.is_empty() {
            let next = greedy_step(self.predictor, &self.tokens, &mut self.cache)?;
            self.tokens.push(next);
            return Ok((
                vec![next],
                AcceptanceRecord {
                    accepted_len: 0,
                    emitted: 1,
                    winner_row: 0,
                    winner_strategy: None,
                    winner_rank: 0,
                    context_len,
                    k: 1,
                    w: 0,
                    allocation: Vec::new(),
                },
            ));
        }

        let block = TokenBlock::from_drafts(&self.tokens, &drafts.tokens())?;
        self.cache.broadcast(drafts.k())?;
        let output = self
            .predictor
            .forward_greedy(&block, Some(&mut self.cache))?;
        let accepted = verify(&output, &drafts)?;
        let winner = select_row(&accepted)?;
        let a = accepted[winner];
        let row = &drafts.rows()[winner];

        let mut emitted: Vec<TokenId> = row.tokens[..a].to_vec();
        emitted.push(output.greedy[winner][a]);
        if let Some(stop) = stop_token {
            if let Some(i) = emitted.iter().position(|&t| t == stop) {
                emitted.truncate(i + 1);
            }
        }
        self.cache.commit(winner, emitted.len())?;
        self.tokens.extend_from_slice(&emitted);

        let allocation = Provenance::ALL
            .into_iter()
            .map(|p| (p, drafts.count(p)))
            .filter(|&(_, n)| n > 0)
            .collect();
        let record = AcceptanceRecord {
            accepted_len: emitted.len() - 1,
            emitted: emitted.len(),
            winner_row: winner,
            winner_strategy: Some(row.provenance),
            winner_rank: row.rank,
            context_len,
            k: drafts.k(),
            w: drafts.w(),
            allocation,
        };
        Ok((emitted, record))
    }
}

/// Speculative generation of up to `max_tokens` tokens. Returns the prompt
/// followed by the generated tokens, which equal plain greedy decoding.
///
/// The draft width of the final steps is clamped so a step never emits past
/// `max_tokens`.
pub fn run_generation<P: Predictor + ?Sized>(
    predictor: &P,
    prompt: &[TokenId],
    max_tokens: usize,
    config: GenerationConfig,
    drafter: &dyn Drafter,
) -> Result<(TokenSeq, RunMetrics)> {
    if max_tokens < 1 {
        return Err(Error::invalid("max_tokens must be at least 1"));
    }
    let capacity = prompt.len() + max_tokens + config.w + 1;
    let mut session = Session::new(predictor, prompt, capacity)?;
    let mut metrics = RunMetrics::default();
    metrics.record_prefill(prompt.len(), session.prefill_calls());

    let mut generated = 0;
    while generated < max_tokens {
        let w = config.w.min(max_tokens - generated - 1);
        let (emitted, record) = session.step(drafter, config.k, w, config.stop_token)?;
        generated += emitted.len();
        metrics.record(&record);
        if config
            .stop_token
            .is_some_and(|s| emitted.last() == Some(&s))
        {
            break;
        }
    }
    Ok((session.into_tokens(), metrics))
}

/// Wraps a drafter and places the model's true greedy continuation in row 0.
/// Costs extra model calls that are not counted in the metrics; meant for
/// upper-bound experiments and tests.
pub struct OracleDrafter<'a, P: Predictor + ?Sized> {
    pub predictor: &'a P,
    pub inner: Option<&'a dyn Drafter>,
}

impl<P: Predictor + ?Sized> Drafter for OracleDrafter<'_, P> {
    fn draft(&self, context: &[TokenId], k: usize, w: usize) -> Result<DraftBatch> {
        let truth = greedy_decode(self.predictor, context, w)?[context.len()..].to_vec();
        let mut rows = vec![DraftRow {
            tokens: truth,
            provenance: Provenance::Oracle,
            rank: 0,
        }];
        if let Some(inner) = self.inner {
            for r in inner.draft(context, k, w)?.into_rows() {
                if rows.len() >= k {
                    break;
                }
                if !rows.iter().any(|x| x.tokens == r.tokens) {
                    rows.push(r);
                }
            }
        }
        DraftBatch::new(w, rows)
    }
}

/// Aggregate counters over one or more generations.
///
/// Steps without drafts count as rank 0 of strategy `"none"`. Allocation
/// histograms are indexed by rows allocated to a strategy in a call; every
/// histogram sums to `call_count`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub tokens_per_call: f64,
    pub call_count: u64,
    pub token_count: u64,
    pub prefill_calls: u64,
    /// Prompt length of every prefill.
    pub prefill: Vec<usize>,
    /// Indexed by accepted draft length.
    pub acceptance_histogram: Vec<u64>,
    /// Indexed by zero-based winner rank.
    pub rank_histogram: Vec<u64>,
    pub acceptance_by_strategy: BTreeMap<String, Vec<u64>>,
    pub rank_by_strategy: BTreeMap<String, Vec<u64>>,
    pub allocation_histogram: BTreeMap<String, Vec<u64>>,
    /// `[l, k, w]` per verification call.
    pub trace: Vec<[usize; 3]>,
}

fn bump(h: &mut Vec<u64>, i: usize, by: u64) {
    if h.len() <= i {
        h.resize(i + 1, 0);
    }
    h[i] += by;
}

fn add_into(dst: &mut Vec<u64>, src: &[u64]) {
    for (i, &v) in src.iter().enumerate() {
        bump(dst, i, v);
    }
}

impl RunMetrics {
    pub fn record_prefill(&mut self, prompt_len: usize, calls: usize) {
        self.prefill.push(prompt_len);
        self.prefill_calls += calls as u64;
    }

    pub fn record(&mut self, r: &AcceptanceRecord) {
        let name = r.winner_strategy.map_or(NO_STRATEGY, Provenance::name);
        bump(&mut self.acceptance_histogram, r.accepted_len, 1);
        bump(&mut self.rank_histogram, r.winner_rank, 1);
        bump(
            self.acceptance_by_strategy
                .entry(name.to_owned())
                .or_default(),
            r.accepted_len,
            1,
        );
        bump(
            self.rank_by_strategy.entry(name.to_owned()).or_default(),
            r.winner_rank,
            1,
        );
        for &(p, _) in &r.allocation {
            // strategies first seen now had zero rows in every earlier call
            let calls = self.call_count;
            self.allocation_histogram
                .entry(p.name().to_owned())
                .or_insert_with(|| if calls > 0 { vec![calls] } else { Vec::new() });
        }
        for (name, h) in &mut self.allocation_histogram {
            let rows = r
                .allocation
                .iter()
                .find(|(p, _)| p.name() == name)
                .map_or(0, |&(_, n)| n);
            bump(h, rows, 1);
        }
        self.trace.push([r.context_len, r.k, r.w]);
        self.call_count += 1;
        self.token_count += r.emitted as u64;
        self.refresh();
    }

    pub fn merge(&mut self, other: &RunMetrics) {
        add_into(&mut self.acceptance_histogram, &other.acceptance_histogram);
        add_into(&mut self.rank_histogram, &other.rank_histogram);
        for (k, v) in &other.acceptance_by_strategy {
            add_into(self.acceptance_by_strategy.entry(k.clone()).or_default(), v);
        }
        for (k, v) in &other.rank_by_strategy {
            add_into(self.rank_by_strategy.entry(k.clone()).or_default(), v);
        }
        // a strategy missing on one side had zero rows in all of that side's calls
        let zeros = |calls: u64| if calls > 0 { vec![calls] } else { Vec::new() };
        let names: BTreeSet<String> = self
            .allocation_histogram
            .keys()
            .chain(other.allocation_histogram.keys())
            .cloned()
            .collect();
        for name in names {
            let mut mine = self
                .allocation_histogram
                .remove(&name)
                .unwrap_or_else(|| zeros(self.call_count));
            match other.allocation_histogram.get(&name) {
                Some(theirs) => add_into(&mut mine, theirs),
                None => add_into(&mut mine, &zeros(other.call_count)),
            }
            self.allocation_histogram.insert(name, mine);
        }
        self.trace.extend_from_slice(&other.trace);
        self.prefill.extend_from_slice(&other.prefill);
        self.prefill_calls += other.prefill_calls;
        self.call_count += other.call_count;
        self.token_count += other.token_count;
        self.refresh();
    }

    fn refresh(&mut self) {
        self.tokens_per_call = if self.call_count == 0 {
            0.0
        } else {
            self.token_count as f64 / self.call_count as f64
        };
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TableModel;

    fn output(greedy: Vec<Vec<TokenId>>) -> PredictorOutput {
        PredictorOutput {
            greedy,
            scores: None,
        }
    }

    fn batch(rows: Vec<Vec<TokenId>>) -> DraftBatch {
        let w = rows[0].len();
        DraftBatch::new(
            w,
            rows.into_iter()
                .enumerate()
                .map(|(rank, tokens)| DraftRow {
                    tokens,
                    provenance: Provenance::ModelBigram,
                    rank,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn verify_counts_matching_prefix() {
        let drafts = batch(vec![
            vec![1, 2, 3, 4, 5],
            vec![9, 2, 3, 4, 5],
            vec![1, 2, 7, 4, 5],
        ]);
        let out = output(vec![
            vec![1, 2, 3, 4, 5, 6],
            vec![1, 2, 3, 4, 5, 6],
            vec![1, 2, 3, 4, 5, 6],
        ]);
        assert_eq!(verify(&out, &drafts).unwrap(), vec![5, 0, 2]);
    }

    #[test]
    fn verify_rejects_shape_mismatch() {
        let drafts = batch(vec![vec![1, 2]]);
        assert!(verify(&output(vec![vec![1, 2]]), &drafts).is_err());
        assert!(verify(&output(vec![vec![1, 2, 3], vec![1, 2, 3]]), &drafts).is_err());
    }

    #[test]
    fn select_row_examples() {
        assert_eq!(select_row(&[3, 1, 3]).unwrap(), 0);
        assert_eq!(select_row(&[0, 0, 5]).unwrap(), 2);
        assert_eq!(select_row(&[0]).unwrap(), 0);
        assert!(select_row(&[]).is_err());
    }

    struct Fixed(Vec<Vec<TokenId>>);

    impl Drafter for Fixed {
        fn draft(&self, _: &[TokenId], k: usize, w: usize) -> Result<DraftBatch> {
            let rows: Vec<_> = self.0.iter().take(k).map(|r| r[..w].to_vec()).collect();
            if rows.is_empty() {
                return Ok(DraftBatch::empty(w));
            }
            Ok(batch(rows))
        }
    }

    fn cycle_model() -> TableModel {
        // 0 -> 1 -> 2 -> 3 -> 0
        let corpus: Vec<TokenId> = (0..40).map(|i| i % 4).collect();
        TableModel::from_corpus(&corpus, 1, 4).unwrap()
    }

    #[test]
    fn w0_step_is_a_greedy_step() {
        let m = cycle_model();
        let mut s = Session::new(&m, &[0, 1], 16).unwrap();
        let (emitted, rec) = s.step(&Fixed(vec![]), 1, 0, None).unwrap();
        assert_eq!(emitted, vec![2]);
        assert_eq!((rec.k, rec.w, rec.emitted), (1, 0, 1));
        assert_eq!(rec.winner_strategy, None);
    }

    #[test]
    fn perfect_draft_emits_w_plus_one() {
        let m = cycle_model();
        let mut s = Session::new(&m, &[0], 16).unwrap();
        let d = Fixed(vec![vec![3, 3, 3], vec![1, 2, 3]]);
        let (emitted, rec) = s.step(&d, 2, 3, None).unwrap();
        assert_eq!(emitted, vec![1, 2, 3, 0]);
        assert_eq!((rec.winner_row, rec.accepted_len), (1, 3));
        assert_eq!(s.tokens(), &[0, 1, 2, 3, 0]);
        assert_eq!(s.cache().committed_len(), 4);
    }

    #[test]
    fn stop_token_truncates_emission() {
        let m = cycle_model();
        let d = Fixed(vec![vec![1, 2, 3, 0, 1]]);
        let mut cfg = GenerationConfig::new(1, 5);
        cfg.stop_token = Some(2);
        let (out, metrics) = run_generation(&m, &[0], 50, cfg, &d).unwrap();
        assert_eq!(out, vec![0, 1, 2]);
        assert_eq!(metrics.token_count, 2);
    }

    #[test]
    fn metrics_conserve_counts() {
        let m = cycle_model();
        let d = Fixed(vec![vec![9; 4], vec![1, 2, 3, 0]]);
        let (_, metrics) = run_generation(&m, &[0], 23, GenerationConfig::new(2, 4), &d).unwrap();
        let calls = metrics.call_count;
        assert_eq!(metrics.acceptance_histogram.iter().sum::<u64>(), calls);
        assert_eq!(metrics.rank_histogram.iter().sum::<u64>(), calls);
        for h in metrics.allocation_histogram.values() {
            assert_eq!(h.iter().sum::<u64>(), calls);
        }
        let weighted: u64 = metrics
            .acceptance_histogram
            .iter()
            .enumerate()
            .map(|(len, &n)| (len as u64 + 1) * n)
            .sum();
        assert_eq!(weighted, metrics.token_count);
        assert_eq!(metrics.token_count, 23);
    }

    #[test]
    fn merge_backfills_allocation() {
        let mut a = RunMetrics::default();
        let mut rec = AcceptanceRecord {
            accepted_len: 0,
            emitted: 1,
            winner_row: 0,
            winner_strategy: None,
            winner_rank: 0,
            context_len: 1,
            k: 1,
            w: 0,
            allocation: vec![],
        };
        a.record(&rec);
        rec.allocation = vec![(Provenance::Context, 2)];
        a.record(&rec);
        assert_eq!(a.allocation_histogram["context"], vec![1, 0, 1]);

        let mut b = RunMetrics::default();
        rec.allocation = vec![(Provenance::ModelBigram, 1)];
        b.record(&rec);
        a.merge(&b);
        assert_eq!(a.call_count, 3);
        for h in a.allocation_histogram.values() {
            assert_eq!(h.iter().sum::<u64>(), 3);
        }
        assert_eq!(a.tokens_per_call, 1.0);
    }
}
