//! Model-derived N-grams: a unigram ranking from embedding geometry, a
//! bigram table from single-token model calls, and the extended bigram that
//! greedily continues each ranked successor.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{greedy_decode, ranked, Predictor, TokenBlock};
use crate::strategy::{DraftRow, Provenance};
use crate::vocab::TokenId;

pub const DEFAULT_TABLE_K: usize = 32;
pub const DEFAULT_TABLE_DEPTH: usize = 16;
/// Single-token contexts per model call when building the bigram table.
pub const BIGRAM_BATCH: usize = 64;

pub const TABLE_MAGIC: &[u8; 4] = b"NGTB";
pub const TABLE_VERSION: u32 = 1;

/// How the unigram distance is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnigramMetric {
    /// `d(x) = sqrt((u_x - m)^T C (u_x - m))` with `m` the mean output
    /// embedding and `C = V^T V / |X|`.
    #[default]
    CovarianceNorm,
    /// Signed score `m^T C u_x`, ranked ascending.
    MeanInnerProduct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnigramRanking {
    /// Token ids by ascending distance, ties by lowest id.
    pub ranking: Vec<TokenId>,
    /// Distance (or score) per token id.
    pub distances: Vec<f64>,
}

/// `input` is `|X| x d`; `output_rows` holds one output embedding `u_x` per row.
pub fn derive_unigram(
    input: &Matrix,
    output_rows: &Matrix,
    metric: UnigramMetric,
) -> Result<UnigramRanking> {
    let n = input.rows();
    let d = input.cols();
    if output_rows.rows() != n || output_rows.cols() != d {
        return Err(Error::shape(format!(
            "input embeddings are {n}x{d} but output embeddings are {}x{}",
            output_rows.rows(),
            output_rows.cols()
        )));
    }
    if n == 0 {
        return Err(Error::shape("empty vocabulary"));
    }

    // C = V^T V / |X|
    let vt = input.transpose();
    let cov_data = (0..d * d)
        .map(|i| {
            let (a, b) = (i / d, i % d);
            vt.row(a)
                .iter()
                .zip(vt.row(b))
                .map(|(x, y)| x * y)
                .sum::<f64>()
                / n as f64
        })
        .collect();
    let cov = Matrix::new(d, d, cov_data)?;

    let mut mean = vec![0.0; d];
    for x in 0..n {
        for (m, u) in mean.iter_mut().zip(output_rows.row(x)) {
            *m += u;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let distances: Vec<f64> = match metric {
        UnigramMetric::CovarianceNorm => (0..n)
            .map(|x| {
                let diff: Vec<f64> = output_rows
                    .row(x)
                    .iter()
                    .zip(&mean)
                    .map(|(u, m)| u - m)
                    .collect();
                let cd = cov.left_mul(&diff);
                let q: f64 = cd.iter().zip(&diff).map(|(a, b)| a * b).sum();
                q.max(0.0).sqrt()
            })
            .collect(),
        UnigramMetric::MeanInnerProduct => {
            let mc = cov.left_mul(&mean);
            (0..n)
                .map(|x| mc.iter().zip(output_rows.row(x)).map(|(a, b)| a * b).sum())
                .collect()
        }
    };

    let mut ranking: Vec<TokenId> = (0..n as TokenId).collect();
    ranking.sort_by(|&a, &b| {
        distances[a as usize]
            .total_cmp(&distances[b as usize])
            .then(a.cmp(&b))
    });
    Ok(UnigramRanking { ranking, distances })
}

/// Unigram ranking of a predictor that exposes its embeddings.
pub fn unigram_from_predictor<P: Predictor + ?Sized>(
    predictor: &P,
    metric: UnigramMetric,
) -> Result<UnigramRanking> {
    let emb = predictor.embeddings().ok_or(Error::NoEmbeddings)?;
    derive_unigram(emb.input, &emb.output.transpose(), metric)
}

impl UnigramRanking {
    /// The `k` nearest tokens, one per width-1 row (fewer if the vocabulary
    /// is smaller).
    pub fn topk(&self, k: usize) -> Result<Vec<DraftRow>> {
        let k = k.min(self.ranking.len());
        Ok(self.ranking[..k]
            .iter()
            .enumerate()
            .map(|(rank, &t)| DraftRow {
                tokens: vec![t],
                provenance: Provenance::Unigram,
                rank,
            })
            .collect())
    }
}

/// Top-`K` next tokens of the base model after every single token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BigramTable {
    vocab_size: usize,
    k: usize,
    lists: Vec<TokenId>,
}

impl BigramTable {
    /// Built in batches of [`BIGRAM_BATCH`] single-token contexts, so the
    /// build makes `ceil(|X| / BIGRAM_BATCH)` model calls.
    pub fn derive<P: Predictor + ?Sized>(predictor: &P, k: usize) -> Result<Self> {
        let vocab_size = predictor.vocab_size();
        if k == 0 || k > vocab_size {
            return Err(Error::ExceedsBound {
                what: "K",
                requested: k,
                bound: vocab_size,
            });
        }
        let mut lists = Vec::with_capacity(vocab_size * k);
        let ids: Vec<TokenId> = (0..vocab_size as TokenId).collect();
        for chunk in ids.chunks(BIGRAM_BATCH) {
            let block = TokenBlock::new(chunk.iter().map(|&x| vec![x]).collect(), 1)?;
            let scores = predictor.forward_scores(&block, None)?;
            for row in &scores {
                lists.extend_from_slice(&ranked(&row[0])[..k]);
            }
        }
        Ok(BigramTable {
            vocab_size,
            k,
            lists,
        })
    }

    pub fn from_lists(vocab_size: usize, k: usize, lists: Vec<TokenId>) -> Result<Self> {
        if lists.len() != vocab_size * k {
            return Err(Error::shape(format!(
                "{} ids for a {vocab_size}x{k} bigram table",
                lists.len()
            )));
        }
        Ok(BigramTable {
            vocab_size,
            k,
            lists,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, x: TokenId) -> &[TokenId] {
        let x = x as usize;
        &self.lists[x * self.k..(x + 1) * self.k]
    }

    /// Top-`k` successors of `last` as width-1 rows; at most `K` rows.
    pub fn speculate(&self, last: TokenId, k: usize) -> Result<Vec<DraftRow>> {
        let k = k.min(self.k);
        check_bound("token", last as usize + 1, self.vocab_size)?;
        Ok(self.row(last)[..k]
            .iter()
            .enumerate()
            .map(|(rank, &t)| DraftRow {
                tokens: vec![t],
                provenance: Provenance::ModelBigram,
                rank,
            })
            .collect())
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        write_table(w, self.vocab_size, self.k, 1, &self.lists)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let (vocab_size, k, depth, lists) = read_table(r)?;
        if depth != 1 {
            return Err(Error::Format(format!(
                "bigram table must have depth 1, found {depth}"
            )));
        }
        BigramTable::from_lists(vocab_size, k, lists)
    }
}

/// For every seed token, `K` rows of depth `w_max`: row `j` starts with the
/// `j`-th ranked bigram successor and continues greedily.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedBigramTable {
    vocab_size: usize,
    k: usize,
    depth: usize,
    data: Vec<TokenId>,
}

impl ExtendedBigramTable {
    pub fn derive<P: Predictor + ?Sized>(
        predictor: &P,
        base: &BigramTable,
        depth: usize,
    ) -> Result<Self> {
        if depth < 1 {
            return Err(Error::invalid("extended bigram depth must be at least 1"));
        }
        if base.vocab_size() != predictor.vocab_size() {
            return Err(Error::shape(
                "bigram table and predictor disagree on vocab size",
            ));
        }
        let mut data = Vec::with_capacity(base.vocab_size() * base.k() * depth);
        for x in 0..base.vocab_size() as TokenId {
            for &succ in base.row(x) {
                if depth == 1 {
                    data.push(succ);
                } else {
                    let seq = greedy_decode(predictor, &[x, succ], depth - 1)?;
                    data.extend_from_slice(&seq[1..]);
                }
            }
        }
        Ok(ExtendedBigramTable {
            vocab_size: base.vocab_size(),
            k: base.k(),
            depth,
            data,
        })
    }

    pub fn from_data(
        vocab_size: usize,
        k: usize,
        depth: usize,
        data: Vec<TokenId>,
    ) -> Result<Self> {
        if data.len() != vocab_size * k * depth {
            return Err(Error::shape(format!(
                "{} ids for a {vocab_size}x{k}x{depth} extended table",
                data.len()
            )));
        }
        Ok(ExtendedBigramTable {
            vocab_size,
            k,
            depth,
            data,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Full-depth row `j` for seed `x`.
    pub fn row(&self, x: TokenId, j: usize) -> &[TokenId] {
        let start = (x as usize * self.k + j) * self.depth;
        &self.data[start..start + self.depth]
    }

    /// Column 0 of every seed, i.e. the underlying bigram table.
    pub fn bigram(&self) -> BigramTable {
        let lists = (0..self.vocab_size as TokenId)
            .flat_map(|x| (0..self.k).map(move |j| (x, j)))
            .map(|(x, j)| self.row(x, j)[0])
            .collect();
        BigramTable {
            vocab_size: self.vocab_size,
            k: self.k,
            lists,
        }
    }

    /// First `k` rows (at most `K`) for seed `last`, truncated to width `w`.
    pub fn speculate(&self, last: TokenId, k: usize, w: usize) -> Result<Vec<DraftRow>> {
        let k = k.min(self.k);
        check_bound("w", w, self.depth)?;
        check_bound("token", last as usize + 1, self.vocab_size)?;
        Ok((0..k)
            .map(|j| DraftRow {
                tokens: self.row(last, j)[..w].to_vec(),
                provenance: Provenance::ModelBigram,
                rank: j,
            })
            .collect())
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        write_table(w, self.vocab_size, self.k, self.depth, &self.data)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let (vocab_size, k, depth, data) = read_table(r)?;
        ExtendedBigramTable::from_data(vocab_size, k, depth, data)
    }
}

fn check_bound(what: &'static str, requested: usize, bound: usize) -> Result<()> {
    if requested > bound {
        Err(Error::ExceedsBound {
            what,
            requested,
            bound,
        })
    } else {
        Ok(())
    }
}

fn write_table(
    mut w: impl Write,
    vocab: usize,
    k: usize,
    depth: usize,
    ids: &[TokenId],
) -> Result<()> {
    w.write_all(TABLE_MAGIC)?;
    for v in [TABLE_VERSION, vocab as u32, k as u32, depth as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for id in ids {
        w.write_all(&id.to_le_bytes())?;
    }
    Ok(())
}

fn read_table(mut r: impl Read) -> Result<(usize, usize, usize, Vec<TokenId>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TABLE_MAGIC {
        return Err(Error::Format("bad table magic".into()));
    }
    let mut word = [0u8; 4];
    let mut next = |r: &mut dyn Read| -> Result<u32> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let version = next(&mut r)?;
    if version != TABLE_VERSION {
        return Err(Error::Format(format!(
            "unsupported table version {version}"
        )));
    }
    let vocab = next(&mut r)? as usize;
    let k = next(&mut r)? as usize;
    let depth = next(&mut r)? as usize;
    let len = vocab
        .checked_mul(k)
        .and_then(|n| n.checked_mul(depth))
        .ok_or_else(|| Error::Format("table dimensions overflow".into()))?;
    let mut ids = Vec::with_capacity(len.min(1 << 24));
    for _ in 0..len {
        let id = next(&mut r)?;
        if id as usize >= vocab {
            return Err(Error::Format(format!("token id {id} out of range")));
        }
        ids.push(id);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format("trailing bytes after table".into()));
    }
    Ok((vocab, k, depth, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TableModel, ToyTransformer};

    fn assert_ranking(v: &Matrix, u: &Matrix, expected: &[TokenId]) -> UnigramRanking {
        let r = derive_unigram(v, u, UnigramMetric::CovarianceNorm).unwrap();
        assert_eq!(r.ranking, expected);
        r
    }

    #[test]
    fn unigram_symmetric_pair() {
        let u = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = assert_ranking(&Matrix::identity(2), &u, &[0, 1]);
        assert_eq!(r.distances[0], r.distances[1]);
    }

    #[test]
    fn unigram_hand_evaluated_three_tokens() {
        let u = Matrix::from_rows(&[
            vec![2.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let r = assert_ranking(&Matrix::identity(3), &u, &[1, 2, 0]);
        let sq: Vec<f64> = r.distances.iter().map(|d| d * d).collect();
        assert!((sq[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((sq[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((sq[2] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unigram_degenerate_mean() {
        let u = Matrix::from_rows(&vec![vec![0.3, -0.2]; 4]).unwrap();
        let v = Matrix::from_rows(&[
            vec![1.0, 2.0],
            vec![0.5, 0.1],
            vec![-1.0, 0.0],
            vec![0.0, 3.0],
        ])
        .unwrap();
        let r = assert_ranking(&v, &u, &[0, 1, 2, 3]);
        assert!(r.distances.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn unigram_dimension_mismatch() {
        assert!(derive_unigram(
            &Matrix::identity(3),
            &Matrix::identity(2),
            UnigramMetric::default()
        )
        .is_err());
    }

    #[test]
    fn unigram_topk_slices() {
        let r = UnigramRanking {
            ranking: vec![1, 2, 0],
            distances: vec![0.0; 3],
        };
        let rows: Vec<_> = r.topk(2).unwrap().into_iter().map(|d| d.tokens).collect();
        assert_eq!(rows, vec![vec![1], vec![2]]);
        assert_eq!(r.topk(3).unwrap().len(), 3);
        assert!(r.topk(0).unwrap().is_empty());
        assert_eq!(r.topk(4).unwrap().len(), 3);
    }

    #[test]
    fn appendix_variant_ranks_by_signed_score() {
        let u = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let r = derive_unigram(&v, &u, UnigramMetric::MeanInnerProduct).unwrap();
        // mean = (1/3, 1/3); C = I/3; score_x = (u_x . mean) / 3
        assert_eq!(r.ranking, vec![2, 1, 0]);
        assert!((r.distances[0] - 2.0 / 9.0).abs() < 1e-12);
        assert!((r.distances[2] + 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn table_model_has_no_unigram() {
        let m = TableModel::from_corpus(&[0, 1, 0], 1, 2).unwrap();
        assert!(matches!(
            unigram_from_predictor(&m, UnigramMetric::default()),
            Err(Error::NoEmbeddings)
        ));
    }

    // a -> b (3), a -> c (2), a -> d (1); b -> c; c -> a; d -> a
    fn chain_model() -> TableModel {
        let corpus = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 2, 0, 2, 0, 3, 0];
        TableModel::from_corpus(&corpus, 1, 4).unwrap()
    }

    #[test]
    fn bigram_rows_follow_model_scores() {
        let m = chain_model();
        let t = BigramTable::derive(&m, 4).unwrap();
        assert_eq!(&t.row(0)[..3], &[1, 2, 3]);
        for x in 0..4 {
            let mut sorted = t.row(x).to_vec();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![0, 1, 2, 3]);
        }
        assert!(BigramTable::derive(&m, 5).is_err());
    }

    #[test]
    fn bigram_first_column_is_greedy() {
        let m = ToyTransformer::init(1, 70, 8).unwrap();
        let t = BigramTable::derive(&m, 5).unwrap();
        for x in 0..70 {
            assert_eq!(t.row(x)[0], greedy_decode(&m, &[x], 1).unwrap()[1]);
        }
    }

    #[test]
    fn extended_depth_one_is_bigram() {
        let m = chain_model();
        let base = BigramTable::derive(&m, 3).unwrap();
        let ext = ExtendedBigramTable::derive(&m, &base, 1).unwrap();
        assert_eq!(ext.bigram(), base);
    }

    #[test]
    fn extended_follows_chain() {
        // deterministic chain a -> b -> c -> a
        let m = TableModel::from_corpus(&[0, 1, 2, 0, 1, 2, 0], 1, 3).unwrap();
        let base = BigramTable::derive(&m, 1).unwrap();
        let ext = ExtendedBigramTable::derive(&m, &base, 2).unwrap();
        assert_eq!(ext.row(0, 0), &[1, 2]);
        let rows = ext.speculate(0, 1, 1).unwrap();
        assert_eq!(rows[0].tokens, vec![1]);
        assert!(ext.speculate(0, 1, 3).is_err());
        assert_eq!(ext.speculate(0, 2, 1).unwrap().len(), 1);
    }

    #[test]
    fn extended_slice() {
        let data: Vec<TokenId> = (0..2 * 3 * 4).map(|i| i % 2).collect();
        let ext = ExtendedBigramTable::from_data(2, 3, 4, data).unwrap();
        let rows = ext.speculate(1, 3, 2).unwrap();
        assert_eq!(rows.len(), 3);
        for (j, r) in rows.iter().enumerate() {
            assert_eq!(r.tokens, ext.row(1, j)[..2].to_vec());
            assert_eq!(r.rank, j);
        }
    }

    #[test]
    fn table_files_round_trip() {
        let m = chain_model();
        let base = BigramTable::derive(&m, 3).unwrap();
        let ext = ExtendedBigramTable::derive(&m, &base, 4).unwrap();

        let mut buf = Vec::new();
        ext.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"NGTB");
        assert_eq!(buf.len(), 20 + 4 * 4 * 3 * 4);
        assert_eq!(ExtendedBigramTable::read_from(&buf[..]).unwrap(), ext);
        // an extended file is not a bigram file
        assert!(BigramTable::read_from(&buf[..]).is_err());

        let mut bbuf = Vec::new();
        base.write_to(&mut bbuf).unwrap();
        assert_eq!(BigramTable::read_from(&bbuf[..]).unwrap(), base);

        bbuf.push(0);
        assert!(BigramTable::read_from(&bbuf[..]).is_err());
    }
}
