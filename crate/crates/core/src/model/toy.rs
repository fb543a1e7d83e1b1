//! Single-layer, single-head causal transformer with seeded random weights.
//!
//! Per position `t` with token `x`:
//!
//! ```text
//! e     = V[x]
//! q,k,v = e Wq, e Wk, e Wv
//! a     = softmax(q . k_s / sqrt(d), s <= t) weighted sum of v_s
//! h     = e + a Wo
//! out   = h + relu(h W1) W2
//! logit = out U
//! ```
//!
//! Keys and values depend only on the token at their own position, which is
//! what the cache stores. All arithmetic is `f64`.

use std::io::{Read, Write};

use super::{KvCache, Predictor, ScoreBlock, TokenBlock};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::Embeddings;
use crate::vocab::{seeded_rng, TokenId};

pub const MAX_TOY_VOCAB: usize = 512;
pub const WEIGHTS_MAGIC: &[u8; 4] = b"SPDR";
pub const WEIGHTS_VERSION: u32 = 1;
const FFN_MULT: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    seed: u64,
    dim: usize,
    embed: Matrix,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    w2: Matrix,
    unembed: Matrix,
}

impl ToyTransformer {
    /// Weights are drawn uniform in `[-1/sqrt(dim), 1/sqrt(dim))` from the
    /// seeded PRNG in file order: V, Wq, Wk, Wv, Wo, W1, W2, U.
    pub fn init(seed: u64, vocab_size: usize, dim: usize) -> Result<Self> {
        if !(2..=MAX_TOY_VOCAB).contains(&vocab_size) {
            return Err(Error::invalid(format!(
                "toy transformer vocab size {vocab_size} outside [2, {MAX_TOY_VOCAB}]"
            )));
        }
        if dim < 2 {
            return Err(Error::invalid(format!(
                "toy transformer dim {dim} below minimum 2"
            )));
        }
        let mut rng = seeded_rng(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let hidden = FFN_MULT * dim;
        let mut draw = |r, c| Matrix::random_uniform(r, c, bound, &mut rng);
        Ok(ToyTransformer {
            seed,
            dim,
            embed: draw(vocab_size, dim),
            wq: draw(dim, dim),
            wk: draw(dim, dim),
            wv: draw(dim, dim),
            wo: draw(dim, dim),
            w1: draw(dim, hidden),
            w2: draw(hidden, dim),
            unembed: draw(dim, vocab_size),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn matrices(&self) -> [&Matrix; 8] {
        [
            &self.embed,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w1,
            &self.w2,
            &self.unembed,
        ]
    }

    /// Key and value for `token`, concatenated.
    fn kv_entry(&self, token: TokenId) -> Vec<f64> {
        let e = self.embed.row(token as usize);
        let mut entry = self.wk.left_mul(e);
        entry.extend(self.wv.left_mul(e));
        entry
    }

    /// Logits at position `pos` of `row`; the cache already holds entries
    /// for every position `<= pos` of that row.
    fn logits_at(&self, cache: &KvCache, row: usize, pos: usize) -> Vec<f64> {
        let d = self.dim;
        let e = self.embed.row(cache.token(row, pos) as usize);
        let q = self.wq.left_mul(e);
        let scale = 1.0 / (d as f64).sqrt();

        let mut weights: Vec<f64> = (0..=pos)
            .map(|s| {
                let key = &cache.entry(row, s)[..d];
                q.iter().zip(key).map(|(a, b)| a * b).sum::<f64>() * scale
            })
            .collect();
        let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for w in &mut weights {
            *w = (*w - max).exp();
            total += *w;
        }
        let mut attended = vec![0.0; d];
        for (s, w) in weights.iter().enumerate() {
            let value = &cache.entry(row, s)[d..];
            let p = w / total;
            for (a, v) in attended.iter_mut().zip(value) {
                *a += p * v;
            }
        }

        let mut h = self.wo.left_mul(&attended);
        for (hi, ei) in h.iter_mut().zip(e) {
            *hi += ei;
        }
        let mut inner = self.w1.left_mul(&h);
        for x in &mut inner {
            *x = x.max(0.0);
        }
        let ff = self.w2.left_mul(&inner);
        for (hi, f) in h.iter_mut().zip(&ff) {
            *hi += f;
        }
        self.unembed.left_mul(&h)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        w.write_all(&(self.embed.rows() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for m in self.matrices() {
            for x in m.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Format("bad weights magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!(
                "unsupported weights version {version}"
            )));
        }
        let vocab = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed)?;
        let seed = u64::from_le_bytes(seed);
        if !(2..=MAX_TOY_VOCAB).contains(&vocab) || dim < 2 {
            return Err(Error::Format(format!(
                "bad dimensions vocab={vocab} dim={dim}"
            )));
        }
        let hidden = FFN_MULT * dim;
        let mut read = |rows, cols| -> Result<Matrix> {
            let mut data = vec![0.0; rows * cols];
            let mut buf = [0u8; 8];
            for x in &mut data {
                r.read_exact(&mut buf)?;
                *x = f64::from_le_bytes(buf);
            }
            Matrix::new(rows, cols, data)
        };
        Ok(ToyTransformer {
            seed,
            dim,
            embed: read(vocab, dim)?,
            wq: read(dim, dim)?,
            wk: read(dim, dim)?,
            wv: read(dim, dim)?,
            wo: read(dim, dim)?,
            w1: read(dim, hidden)?,
            w2: read(hidden, dim)?,
            unembed: read(dim, vocab)?,
        })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl Predictor for ToyTransformer {
    fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    fn cache_width(&self) -> usize {
        2 * self.dim
    }

    fn forward_scores(
        &self,
        block: &TokenBlock,
        cache: Option<&mut KvCache>,
    ) -> Result<ScoreBlock> {
        let mut scratch;
        let cache = match cache {
            Some(c) => c,
            None => {
                scratch = KvCache::new(self.cache_width(), block.row_len());
                scratch.broadcast(block.k())?;
                &mut scratch
            }
        };
        let start = cache.check_block(block.rows(), block.context_len())?;
        let first = block.context_len() - 1;

        let mut out = Vec::with_capacity(block.k());
        for (i, row) in block.rows().iter().enumerate() {
            let mut row_scores = Vec::with_capacity(row.len() - first);
            for (pos, &token) in row.iter().enumerate().skip(start) {
                cache.push(i, token, &self.kv_entry(token))?;
                if pos >= first {
                    row_scores.push(self.logits_at(cache, i, pos));
                }
            }
            out.push(row_scores);
        }
        Ok(out)
    }

    fn embeddings(&self) -> Option<Embeddings<'_>> {
        Some(Embeddings {
            input: &self.embed,
            output: &self.unembed,
        })
    }
}
