//! Context N-gram matcher: find earlier occurrences of the last `q` tokens
//! and propose the `w` tokens that followed them.

use std::collections::HashMap;

use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextMatch {
    pub continuation: Vec<TokenId>,
    /// Number of windows in the context carrying this continuation.
    pub count: usize,
    /// Start index of the most recent such window.
    pub last_position: usize,
}

/// Matches of the final `q` tokens of `context` against every full window of
/// length `q + w`, merged by continuation and ordered by count (descending),
/// then most recent window start, then lexicographic continuation. Returns at
/// most `k` matches; contexts too short for a window yield none.
pub fn context_ngram_match(context: &[TokenId], q: usize, w: usize, k: usize) -> Vec<ContextMatch> {
    let n = q + w;
    if q == 0 || w == 0 || k == 0 || context.len() < n {
        return Vec::new();
    }
    let query = &context[context.len() - q..];

    let mut groups: HashMap<&[TokenId], (usize, usize)> = HashMap::new();
    for (start, window) in context.windows(n).enumerate() {
        if &window[..q] == query {
            let entry = groups.entry(&window[q..]).or_insert((0, start));
            entry.0 += 1;
            entry.1 = start;
        }
    }

    let mut matches: Vec<ContextMatch> = groups
        .into_iter()
        .map(|(cont, (count, last_position))| ContextMatch {
            continuation: cont.to_vec(),
            count,
            last_position,
        })
        .collect();
    matches.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(b.last_position.cmp(&a.last_position))
            .then_with(|| a.continuation.cmp(&b.continuation))
    });
    matches.truncate(k);
    matches
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: TokenId = 0;
    const B: TokenId = 1;
    const C: TokenId = 2;
    const X: TokenId = 3;
    const Y: TokenId = 4;

    fn conts(m: &[ContextMatch]) -> Vec<Vec<TokenId>> {
        m.iter().map(|m| m.continuation.clone()).collect()
    }

    #[test]
    fn repeated_pair() {
        let m = context_ngram_match(&[A, B, A, B, A], 1, 1, 2);
        assert_eq!(conts(&m), vec![vec![B]]);
        assert_eq!((m[0].count, m[0].last_position), (2, 2));
    }

    #[test]
    fn no_window_starts_with_query() {
        assert!(context_ngram_match(&[X, A, Y, X, B], 1, 1, 1).is_empty());
    }

    #[test]
    fn single_earlier_occurrence() {
        let m = context_ngram_match(&[X, A, Y, X], 1, 1, 2);
        assert_eq!(conts(&m), vec![vec![A]]);
    }

    #[test]
    fn ties_prefer_recent() {
        let m = context_ngram_match(&[C, A, C, B, C], 1, 1, 2);
        assert_eq!(conts(&m), vec![vec![B], vec![A]]);
    }

    #[test]
    fn short_context_is_empty() {
        assert!(context_ngram_match(&[A, B], 2, 1, 3).is_empty());
        assert!(context_ngram_match(&[], 1, 1, 3).is_empty());
    }

    #[test]
    fn wider_windows_overlap_the_query() {
        // window (A, B, A) at 0 overlaps the query position
        let m = context_ngram_match(&[A, B, A], 1, 2, 4);
        assert_eq!(conts(&m), vec![vec![B, A]]);
    }
}
