//! Word error rate and BLEU over token id sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Edit counts of one alignment between a reference and a hypothesis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Errors per reference token; an empty reference scores 0 or 1.
    pub fn rate(&self) -> f64 {
        if self.reference_len == 0 {
            return if self.errors() == 0 { 0.0 } else { 1.0 };
        }
        self.errors() as f64 / self.reference_len as f64
    }

    pub fn merge(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference_len += other.reference_len;
    }
}

/// Minimum-edit alignment; among optimal alignments prefers substitutions,
/// then deletions.
pub fn edit_counts<W: PartialEq>(reference: &[W], hypothesis: &[W]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    // cost, substitutions, deletions, insertions
    let mut prev: Vec<(usize, usize, usize, usize)> = (0..=m).map(|j| (j, 0, 0, j)).collect();
    for i in 1..=n {
        let mut cur = vec![(i, 0, i, 0); m + 1];
        for j in 1..=m {
            let diag = prev[j - 1];
            let hit = reference[i - 1] == hypothesis[j - 1];
            let sub = if hit { diag } else { (diag.0 + 1, diag.1 + 1, diag.2, diag.3) };
            let del = (prev[j].0 + 1, prev[j].1, prev[j].2 + 1, prev[j].3);
            let ins = (cur[j - 1].0 + 1, cur[j - 1].1, cur[j - 1].2, cur[j - 1].3 + 1);
            cur[j] = [sub, del, ins].into_iter().min_by_key(|c| c.0).unwrap();
        }
        prev = cur;
    }
    let (_, s, d, ins) = prev[m];
    EditCounts { substitutions: s, deletions: d, insertions: ins, reference_len: n }
}

/// Corpus WER: total edits over total reference length.
pub fn corpus_wer<W: PartialEq>(pairs: &[(Vec<W>, Vec<W>)]) -> EditCounts {
    let mut total = EditCounts::default();
    for (r, h) in pairs {
        total.merge(&edit_counts(r, h));
    }
    total
}

fn ngram_counts<W: std::hash::Hash + Eq + Clone>(tokens: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *map.entry(g).or_insert(0) += 1;
        }
    }
    map
}

/// Clipped n-gram matches and hypothesis n-gram totals for orders 1..=4.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hypothesis_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn add<W: std::hash::Hash + Eq + Clone>(&mut self, reference: &[W], hypothesis: &[W]) {
        for n in 1..=4 {
            let refs = ngram_counts(reference, n);
            let hyps = ngram_counts(hypothesis, n);
            self.matches[n - 1] += hyps.iter().map(|(g, &c)| c.min(*refs.get(g).unwrap_or(&0))).sum::<usize>();
            self.totals[n - 1] += hypothesis.len().saturating_sub(n - 1);
        }
        self.hypothesis_len += hypothesis.len();
        self.reference_len += reference.len();
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hypothesis_len == 0 {
            0.0
        } else if self.hypothesis_len >= self.reference_len {
            1.0
        } else {
            (1.0 - self.reference_len as f64 / self.hypothesis_len as f64).exp()
        }
    }

    /// Cumulative BLEU-`order` in `[0, 1]`, geometric mean of precisions 1..=order.
    /// `smoothing` adds one to numerator and denominator of orders above 1.
    pub fn score(&self, order: usize, smoothing: bool) -> f64 {
        assert!((1..=4).contains(&order), "BLEU order {order} outside 1..=4");
        let mut log_sum = 0.0;
        for n in 0..order {
            let add = if smoothing && n > 0 { 1.0 } else { 0.0 };
            let (num, den) = (self.matches[n] as f64 + add, self.totals[n] as f64 + add);
            if num == 0.0 || den == 0.0 {
                return 0.0;
            }
            log_sum += (num / den).ln();
        }
        self.brevity_penalty() * (log_sum / order as f64).exp()
    }
}

/// Unsmoothed corpus BLEU-1..4.
pub fn corpus_bleu<W: std::hash::Hash + Eq + Clone>(pairs: &[(Vec<W>, Vec<W>)]) -> [f64; 4] {
    let mut stats = BleuStats::default();
    for (r, h) in pairs {
        stats.add(r, h);
    }
    [1, 2, 3, 4].map(|n| stats.score(n, false))
}

/// Add-one smoothed sentence BLEU-4, for per-sample diagnostics only.
pub fn sentence_bleu<W: std::hash::Hash + Eq + Clone>(reference: &[W], hypothesis: &[W]) -> f64 {
    let mut stats = BleuStats::default();
    stats.add(reference, hypothesis);
    stats.score(4, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_counts() {
        let e = edit_counts(&[1, 2, 3, 4], &[1, 3, 4, 5]);
        assert_eq!(e.errors(), 2);
        assert_eq!((e.deletions, e.insertions), (1, 1));
        let e = edit_counts(&[1, 2, 3], &[1, 9, 3]);
        assert_eq!((e.substitutions, e.deletions, e.insertions), (1, 0, 0));
        assert_eq!(edit_counts::<u8>(&[], &[]).rate(), 0.0);
        assert_eq!(edit_counts(&[1, 2], &[]).rate(), 1.0);
    }

    #[test]
    fn perfect_bleu_is_one() {
        let pairs = vec![(vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4, 5])];
        assert_eq!(corpus_bleu(&pairs), [1.0; 4]);
    }

    #[test]
    fn bleu_hand_example() {
        // hyp 1 2 3 5, ref 1 2 3 4: p1 = 3/4, p2 = 2/3, p3 = 1/2, p4 = 0/1.
        let pairs = vec![(vec![1, 2, 3, 4], vec![1, 2, 3, 5])];
        let b = corpus_bleu(&pairs);
        assert!((b[0] - 0.75).abs() < 1e-12);
        assert!((b[1] - (0.75f64 * 2.0 / 3.0).sqrt()).abs() < 1e-12);
        assert!((b[2] - (0.75f64 * 2.0 / 3.0 * 0.5).cbrt()).abs() < 1e-12);
        assert_eq!(b[3], 0.0);
        let s = sentence_bleu(&[1, 2, 3, 4], &[1, 2, 3, 5]);
        assert!((s - (0.75f64 * 3.0 / 4.0 * 2.0 / 3.0 * 0.5).powf(0.25)).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_applies() {
        let pairs = vec![(vec![1, 2, 3, 4], vec![1, 2])];
        let b = corpus_bleu(&pairs);
        assert!((b[0] - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn clipping_limits_repeats() {
        let pairs = vec![(vec![1, 2], vec![1, 1, 1])];
        assert!((corpus_bleu(&pairs)[0] - 1.0 / 3.0).abs() < 1e-12);
    }
}
