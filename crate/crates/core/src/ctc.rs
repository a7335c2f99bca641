//! Connectionist temporal classification: log-space forward-backward loss and decoders.
//!
//! Blank is class 0; glosses occupy classes `1..=G`.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::{log_add, Scalar};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Per-frame log-probabilities, `[frames, classes]`, classes including blank.
#[derive(Clone, Debug)]
pub struct GlossLogits<T> {
    logp: Tensor<T>,
}

impl<T: Scalar> GlossLogits<T> {
    pub fn new(logp: Tensor<T>) -> Result<Self> {
        if logp.ndim() != 2 || logp.shape()[1] < 2 {
            return Err(shape_err("gloss_logits", format!("expected [frames, classes>=2], got {:?}", logp.shape())));
        }
        Ok(GlossLogits { logp })
    }

    /// Normalizes raw scores with a row log-softmax.
    pub fn from_scores(scores: &Tensor<T>) -> Result<Self> {
        let mut g = Graph::new();
        let x = g.constant(scores.clone());
        let y = g.log_softmax(x);
        Self::new(g.value(y).clone())
    }

    pub fn frames(&self) -> usize {
        self.logp.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.logp.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.logp
    }

    fn at(&self, t: usize, k: usize) -> T {
        self.logp.at2(t, k)
    }
}

/// Label sequence without blanks.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct GlossSequence(pub Vec<usize>);

impl GlossSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.contains(&BLANK) {
            return Err(Error::Invalid("gloss sequence contains the blank id".into()));
        }
        Ok(GlossSequence(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    /// Frames needed by the shortest alignment: one per label plus a blank
    /// between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Why a target has zero likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Infeasible {
    pub frames: usize,
    pub required: usize,
}

#[derive(Clone, Debug)]
pub struct CtcOutput<T> {
    /// Negative log-likelihood; `+inf` when `infeasible` is set.
    pub loss: T,
    /// Gradient of `loss` with respect to the log-probabilities.
    pub grad: Vec<T>,
    pub infeasible: Option<Infeasible>,
}

fn check_target<T: Scalar>(logits: &GlossLogits<T>, target: &GlossSequence) -> Result<()> {
    let c = logits.classes();
    if let Some(&bad) = target.ids().iter().find(|&&k| k == BLANK || k >= c) {
        return Err(Error::Invalid(format!("target label {bad} outside 1..{}", c - 1)));
    }
    Ok(())
}

/// Forward-backward over the blank-extended target.
pub fn ctc_forward_backward<T: Scalar>(logits: &GlossLogits<T>, target: &GlossSequence) -> Result<CtcOutput<T>> {
    check_target(logits, target)?;
    let frames = logits.frames();
    let classes = logits.classes();
    let required = target.min_frames();
    if frames < required {
        return Ok(CtcOutput {
            loss: T::infinity(),
            grad: vec![T::zero(); frames * classes],
            infeasible: Some(Infeasible { frames, required }),
        });
    }
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.ids().iter().flat_map(|&k| [k, BLANK]))
        .collect();
    let s_len = ext.len();
    let ninf = T::neg_infinity();
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = logits.at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = logits.at(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + logits.at(t, ext[s]) };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = logits.at(frames - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = logits.at(frames - 1, ext[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s];
            if s + 1 < s_len {
                b = log_add(b, beta[next + s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                b = log_add(b, beta[next + s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + logits.at(t, ext[s]) };
        }
    }

    let mut log_lik = alpha[last + s_len - 1];
    if s_len > 1 {
        log_lik = log_add(log_lik, alpha[last + s_len - 2]);
    }
    if log_lik == ninf {
        // Feasible length but every path has zero probability.
        return Ok(CtcOutput { loss: T::infinity(), grad: vec![T::zero(); frames * classes], infeasible: None });
    }

    let mut grad = vec![T::zero(); frames * classes];
    for t in 0..frames {
        let mut occupancy = vec![ninf; classes];
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab != ninf && !ab.is_nan() {
                occupancy[ext[s]] = log_add(occupancy[ext[s]], ab);
            }
        }
        for k in 0..classes {
            if occupancy[k] != ninf {
                grad[t * classes + k] = -(occupancy[k] - logits.at(t, k) - log_lik).exp();
            }
        }
    }
    Ok(CtcOutput { loss: -log_lik, grad, infeasible: None })
}

/// Negative log-likelihood of `target` summed over all alignments.
pub fn ctc_loss<T: Scalar>(logits: &GlossLogits<T>, target: &GlossSequence) -> Result<T> {
    Ok(ctc_forward_backward(logits, target)?.loss)
}

/// Records the CTC loss of `logp` (a `[frames, classes]` log-probability node) on the tape.
pub fn ctc_loss_var<T: Scalar>(g: &mut Graph<T>, logp: Var, target: &GlossSequence) -> Result<(Var, Option<Infeasible>)> {
    let logits = GlossLogits::new(g.value(logp).clone())?;
    let out = ctc_forward_backward(&logits, target)?;
    let v = g.scalar_with_grad(logp, out.loss, out.grad)?;
    Ok((v, out.infeasible))
}

/// Collapses repeats, then drops blanks.
pub fn collapse_path(path: &[usize]) -> GlossSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    GlossSequence(out)
}

/// Best-path decoding.
pub fn ctc_greedy_decode<T: Scalar>(logits: &GlossLogits<T>) -> GlossSequence {
    let path: Vec<usize> = (0..logits.frames())
        .map(|t| {
            let row = logits.tensor().row(t);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse_path(&path)
}

#[derive(Clone, Debug)]
struct Prefix<T> {
    labels: Vec<usize>,
    blank: T,
    non_blank: T,
}

impl<T: Scalar> Prefix<T> {
    fn total(&self) -> T {
        log_add(self.blank, self.non_blank)
    }
}

/// Prefix beam search returning the best sequence with its log-probability.
pub fn ctc_beam_search_scored<T: Scalar>(logits: &GlossLogits<T>, beam_width: usize) -> Result<(GlossSequence, T)> {
    if beam_width == 0 {
        return Err(Error::Invalid("beam width must be at least 1".into()));
    }
    let ninf = T::neg_infinity();
    let mut beams = vec![Prefix { labels: Vec::new(), blank: T::zero(), non_blank: ninf }];
    for t in 0..logits.frames() {
        let mut next: Vec<Prefix<T>> = Vec::new();
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut entry = |labels: Vec<usize>, next: &mut Vec<Prefix<T>>| -> usize {
            *index.entry(labels.clone()).or_insert_with(|| {
                next.push(Prefix { labels, blank: ninf, non_blank: ninf });
                next.len() - 1
            })
        };
        for beam in &beams {
            let total = beam.total();
            let i = entry(beam.labels.clone(), &mut next);
            next[i].blank = log_add(next[i].blank, total + logits.at(t, BLANK));
            for k in 1..logits.classes() {
                let lp = logits.at(t, k);
                let mut extended = beam.labels.clone();
                extended.push(k);
                if beam.labels.last() == Some(&k) {
                    let i = entry(beam.labels.clone(), &mut next);
                    next[i].non_blank = log_add(next[i].non_blank, beam.non_blank + lp);
                    let j = entry(extended, &mut next);
                    next[j].non_blank = log_add(next[j].non_blank, beam.blank + lp);
                } else {
                    let j = entry(extended, &mut next);
                    next[j].non_blank = log_add(next[j].non_blank, total + lp);
                }
            }
        }
        next.sort_by(|a, b| b.total().partial_cmp(&a.total()).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.labels.cmp(&b.labels)));
        next.truncate(beam_width);
        beams = next;
    }
    let best = beams.into_iter().next().expect("beam never empty");
    let score = best.total();
    Ok((GlossSequence(best.labels), score))
}

pub fn ctc_beam_search<T: Scalar>(logits: &GlossLogits<T>, beam_width: usize) -> Result<GlossSequence> {
    Ok(ctc_beam_search_scored(logits, beam_width)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(frames: usize, classes: usize) -> GlossLogits<f64> {
        let v = -(classes as f64).ln();
        GlossLogits::new(Tensor::full(&[frames, classes], v)).unwrap()
    }

    fn one_hot_path(path: &[usize], classes: usize) -> GlossLogits<f64> {
        let mut data = vec![-30.0; path.len() * classes];
        for (t, &k) in path.iter().enumerate() {
            data[t * classes + k] = 0.0;
        }
        GlossLogits::from_scores(&Tensor::new(&[path.len(), classes], data).unwrap()).unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let loss = ctc_loss(&uniform(1, 3), &GlossSequence(vec![1])).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_single_label() {
        // a·a, a·∅, ∅·a: 3 of 9 paths.
        let loss = ctc_loss(&uniform(2, 3), &GlossSequence(vec![1])).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_is_infinite_with_diagnostic() {
        let out = ctc_forward_backward(&uniform(2, 3), &GlossSequence(vec![1, 1])).unwrap();
        assert_eq!(out.loss, f64::INFINITY);
        assert_eq!(out.infeasible, Some(Infeasible { frames: 2, required: 3 }));
        let out = ctc_forward_backward(&uniform(3, 3), &GlossSequence(vec![1, 2, 1, 2])).unwrap();
        assert!(out.infeasible.is_some());
    }

    #[test]
    fn rejects_blank_and_out_of_range_labels() {
        assert!(GlossSequence::new(vec![1, 0]).is_err());
        assert!(ctc_loss(&uniform(3, 3), &GlossSequence(vec![3])).is_err());
    }

    #[test]
    fn greedy_collapse_rules() {
        assert_eq!(collapse_path(&[0, 1, 1, 0, 2]).0, vec![1, 2]);
        assert_eq!(collapse_path(&[0, 0, 0]).0, Vec::<usize>::new());
        assert_eq!(collapse_path(&[1, 0, 1]).0, vec![1, 1]);
        assert_eq!(ctc_greedy_decode(&one_hot_path(&[0, 1, 1, 0, 2], 3)).0, vec![1, 2]);
    }

    #[test]
    fn peaked_logits_decode_at_any_width() {
        let logits = one_hot_path(&[0, 1, 0, 2], 3);
        for w in [1, 2, 5, 10] {
            assert_eq!(ctc_beam_search(&logits, w).unwrap().0, vec![1, 2]);
        }
    }

    #[test]
    fn zero_width_rejected() {
        assert!(ctc_beam_search(&uniform(2, 3), 0).is_err());
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let loss = ctc_loss(&uniform(4, 3), &GlossSequence(vec![])).unwrap();
        assert!((loss - 4.0 * 3f64.ln()).abs() < 1e-12);
    }
}
