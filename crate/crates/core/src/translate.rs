//! Inference: CTC gloss decoding and beam-search translation.

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_beam_search, ctc_greedy_decode, GlossLogits, GlossSequence};
use crate::data::{FeatureSequence, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::model::JointModel;
use crate::params::Forward;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    /// Translation beam width; 1 is greedy.
    pub beam_width: usize,
    /// Exponent of the length penalty `((5 + |Y|) / 6)^alpha`.
    pub length_penalty: f64,
    /// Hard cap on generated words, EOS included.
    pub max_words: usize,
    /// CTC prefix beam width; 1 is best-path.
    pub ctc_beam_width: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_width: 4, length_penalty: 1.0, max_words: 24, ctc_beam_width: 4 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.ctc_beam_width == 0 {
            return Err(Error::Config("decode beam widths must be at least 1".into()));
        }
        if self.max_words == 0 {
            return Err(Error::Config("decode.max_words must be at least 1".into()));
        }
        if !(self.length_penalty.is_finite() && self.length_penalty >= 0.0) {
            return Err(Error::Config("decode.length_penalty must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// A finished translation without bos/eos.
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub words: Vec<usize>,
    /// Sum of token log-probabilities, EOS included.
    pub log_prob: f64,
    /// `log_prob / length_penalty`.
    pub score: f64,
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    log_prob: f64,
}

fn finish(h: Hyp, ended: bool, alpha: f64) -> Translation {
    let mut words = h.tokens[1..].to_vec();
    if ended {
        words.pop();
    }
    let generated = h.tokens.len() - 1;
    Translation { words, log_prob: h.log_prob, score: h.log_prob / length_penalty(generated, alpha) }
}

fn next_token_log_probs<T: Scalar>(model: &JointModel<T>, f: &mut Forward<T>, states: Var, prefix: &[usize]) -> Result<Vec<f64>> {
    let logits = model.decode(f, states, prefix)?;
    let row = f.g.value(logits).row(prefix.len() - 1).iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut out: Vec<f64> = row.iter().map(|v| v - lse).collect();
    out[PAD] = f64::NEG_INFINITY;
    out[BOS] = f64::NEG_INFINITY;
    Ok(out)
}

/// Beam search over decoder outputs given encoder `states`.
pub fn beam_search<T: Scalar>(model: &JointModel<T>, f: &mut Forward<T>, states: Var, cfg: &DecodeConfig) -> Result<Translation> {
    cfg.validate()?;
    let width = cfg.beam_width;
    let mut alive = vec![Hyp { tokens: vec![BOS], log_prob: 0.0 }];
    let mut finished: Vec<Translation> = Vec::new();
    for _ in 0..cfg.max_words {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, h) in alive.iter().enumerate() {
            let lp = next_token_log_probs(model, f, states, &h.tokens)?;
            for (tok, &v) in lp.iter().enumerate() {
                if v.is_finite() {
                    candidates.push((h.log_prob + v, hi, tok));
                }
            }
        }
        // Stable order: score, then hypothesis index, then token id.
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(width);
        for (lp, hi, tok) in candidates.into_iter().take(width) {
            let mut tokens = alive[hi].tokens.clone();
            tokens.push(tok);
            let h = Hyp { tokens, log_prob: lp };
            if tok == EOS {
                finished.push(finish(h, true, cfg.length_penalty));
            } else {
                next.push(h);
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= width {
            break;
        }
    }
    if finished.is_empty() {
        finished = alive.into_iter().map(|h| finish(h, false, cfg.length_penalty)).collect();
    }
    finished
        .into_iter()
        .min_by(|a, b| b.score.total_cmp(&a.score))
        .ok_or_else(|| Error::Invalid("beam search produced no hypothesis".into()))
}

/// Gloss and word predictions for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub glosses: GlossSequence,
    pub translation: Option<Translation>,
}

pub fn predict<T: Scalar>(model: &JointModel<T>, features: &FeatureSequence<T>, cfg: &DecodeConfig) -> Result<Prediction> {
    cfg.validate()?;
    let mut f = Forward::eval(&model.store);
    let enc = model.encode(&mut f, features)?;
    let logits = GlossLogits::new(f.g.value(enc.gloss_logp).clone())?;
    let glosses = if cfg.ctc_beam_width == 1 { ctc_greedy_decode(&logits) } else { ctc_beam_search(&logits, cfg.ctc_beam_width)? };
    let translation = if model.has_decoder() { Some(beam_search(model, &mut f, enc.states, cfg)?) } else { None };
    Ok(Prediction { glosses, translation })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_values() {
        assert_eq!(length_penalty(1, 1.0), 1.0);
        assert!((length_penalty(7, 0.5) - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(length_penalty(9, 0.0), 1.0);
    }

    #[test]
    fn finish_strips_markers() {
        let t = finish(Hyp { tokens: vec![BOS, 5, 6, EOS], log_prob: -2.0 }, true, 1.0);
        assert_eq!(t.words, vec![5, 6]);
        assert!((t.score + 2.0 / (8.0 / 6.0)).abs() < 1e-12);
    }
}
