//! The joint recognition/translation network.
//!
//! Pre-norm encoder layers feed frame features through the clip aggregator
//! into self-attention; a CTC head reads glosses off the final encoder states.
//! A pre-norm decoder attends causally to its own prefix and to the encoder
//! states and predicts words.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{rel_pos_table, AttentionConfig, AttnMask, MultiHeadAttention, RelPos, Site};
use crate::cptcn::{cptcn_attention_inputs, ConvStack, Cptcn, CptcnConfig, CptcnLayers};
use crate::ctc::{ctc_loss_var, GlossSequence, Infeasible};
use crate::data::{FeatureSequence, SampleTriple, BOS, EOS, PAD};
use crate::error::{shape_err, Error, Result};
use crate::gathering::{GatherConfig, GatherVariant};
use crate::graph::Var;
use crate::params::{FeedForward, Forward, LayerNorm, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{sinusoid_table, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_width: usize,
    pub dropout: f64,
    /// Weight of the recognition (CTC) loss.
    pub lambda_r: f64,
    /// Weight of the translation (cross-entropy) loss.
    pub lambda_t: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d_model: 64, encoder_layers: 2, decoder_layers: 2, ff_width: 256, dropout: 0.1, lambda_r: 1.0, lambda_t: 1.0 }
    }
}

/// Everything that determines parameter names and shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub model: ModelConfig,
    pub gathering: GatherConfig,
    pub cptcn: CptcnConfig,
    pub attention: AttentionConfig,
    pub input_dim: usize,
    /// CTC classes including blank.
    pub gloss_classes: usize,
    /// Word vocabulary including pad/bos/eos.
    pub word_vocab: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d_model == 0 || m.encoder_layers == 0 || m.ff_width == 0 {
            return Err(Error::Config("model.d_model, encoder_layers and ff_width must be positive".into()));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config(format!("model.dropout {} outside [0, 1)", m.dropout)));
        }
        if !(m.lambda_r >= 0.0 && m.lambda_t >= 0.0) || m.lambda_r + m.lambda_t == 0.0 {
            return Err(Error::Config("loss weights must be non-negative and not both zero".into()));
        }
        if m.lambda_t > 0.0 && m.decoder_layers == 0 {
            return Err(Error::Config("translation loss needs at least one decoder layer".into()));
        }
        if self.gloss_classes < 2 || self.word_vocab <= EOS + 1 || self.input_dim == 0 {
            return Err(Error::Config("vocabularies and input_dim must be non-trivial".into()));
        }
        self.gathering.validate()?;
        if self.gathering.variant != GatherVariant::None && self.gathering.clip_len() < ConvStack::min_clip_len() {
            return Err(Error::Config(format!(
                "clip length {} shorter than the convolution stack needs ({})",
                self.gathering.clip_len(),
                ConvStack::min_clip_len()
            )));
        }
        self.attention.validate(m.d_model)?;
        Ok(())
    }

    /// Shortest video the encoder accepts.
    pub fn min_frames(&self) -> usize {
        self.gathering.min_sequence_len().max(2)
    }

    /// Hex sha256 of the canonical JSON form, shape-relevant fields only.
    pub fn digest(&self) -> String {
        let mut canon = self.clone();
        canon.model.dropout = 0.0;
        canon.model.lambda_r = 0.0;
        canon.model.lambda_t = 0.0;
        let json = serde_json::to_string(&canon).expect("architecture serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One training/evaluation example converted to the model's scalar type.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub features: FeatureSequence<T>,
    pub glosses: GlossSequence,
    pub words: Vec<usize>,
}

impl<T: Scalar> Example<T> {
    pub fn from_sample(sample: &SampleTriple) -> Result<Self> {
        Ok(Example {
            features: FeatureSequence::from_sample(sample),
            glosses: GlossSequence::new(sample.glosses.clone())?,
            words: sample.words.clone(),
        })
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    cptcn: Option<Cptcn>,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

/// Encoder output for one sequence.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[len, d_model]`.
    pub states: Var,
    /// `[len, gloss_classes]` log-probabilities.
    pub gloss_logp: Var,
}

/// Joint loss components of one batch.
#[derive(Clone, Debug)]
pub struct LossParts<T> {
    pub total: Var,
    pub ctc: T,
    pub ce: T,
    /// Batch positions whose gloss target cannot fit their frame count.
    pub infeasible: Vec<(usize, Infeasible)>,
}

#[derive(Clone, Debug)]
pub struct JointModel<T: Scalar> {
    pub arch: Architecture,
    pub store: ParamStore<T>,
    input: Linear,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    gloss_head: Linear,
    embedding: Option<ParamId>,
    decoder: Vec<DecoderLayer>,
    dec_norm: Option<LayerNorm>,
    word_head: Option<Linear>,
    rel: [Option<RelPos>; 3],
}

fn site_slot(site: Site) -> usize {
    match site {
        Site::Enc => 0,
        Site::Dec => 1,
        Site::Cross => 2,
    }
}

impl<T: Scalar> JointModel<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let terms = arch.attention.validate(arch.model.d_model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = &arch.model;
        let d = m.d_model;
        let heads = arch.attention.heads;
        let l = arch.attention.max_distance;

        let mut rel = [None; 3];
        let with_decoder = m.decoder_layers > 0;
        for site in [Site::Enc, Site::Dec, Site::Cross] {
            if arch.attention.drpe_at(site) && (site == Site::Enc || with_decoder) {
                let name = format!("rel_pos.{}", ["enc", "dec", "cross"][site_slot(site)]);
                let table = rel_pos_table(&mut store, &name, l, d, &mut rng);
                rel[site_slot(site)] = Some(RelPos { table, terms, max_distance: l });
            }
        }

        let input = Linear::new(&mut store, "input", arch.input_dim, d, true, &mut rng);
        let mut encoder = Vec::with_capacity(m.encoder_layers);
        for i in 0..m.encoder_layers {
            let name = format!("enc.{i}");
            let use_cptcn = arch.gathering.variant != GatherVariant::None
                && (arch.cptcn.layers == CptcnLayers::All || i == 0);
            encoder.push(EncoderLayer {
                norm_attn: LayerNorm::new(&mut store, &format!("{name}.norm_attn"), d),
                cptcn: use_cptcn.then(|| Cptcn::new(&mut store, &format!("{name}.cptcn"), d, &arch.gathering, &mut rng)),
                attn: MultiHeadAttention::new(&mut store, &format!("{name}.attn"), d, heads, rel[0].is_some(), &mut rng),
                norm_ff: LayerNorm::new(&mut store, &format!("{name}.norm_ff"), d),
                ff: FeedForward::new(&mut store, &format!("{name}.ff"), d, m.ff_width, &mut rng),
            });
        }
        let enc_norm = LayerNorm::new(&mut store, "enc.norm", d);
        let gloss_head = Linear::new(&mut store, "gloss_head", d, arch.gloss_classes, true, &mut rng);

        let (mut embedding, mut dec_norm, mut word_head) = (None, None, None);
        let mut decoder = Vec::with_capacity(m.decoder_layers);
        if with_decoder {
            embedding = Some(store.add("embedding", Tensor::randn(&[arch.word_vocab, d], 1.0, &mut rng)));
            for i in 0..m.decoder_layers {
                let name = format!("dec.{i}");
                decoder.push(DecoderLayer {
                    norm_self: LayerNorm::new(&mut store, &format!("{name}.norm_self"), d),
                    self_attn: MultiHeadAttention::new(&mut store, &format!("{name}.self_attn"), d, heads, rel[1].is_some(), &mut rng),
                    norm_cross: LayerNorm::new(&mut store, &format!("{name}.norm_cross"), d),
                    cross_attn: MultiHeadAttention::new(&mut store, &format!("{name}.cross_attn"), d, heads, rel[2].is_some(), &mut rng),
                    norm_ff: LayerNorm::new(&mut store, &format!("{name}.norm_ff"), d),
                    ff: FeedForward::new(&mut store, &format!("{name}.ff"), d, m.ff_width, &mut rng),
                });
            }
            dec_norm = Some(LayerNorm::new(&mut store, "dec.norm", d));
            word_head = Some(Linear::new(&mut store, "word_head", d, arch.word_vocab, true, &mut rng));
        }

        Ok(JointModel { arch, store, input, encoder, enc_norm, gloss_head, embedding, decoder, dec_norm, word_head, rel })
    }

    pub fn has_decoder(&self) -> bool {
        !self.decoder.is_empty()
    }

    fn add_absolute_position(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let (len, d) = (f.g.shape(x)[0], f.g.shape(x)[1]);
        let pe = f.g.constant(sinusoid_table(len, d));
        f.g.add(x, pe)
    }

    /// Runs the encoder over the first `seq.len` frames.
    pub fn encode(&self, f: &mut Forward<T>, seq: &FeatureSequence<T>) -> Result<Encoded> {
        let shape = seq.frames.shape();
        if shape.len() != 2 || shape[1] != self.arch.input_dim {
            return Err(shape_err("encode", format!("frames {shape:?} for input_dim {}", self.arch.input_dim)));
        }
        let len = seq.len;
        if len < self.arch.min_frames() {
            return Err(Error::SequenceTooShort { len, required: self.arch.min_frames() });
        }
        let raw = f.g.constant(seq.frames.clone());
        let frames = if len == shape[0] { raw } else { f.g.gather_rows(raw, &(0..len).collect::<Vec<_>>())? };
        let mut x = self.input.forward(f, frames)?;
        let rel = self.rel[site_slot(Site::Enc)];
        if rel.is_none() {
            x = self.add_absolute_position(f, x)?;
        }
        let mask = AttnMask::default();
        for layer in &self.encoder {
            let h = layer.norm_attn.forward(f, x)?;
            let (q, k, v) = cptcn_attention_inputs(f, h, layer.cptcn.as_ref(), &self.arch.gathering, &self.arch.cptcn)?;
            let a = layer.attn.forward(f, q, k, v, rel.as_ref(), &mask)?.out;
            let a = f.dropout(a)?;
            x = f.g.add(x, a)?;
            let h = layer.norm_ff.forward(f, x)?;
            let h = layer.ff.forward(f, h)?;
            let h = f.dropout(h)?;
            x = f.g.add(x, h)?;
        }
        let states = self.enc_norm.forward(f, x)?;
        let scores = self.gloss_head.forward(f, states)?;
        let gloss_logp = f.g.log_softmax(scores);
        Ok(Encoded { states, gloss_logp })
    }

    /// Word logits `[tokens.len(), word_vocab]`; row `i` sees `tokens[..=i]` only.
    pub fn decode(&self, f: &mut Forward<T>, states: Var, tokens: &[usize]) -> Result<Var> {
        let (Some(embedding), Some(dec_norm), Some(word_head)) = (self.embedding, self.dec_norm, self.word_head) else {
            return Err(Error::Invalid("model has no decoder".into()));
        };
        if tokens.is_empty() {
            return Err(Error::Invalid("decoder needs at least one input token".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.arch.word_vocab) {
            return Err(Error::Invalid(format!("word id {bad} outside vocabulary of {}", self.arch.word_vocab)));
        }
        let emb = f.p(embedding);
        let mut y = f.g.gather_rows(emb, tokens)?;
        let rel_dec = self.rel[site_slot(Site::Dec)];
        let rel_cross = self.rel[site_slot(Site::Cross)];
        if rel_dec.is_none() {
            y = self.add_absolute_position(f, y)?;
        }
        let causal = AttnMask::causal();
        let full = AttnMask::default();
        for layer in &self.decoder {
            let h = layer.norm_self.forward(f, y)?;
            let a = layer.self_attn.forward(f, h, h, h, rel_dec.as_ref(), &causal)?.out;
            let a = f.dropout(a)?;
            y = f.g.add(y, a)?;
            let h = layer.norm_cross.forward(f, y)?;
            let a = layer.cross_attn.forward(f, h, states, states, rel_cross.as_ref(), &full)?.out;
            let a = f.dropout(a)?;
            y = f.g.add(y, a)?;
            let h = layer.norm_ff.forward(f, y)?;
            let h = layer.ff.forward(f, h)?;
            let h = f.dropout(h)?;
            y = f.g.add(y, h)?;
        }
        let y = dec_norm.forward(f, y)?;
        word_head.forward(f, y)
    }

    /// `lambda_r * mean CTC + lambda_t * token-mean cross-entropy` over `batch`.
    ///
    /// Infeasible CTC targets are excluded from the CTC mean and reported.
    pub fn joint_loss(&self, f: &mut Forward<T>, batch: &[&Example<T>]) -> Result<LossParts<T>> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let (lr, lt) = (self.arch.model.lambda_r, self.arch.model.lambda_t);
        let mut ctc_terms = Vec::new();
        let mut infeasible = Vec::new();
        let mut word_logits = Vec::new();
        let mut word_targets = Vec::new();
        for (i, ex) in batch.iter().enumerate() {
            let enc = self.encode(f, &ex.features)?;
            if lr > 0.0 {
                let (loss, bad) = ctc_loss_var(&mut f.g, enc.gloss_logp, &ex.glosses)?;
                match bad {
                    Some(b) => infeasible.push((i, b)),
                    None => ctc_terms.push(loss),
                }
            }
            if lt > 0.0 {
                let mut input = Vec::with_capacity(ex.words.len() + 1);
                input.push(BOS);
                input.extend_from_slice(&ex.words);
                let mut target = ex.words.clone();
                target.push(EOS);
                word_logits.push(self.decode(f, enc.states, &input)?);
                word_targets.extend(target);
            }
        }
        let mut parts = Vec::new();
        let mut ctc = T::zero();
        if !ctc_terms.is_empty() {
            let mut s = ctc_terms[0];
            for &t in &ctc_terms[1..] {
                s = f.g.add(s, t)?;
            }
            let mean = f.g.scale(s, T::one() / T::from_usize(ctc_terms.len()).unwrap());
            ctc = f.g.value(mean).item();
            parts.push(f.g.scale(mean, T::from_f64_lossy(lr)));
        }
        let mut ce = T::zero();
        if !word_logits.is_empty() {
            let all = if word_logits.len() == 1 { word_logits[0] } else { f.g.concat_rows(&word_logits)? };
            let mean = f.g.cross_entropy(all, &word_targets, Some(PAD))?;
            ce = f.g.value(mean).item();
            parts.push(f.g.scale(mean, T::from_f64_lossy(lt)));
        }
        let total = match parts.as_slice() {
            [] => {
                let z = f.g.constant(Tensor::scalar(T::zero()));
                f.g.sum(z)
            }
            [one] => *one,
            [a, b] => f.g.add(*a, *b)?,
            _ => unreachable!(),
        };
        Ok(LossParts { total, ctc, ce, infeasible })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Term;

    pub(crate) fn tiny_arch() -> Architecture {
        Architecture {
            model: ModelConfig { d_model: 8, encoder_layers: 1, decoder_layers: 1, ff_width: 16, dropout: 0.0, lambda_r: 1.0, lambda_t: 1.0 },
            gathering: GatherConfig { variant: GatherVariant::ContentAware, l: 3, gamma: 1.5 },
            cptcn: CptcnConfig::default(),
            attention: AttentionConfig { heads: 2, terms: vec![Term::C2c, Term::C2p, Term::P2c, Term::P2p], sites_with_drpe: vec![Site::Enc, Site::Dec, Site::Cross], max_distance: 4 },
            input_dim: 5,
            gloss_classes: 4,
            word_vocab: 7,
        }
    }

    fn frames(n: usize, seed: u64) -> FeatureSequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence::new(Tensor::randn(&[n, 5], 1.0, &mut rng))
    }

    #[test]
    fn encoder_shapes() {
        let model = JointModel::<f64>::new(tiny_arch(), 1).unwrap();
        let mut f = Forward::eval(&model.store);
        let enc = model.encode(&mut f, &frames(9, 2)).unwrap();
        assert_eq!(f.g.shape(enc.states), &[9, 8]);
        assert_eq!(f.g.shape(enc.gloss_logp), &[9, 4]);
        let row: f64 = f.g.value(enc.gloss_logp).row(0).iter().map(|v| v.exp()).sum();
        assert!((row - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_input_rejected() {
        let model = JointModel::<f64>::new(tiny_arch(), 1).unwrap();
        let mut f = Forward::eval(&model.store);
        let err = model.encode(&mut f, &frames(4, 2)).unwrap_err();
        assert!(matches!(err, Error::SequenceTooShort { len: 4, required: 6 }), "{err}");
    }

    #[test]
    fn padding_rows_are_ignored() {
        let model = JointModel::<f64>::new(tiny_arch(), 1).unwrap();
        let seq = frames(9, 2);
        let mut padded = seq.frames.data().to_vec();
        padded.extend(std::iter::repeat_n(7.0, 3 * 5));
        let padded = FeatureSequence::padded(Tensor::new(&[12, 5], padded).unwrap(), 9).unwrap();
        let mut f = Forward::eval(&model.store);
        let a = model.encode(&mut f, &seq).unwrap().gloss_logp;
        let b = model.encode(&mut f, &padded).unwrap().gloss_logp;
        assert_eq!(f.g.value(a), f.g.value(b));
    }

    #[test]
    fn decoder_is_causal() {
        let model = JointModel::<f64>::new(tiny_arch(), 3).unwrap();
        let mut f = Forward::eval(&model.store);
        let enc = model.encode(&mut f, &frames(8, 4)).unwrap();
        let a = model.decode(&mut f, enc.states, &[BOS, 3, 4, 5]).unwrap();
        let b = model.decode(&mut f, enc.states, &[BOS, 3, 6, 6]).unwrap();
        let (va, vb) = (f.g.value(a), f.g.value(b));
        for r in 0..2 {
            assert_eq!(va.row(r), vb.row(r));
        }
        assert_ne!(va.row(2), vb.row(2));
    }

    #[test]
    fn digest_ignores_loss_weights_but_not_shapes() {
        let a = tiny_arch();
        let mut b = a.clone();
        b.model.lambda_t = 0.5;
        assert_eq!(a.digest(), b.digest());
        b.model.d_model = 16;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn recognition_only_builds_no_decoder() {
        let mut arch = tiny_arch();
        arch.model.lambda_t = 0.0;
        arch.model.decoder_layers = 0;
        let model = JointModel::<f64>::new(arch, 0).unwrap();
        assert!(!model.has_decoder());
        assert!(model.store.find("embedding").is_none());
        let ex = Example { features: frames(8, 1), glosses: GlossSequence::new(vec![1, 2]).unwrap(), words: vec![3] };
        let mut f = Forward::exact(&model.store);
        let parts = model.joint_loss(&mut f, &[&ex]).unwrap();
        assert_eq!(parts.ce, 0.0);
        assert!(parts.ctc > 0.0);
    }

    #[test]
    fn infeasible_target_is_reported_not_summed() {
        let model = JointModel::<f64>::new(tiny_arch(), 0).unwrap();
        let ok = Example { features: frames(8, 1), glosses: GlossSequence::new(vec![1, 2]).unwrap(), words: vec![3] };
        let bad = Example { features: frames(6, 1), glosses: GlossSequence::new(vec![1, 1, 1, 1]).unwrap(), words: vec![3] };
        let mut f = Forward::exact(&model.store);
        let parts = model.joint_loss(&mut f, &[&ok, &bad]).unwrap();
        assert_eq!(parts.infeasible.len(), 1);
        assert_eq!(parts.infeasible[0].0, 1);
        assert!(f.g.value(parts.total).item().is_finite());
    }
}
