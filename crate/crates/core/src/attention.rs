//! Scaled dot-product attention and disentangled relative-position attention.
//!
//! The disentangled score between query `i` and key `j` sums up to four dot
//! products over separate content and position projections:
//!
//! ```text
//! c2c = Qf[i] . Kf[j]
//! c2p = Qf[i] . Kp[bucket(j, i)]
//! p2c = Qp[bucket(i, j)] . Kf[j]
//! p2p = Qp[bucket(i, j)] . Kp[bucket(j, i)]
//! ```
//!
//! where `Qp = P Wqp`, `Kp = P Wkp` project a shared `2L x d` position table
//! and `bucket(i, j) = clamp(i - j, -L, L - 1) + L`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{xavier, Forward, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    C2c,
    C2p,
    P2c,
    P2p,
}

/// Enabled score terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub c2c: bool,
    pub c2p: bool,
    pub p2c: bool,
    pub p2p: bool,
}

impl Terms {
    pub const ALL: Terms = Terms { c2c: true, c2p: true, p2c: true, p2p: true };
    pub const CONTENT: Terms = Terms { c2c: true, c2p: false, p2c: false, p2p: false };

    pub fn from_list(list: &[Term]) -> Result<Self> {
        let t = Terms {
            c2c: list.contains(&Term::C2c),
            c2p: list.contains(&Term::C2p),
            p2c: list.contains(&Term::P2c),
            p2p: list.contains(&Term::P2p),
        };
        if !t.c2c {
            return Err(Error::Config("attention.terms must include c2c".into()));
        }
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Enc,
    Dec,
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    pub terms: Vec<Term>,
    pub sites_with_drpe: Vec<Site>,
    /// Maximum relative distance; the position table has `2L` rows.
    #[serde(rename = "L")]
    pub max_distance: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: 4,
            terms: vec![Term::C2c, Term::C2p, Term::P2c, Term::P2p],
            sites_with_drpe: vec![Site::Enc, Site::Dec, Site::Cross],
            max_distance: 32,
        }
    }
}

impl AttentionConfig {
    pub fn drpe_at(&self, site: Site) -> bool {
        self.sites_with_drpe.contains(&site)
    }

    pub fn validate(&self, d_model: usize) -> Result<Terms> {
        if self.heads == 0 || !d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {d_model} not divisible by attention.heads {}", self.heads)));
        }
        if self.max_distance == 0 {
            return Err(Error::Config("attention.L must be at least 1".into()));
        }
        Terms::from_list(&self.terms)
    }
}

/// Index of the relative distance `i - j` in a `2L`-row table.
pub fn rel_bucket(i: usize, j: usize, max_distance: usize) -> usize {
    let l = max_distance as isize;
    ((i as isize - j as isize).clamp(-l, l - 1) + l) as usize
}

/// Masking rules for one attention call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttnMask {
    pub causal: bool,
    /// Keys at positions `>= key_len` are padding.
    pub key_len: Option<usize>,
}

impl AttnMask {
    pub fn causal() -> Self {
        AttnMask { causal: true, key_len: None }
    }

    pub fn keys(len: usize) -> Self {
        AttnMask { causal: false, key_len: Some(len) }
    }

    /// Row-major `[mq, mk]` flags, true where masked; `None` when nothing is masked.
    pub fn flags(&self, mq: usize, mk: usize) -> Option<Vec<bool>> {
        let key_len = self.key_len.unwrap_or(mk);
        if !self.causal && key_len >= mk {
            return None;
        }
        Some((0..mq * mk).map(|idx| {
            let (i, j) = (idx / mk, idx % mk);
            (self.causal && j > i) || j >= key_len
        }).collect())
    }
}

/// `softmax(scale * scores + mask) v`; returns `(output, weights)`.
pub fn attend_scores<T: Scalar>(g: &mut Graph<T>, scores: Var, v: Var, mask: &AttnMask, scale: T) -> Result<(Var, Var)> {
    let (mq, mk) = (g.shape(scores)[0], g.shape(scores)[1]);
    if g.shape(v)[0] != mk {
        return Err(shape_err("attention", format!("scores {:?} with values {:?}", g.shape(scores), g.shape(v))));
    }
    let mut s = g.scale(scores, scale);
    if let Some(flags) = mask.flags(mq, mk) {
        s = g.masked_fill(s, &flags)?;
    }
    let w = g.softmax(s);
    let out = g.matmul(w, v)?;
    Ok((out, w))
}

/// `softmax(Q Kᵀ * scale + mask) V`.
pub fn standard_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, mask: &AttnMask, scale: T) -> Result<(Var, Var)> {
    if g.shape(q).len() != 2 || g.shape(k).len() != 2 || g.shape(q)[1] != g.shape(k)[1] || g.shape(k)[0] != g.shape(v)[0] {
        return Err(shape_err(
            "standard_attention",
            format!("Q {:?}, K {:?}, V {:?}", g.shape(q), g.shape(k), g.shape(v)),
        ));
    }
    let scores = g.matmul_t(q, k, false, true)?;
    attend_scores(g, scores, v, mask, scale)
}

/// Unscaled disentangled scores `[mq, mk]` for one head.
pub fn drpe_scores<T: Scalar>(
    g: &mut Graph<T>,
    qf: Var,
    kf: Var,
    qp: Var,
    kp: Var,
    terms: Terms,
    max_distance: usize,
) -> Result<Var> {
    if !terms.c2c {
        return Err(Error::Invalid("content-to-content term cannot be disabled".into()));
    }
    let (mq, mk) = (g.shape(qf)[0], g.shape(kf)[0]);
    let rows = 2 * max_distance;
    if g.shape(qp)[0] != rows || g.shape(kp)[0] != rows {
        return Err(shape_err("drpe_scores", format!("position projections {:?}/{:?} for L={max_distance}", g.shape(qp), g.shape(kp))));
    }
    let mut s = g.matmul_t(qf, kf, false, true)?;
    if terms.c2p {
        let a = g.matmul_t(qf, kp, false, true)?; // [mq, 2L]
        let idx = (0..mq * mk).map(|x| (x / mk) * rows + rel_bucket(x % mk, x / mk, max_distance)).collect();
        let c2p = g.gather_flat(a, idx, &[mq, mk])?;
        s = g.add(s, c2p)?;
    }
    if terms.p2c {
        let b = g.matmul_t(qp, kf, false, true)?; // [2L, mk]
        let idx = (0..mq * mk).map(|x| rel_bucket(x / mk, x % mk, max_distance) * mk + x % mk).collect();
        let p2c = g.gather_flat(b, idx, &[mq, mk])?;
        s = g.add(s, p2c)?;
    }
    if terms.p2p {
        let c = g.matmul_t(qp, kp, false, true)?; // [2L, 2L]
        let idx = (0..mq * mk)
            .map(|x| {
                let (i, j) = (x / mk, x % mk);
                rel_bucket(i, j, max_distance) * rows + rel_bucket(j, i, max_distance)
            })
            .collect();
        let p2p = g.gather_flat(c, idx, &[mq, mk])?;
        s = g.add(s, p2p)?;
    }
    Ok(s)
}

/// Relative-position settings passed to a DRPE attention call.
#[derive(Clone, Copy, Debug)]
pub struct RelPos {
    pub table: ParamId,
    pub terms: Terms,
    pub max_distance: usize,
}

/// Creates a shared `2L x d` position table.
pub fn rel_pos_table<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, max_distance: usize, d: usize, rng: &mut R) -> ParamId {
    store.add(name, crate::tensor::Tensor::randn(&[2 * max_distance, d], 0.1, rng))
}

#[derive(Clone, Copy, Debug)]
pub struct PositionProjections {
    pub wq: ParamId,
    pub wk: ParamId,
}

/// Multi-head attention with optional disentangled position terms.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
    pub pos: Option<PositionProjections>,
}

pub struct AttnOutput {
    pub out: Var,
    /// Attention weights `[mq, mk]` per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, d_model: usize, heads: usize, drpe: bool, rng: &mut R) -> Self {
        let wq = store.add(format!("{name}.wq"), xavier(d_model, d_model, rng));
        let wk = store.add(format!("{name}.wk"), xavier(d_model, d_model, rng));
        let wv = store.add(format!("{name}.wv"), xavier(d_model, d_model, rng));
        let out = Linear::new(store, &format!("{name}.out"), d_model, d_model, true, rng);
        let pos = drpe.then(|| PositionProjections {
            wq: store.add(format!("{name}.wq_pos"), xavier(d_model, d_model, rng)),
            wk: store.add(format!("{name}.wk_pos"), xavier(d_model, d_model, rng)),
        });
        MultiHeadAttention { heads, d_model, wq, wk, wv, out, pos }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Score scale: `1/sqrt(4 d_h)` with position terms, `1/sqrt(d_h)` otherwise.
    pub fn scale<T: Scalar>(&self, drpe: bool) -> T {
        let dh = self.head_dim() as f64;
        T::from_f64_lossy(1.0 / if drpe { (4.0 * dh).sqrt() } else { dh.sqrt() })
    }

    pub fn forward<T: Scalar>(
        &self,
        f: &mut Forward<T>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        rel: Option<&RelPos>,
        mask: &AttnMask,
    ) -> Result<AttnOutput> {
        for v in [q_in, k_in, v_in] {
            if f.g.shape(v).len() != 2 || f.g.shape(v)[1] != self.d_model {
                return Err(shape_err("multi_head_attention", format!("input {:?} for d_model {}", f.g.shape(v), self.d_model)));
            }
        }
        if f.g.shape(k_in)[0] != f.g.shape(v_in)[0] {
            return Err(shape_err("multi_head_attention", format!("keys {:?} vs values {:?}", f.g.shape(k_in), f.g.shape(v_in))));
        }
        let q = { let w = f.p(self.wq); f.g.matmul(q_in, w)? };
        let k = { let w = f.p(self.wk); f.g.matmul(k_in, w)? };
        let v = { let w = f.p(self.wv); f.g.matmul(v_in, w)? };
        let positions = match (rel, self.pos) {
            (Some(rel), Some(pos)) => {
                let table = f.p(rel.table);
                let (wq, wk) = (f.p(pos.wq), f.p(pos.wk));
                let qp = f.g.matmul(table, wq)?;
                let kp = f.g.matmul(table, wk)?;
                Some((qp, kp, rel))
            }
            (Some(_), None) => return Err(Error::Invalid("attention layer built without position projections".into())),
            _ => None,
        };
        let dh = self.head_dim();
        let scale: T = self.scale(positions.is_some());
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * dh;
            let qh = f.g.slice_cols(q, start, dh)?;
            let kh = f.g.slice_cols(k, start, dh)?;
            let vh = f.g.slice_cols(v, start, dh)?;
            let scores = match positions {
                Some((qp, kp, rel)) => {
                    let qph = f.g.slice_cols(qp, start, dh)?;
                    let kph = f.g.slice_cols(kp, start, dh)?;
                    drpe_scores(&mut f.g, qh, kh, qph, kph, rel.terms, rel.max_distance)?
                }
                None => f.g.matmul_t(qh, kh, false, true)?,
            };
            let (o, w) = attend_scores(&mut f.g, scores, vh, mask, scale)?;
            heads.push(o);
            weights.push(w);
        }
        let cat = if heads.len() == 1 { heads[0] } else { f.g.concat_cols(&heads)? };
        let cat = f.dropout(cat)?;
        let out = self.out.forward(f, cat)?;
        Ok(AttnOutput { out, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn bucket_examples() {
        assert_eq!(rel_bucket(5, 5, 32), 32);
        assert_eq!(rel_bucket(40, 0, 32), 63);
        assert_eq!(rel_bucket(0, 40, 32), 0);
    }

    #[test]
    fn buckets_reflect_about_center() {
        for i in 0..10 {
            for j in 0..10 {
                if i != j {
                    assert_ne!(rel_bucket(i, j, 32), rel_bucket(j, i, 32));
                    assert_eq!(rel_bucket(i, j, 32) + rel_bucket(j, i, 32), 64);
                }
            }
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(&[2, 2], &[1.0, -3.0, 0.5, 2.0]).unwrap());
        let k = g.constant(Tensor::from_f64(&[1, 2], &[0.2, 0.7]).unwrap());
        let v = g.constant(Tensor::from_f64(&[1, 3], &[4.0, 5.0, 6.0]).unwrap());
        let (out, _) = standard_attention(&mut g, q, k, v, &AttnMask::default(), 0.5).unwrap();
        assert_eq!(g.value(out).data(), &[4.0, 5.0, 6.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn equal_scores_average_values() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let k = g.constant(Tensor::from_f64(&[3, 2], &[0.0, 1.0, 0.0, -2.0, 0.0, 5.0]).unwrap());
        let v = g.constant(Tensor::from_f64(&[3, 1], &[1.0, 2.0, 6.0]).unwrap());
        let (out, _) = standard_attention(&mut g, q, k, v, &AttnMask::default(), 1.0).unwrap();
        assert!((g.value(out).item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.3, 0.3]).unwrap());
        let (_, w) = standard_attention(&mut g, x, x, x, &AttnMask::causal(), 1.0).unwrap();
        let w = g.value(w);
        for i in 0..3 {
            for j in i + 1..3 {
                assert_eq!(w.at2(i, j), 0.0);
            }
        }
    }

    #[test]
    fn c2c_required() {
        assert!(Terms::from_list(&[Term::C2p]).is_err());
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        let p = g.constant(Tensor::zeros(&[4, 2]));
        let t = Terms { c2c: false, ..Terms::ALL };
        assert!(drpe_scores(&mut g, x, x, p, p, t, 2).is_err());
    }

    #[test]
    fn mask_flags() {
        assert_eq!(AttnMask::default().flags(2, 2), None);
        assert_eq!(AttnMask::keys(1).flags(1, 2), Some(vec![false, true]));
        assert_eq!(AttnMask::causal().flags(2, 2), Some(vec![false, true, false, false]));
    }
}
