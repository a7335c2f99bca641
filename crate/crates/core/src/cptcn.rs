//! Position-aware temporal convolution over gathered clips.
//!
//! Clips from [`crate::gathering`] receive a relative-position embedding per
//! anchor offset, pass through two `kernel 3 / stride 1 / no padding`
//! convolution blocks (conv, layer norm, rectifier), are max-pooled over the
//! remaining time steps and added back to the frame features. The result
//! feeds attention keys and values while queries keep the raw frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::gathering::{clip_index, ClipIndex, GatherConfig, GatherVariant};
use crate::graph::Var;
use crate::params::{Forward, LayerNorm, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{sinusoid, Tensor};

pub const KERNEL: usize = 3;

/// Position encoding added to clip elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClipPositionMode {
    #[default]
    Rpe,
    Ape,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QkvMode {
    /// Queries keep the frame features; keys and values are aggregated.
    #[default]
    QRaw,
    AllAggregated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CptcnLayers {
    #[default]
    All,
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CptcnConfig {
    pub pe: ClipPositionMode,
    pub residual: bool,
    pub layernorm: bool,
    pub qkv: QkvMode,
    pub layers: CptcnLayers,
}

impl Default for CptcnConfig {
    fn default() -> Self {
        CptcnConfig { pe: ClipPositionMode::Rpe, residual: true, layernorm: true, qkv: QkvMode::QRaw, layers: CptcnLayers::All }
    }
}

/// Learnable offset embeddings, `(2 * max_offset + 1) x d`, row `offset + max_offset`.
#[derive(Clone, Copy, Debug)]
pub struct ConvRelPosTable {
    pub table: ParamId,
    pub max_offset: usize,
}

impl ConvRelPosTable {
    pub fn row_of(&self, offset: isize) -> Result<usize> {
        let m = self.max_offset as isize;
        if offset < -m || offset > m {
            return Err(Error::Invalid(format!("clip offset {offset} outside table range [-{m}, {m}]")));
        }
        Ok((offset + m) as usize)
    }
}

/// Two convolution blocks followed by a max over time.
#[derive(Clone, Copy, Debug)]
pub struct ConvStack {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub norm1: LayerNorm,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub norm2: LayerNorm,
}

impl ConvStack {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut R) -> Self {
        let bound = (1.0 / (KERNEL * d) as f64).sqrt();
        let conv1_w = store.add(format!("{name}.conv1.weight"), Tensor::uniform(&[KERNEL, d, d], bound, rng));
        let conv1_b = store.add(format!("{name}.conv1.bias"), Tensor::zeros(&[d]));
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), d);
        let conv2_w = store.add(format!("{name}.conv2.weight"), Tensor::uniform(&[KERNEL, d, d], bound, rng));
        let conv2_b = store.add(format!("{name}.conv2.bias"), Tensor::zeros(&[d]));
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), d);
        ConvStack { conv1_w, conv1_b, norm1, conv2_w, conv2_b, norm2 }
    }

    /// Time lengths through the stack for an input clip of `clip_len`.
    pub fn lengths(clip_len: usize) -> [usize; 4] {
        let a = clip_len.saturating_sub(KERNEL - 1);
        let b = a.saturating_sub(KERNEL - 1);
        [clip_len, a, b, 1]
    }

    pub fn min_clip_len() -> usize {
        2 * (KERNEL - 1) + 1
    }
}

/// Parameters of one CPTcn block.
#[derive(Clone, Copy, Debug)]
pub struct Cptcn {
    pub rel: ConvRelPosTable,
    pub stack: ConvStack,
}

impl Cptcn {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, d: usize, gather: &GatherConfig, rng: &mut R) -> Self {
        let max_offset = gather.max_offset();
        let table = store.add(format!("{name}.rel_pos"), Tensor::randn(&[2 * max_offset + 1, d], 0.1, rng));
        Cptcn { rel: ConvRelPosTable { table, max_offset }, stack: ConvStack::new(store, name, d, rng) }
    }
}

/// Gathers clip rows of `features` (`[M, d]`) into `[M, clip_len, d]`.
pub fn gather_clip_var<T: Scalar>(f: &mut Forward<T>, features: Var, index: &ClipIndex) -> Result<Var> {
    let d = f.g.shape(features)[1];
    let rows = f.g.gather_rows(features, &index.sources)?;
    f.g.reshape(rows, &[index.anchors(), index.clip_len, d])
}

/// Adds the position encoding of each clip element's offset (rpe) or
/// absolute source frame (ape).
pub fn add_relative_position<T: Scalar>(
    f: &mut Forward<T>,
    clips: Var,
    index: &ClipIndex,
    table: &ConvRelPosTable,
    mode: ClipPositionMode,
) -> Result<Var> {
    let shape = f.g.shape(clips).to_vec();
    if shape.len() != 3 || shape[0] * shape[1] != index.sources.len() {
        return Err(shape_err("add_relative_position", format!("clips {shape:?} for {} sources", index.sources.len())));
    }
    let d = shape[2];
    match mode {
        ClipPositionMode::None => Ok(clips),
        ClipPositionMode::Rpe => {
            let rows = index.offsets().into_iter().map(|o| table.row_of(o)).collect::<Result<Vec<_>>>()?;
            let t = f.p(table.table);
            if f.g.shape(t)[1] != d {
                return Err(shape_err("add_relative_position", format!("table {:?} for width {d}", f.g.shape(t))));
            }
            let phi = f.g.gather_rows(t, &rows)?;
            let phi = f.g.reshape(phi, &shape)?;
            f.g.add(clips, phi)
        }
        ClipPositionMode::Ape => {
            let data = index.sources.iter().flat_map(|&p| sinusoid::<T>(p, d)).collect();
            let pe = f.g.constant(Tensor::new(&shape, data)?);
            f.g.add(clips, pe)
        }
    }
}

/// Conv stack, time max and optional residual: `[M, L, d]` clips to `[M, d]`.
pub fn aggregate_clips<T: Scalar>(
    f: &mut Forward<T>,
    clips_hat: Var,
    stack: &ConvStack,
    features: Var,
    config: &CptcnConfig,
) -> Result<Var> {
    let shape = f.g.shape(clips_hat).to_vec();
    if shape.len() != 3 {
        return Err(shape_err("aggregate_clips", format!("expected [M, L, d], got {shape:?}")));
    }
    check_clip_len(shape[1])?;
    let (w, b) = (f.p(stack.conv1_w), f.p(stack.conv1_b));
    let h = f.g.conv1d(clips_hat, w, b)?;
    finish_stack(f, h, stack, features, config)
}

fn check_clip_len(len: usize) -> Result<()> {
    if len < ConvStack::min_clip_len() {
        return Err(Error::Invalid(format!(
            "clip length {len} too short for two kernel-{KERNEL} convolutions (need {})",
            ConvStack::min_clip_len()
        )));
    }
    Ok(())
}

/// Everything after the first convolution: norm, rectifier, second block, time max, residual.
fn finish_stack<T: Scalar>(f: &mut Forward<T>, conv1: Var, stack: &ConvStack, features: Var, config: &CptcnConfig) -> Result<Var> {
    let mut h = conv1;
    if config.layernorm {
        h = stack.norm1.forward(f, h)?;
    }
    h = f.g.relu(h);
    let (w, b) = (f.p(stack.conv2_w), f.p(stack.conv2_b));
    h = f.g.conv1d(h, w, b)?;
    if config.layernorm {
        h = stack.norm2.forward(f, h)?;
    }
    h = f.g.relu(h);
    let pooled = f.g.max_time(h)?;
    if config.residual {
        if f.g.shape(features) != f.g.shape(pooled) {
            return Err(shape_err("aggregate_clips", format!("residual {:?} vs {:?}", f.g.shape(features), f.g.shape(pooled))));
        }
        f.g.add(pooled, features)
    } else {
        Ok(pooled)
    }
}

/// First convolution of every clip, computed once over the sequence and
/// once over the offset table, then gathered per clip. Requires contiguous
/// clips; the result equals convolving the position-encoded clips directly.
fn shared_first_conv<T: Scalar>(f: &mut Forward<T>, features: Var, index: &ClipIndex, block: &Cptcn, mode: ClipPositionMode) -> Result<Var> {
    let (m, d) = (f.g.shape(features)[0], f.g.shape(features)[1]);
    let out_len = index.clip_len - (KERNEL - 1);
    let mut x = features;
    if mode == ClipPositionMode::Ape {
        let pe = f.g.constant(crate::tensor::sinusoid_table(m, d));
        x = f.g.add(x, pe)?;
    }
    let x = f.g.reshape(x, &[1, m, d])?;
    let (w, b) = (f.p(block.stack.conv1_w), f.p(block.stack.conv1_b));
    let conv_x = f.g.conv1d(x, w, b)?;
    let conv_x = f.g.reshape(conv_x, &[m + 1 - KERNEL, d])?;
    let starts: Vec<usize> = (0..index.anchors()).map(|t| index.clip(t)[0]).collect();
    let rows: Vec<usize> = starts.iter().flat_map(|&s| s..s + out_len).collect();
    let mut h = f.g.gather_rows(conv_x, &rows)?;
    if mode == ClipPositionMode::Rpe {
        let table = f.p(block.rel.table);
        let n = f.g.shape(table)[0];
        if f.g.shape(table)[1] != d {
            return Err(shape_err("add_relative_position", format!("table {:?} for width {d}", f.g.shape(table))));
        }
        let table = f.g.reshape(table, &[1, n, d])?;
        let zero = f.g.constant(Tensor::zeros(&[d]));
        let conv_p = f.g.conv1d(table, w, zero)?;
        let conv_p = f.g.reshape(conv_p, &[n + 1 - KERNEL, d])?;
        let mut prow = Vec::with_capacity(rows.len());
        for (t, &s) in starts.iter().enumerate() {
            let first = s as isize - t as isize;
            block.rel.row_of(first)?;
            block.rel.row_of(first + index.clip_len as isize - 1)?;
            prow.extend((0..out_len).map(|p| (first + p as isize + block.rel.max_offset as isize) as usize));
        }
        let phi = f.g.gather_rows(conv_p, &prow)?;
        h = f.g.add(h, phi)?;
    }
    f.g.reshape(h, &[index.anchors(), out_len, d])
}

fn is_contiguous(index: &ClipIndex) -> bool {
    index.sources.chunks(index.clip_len).all(|c| c.windows(2).all(|w| w[1] == w[0] + 1))
}

/// Full pipeline for one sequence: gather, position-encode, aggregate.
pub fn aggregate_features<T: Scalar>(
    f: &mut Forward<T>,
    features: Var,
    block: &Cptcn,
    gather: &GatherConfig,
    config: &CptcnConfig,
) -> Result<Var> {
    if gather.variant == GatherVariant::None {
        return Ok(features);
    }
    let index = clip_index(f.g.value(features), gather)?;
    if is_contiguous(&index) {
        check_clip_len(index.clip_len)?;
        let h = shared_first_conv(f, features, &index, block, config.pe)?;
        return finish_stack(f, h, &block.stack, features, config);
    }
    let clips = gather_clip_var(f, features, &index)?;
    let clips = add_relative_position(f, clips, &index, &block.rel, config.pe)?;
    aggregate_clips(f, clips, &block.stack, features, config)
}

/// Attention inputs `(Q, K, V)` for frame features `[M, d]`.
pub fn cptcn_attention_inputs<T: Scalar>(
    f: &mut Forward<T>,
    features: Var,
    block: Option<&Cptcn>,
    gather: &GatherConfig,
    config: &CptcnConfig,
) -> Result<(Var, Var, Var)> {
    let Some(block) = block else { return Ok((features, features, features)) };
    let agg = aggregate_features(f, features, block, gather, config)?;
    match config.qkv {
        QkvMode::QRaw => Ok((features, agg, agg)),
        QkvMode::AllAggregated => Ok((agg, agg, agg)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, gather: &GatherConfig) -> (ParamStore<f64>, Cptcn) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = Cptcn::new(&mut store, "cptcn", d, gather, &mut rng);
        (store, block)
    }

    #[test]
    fn shared_first_conv_matches_per_clip_path() {
        for variant in [GatherVariant::ContentAware, GatherVariant::Centered] {
            for pe in [ClipPositionMode::Rpe, ClipPositionMode::Ape, ClipPositionMode::None] {
                let gather = GatherConfig { variant, l: 4, gamma: 1.5 };
                let (store, block) = setup(5, &gather);
                let config = CptcnConfig { pe, ..CptcnConfig::default() };
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let x = Tensor::<f64>::randn(&[14, 5], 1.0, &mut rng);
                let mut f = Forward::exact(&store);
                let xv = f.g.constant(x.clone());
                let fast = aggregate_features(&mut f, xv, &block, &gather, &config).unwrap();
                let index = clip_index(&x, &gather).unwrap();
                let clips = gather_clip_var(&mut f, xv, &index).unwrap();
                let clips = add_relative_position(&mut f, clips, &index, &block.rel, pe).unwrap();
                let slow = aggregate_clips(&mut f, clips, &block.stack, xv, &config).unwrap();
                for (a, b) in f.g.value(fast).data().iter().zip(f.g.value(slow).data()) {
                    assert!((a - b).abs() < 1e-12, "{variant:?} {pe:?}: {a} vs {b}");
                }
                let neg = f.g.scale(slow, -1.0);
                let diff = f.g.add(fast, neg).unwrap();
                let diff = f.g.sum(diff);
                let gd = f.param_grads(diff).unwrap();
                for g in gd {
                    assert!(g.data().iter().all(|v| v.abs() < 1e-10), "{variant:?} {pe:?}");
                }
            }
        }
    }

    #[test]
    fn stack_lengths() {
        assert_eq!(ConvStack::lengths(17), [17, 15, 13, 1]);
    }

    #[test]
    fn zero_table_leaves_clips_unchanged() {
        let gather = GatherConfig { variant: GatherVariant::Centered, l: 2, gamma: 1.0 };
        let (mut store, block) = setup(3, &gather);
        let t = store.get(block.rel.table).shape().to_vec();
        *store.get_mut(block.rel.table) = Tensor::zeros(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[6, 3], 1.0, &mut rng);
        let mut f = Forward::eval(&store);
        let xv = f.g.constant(x.clone());
        let index = clip_index(&x, &gather).unwrap();
        let clips = gather_clip_var(&mut f, xv, &index).unwrap();
        let out = add_relative_position(&mut f, clips, &index, &block.rel, ClipPositionMode::Rpe).unwrap();
        assert_eq!(f.g.value(out), f.g.value(clips));
    }

    #[test]
    fn offsets_are_source_minus_anchor() {
        // Three anchors sharing the clip 0..=3; anchor 2 sees offsets -2..=1.
        let index = ClipIndex { clip_len: 4, sources: [0, 1, 2, 3].repeat(3) };
        let offsets = index.offsets();
        assert_eq!(&offsets[0..4], &[0, 1, 2, 3]);
        assert_eq!(&offsets[8..12], &[-2, -1, 0, 1]);
    }

    #[test]
    fn out_of_range_offset_rejected() {
        let gather = GatherConfig { variant: GatherVariant::Centered, l: 2, gamma: 1.0 };
        let (store, block) = setup(2, &gather);
        let mut f = Forward::eval(&store);
        let x = f.g.constant(Tensor::zeros(&[8, 2]));
        let index = ClipIndex { clip_len: 2, sources: vec![7, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7] };
        let clips = gather_clip_var(&mut f, x, &index).unwrap();
        assert!(add_relative_position(&mut f, clips, &index, &block.rel, ClipPositionMode::Rpe).is_err());
    }

    #[test]
    fn zero_clips_with_residual_return_features() {
        let gather = GatherConfig { variant: GatherVariant::Centered, l: 4, gamma: 1.0 };
        let (store, block) = setup(4, &gather);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let feats = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let mut f = Forward::eval(&store);
        let fv = f.g.constant(feats.clone());
        let clips = f.g.constant(Tensor::zeros(&[6, 5, 4]));
        let out = aggregate_clips(&mut f, clips, &block.stack, fv, &CptcnConfig::default()).unwrap();
        assert_eq!(f.g.value(out), &feats);
    }

    #[test]
    fn short_clip_rejected() {
        let gather = GatherConfig { variant: GatherVariant::Centered, l: 2, gamma: 1.0 };
        let (store, block) = setup(2, &gather);
        let mut f = Forward::eval(&store);
        let fv = f.g.constant(Tensor::zeros(&[3, 2]));
        let clips = f.g.constant(Tensor::zeros(&[3, 4, 2]));
        assert!(aggregate_clips(&mut f, clips, &block.stack, fv, &CptcnConfig::default()).is_err());
    }

    #[test]
    fn none_variant_passes_features_through() {
        let gather = GatherConfig { variant: GatherVariant::None, l: 2, gamma: 1.0 };
        let (store, block) = setup(2, &gather);
        let mut f = Forward::eval(&store);
        let fv = f.g.constant(Tensor::zeros(&[3, 2]));
        let (q, k, v) = cptcn_attention_inputs(&mut f, fv, Some(&block), &gather, &CptcnConfig::default()).unwrap();
        assert_eq!((q, k, v), (fv, fv, fv));
    }
}
