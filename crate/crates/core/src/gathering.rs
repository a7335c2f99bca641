//! Content-aware neighbourhood gathering.
//!
//! Each anchor frame `t` looks at the similarity-weighted mass of its
//! neighbours within `[t - l, t + l]`. The share of mass before and after the
//! anchor splits a window of `l_r = round(gamma * l)` neighbours, giving a
//! contiguous clip of `l_r + 1` frames that contains the anchor.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::softmax_in_place;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GatherVariant {
    #[default]
    ContentAware,
    Centered,
    Sparse,
    None,
}

impl GatherVariant {
    pub fn name(self) -> &'static str {
        match self {
            GatherVariant::ContentAware => "content_aware",
            GatherVariant::Centered => "centered",
            GatherVariant::Sparse => "sparse",
            GatherVariant::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatherConfig {
    pub variant: GatherVariant,
    /// Half-width of the neighbourhood considered around each anchor.
    pub l: usize,
    /// Region size factor; `l_r = round(gamma * l)`.
    pub gamma: f64,
}

impl Default for GatherConfig {
    fn default() -> Self {
        GatherConfig { variant: GatherVariant::ContentAware, l: 16, gamma: 1.0 }
    }
}

impl GatherConfig {
    pub fn region_len(&self) -> usize {
        region_len(self.l, self.gamma)
    }

    /// Frames per clip, anchor included.
    pub fn clip_len(&self) -> usize {
        match self.variant {
            GatherVariant::None => 1,
            _ => self.region_len() + 1,
        }
    }

    /// Shortest sequence this configuration accepts.
    pub fn min_sequence_len(&self) -> usize {
        match self.variant {
            GatherVariant::None => 1,
            _ => self.region_len() + 1,
        }
    }

    /// Largest absolute anchor offset a clip can contain.
    pub fn max_offset(&self) -> usize {
        self.l.max(self.region_len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            return Err(Error::Config("gathering.l must be at least 1".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Config("gathering.gamma must be positive".into()));
        }
        if self.variant != GatherVariant::None && self.region_len() == 0 {
            return Err(Error::Config("round(gamma * l) must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn region_len(l: usize, gamma: f64) -> usize {
    (gamma * l as f64).round() as usize
}

/// `F Fᵀ / sqrt(d)` for `F` of shape `[M, d]`.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.values.at2(i, j)
    }
}

pub fn similarity_matrix<T: Scalar>(features: &Tensor<T>) -> Result<SimilarityMatrix<T>> {
    if features.ndim() != 2 || features.shape()[0] == 0 || features.shape()[1] == 0 {
        return Err(shape_err("similarity_matrix", format!("expected [M>=1, d>=1], got {:?}", features.shape())));
    }
    let (m, d) = (features.shape()[0], features.shape()[1]);
    let mut out = vec![T::zero(); m * m];
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    T::gemm(m, d, m, scale, features.data(), d as isize, 1, features.data(), 1, d as isize, T::zero(), &mut out, m as isize, 1);
    Ok(SimilarityMatrix { values: Tensor::new(&[m, m], out)? })
}

/// Row-wise softmax over the `l` neighbours on each side, anchor excluded.
/// Entries outside the window are exactly zero.
pub fn masked_neighbor_distribution<T: Scalar>(s: &SimilarityMatrix<T>, l: usize) -> Result<Tensor<T>> {
    let m = s.len();
    if m < 2 {
        return Err(Error::Invalid("neighbour distribution needs at least two frames".into()));
    }
    if l == 0 {
        return Err(Error::Invalid("window half-width l must be at least 1".into()));
    }
    let mut out = vec![T::zero(); m * m];
    for t in 0..m {
        let lo = t.saturating_sub(l);
        let hi = (t + l).min(m - 1);
        let row = &mut out[t * m..(t + 1) * m];
        let mut window: Vec<T> = (lo..=hi).filter(|&j| j != t).map(|j| s.at(t, j)).collect();
        softmax_in_place(&mut window);
        let mut w = window.into_iter();
        for (j, slot) in row.iter_mut().enumerate().take(hi + 1).skip(lo) {
            if j != t {
                *slot = w.next().expect("window length");
            }
        }
    }
    Tensor::new(&[m, m], out)
}

/// Real-valued region sizes `(gamma * l * mass_before, gamma * l * mass_after)`.
pub fn soft_region_sizes<T: Scalar>(d_row: &[T], t: usize, l: usize, gamma: f64) -> (T, T) {
    let m = d_row.len();
    let lo = t.saturating_sub(l);
    let hi = (t + l).min(m.saturating_sub(1));
    let before: T = d_row[lo..t].iter().copied().sum();
    let after: T = if t < hi { d_row[t + 1..=hi].iter().copied().sum() } else { T::zero() };
    let scale = T::from_f64_lossy(gamma * l as f64);
    (scale * before, scale * after)
}

/// Moves a `(before, after)` split inward so `[t - before, t + after]` fits in `[0, m - 1]`.
fn shift_inside(t: usize, mut before: usize, mut after: usize, m: usize) -> (usize, usize) {
    if before > t {
        after += before - t;
        before = t;
    }
    if t + after > m - 1 {
        let deficit = t + after - (m - 1);
        after -= deficit;
        before += deficit;
    }
    (before, after)
}

/// Integer region bounds `(l_minus, l_plus)` for anchor `t`, with
/// `l_minus + l_plus = round(gamma * l)`.
pub fn region_bounds<T: Scalar>(d_row: &[T], t: usize, l: usize, gamma: f64, m: usize) -> Result<(usize, usize)> {
    let l_r = region_len(l, gamma);
    if m < l_r + 1 {
        return Err(Error::SequenceTooShort { len: m, required: l_r + 1 });
    }
    if d_row.len() != m || t >= m {
        return Err(shape_err("region_bounds", format!("row of {} for anchor {t} in {m} frames", d_row.len())));
    }
    let (soft_before, _) = soft_region_sizes(d_row, t, l, gamma);
    let l_minus = soft_before.as_f64().round().clamp(0.0, l_r as f64) as usize;
    Ok(shift_inside(t, l_minus, l_r - l_minus, m))
}

/// Per-anchor bounds for a whole sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionBounds {
    pub l: usize,
    pub gamma: f64,
    pub l_r: usize,
    pub bounds: Vec<(usize, usize)>,
}

pub fn all_region_bounds<T: Scalar>(distribution: &Tensor<T>, l: usize, gamma: f64) -> Result<RegionBounds> {
    let m = distribution.shape()[0];
    let bounds = (0..m).map(|t| region_bounds(distribution.row(t), t, l, gamma, m)).collect::<Result<Vec<_>>>()?;
    Ok(RegionBounds { l, gamma, l_r: region_len(l, gamma), bounds })
}

/// Source frame indices of every clip, flattened `[M * clip_len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipIndex {
    pub clip_len: usize,
    pub sources: Vec<usize>,
}

impl ClipIndex {
    pub fn anchors(&self) -> usize {
        self.sources.len() / self.clip_len
    }

    pub fn clip(&self, t: usize) -> &[usize] {
        &self.sources[t * self.clip_len..(t + 1) * self.clip_len]
    }

    /// Offset `p - t` of every clip element relative to its anchor.
    pub fn offsets(&self) -> Vec<isize> {
        self.sources.iter().enumerate().map(|(i, &p)| p as isize - (i / self.clip_len) as isize).collect()
    }
}

fn sparse_clip<T: Scalar>(s: &SimilarityMatrix<T>, t: usize, l: usize, l_r: usize) -> Vec<usize> {
    let m = s.len();
    let lo = t.saturating_sub(l);
    let hi = (t + l).min(m - 1);
    let mut window: Vec<usize> = (lo..=hi).filter(|&j| j != t).collect();
    window.sort_by(|&a, &b| {
        s.at(t, b)
            .partial_cmp(&s.at(t, a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.abs_diff(t).cmp(&b.abs_diff(t)))
            .then(a.cmp(&b))
    });
    window.truncate(l_r);
    if window.len() < l_r {
        // Too few candidates in the window: take the nearest frames outside it.
        let mut outside: Vec<usize> = (0..m).filter(|&j| j != t && (j < lo || j > hi)).collect();
        outside.sort_by_key(|&j| (j.abs_diff(t), j));
        window.extend(outside.into_iter().take(l_r - window.len()));
    }
    window.push(t);
    window.sort_unstable();
    window
}

/// Computes clip source indices for every anchor of `features` (`[M, d]`).
pub fn clip_index<T: Scalar>(features: &Tensor<T>, config: &GatherConfig) -> Result<ClipIndex> {
    config.validate()?;
    if features.ndim() != 2 {
        return Err(shape_err("gather", format!("expected [M, d], got {:?}", features.shape())));
    }
    let m = features.shape()[0];
    if m < config.min_sequence_len() {
        return Err(Error::SequenceTooShort { len: m, required: config.min_sequence_len() });
    }
    let l_r = config.region_len();
    let clip_len = config.clip_len();
    let mut sources = Vec::with_capacity(m * clip_len);
    match config.variant {
        GatherVariant::None => sources.extend(0..m),
        GatherVariant::Centered => {
            for t in 0..m {
                let before = l_r / 2;
                let (b, a) = shift_inside(t, before, l_r - before, m);
                sources.extend(t - b..=t + a);
            }
        }
        GatherVariant::ContentAware => {
            let s = similarity_matrix(features)?;
            let dist = masked_neighbor_distribution(&s, config.l)?;
            let bounds = all_region_bounds(&dist, config.l, config.gamma)?;
            for (t, &(b, a)) in bounds.bounds.iter().enumerate() {
                sources.extend(t - b..=t + a);
            }
        }
        GatherVariant::Sparse => {
            let s = similarity_matrix(features)?;
            for t in 0..m {
                sources.extend(sparse_clip(&s, t, config.l, l_r));
            }
        }
    }
    Ok(ClipIndex { clip_len, sources })
}

/// Gathered clips `[M, clip_len, d]` with their source indices.
#[derive(Clone, Debug)]
pub struct ClipTensor<T> {
    pub values: Tensor<T>,
    pub index: ClipIndex,
}

pub fn gather_clips<T: Scalar>(features: &Tensor<T>, config: &GatherConfig) -> Result<ClipTensor<T>> {
    let index = clip_index(features, config)?;
    let d = features.shape()[1];
    let data = index.sources.iter().flat_map(|&p| features.row(p).iter().copied()).collect();
    let values = Tensor::new(&[index.anchors(), index.clip_len, d], data)?;
    Ok(ClipTensor { values, index })
}
