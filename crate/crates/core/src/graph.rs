//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Operations
//! are appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv1d { x: Var, w: Var, b: Var, n: usize, t_in: usize, c_in: usize, c_out: usize, k: usize },
    MaxTime { a: Var, argmax: Vec<usize> },
    GatherRows { src: Var, idx: Vec<usize> },
    GatherFlat { src: Var, idx: Vec<usize> },
    MaskedFill { a: Var, mask: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: Option<usize>, probs: Vec<T>, count: usize },
    ScalarWithGrad { input: Var, grad: Vec<T> },
    Sum(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxTime { .. } => "max_time",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherFlat { .. } => "gather_flat",
            Op::MaskedFill { .. } => "masked_fill",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ScalarWithGrad { .. } => "scalar_with_grad",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Operation kind of each record, in tape order.
    pub fn kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ra, ca) = self.matrix_dims(a, "matmul")?;
        let (rb, cb) = self.matrix_dims(b, "matmul")?;
        let (m, k, rsa, csa) = if ta { (ca, ra, 1, ca as isize) } else { (ra, ca, ca as isize, 1) };
        let (k2, n, rsb, csb) = if tb { (cb, rb, 1, cb as isize) } else { (rb, cb, cb as isize, 1) };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?}{} x {:?}{}", [ra, ca], if ta { "^T" } else { "" }, [rb, cb], if tb { "^T" } else { "" }),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            rsa,
            csa,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a bias vector to every row (last axis).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).last_dim();
        if self.value(bias).len() != c {
            return Err(shape_err("add_row", format!("{:?} + bias {:?}", self.shape(a), self.shape(bias))));
        }
        let b = self.value(bias).data();
        let data = self.value(a).data().chunks(c).flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y)).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(t, Op::AddRow(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|v| v * c);
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(x.shape(), out).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(x.shape(), out).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err(
                "layer_norm",
                format!("input {:?}, gain {:?}, bias {:?}", xv.shape(), self.shape(gain), self.shape(bias)),
            ));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let cn = T::from_usize(c).unwrap();
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (j, &v) in row.iter().enumerate() {
                xhat[r * c + j] = (v - mean) * rs;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out: Vec<T> = xhat.chunks(c).flat_map(|row| row.iter().enumerate().map(|(j, &v)| v * g[j] + b[j])).collect();
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Valid (unpadded, stride 1) convolution along the time axis.
    ///
    /// `x` is `[n, t, c_in]`, `w` is `[k, c_in, c_out]`, `b` is `[c_out]`;
    /// the result is `[n, t - k + 1, c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] || self.value(b).len() != ws[2] {
            return Err(shape_err(
                "conv1d",
                format!("input {xs:?}, weight {ws:?}, bias {:?}", self.shape(b)),
            ));
        }
        let (n, t_in, c_in) = (xs[0], xs[1], xs[2]);
        let (k, c_out) = (ws[0], ws[2]);
        if t_in < k {
            return Err(shape_err("conv1d", format!("input length {t_in} shorter than kernel {k}")));
        }
        let t_out = t_in - k + 1;
        let cols = im2col(self.value(x).data(), n, t_in, c_in, k);
        let kc = k * c_in;
        let bias = self.value(b).data();
        let mut out: Vec<T> = (0..n * t_out).flat_map(|_| bias.iter().copied()).collect();
        T::gemm(
            n * t_out,
            kc,
            c_out,
            T::one(),
            &cols,
            kc as isize,
            1,
            self.value(w).data(),
            c_out as isize,
            1,
            T::one(),
            &mut out,
            c_out as isize,
            1,
        );
        let t = Tensor::new(&[n, t_out, c_out], out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(t, Op::Conv1d { x, w, b, n, t_in, c_in, c_out, k }, rg))
    }

    /// Maximum over the middle axis: `[n, t, c] -> [n, c]`.
    pub fn max_time(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(shape_err("max_time", format!("expected [n, t>0, c], got {s:?}")));
        }
        let (n, t, c) = (s[0], s[1], s[2]);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); n * c];
        let mut argmax = vec![0usize; n * c];
        for i in 0..n {
            for j in 0..c {
                let mut best = i * t * c + j;
                for s in 1..t {
                    let idx = (i * t + s) * c + j;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out[i * c + j] = x[best];
                argmax[i * c + j] = best;
            }
        }
        let tt = Tensor::new(&[n, c], out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(tt, Op::MaxTime { a, argmax }, rg))
    }

    /// Selects rows (last-axis slices) of `src`; also serves as embedding lookup.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let s = self.value(src);
        let c = s.last_dim();
        let rows = s.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("row {bad} out of range for {:?}", s.shape())));
        }
        let data = idx.iter().flat_map(|&i| s.row(i).iter().copied()).collect();
        let t = Tensor::new(&[idx.len(), c], data)?;
        let rg = self.any_grad(&[src]);
        Ok(self.push(t, Op::GatherRows { src, idx: idx.to_vec() }, rg))
    }

    /// Selects individual elements of `src` by flat index into a tensor of `shape`.
    pub fn gather_flat(&mut self, src: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let s = self.value(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= s.len()) {
            return Err(shape_err("gather_flat", format!("index {bad} out of range for {:?}", s.shape())));
        }
        let data = idx.iter().map(|&i| s.data()[i]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[src]);
        Ok(self.push(t, Op::GatherFlat { src, idx }, rg))
    }

    /// Replaces entries where `mask` is true with [`Scalar::mask_value`].
    pub fn masked_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(shape_err("masked_fill", format!("mask of {} for {:?}", mask.len(), x.shape())));
        }
        let fill = T::mask_value();
        let data = x.data().iter().zip(mask).map(|(&v, &m)| if m { fill } else { v }).collect();
        let t = Tensor::new(x.shape(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::MaskedFill { a, mask: mask.to_vec() }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`,
    /// skipping rows whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let x = self.value(logits);
        let c = x.last_dim();
        if x.rows() != targets.len() {
            return Err(shape_err("cross_entropy", format!("logits {:?} for {} targets", x.shape(), targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c && Some(t) != ignore) {
            return Err(shape_err("cross_entropy", format!("target {bad} out of range for {c} classes")));
        }
        let mut probs = x.data().to_vec();
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            softmax_in_place(row);
            if Some(targets[r]) == ignore {
                continue;
            }
            let xr = x.row(r);
            let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + xr.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - xr[targets[r]];
            count += 1;
        }
        let loss = if count == 0 { T::zero() } else { total / T::from_usize(count).unwrap() };
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, probs, count },
            rg,
        ))
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to `input`.
    pub fn scalar_with_grad(&mut self, input: Var, value: T, grad: Vec<T>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(shape_err(
                "scalar_with_grad",
                format!("gradient of {} for input {:?}", grad.len(), self.shape(input)),
            ));
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::ScalarWithGrad { input, grad }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Concatenates along the first axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat_rows", format!("{:?} vs trailing {tail:?}", s)));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(&shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Concatenates matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let (rows, _) = self.matrix_dims(*first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("{r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(&[rows, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "slice_cols")?;
        if start + width > cols {
            return Err(shape_err("slice_cols", format!("columns {start}..{} of {cols}", start + width)));
        }
        let x = self.value(a).data();
        let data = (0..rows).flat_map(|r| x[r * cols + start..r * cols + start + width].iter().copied()).collect();
        let t = Tensor::new(&[rows, width], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::SliceCols { a, start }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.filter(|_| n.requires_grad).map(|g| Tensor::new(n.value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Grads { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (ra, ca) = (av.shape()[0], av.shape()[1]);
                let (rb, cb) = (bv.shape()[0], bv.shape()[1]);
                let (m, k) = if *ta { (ca, ra) } else { (ra, ca) };
                let n = if *tb { rb } else { cb };
                // Strides of the logical operands op(a) (m x k) and op(b) (k x n).
                let (rsa, csa) = if *ta { (1, ca as isize) } else { (ca as isize, 1) };
                let (rsb, csb) = if *tb { (1, cb as isize) } else { (cb as isize, 1) };
                if let Some(ga) = self.slot(grads, *a) {
                    // d op(a) = gy * op(b)^T, written through op's layout.
                    T::gemm(m, n, k, T::one(), gy, n as isize, 1, bv.data(), csb, rsb, T::one(), ga, rsa, csa);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    T::gemm(k, m, n, T::one(), av.data(), csa, rsa, gy, n as isize, 1, T::one(), gb, rsb, csb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += gy[i * c + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.slot(grads, *v) {
                        g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
                let c = y.last_dim();
                if let Some(g) = self.slot(grads, *bias) {
                    for row in gy.chunks(c) {
                        g.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(g) = self.slot(grads, *a) {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(bv) {
                        *g += d * o;
                    }
                }
                if let Some(g) = self.slot(grads, *b) {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(av) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *c);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(g) = self.slot(grads, *a) {
                    for ((g, &d), &xv) in g.iter_mut().zip(gy).zip(x) {
                        if xv > T::zero() {
                            *g += d;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let c = y.last_dim();
                if let Some(g) = self.slot(grads, *a) {
                    for ((grow, dyrow), yrow) in g.chunks_mut(c).zip(gy.chunks(c)).zip(y.data().chunks(c)) {
                        let dot: T = dyrow.iter().zip(yrow).map(|(&d, &p)| d * p).sum();
                        for j in 0..c {
                            grow[j] += yrow[j] * (dyrow[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = y.last_dim();
                if let Some(g) = self.slot(grads, *a) {
                    for ((grow, dyrow), yrow) in g.chunks_mut(c).zip(gy.chunks(c)).zip(y.data().chunks(c)) {
                        let total: T = dyrow.iter().copied().sum();
                        for j in 0..c {
                            grow[j] += dyrow[j] - yrow[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = y.last_dim();
                let cn = T::from_usize(c).unwrap();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for (dyrow, xrow) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += dyrow[j] * xrow[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for dyrow in gy.chunks(c) {
                        gb.iter_mut().zip(dyrow).for_each(|(g, &d)| *g += d);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, (dyrow, xrow)) in gy.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let d = dyrow[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xrow[j];
                        }
                        mean_d /= cn;
                        mean_dx /= cn;
                        for j in 0..c {
                            let d = dyrow[j] * gv[j];
                            gx[r * c + j] += rstd[r] * (d - mean_d - xrow[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, n, t_in, c_in, c_out, k } => {
                let (n, t_in, c_in, c_out, k) = (*n, *t_in, *c_in, *c_out, *k);
                let t_out = t_in - k + 1;
                let kc = k * c_in;
                let rows = n * t_out;
                if let Some(gb) = self.slot(grads, *b) {
                    for row in gy.chunks(c_out) {
                        gb.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                    }
                }
                if self.nodes[w.0].requires_grad {
                    let cols = im2col(self.value(*x).data(), n, t_in, c_in, k);
                    let gw = self.slot(grads, *w).expect("requires grad");
                    T::gemm(kc, rows, c_out, T::one(), &cols, 1, kc as isize, gy, c_out as isize, 1, T::one(), gw, c_out as isize, 1);
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![T::zero(); rows * kc];
                    let wv = self.value(*w).data();
                    T::gemm(rows, c_out, kc, T::one(), gy, c_out as isize, 1, wv, 1, c_out as isize, T::zero(), &mut dcols, kc as isize, 1);
                    let gx = self.slot(grads, *x).expect("requires grad");
                    for ni in 0..n {
                        for to in 0..t_out {
                            let src = &dcols[(ni * t_out + to) * kc..(ni * t_out + to + 1) * kc];
                            let dst = &mut gx[(ni * t_in + to) * c_in..(ni * t_in + to) * c_in + kc];
                            dst.iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                        }
                    }
                }
            }
            Op::MaxTime { a, argmax } => {
                if let Some(g) = self.slot(grads, *a) {
                    for (&idx, &d) in argmax.iter().zip(gy) {
                        g[idx] += d;
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let c = y.last_dim();
                if let Some(g) = self.slot(grads, *src) {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut g[i * c..(i + 1) * c];
                        dst.iter_mut().zip(&gy[r * c..(r + 1) * c]).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::GatherFlat { src, idx } => {
                if let Some(g) = self.slot(grads, *src) {
                    for (&i, &d) in idx.iter().zip(gy) {
                        g[i] += d;
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                if let Some(g) = self.slot(grads, *a) {
                    for ((g, &d), &m) in g.iter_mut().zip(gy).zip(mask) {
                        if !m {
                            *g += d;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                if *count == 0 {
                    return;
                }
                let c = self.value(*logits).last_dim();
                let scale = gy[0] / T::from_usize(*count).unwrap();
                if let Some(g) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            g[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::ScalarWithGrad { input, grad } => {
                if let Some(g) = self.slot(grads, *input) {
                    g.iter_mut().zip(grad).for_each(|(g, &d)| *g += gy[0] * d);
                }
            }
            Op::Sum(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().for_each(|g| *g += gy[0]);
                }
            }
            Op::Reshape(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(g) = self.slot(grads, p) {
                        g.iter_mut().zip(&gy[offset..offset + len]).for_each(|(g, &d)| *g += d);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (y.shape()[0], y.shape()[1]);
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if let Some(g) = self.slot(grads, p) {
                        for r in 0..rows {
                            let src = &gy[r * total + start..r * total + start + w];
                            g[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                        }
                    }
                    start += w;
                }
            }
            Op::SliceCols { a, start } => {
                let (rows, width) = (y.shape()[0], y.shape()[1]);
                let cols = self.value(*a).shape()[1];
                if let Some(g) = self.slot(grads, *a) {
                    for r in 0..rows {
                        let dst = &mut g[r * cols + start..r * cols + start + width];
                        dst.iter_mut().zip(&gy[r * width..(r + 1) * width]).for_each(|(g, &d)| *g += d);
                    }
                }
            }
        }
    }

    /// Checks every recorded value is finite, naming the first offender.
    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        match self.value(v).first_non_finite() {
            Some(index) => Err(Error::NonFinite { context: context.to_string(), index }),
            None => Ok(()),
        }
    }
}

fn im2col<T: Scalar>(x: &[T], n: usize, t_in: usize, c_in: usize, k: usize) -> Vec<T> {
    let t_out = t_in - k + 1;
    let kc = k * c_in;
    let mut cols = Vec::with_capacity(n * t_out * kc);
    for ni in 0..n {
        for to in 0..t_out {
            let start = (ni * t_in + to) * c_in;
            cols.extend_from_slice(&x[start..start + kc]);
        }
    }
    cols
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
