//! Named parameter storage, forward-pass context and small reusable layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered name → tensor map. Insertion order is the serialization order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces all values, keeping names; shapes must match.
    pub fn assign(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(shape_err("assign", format!("{} tensors for {} parameters", values.len(), self.tensors.len())));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&values).enumerate() {
            if old.shape() != new.shape() {
                return Err(shape_err("assign", format!("{}: {:?} vs {:?}", self.names[i], old.shape(), new.shape())));
            }
        }
        self.tensors = values;
        Ok(())
    }
}

/// One forward pass: the tape, parameter leaves and dropout state.
pub struct Forward<T: Scalar> {
    pub g: Graph<T>,
    vars: Vec<Var>,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> Forward<T> {
    /// Evaluation pass: no dropout, parameters are constants.
    pub fn eval(store: &ParamStore<T>) -> Self {
        Self::build(store, false, 0.0, None)
    }

    /// Training pass recording gradients for every parameter.
    pub fn train(store: &ParamStore<T>, dropout: f64, rng: ChaCha8Rng) -> Self {
        Self::build(store, true, dropout, Some(rng))
    }

    /// Records gradients but applies no dropout.
    pub fn exact(store: &ParamStore<T>) -> Self {
        Self::build(store, true, 0.0, None)
    }

    /// Wraps an existing tape whose leaves `vars` stand for the store's parameters.
    pub fn from_graph(g: Graph<T>, vars: Vec<Var>) -> Self {
        Forward { g, vars, dropout: 0.0, rng: None }
    }

    fn build(store: &ParamStore<T>, grad: bool, dropout: f64, rng: Option<ChaCha8Rng>) -> Self {
        let mut g = Graph::new();
        let vars = store.tensors.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        Forward { g, vars, dropout, rng }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    /// Inverted dropout; identity in evaluation passes.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        if self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let scale = T::from_f64_lossy(1.0 / keep);
        let shape = self.g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() }).collect();
        let m = self.g.constant(Tensor::new(&shape, mask)?);
        self.g.mul(x, m)
    }

    /// Gradients of every parameter in store order.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Tensor<T>>> {
        let mut grads = self.g.backward(loss)?;
        Ok(self
            .vars
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(self.g.shape(v))))
            .collect())
    }
}

pub fn xavier<T: Scalar, R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.weight"), xavier(input, output, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[output])));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let y = f.g.matmul(x, f.p(self.w))?;
        match self.b {
            Some(b) => f.g.add_row(y, f.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], T::one()));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        LayerNorm { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let (g, b) = (f.p(self.gain), f.p(self.bias));
        f.g.layer_norm(x, g, b)
    }
}

/// Position-wise two-layer rectifier network.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, width: usize, rng: &mut R) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), dim, width, true, rng),
            outer: Linear::new(store, &format!("{name}.outer"), width, dim, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(f, x)?;
        let h = f.g.relu(h);
        let h = f.dropout(h)?;
        self.outer.forward(f, h)
    }
}
