//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every leaf bound to a [`ParamId`]. Only the operations needed by the
//! trainable models are differentiable; inference paths use plain tensor ops.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{conv2d_backward, matmul, matmul_nt, matmul_tn, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Element> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Gradient per parameter; dims always equal the parameter's dims.
#[derive(Debug, Clone)]
pub struct Grads<T: Element> {
    by_param: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Element> {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        cols: Tensor<T>,
    },
    LeakyRelu(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf(None))
    }

    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        self.push(params.get(id).clone(), Op::Leaf(Some(id)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// `x[M×N] + b[N]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let v = self.value(x).add_row_bias(self.value(b))?;
        Ok(self.push(v, Op::AddRowBias(x, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `x · w + b` for `x[M×In]`, `w[In×Out]`, `b[Out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose2()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(dims.to_vec())?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (y, cols) = crate::tensor::conv2d_with_cols(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
        )?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                cols,
            },
        ))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > T::ZERO { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::ZERO));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::ln);
        self.push(v, Op::Ln(a))
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    /// Column sums of a matrix: `[M×N] → [N]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).shape2()?;
        let d = self.value(a).data();
        let mut out = vec![T::ZERO; n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(&d[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        let v = Tensor::new([n], out)?;
        Ok(self.push(v, Op::SumCols(a)))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        if self.value(out).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar output, got dims {:?}",
                self.value(out).dims()
            ));
        }
        if !self.value(out).all_finite() {
            return Err(Error::NonFinite("loss value".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(Tensor::ones(self.value(out).dims().to_vec()));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            let mut acc = |v: Var, d: Tensor<T>| -> Result<()> {
                match &mut grads[v.0] {
                    Some(existing) => *existing = existing.add(&d)?,
                    slot @ None => *slot = Some(d),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf(_) => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g)?;
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g.scale(-T::ONE))?;
                }
                Op::Mul(a, b) => {
                    let da = g.mul(self.value(*b))?;
                    let db = g.mul(self.value(*a))?;
                    acc(*a, da)?;
                    acc(*b, db)?;
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let da = g.zip_map(bv, "div'", |gi, y| gi / y)?;
                    let db = g
                        .mul(&node.value)?
                        .zip_map(bv, "div'", |gq, y| -gq / y)?;
                    acc(*a, da)?;
                    acc(*b, db)?;
                }
                Op::Scale(a, c) => acc(*a, g.scale(*c))?,
                Op::AddScalar(a) => acc(*a, g)?,
                Op::AddRowBias(x, b) => {
                    let n = self.value(*b).len();
                    let mut db = vec![T::ZERO; n];
                    for row in g.data().chunks(n) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, Tensor::new([n], db)?.into_reshaped(self.value(*b).dims().to_vec())?)?;
                    acc(*x, g)?;
                }
                Op::MatMul(a, b) => {
                    let da = matmul_nt(&g, self.value(*b))?;
                    let db = matmul_tn(self.value(*a), &g)?;
                    acc(*a, da)?;
                    acc(*b, db)?;
                }
                Op::Transpose(a) => acc(*a, g.transpose2()?)?,
                Op::Reshape(a) => acc(*a, g.into_reshaped(self.value(*a).dims().to_vec())?)?,
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    cols,
                } => {
                    let cg = conv2d_backward(self.value(*x).dims(), self.value(*w), cols, &g, *stride)?;
                    acc(*x, cg.dx)?;
                    acc(*w, cg.dw)?;
                    acc(*b, cg.db)?;
                }
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    let d = g.zip_map(self.value(*a), "leaky'", |gi, x| {
                        if x > T::ZERO {
                            gi
                        } else {
                            gi * s
                        }
                    })?;
                    acc(*a, d)?;
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), "relu'", |gi, x| {
                        if x > T::ZERO {
                            gi
                        } else {
                            T::ZERO
                        }
                    })?;
                    acc(*a, d)?;
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, "sigmoid'", |gi, s| gi * s * (T::ONE - s))?;
                    acc(*a, d)?;
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, "tanh'", |gi, y| gi * (T::ONE - y * y))?;
                    acc(*a, d)?;
                }
                Op::Ln(a) => {
                    let d = g.zip_map(self.value(*a), "ln'", |gi, x| gi / x)?;
                    acc(*a, d)?;
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let d = g.zip_map(self.value(*a), "clamp'", |gi, x| {
                        if x < lo || x > hi {
                            T::ZERO
                        } else {
                            gi
                        }
                    })?;
                    acc(*a, d)?;
                }
                Op::Sum(a) => {
                    let dims = self.value(*a).dims().to_vec();
                    acc(*a, Tensor::full(dims, g.data()[0]))?;
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let n = T::from_f64(av.len() as f64);
                    acc(*a, Tensor::full(av.dims().to_vec(), g.data()[0] / n))?;
                }
                Op::SumCols(a) => {
                    let (m, _) = self.value(*a).shape2()?;
                    let mut d = Vec::with_capacity(m * g.len());
                    for _ in 0..m {
                        d.extend_from_slice(g.data());
                    }
                    acc(*a, Tensor::new(self.value(*a).dims().to_vec(), d)?)?;
                }
            }
        }

        let mut by_param = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(out.0 + 1) {
            if let Op::Leaf(Some(pid)) = node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.dims().to_vec()));
                match by_param.get_mut(&pid) {
                    Some(existing) => *existing = Tensor::add(existing, &g)?,
                    None => {
                        by_param.insert(pid, g);
                    }
                }
            }
        }
        Ok(Grads { by_param })
    }
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}
