//! Define-by-run reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the tape. Node
//! indices are assigned in creation order, so walking the tape backwards is
//! a reverse topological order and each node is visited exactly once.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Real, Shift, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    HardTanh,
    HardSigmoid,
    Tanh,
    Sigmoid,
    /// `1 - x`
    OneMinus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    Conv { input: Var, kernel: Var, bias: Var },
    Shift(Var, Arc<[Shift]>),
    Affine { input: Var, weight: Var, bias: Var },
    Embed { table: Var, tokens: Vec<usize> },
    Sum(Var),
    Saturation(Var, T),
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Tensor<T> },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Adjoints of the leaves reachable from a loss.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node created after the first `mark` nodes.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn get(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.get(v)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.get(v).item()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let xv = self.get(x);
        let value = match kind {
            Unary::HardTanh => xv.map(tensor::hard_tanh),
            Unary::HardSigmoid => xv.map(tensor::hard_sigmoid),
            Unary::Tanh => xv.map(|v| v.tanh()),
            Unary::Sigmoid => xv.map(tensor::sigmoid),
            Unary::OneMinus => xv.map(|v| T::one() - v),
        };
        self.push(Op::Unary(kind, x), value)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.get(a), self.get(b));
        let value = match kind {
            Binary::Add => av.zip_map(bv, |x, y| x + y)?,
            Binary::Sub => av.zip_map(bv, |x, y| x - y)?,
            Binary::Mul => av.zip_map(bv, |x, y| x * y)?,
        };
        Ok(self.push(Op::Binary(kind, a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.get(x).map(|v| v * factor);
        self.push(Op::Scale(x, factor), value)
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let value = self.get(x).zip_map(&c, |a, b| a * b)?;
        Ok(self.push(Op::MulConst(x, c), value))
    }

    pub fn conv1d_same(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let value = tensor::conv1d_same(self.get(input), self.get(kernel), self.get(bias))?;
        Ok(self.push(Op::Conv { input, kernel, bias }, value))
    }

    pub fn depthwise_shift(&mut self, input: Var, directions: Arc<[Shift]>) -> Result<Var> {
        let value = tensor::depthwise_shift(self.get(input), &directions)?;
        Ok(self.push(Op::Shift(input, directions), value))
    }

    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let value = tensor::affine(self.get(input), self.get(weight), self.get(bias))?;
        Ok(self.push(Op::Affine { input, weight, bias }, value))
    }

    /// Gather embedding rows; the result has shape `shape + [m]`.
    pub fn embed(&mut self, table: Var, tokens: &[usize], shape: &[usize]) -> Result<Var> {
        let rows = tensor::embed_rows(self.get(table), tokens)?;
        let m = rows.cols();
        let mut full = shape.to_vec();
        full.push(m);
        let value = rows.reshape(&full)?;
        Ok(self.push(
            Op::Embed {
                table,
                tokens: tokens.to_vec(),
            },
            value,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.get(x).sum());
        self.push(Op::Sum(x), value)
    }

    /// Scalar `sum_i max(0, |x_i| - s_limit)`.
    pub fn saturation(&mut self, x: Var, s_limit: T) -> Var {
        let total = self
            .get(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + tensor::saturation_cost(v, s_limit));
        self.push(Op::Saturation(x, s_limit), Tensor::scalar(total))
    }

    /// Mean softmax cross-entropy over all rows of `logits`. Also returns
    /// the per-row argmax correctness.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<(Var, Vec<bool>)> {
        let (loss, correct, probs) = tensor::softmax_xent(self.get(logits), targets)?;
        let var = self.push(
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        );
        Ok((var, correct))
    }

    /// Hash of which linear piece every hard-nonlinearity and saturation
    /// input currently sits in. Two evaluations with equal signatures lie in
    /// the same smooth region of the loss.
    pub fn region_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            let (x, lo, hi) = match &node.op {
                Op::Unary(Unary::HardTanh | Unary::HardSigmoid, x) => (*x, -T::one(), T::one()),
                Op::Saturation(x, lim) => (*x, -*lim, *lim),
                _ => continue,
            };
            for &v in self.get(x).data() {
                let region: u8 = if v <= lo {
                    0
                } else if v < hi {
                    1
                } else {
                    2
                };
                region.hash(&mut h);
            }
        }
        h.finish()
    }

    /// Smallest distance from any hard-nonlinearity or saturation input to
    /// one of its kinks.
    pub fn min_kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for node in &self.nodes {
            let (x, k) = match &node.op {
                Op::Unary(Unary::HardTanh | Unary::HardSigmoid, x) => (*x, 1.0),
                Op::Saturation(x, lim) => (*x, lim.as_f64()),
                _ => continue,
            };
            for &v in self.get(x).data() {
                best = best.min((v.as_f64().abs() - k).abs());
            }
        }
        best
    }

    /// Reverse sweep from a scalar loss. Only leaf adjoints are retained.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "backward from node {} but the tape holds {} nodes; run the forward pass first",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.get(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.get(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xv = self.get(*x);
                let one = T::one();
                let half = T::from_f64(0.5);
                let local = match kind {
                    Unary::HardTanh => g.zip_map(xv, |g, x| if x.abs() < one { g } else { T::zero() })?,
                    Unary::HardSigmoid => {
                        g.zip_map(xv, |g, x| if x.abs() < one { g * half } else { T::zero() })?
                    }
                    Unary::Tanh => g.zip_map(&node.value, |g, y| g * (one - y * y))?,
                    Unary::Sigmoid => g.zip_map(&node.value, |g, y| g * y * (one - y))?,
                    Unary::OneMinus => g.map(|g| -g),
                };
                acc(*x, local)?;
            }
            Op::Binary(kind, a, b) => match kind {
                Binary::Add => {
                    acc(*a, g.clone())?;
                    acc(*b, g)?;
                }
                Binary::Sub => {
                    acc(*a, g.clone())?;
                    acc(*b, g.map(|v| -v))?;
                }
                Binary::Mul => {
                    let ga = g.zip_map(self.get(*b), |g, y| g * y)?;
                    let gb = g.zip_map(self.get(*a), |g, x| g * x)?;
                    acc(*a, ga)?;
                    acc(*b, gb)?;
                }
            },
            Op::Scale(x, f) => acc(*x, g.map(|v| v * *f))?,
            Op::MulConst(x, c) => acc(*x, g.zip_map(c, |g, c| g * c)?)?,
            Op::Conv { input, kernel, bias } => {
                let (gx, gk, gb) = tensor::conv1d_same_backward(
                    self.get(*input),
                    self.get(*kernel),
                    self.get(*bias),
                    &g,
                )?;
                acc(*input, gx)?;
                acc(*kernel, gk)?;
                acc(*bias, gb)?;
            }
            Op::Shift(x, dirs) => acc(*x, tensor::depthwise_shift_backward(&g, dirs)?)?,
            Op::Affine { input, weight, bias } => {
                let (gx, gw, gb) = tensor::affine_backward(self.get(*input), self.get(*weight), &g)?;
                acc(*input, gx)?;
                acc(*weight, gw)?;
                acc(*bias, gb)?;
            }
            Op::Embed { table, tokens } => {
                let tv = self.get(*table);
                let m = tv.cols();
                let mut gt = Tensor::zeros(tv.shape());
                let data = gt.data_mut();
                for (row, &tok) in g.data().chunks(m).zip(tokens) {
                    for (d, &v) in data[tok * m..(tok + 1) * m].iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                acc(*table, gt)?;
            }
            Op::Sum(x) => {
                let gv = g.item();
                acc(*x, Tensor::full(self.get(*x).shape(), gv))?;
            }
            Op::Saturation(x, lim) => {
                let gv = g.item();
                let local = self.get(*x).map(|v| {
                    if v > *lim {
                        gv
                    } else if v < -*lim {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                acc(*x, local)?;
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let v = probs.cols();
                let scale = g.item() / T::from_f64(targets.len() as f64);
                let mut local = probs.map(|p| p * scale);
                for (row, &t) in local.data_mut().chunks_mut(v).zip(targets) {
                    row[t] = row[t] - scale;
                }
                acc(*logits, local)?;
            }
        }
        Ok(())
    }
}
