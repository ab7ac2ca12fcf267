//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s in execution
//! order, so node ids are already a topological order and the backward pass is
//! a single reverse sweep. Graphs are single-threaded; independent gradient
//! evaluations each build their own.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{invalid, Error, Result};
use crate::tensor::{layer_norm_rows, matmul, softmax_rows, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    SoftmaxRows(usize),
    /// `out[i] = src[index[i]]`; indices may repeat (broadcast) or be a
    /// permutation.
    Gather(usize, Rc<[usize]>),
    LayerNorm {
        src: usize,
        inv_std: Vec<f64>,
    },
    Gelu(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an input or parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar output. Returns one optional gradient per
    /// recorded node.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.numel() != 1 {
            return invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[output.id].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), 1.0));

        for id in (0..=output.id).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            upstream.ensure_finite("backward pass")?;
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let da = matmul(&upstream, &bv.transpose()?)?;
                    let db = matmul(&av.transpose()?, &upstream)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, upstream.clone())?;
                    accumulate(&mut grads, *b, upstream.clone())?;
                }
                Op::Mul(a, b) => {
                    let da = upstream.mul(&nodes[*b].value)?;
                    let db = upstream.mul(&nodes[*a].value)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Scale(a, factor) => accumulate(&mut grads, *a, upstream.scale(*factor))?,
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let c = y.last_dim();
                    let mut dx = upstream.data().to_vec();
                    for (row, yrow) in dx.chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: f64 = row.iter().zip(yrow).map(|(g, p)| g * p).sum();
                        for (g, p) in row.iter_mut().zip(yrow) {
                            *g = p * (*g - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(y.shape().to_vec(), dx)?)?;
                }
                Op::Gather(src, index) => {
                    let src_value = &nodes[*src].value;
                    let mut dx = vec![0.0; src_value.numel()];
                    for (&i, &g) in index.iter().zip(upstream.data()) {
                        dx[i] += g;
                    }
                    accumulate(
                        &mut grads,
                        *src,
                        Tensor::new(src_value.shape().to_vec(), dx)?,
                    )?;
                }
                Op::LayerNorm { src, inv_std } => {
                    let y = &node.value;
                    let c = y.last_dim();
                    let n = c as f64;
                    let mut dx = upstream.data().to_vec();
                    for ((row, yrow), is) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(inv_std) {
                        let mean_g: f64 = row.iter().sum::<f64>() / n;
                        let mean_gy: f64 =
                            row.iter().zip(yrow).map(|(g, v)| g * v).sum::<f64>() / n;
                        for (g, v) in row.iter_mut().zip(yrow) {
                            *g = is * (*g - mean_g - v * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *src, Tensor::new(y.shape().to_vec(), dx)?)?;
                }
                Op::Gelu(src) => {
                    let x = &nodes[*src].value;
                    let dx = upstream
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, &v)| g * gelu_grad(v))
                        .collect();
                    accumulate(&mut grads, *src, Tensor::new(x.shape().to_vec(), dx)?)?;
                }
                Op::Reshape(src) => {
                    let shape = nodes[*src].value.shape().to_vec();
                    accumulate(&mut grads, *src, upstream.reshape(&shape)?)?;
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = &nodes[p].value;
                        let len = pv.numel();
                        let slice = upstream.data()[offset..offset + len].to_vec();
                        accumulate(&mut grads, p, Tensor::new(pv.shape().to_vec(), slice)?)?;
                        offset += len;
                    }
                }
                Op::Sum(src) => {
                    let g = upstream.data()[0];
                    accumulate(&mut grads, *src, Tensor::full(nodes[*src].value.shape(), g))?;
                }
            }
            grads[id] = Some(upstream);
        }
        Ok(Gradients { grads })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) -> Result<()> {
    match &mut grads[id] {
        Some(existing) => *existing = existing.add(&g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or zeros if the output does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    fn check_graph(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars recorded on different graphs"
        );
    }

    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.check_graph(&rhs);
        let out = matmul(&self.value(), &rhs.value())?;
        Ok(self.graph.push(out, Op::MatMul(self.id, rhs.id)))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.check_graph(&rhs);
        let out = self.value().add(&rhs.value())?;
        Ok(self.graph.push(out, Op::Add(self.id, rhs.id)))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.check_graph(&rhs);
        let out = self.value().mul(&rhs.value())?;
        Ok(self.graph.push(out, Op::Mul(self.id, rhs.id)))
    }

    pub fn scale(self, factor: f64) -> Var<'g> {
        let out = self.value().scale(factor);
        self.graph.push(out, Op::Scale(self.id, factor))
    }

    pub fn softmax_rows(self) -> Result<Var<'g>> {
        let out = softmax_rows(&self.value())?;
        Ok(self.graph.push(out, Op::SoftmaxRows(self.id)))
    }

    /// Normalises each row of the last axis (no affine terms).
    pub fn layer_norm(self, eps: f64) -> Var<'g> {
        let (out, inv_std) = layer_norm_rows(&self.value(), eps);
        self.graph.push(
            out,
            Op::LayerNorm {
                src: self.id,
                inv_std,
            },
        )
    }

    pub fn gelu(self) -> Var<'g> {
        let out = self.value().map(gelu);
        self.graph.push(out, Op::Gelu(self.id))
    }

    pub fn gather(self, index: impl Into<Rc<[usize]>>, shape: &[usize]) -> Result<Var<'g>> {
        let index = index.into();
        let out = self.value().gather(&index, shape)?;
        Ok(self.graph.push(out, Op::Gather(self.id, index)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.graph.push(out, Op::Reshape(self.id)))
    }

    /// Views the value as `[numel / last_dim, last_dim]`.
    pub fn as_matrix(self) -> Result<Var<'g>> {
        let shape = self.shape();
        let c = *shape.last().expect("non-empty shape");
        self.reshape(&[self.numel() / c, c])
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let shape = self.shape();
        let [r, c] = shape[..] else {
            return invalid(format!("transpose expects a matrix, got {shape:?}"));
        };
        let index: Vec<usize> = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather(index, &[c, r])
    }

    /// Repeats a `[c]` vector over `rows` rows, giving `[rows, c]`.
    pub fn broadcast_rows(self, rows: usize) -> Result<Var<'g>> {
        let c = self.numel();
        let index: Vec<usize> = (0..rows * c).map(|i| i % c).collect();
        self.gather(index, &[rows, c])
    }

    pub fn sum(self) -> Var<'g> {
        let out = Tensor::scalar(self.value().sum());
        self.graph.push(out, Op::Sum(self.id))
    }

    /// Flat concatenation of `parts`; result is one-dimensional.
    pub fn concat(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let Some(first) = parts.first() else {
            return invalid("concat of zero parts");
        };
        for p in parts {
            first.check_graph(p);
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_flat(&refs);
        Ok(first
            .graph
            .push(out, Op::Concat(parts.iter().map(|p| p.id).collect())))
    }
}

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences with step `eps`.
///
/// Returns `max_i |analytic_i − numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return invalid(format!("grad_check step must lie in (0, 1e-2], got {eps}"));
    }
    let analytic = {
        let g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = f(&g, xv)?;
        g.backward(y)?.wrt(xv)
    };
    analytic.ensure_finite("analytic gradient")?;

    let eval = |probe: Tensor| -> Result<f64> {
        let g = Graph::new();
        let y = f(&g, g.leaf(probe))?;
        let v = y.value();
        if v.numel() != 1 {
            return invalid("grad_check function must return a scalar");
        }
        let s = v.data()[0];
        if !s.is_finite() {
            return Err(Error::NonFinite("grad_check probe".into()));
        }
        Ok(s)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
