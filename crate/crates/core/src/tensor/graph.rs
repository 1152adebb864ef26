use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;

use super::ops::{self, Op, UnaryKind};
use super::scalar::Scalar;
use super::{check_shape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<F> {
    pub op: Op,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub aux: Vec<F>,
    pub requires_grad: bool,
}

/// Record of executed operations. Node ids are assigned in execution order,
/// which is therefore a topological order of the computation.
pub struct Graph<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    consumed: Cell<bool>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> fmt::Debug for Graph<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Scalar> {
    graph: &'g Graph<F>,
    id: NodeId,
}

impl<F: Scalar> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({:?}, shape={:?})", self.id.0, self.shape())
    }
}

/// Summary of one backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardReport {
    /// Number of gradient rules applied (one per reachable, differentiable
    /// non-leaf node).
    pub rule_applications: usize,
    pub graph_nodes: usize,
}

/// Gradients of the loss with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<F> {
    by_leaf: HashMap<NodeId, Vec<F>>,
    pub report: BackwardReport,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: &Var<'_, F>) -> Option<&[F]> {
        self.by_leaf.get(&var.id).map(Vec::as_slice)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&[F]> {
        self.by_leaf.get(&id).map(Vec::as_slice)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<F>> {
        self.by_leaf.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, shape: Vec<usize>, value: Vec<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            op: Op::Leaf,
            shape,
            value,
            aux: Vec::new(),
            requires_grad,
        });
        Var { graph: self, id }
    }

    /// Copies a tensor into the graph as a leaf, keeping its
    /// `requires_grad` flag.
    pub fn leaf(&self, t: &Tensor<F>) -> Var<'_, F> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// Leaf that does not require gradients.
    pub fn constant(&self, shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Var<'_, F>> {
        let shape = shape.into();
        if check_shape(&shape)? != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(self.push_leaf(shape, data, false))
    }

    /// Leaf that requires gradients.
    pub fn param(&self, shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Var<'_, F>> {
        let shape = shape.into();
        if check_shape(&shape)? != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(self.push_leaf(shape, data, true))
    }

    pub(crate) fn push(&self, op: Op) -> Result<Var<'_, F>> {
        let node = {
            let nodes = self.nodes.borrow();
            let requires_grad = op.inputs().iter().any(|i| nodes[i.0].requires_grad);
            let out = match &op {
                Op::Reshape(a) => unreachable!("reshape node {a:?} goes through Var::reshape"),
                _ => ops::forward(&op, &nodes)?,
            };
            Node {
                op,
                shape: out.shape,
                value: out.value,
                aux: out.aux,
                requires_grad,
            }
        };
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(node);
        Ok(Var { graph: self, id })
    }

    fn own(&self, var: &Var<'_, F>) -> Result<()> {
        if !std::ptr::eq(var.graph, self) {
            return Err(Error::Graph("variable belongs to a different graph".into()));
        }
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> Ref<'_, [F]> {
        Ref::map(self.nodes.borrow(), |n| n[id.0].value.as_slice())
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.0].shape.clone()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes.borrow()[id.0].op.name()
    }

    /// Reverse-mode sweep from a scalar loss. A graph supports exactly one
    /// backward pass; a second call is an error.
    pub fn backward(&self, loss: &Var<'_, F>) -> Result<Gradients<F>> {
        self.own(loss)?;
        if self.consumed.replace(true) {
            return Err(Error::Graph(
                "backward already ran on this graph; build a new one".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id.0];
        if root.value.len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                root.shape
            )));
        }
        if !root.requires_grad {
            return Err(Error::Graph(
                "loss does not depend on any tensor that requires gradients".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id.0] = Some(vec![F::one()]);
        let mut rule_applications = 0;
        let mut by_leaf = HashMap::new();
        for id in (0..=loss.id.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                by_leaf.insert(NodeId(id), g);
                continue;
            }
            ops::backward(node, &g, &nodes, &mut grads);
            rule_applications += 1;
        }
        Ok(Gradients {
            by_leaf,
            report: BackwardReport {
                rule_applications,
                graph_nodes: nodes.len(),
            },
        })
    }

    /// Re-evaluates every recorded operation in order from the stored leaf
    /// values and returns all node values.
    pub fn replay(&self) -> Result<Vec<Vec<F>>> {
        let nodes = self.nodes.borrow();
        let mut fresh: Vec<Node<F>> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let (shape, value, aux) = match &node.op {
                Op::Leaf => (node.shape.clone(), node.value.clone(), Vec::new()),
                Op::Reshape(a) => (node.shape.clone(), fresh[a.0].value.clone(), Vec::new()),
                op => {
                    let out = ops::forward(op, &fresh)?;
                    (out.shape, out.value, out.aux)
                }
            };
            fresh.push(Node {
                op: node.op.clone(),
                shape,
                value,
                aux,
                requires_grad: node.requires_grad,
            });
        }
        Ok(fresh.into_iter().map(|n| n.value).collect())
    }

    pub fn values(&self) -> Vec<Vec<F>> {
        self.nodes
            .borrow()
            .iter()
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g, F>]) -> Result<Var<'g, F>> {
        for p in parts {
            self.own(p)?;
        }
        self.push(Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Rows of `table` selected by `indices`.
    pub fn embedding<'g>(&'g self, table: &Var<'g, F>, indices: &[usize]) -> Result<Var<'g, F>> {
        self.own(table)?;
        self.push(Op::Embedding {
            table: table.id,
            indices: indices.to_vec(),
        })
    }

    /// Per-channel exponential decay envelope
    /// `w[n, c] = exp(-softplus(rates[c]) * n / len) + bias`.
    pub fn decay_window<'g>(
        &'g self,
        rates: &Var<'g, F>,
        bias: &Var<'g, F>,
        len: usize,
    ) -> Result<Var<'g, F>> {
        self.own(rates)?;
        self.own(bias)?;
        self.push(Op::DecayWindow {
            alpha: rates.id,
            bias: bias.id,
            len,
        })
    }
}

impl<'g, F: Scalar> Var<'g, F> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.shape(self.id)
    }

    pub fn value(&self) -> Vec<F> {
        self.graph.value(self.id).to_vec()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&[F]) -> R) -> R {
        f(&self.graph.value(self.id))
    }

    /// The single value of a scalar node.
    pub fn item(&self) -> F {
        self.graph.value(self.id)[0]
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        Tensor::new(self.shape(), self.value()).expect("graph nodes have consistent shapes")
    }

    fn binary(
        &self,
        other: &Var<'g, F>,
        op: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Result<Var<'g, F>> {
        self.graph.own(other)?;
        self.graph.push(op(self.id, other.id))
    }

    pub fn matmul(&self, other: &Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, |a, b| Op::MatMul {
            a,
            b,
            b_trans: false,
        })
    }

    /// `self . other^T`.
    pub fn matmul_t(&self, other: &Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, |a, b| Op::MatMul {
            a,
            b,
            b_trans: true,
        })
    }

    pub fn add(&self, other: &Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, Op::Add)
    }

    pub fn sub(&self, other: &Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, Op::Mul)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'g, F>> {
        self.graph.push(Op::Scale { a: self.id, c })
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'g, F>> {
        self.graph.push(Op::AddScalar { a: self.id, c })
    }

    pub fn unary(&self, kind: UnaryKind) -> Result<Var<'g, F>> {
        self.graph.push(Op::Unary { a: self.id, kind })
    }

    pub fn gelu(&self) -> Result<Var<'g, F>> {
        self.unary(UnaryKind::Gelu)
    }

    pub fn silu(&self) -> Result<Var<'g, F>> {
        self.unary(UnaryKind::Silu)
    }

    pub fn exp(&self) -> Result<Var<'g, F>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(&self) -> Result<Var<'g, F>> {
        self.unary(UnaryKind::Log)
    }

    pub fn sin(&self) -> Result<Var<'g, F>> {
        self.unary(UnaryKind::Sin)
    }

    pub fn softplus(&self) -> Result<Var<'g, F>> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn square(&self) -> Result<Var<'g, F>> {
        self.unary(UnaryKind::Square)
    }

    /// Adds a length-`n` row vector to every row of an `[m, n]` matrix.
    pub fn add_row(&self, bias: &Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(bias, |x, b| Op::AddRow { x, b })
    }

    pub fn layer_norm(&self, gain: &Var<'g, F>, bias: &Var<'g, F>, eps: f64) -> Result<Var<'g, F>> {
        self.graph.own(gain)?;
        self.graph.own(bias)?;
        self.graph.push(Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            eps,
        })
    }

    pub fn softmax_rows(&self) -> Result<Var<'g, F>> {
        self.graph.push(Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'g, F>> {
        self.graph.push(Op::LogSoftmaxRows(self.id))
    }

    /// Sets entries above the (end-aligned) diagonal to `-inf`.
    pub fn causal_mask(&self) -> Result<Var<'g, F>> {
        self.graph.push(Op::CausalMask(self.id))
    }

    pub fn sum(&self) -> Result<Var<'g, F>> {
        self.graph.push(Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'g, F>> {
        self.graph.push(Op::Mean(self.id))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g, F>> {
        self.graph.push(Op::SumAxis { a: self.id, axis })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g, F>> {
        self.graph.push(Op::MeanAxis { a: self.id, axis })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'g, F>> {
        self.graph.push(Op::SliceCols {
            a: self.id,
            start,
            len,
        })
    }

    pub fn transpose(&self) -> Result<Var<'g, F>> {
        self.graph.push(Op::Transpose(self.id))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, F>> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        let node = {
            let nodes = self.graph.nodes.borrow();
            let src = &nodes[self.id.0];
            if n != src.value.len() {
                return Err(Error::shape(format!(
                    "cannot reshape {:?} into {shape:?}",
                    src.shape
                )));
            }
            Node {
                op: Op::Reshape(self.id),
                shape,
                value: src.value.clone(),
                aux: Vec::new(),
                requires_grad: src.requires_grad,
            }
        };
        let mut nodes = self.graph.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(node);
        Ok(Var {
            graph: self.graph,
            id,
        })
    }

    /// Rotary position embedding over the rows of an `[L, head_dim]` matrix.
    pub fn rope(&self, positions: &[usize], base: f64) -> Result<Var<'g, F>> {
        self.graph.push(Op::Rope {
            a: self.id,
            positions: positions.to_vec(),
            base,
        })
    }

    /// Per-channel causal convolution of `self: [L, ch]` with `filter:
    /// [L, ch]` through zero-padded FFTs.
    pub fn fft_causal_conv(&self, filter: &Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(filter, |u, h| Op::FftConv { u, h })
    }

    /// Strictly causal depthwise convolution with a `[w, ch]` kernel.
    pub fn depthwise_causal_conv(&self, kernel: &Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(kernel, |x, k| Op::DepthwiseConv { x, k })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'g, F>> {
        self.graph.push(Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
        })
    }
}
