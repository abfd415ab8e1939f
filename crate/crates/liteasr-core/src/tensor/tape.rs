//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Operations
//! return [`Var`] handles; [`Tape::backward`] walks the recorded nodes in
//! reverse creation order (a topological order by construction) and
//! accumulates gradients into the requires-grad leaves. Leaf gradients
//! persist across backward calls and add up, so calling backward twice
//! doubles them.

use std::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{reduce_to_shape, Scalar, Tensor};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn<E> = Box<dyn Fn(&Tensor<E>, &[Node<E>], usize) -> Result<Vec<Option<Tensor<E>>>>>;

pub(crate) struct Node<E: Scalar> {
    pub(crate) value: Tensor<E>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn<E>>,
    op: &'static str,
}

pub struct Tape<E: Scalar> {
    nodes: RefCell<Vec<Node<E>>>,
    leaf_grads: RefCell<Vec<Option<Tensor<E>>>>,
    check_finite: Cell<bool>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
            check_finite: Cell::new(true),
        }
    }

    /// Disable the per-op finite check (it is on by default).
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Drop all recorded nodes and leaf gradients.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.leaf_grads.borrow_mut().clear();
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<E>> {
        Ref::map(self.nodes.borrow(), |nodes| &nodes[v.0].value)
    }

    pub fn value_clone(&self, v: Var) -> Tensor<E> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Scalar value of a single-element node.
    pub fn item_of(&self, v: Var) -> Result<E> {
        let value = self.nodes.borrow()[v.0].value.item()?;
        Ok(value)
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Record a gradient-carrying input.
    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Result<Var> {
        self.push(value, requires_grad, vec![], None, "leaf")
    }

    /// Record a constant (never receives gradient).
    pub fn constant(&self, value: Tensor<E>) -> Result<Var> {
        self.push(value, false, vec![], None, "constant")
    }

    pub fn scalar(&self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(E::from_f64c(value)))
    }

    fn push(
        &self,
        value: Tensor<E>,
        requires_grad: bool,
        parents: Vec<Var>,
        backward: Option<BackwardFn<E>>,
        op: &'static str,
    ) -> Result<Var> {
        if self.check_finite.get() && !value.is_finite() {
            return Err(Error::NonFinite {
                op,
                detail: format!("output shape {:?}", value.shape()),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
            op,
        });
        self.leaf_grads.borrow_mut().push(None);
        Ok(Var(id))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Accumulated gradient of a requires-grad leaf after backward.
    pub fn grad(&self, v: Var) -> Option<Tensor<E>> {
        self.leaf_grads.borrow()[v.0].clone()
    }

    pub fn zero_leaf_grads(&self) {
        for g in self.leaf_grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }

    /// Reverse pass from a scalar loss. Gradients of requires-grad leaves
    /// accumulate (+=) into the tape's leaf-gradient store.
    pub fn backward(&self, loss: Var) -> Result<()> {
        {
            let nodes = self.nodes.borrow();
            let node = &nodes[loss.0];
            if node.value.numel() != 1 {
                return Err(Error::Usage(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    node.value.shape()
                )));
            }
            if !node.requires_grad {
                return Err(Error::Usage(
                    "backward on a value with no path to any requires-grad leaf".into(),
                ));
            }
        }
        let nodes = self.nodes.take();
        let result = self.backward_inner(&nodes, loss);
        self.nodes.replace(nodes);
        result
    }

    fn backward_inner(&self, nodes: &[Node<E>], loss: Var) -> Result<()> {
        let mut adjoint: Vec<Option<Tensor<E>>> = Vec::with_capacity(loss.0 + 1);
        adjoint.resize_with(loss.0 + 1, || None);
        adjoint[loss.0] = Some(Tensor::full(
            nodes[loss.0].value.shape().to_vec(),
            E::one(),
        ));
        for id in (0..=loss.0).rev() {
            let Some(g) = adjoint[id].take() else { continue };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let contributions = backward(&g, nodes, id)?;
                debug_assert_eq!(contributions.len(), node.parents.len());
                for (parent, contribution) in node.parents.iter().zip(contributions) {
                    let Some(c) = contribution else { continue };
                    if !nodes[parent.0].requires_grad {
                        continue;
                    }
                    match &mut adjoint[parent.0] {
                        Some(acc) => acc.add_assign(&c)?,
                        slot @ None => *slot = Some(c),
                    }
                }
            } else if node.requires_grad && node.parents.is_empty() {
                let mut leaf_grads = self.leaf_grads.borrow_mut();
                match &mut leaf_grads[id] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    // ── elementwise binary (broadcasting) ───────────────────────────

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            (
                ops::ew_binary(&nodes[a.0].value, &nodes[b.0].value, |x, y| x + y)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, nodes: &[Node<E>], _id: usize| {
                let da = reduce_to_shape(g, nodes[a.0].value.shape());
                let db = reduce_to_shape(g, nodes[b.0].value.shape());
                Ok(vec![Some(da), Some(db)])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![a, b], backward, "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            (
                ops::ew_binary(&nodes[a.0].value, &nodes[b.0].value, |x, y| x - y)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, nodes: &[Node<E>], _id: usize| {
                let da = reduce_to_shape(g, nodes[a.0].value.shape());
                let db = reduce_to_shape(&g.map(|v| -v), nodes[b.0].value.shape());
                Ok(vec![Some(da), Some(db)])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![a, b], backward, "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            (
                ops::ew_binary(&nodes[a.0].value, &nodes[b.0].value, |x, y| x * y)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, nodes: &[Node<E>], _id: usize| {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let da_full = ops::ew_binary(g, bv, |g, b| g * b)?;
                let db_full = ops::ew_binary(g, av, |g, a| g * a)?;
                Ok(vec![
                    Some(reduce_to_shape(&da_full, av.shape())),
                    Some(reduce_to_shape(&db_full, bv.shape())),
                ])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![a, b], backward, "mul")
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            (
                ops::ew_binary(&nodes[a.0].value, &nodes[b.0].value, |x, y| x / y)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, nodes: &[Node<E>], id: usize| {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let outv = &nodes[id].value;
                let da_full = ops::ew_binary(g, bv, |g, b| g / b)?;
                // d/db (a/b) = -a/b^2 = -out/b
                let g_out = ops::ew_binary(g, outv, |g, o| g * o)?;
                let db_full = ops::ew_binary(&g_out, bv, |t, b| -(t / b))?;
                Ok(vec![
                    Some(reduce_to_shape(&da_full, av.shape())),
                    Some(reduce_to_shape(&db_full, bv.shape())),
                ])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![a, b], backward, "div")
    }

    /// Numerically stable log(exp(a) + exp(b)), elementwise with broadcast.
    pub fn logaddexp(&self, a: Var, b: Var) -> Result<Var> {
        let stable = |x: E, y: E| {
            let m = x.max(y);
            m + (E::one() + (-(x - y).abs()).exp()).ln()
        };
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            (
                ops::ew_binary(&nodes[a.0].value, &nodes[b.0].value, stable)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, nodes: &[Node<E>], id: usize| {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let outv = &nodes[id].value;
                // d/da = exp(a - out), d/db = exp(b - out)
                let wa = ops::ew_binary(outv, av, |o, x| (x - o).exp())?;
                let wb = ops::ew_binary(outv, bv, |o, x| (x - o).exp())?;
                let da_full = ops::ew_binary(g, &wa, |g, w| g * w)?;
                let db_full = ops::ew_binary(g, &wb, |g, w| g * w)?;
                Ok(vec![
                    Some(reduce_to_shape(&da_full, av.shape())),
                    Some(reduce_to_shape(&db_full, bv.shape())),
                ])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![a, b], backward, "logaddexp")
    }

    // ── elementwise unary ───────────────────────────────────────────

    /// x * scale + shift (scale and shift are compile-time constants).
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (sc, sh) = (E::from_f64c(scale), E::from_f64c(shift));
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            (
                nodes[x.0].value.map(|v| v * sc + sh),
                nodes[x.0].requires_grad,
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, _nodes: &[Node<E>], _id: usize| {
                Ok(vec![Some(g.map(|v| v * sc))])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![x], backward, "affine")
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let sig = |v: E| {
            if v >= E::zero() {
                E::one() / (E::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (E::one() + e)
            }
        };
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.map(sig), nodes[x.0].requires_grad)
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, nodes: &[Node<E>], id: usize| {
                let outv = &nodes[id].value;
                let dx = ops::ew_binary(g, outv, |g, s| g * s * (E::one() - s))?;
                Ok(vec![Some(dx)])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![x], backward, "sigmoid")
    }

    /// swish(x) = x * sigmoid(x)
    pub fn swish(&self, x: Var) -> Result<Var> {
        let sig = |v: E| {
            if v >= E::zero() {
                E::one() / (E::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (E::one() + e)
            }
        };
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            (
                nodes[x.0].value.map(|v| v * sig(v)),
                nodes[x.0].requires_grad,
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, nodes: &[Node<E>], _id: usize| {
                let xv = &nodes[x.0].value;
                let dx = ops::ew_binary(g, xv, |g, v| {
                    let s = sig(v);
                    g * (s + v * s * (E::one() - s))
                })?;
                Ok(vec![Some(dx)])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![x], backward, "swish")
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.map(|v| v.abs()), nodes[x.0].requires_grad)
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, nodes: &[Node<E>], _id: usize| {
                let xv = &nodes[x.0].value;
                let dx = ops::ew_binary(g, xv, |g, v| {
                    if v > E::zero() {
                        g
                    } else if v < E::zero() {
                        -g
                    } else {
                        E::zero()
                    }
                })?;
                Ok(vec![Some(dx)])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![x], backward, "abs")
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.map(|v| v.sqrt()), nodes[x.0].requires_grad)
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, nodes: &[Node<E>], id: usize| {
                let outv = &nodes[id].value;
                let half = E::from_f64c(0.5);
                let dx = ops::ew_binary(g, outv, |g, s| g * half / s)?;
                Ok(vec![Some(dx)])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![x], backward, "sqrt")
    }

    // ── matmul ──────────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            let plan = ops::matmul_plan(&nodes[a.0].value, &nodes[b.0].value)?;
            (
                ops::matmul_fw(&nodes[a.0].value, &nodes[b.0].value, &plan),
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, nodes: &[Node<E>], _id: usize| {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let plan = ops::matmul_plan(av, bv)?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let mut da = Tensor::zeros(av.shape().to_vec());
                let mut db = Tensor::zeros(bv.shape().to_vec());
                for bi in 0..plan.batch {
                    let gslice = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let aslice = &av.data()[plan.a_offsets[bi]..plan.a_offsets[bi] + m * k];
                    let bslice = &bv.data()[plan.b_offsets[bi]..plan.b_offsets[bi] + k * n];
                    ops::mm_nt_acc(
                        gslice,
                        bslice,
                        m,
                        n,
                        k,
                        &mut da.data_mut()[plan.a_offsets[bi]..plan.a_offsets[bi] + m * k],
                    );
                    ops::mm_tn_acc(
                        aslice,
                        gslice,
                        m,
                        k,
                        n,
                        &mut db.data_mut()[plan.b_offsets[bi]..plan.b_offsets[bi] + k * n],
                    );
                }
                Ok(vec![Some(da), Some(db)])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![a, b], backward, "matmul")
    }

    // ── shape movement ──────────────────────────────────────────────

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let (out, requires, in_shape) = {
            let nodes = self.nodes.borrow();
            (
                nodes[x.0].value.clone().reshaped(shape.clone())?,
                nodes[x.0].requires_grad,
                nodes[x.0].value.shape().to_vec(),
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, _nodes: &[Node<E>], _id: usize| {
                Ok(vec![Some(g.clone().reshaped(in_shape.clone())?)])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![x], backward, "reshape")
    }

    pub fn permute(&self, x: Var, axes: impl Into<Vec<usize>>) -> Result<Var> {
        let axes = axes.into();
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            (
                ops::permute_fw(&nodes[x.0].value, &axes)?,
                nodes[x.0].requires_grad,
            )
        };
        let inverse = ops::invert_permutation(&axes);
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, _nodes: &[Node<E>], _id: usize| {
                Ok(vec![Some(ops::permute_fw(g, &inverse)?)])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![x], backward, "permute")
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let (out, requires, part_extents) = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor<E>> = parts.iter().map(|p| &nodes[p.0].value).collect();
            let out = ops::concat_fw(&tensors, axis)?;
            let requires = parts.iter().any(|p| nodes[p.0].requires_grad);
            let extents: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
            (out, requires, extents)
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, _nodes: &[Node<E>], _id: usize| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(part_extents.len());
                for &extent in &part_extents {
                    grads.push(Some(ops::slice_fw(g, axis, offset, extent)?));
                    offset += extent;
                }
                Ok(grads)
            }) as BackwardFn<E>
        });
        self.push(out, requires, parts.to_vec(), backward, "concat")
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (out, requires, in_shape) = {
            let nodes = self.nodes.borrow();
            (
                ops::slice_fw(&nodes[x.0].value, axis, start, len)?,
                nodes[x.0].requires_grad,
                nodes[x.0].value.shape().to_vec(),
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, _nodes: &[Node<E>], _id: usize| {
                Ok(vec![Some(ops::slice_bw(g, &in_shape, axis, start))])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![x], backward, "slice")
    }

    // ── normalization / activations over axes ───────────────────────

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            ops::check_axis(nodes[x.0].value.shape(), axis)?;
            (
                ops::softmax_fw(&nodes[x.0].value, axis),
                nodes[x.0].requires_grad,
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, nodes: &[Node<E>], id: usize| {
                Ok(vec![Some(ops::softmax_bw(&nodes[id].value, g, axis))])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![x], backward, "softmax")
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            ops::check_axis(nodes[x.0].value.shape(), axis)?;
            (
                ops::log_softmax_fw(&nodes[x.0].value, axis),
                nodes[x.0].requires_grad,
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, nodes: &[Node<E>], id: usize| {
                Ok(vec![Some(ops::log_softmax_bw(&nodes[id].value, g, axis))])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![x], backward, "log_softmax")
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let eps_e = E::from_f64c(eps);
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            (
                ops::layer_norm_fw(
                    &nodes[x.0].value,
                    &nodes[gamma.0].value,
                    &nodes[beta.0].value,
                    eps_e,
                )?,
                nodes[x.0].requires_grad
                    || nodes[gamma.0].requires_grad
                    || nodes[beta.0].requires_grad,
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, nodes: &[Node<E>], _id: usize| {
                let (dx, dgamma, dbeta) =
                    ops::layer_norm_bw(&nodes[x.0].value, &nodes[gamma.0].value, g, eps_e);
                Ok(vec![Some(dx), Some(dgamma), Some(dbeta)])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![x, gamma, beta], backward, "layer_norm")
    }

    /// Per-channel 1-d convolution, same padding, odd kernel width.
    pub fn depthwise_conv1d(&self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            (
                ops::dw_conv1d_fw(&nodes[x.0].value, &nodes[kernel.0].value, stride)?,
                nodes[x.0].requires_grad || nodes[kernel.0].requires_grad,
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, nodes: &[Node<E>], _id: usize| {
                let (dx, dk) =
                    ops::dw_conv1d_bw(&nodes[x.0].value, &nodes[kernel.0].value, g, stride);
                Ok(vec![Some(dx), Some(dk)])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![x, kernel], backward, "depthwise_conv1d")
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let (out, requires, in_shape) = {
            let nodes = self.nodes.borrow();
            let total: E = nodes[x.0].value.data().iter().cloned().sum();
            (
                Tensor::scalar(total),
                nodes[x.0].requires_grad,
                nodes[x.0].value.shape().to_vec(),
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, _nodes: &[Node<E>], _id: usize| {
                Ok(vec![Some(Tensor::full(in_shape.clone(), g.data()[0]))])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![x], backward, "sum_all")
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let n = {
            let nodes = self.nodes.borrow();
            nodes[x.0].value.numel()
        };
        if n == 0 {
            return Err(Error::Usage("mean of an empty tensor".into()));
        }
        let s = self.sum_all(x)?;
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    pub fn sum_axis(&self, x: Var, axis: usize, keepdims: bool) -> Result<Var> {
        let (out, requires, in_shape) = {
            let nodes = self.nodes.borrow();
            ops::check_axis(nodes[x.0].value.shape(), axis)?;
            (
                ops::sum_axis_fw(&nodes[x.0].value, axis, keepdims),
                nodes[x.0].requires_grad,
                nodes[x.0].value.shape().to_vec(),
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, _nodes: &[Node<E>], _id: usize| {
                Ok(vec![Some(ops::sum_axis_bw(g, &in_shape, axis))])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![x], backward, "sum_axis")
    }

    // ── gathers ─────────────────────────────────────────────────────

    /// Per-batch class selection: x (B,T,V) and an index table (B,S) yield
    /// (B,T,S). Indices are data, not differentiable inputs.
    pub fn gather_classes(&self, x: Var, idx: Vec<u32>, s: usize) -> Result<Var> {
        let (out, requires) = {
            let nodes = self.nodes.borrow();
            (
                ops::gather_classes_fw(&nodes[x.0].value, &idx, s)?,
                nodes[x.0].requires_grad,
            )
        };
        let backward: Option<BackwardFn<E>> = requires.then(|| {
            Box::new(move |g: &Tensor<E>, nodes: &[Node<E>], _id: usize| {
                Ok(vec![Some(ops::gather_classes_bw(
                    g,
                    &idx,
                    nodes[x.0].value.shape(),
                ))])
            }) as BackwardFn<E>
        });
        self.push(out, requires, vec![x], backward, "gather_classes")
    }
}

// ── named parameter storage ─────────────────────────────────────────

/// Index of a parameter within a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct Param<E: Scalar> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
}

/// Ordered, uniquely named parameter collection. Binding clones values onto
/// a tape as leaves; `absorb_grads` pulls the tape's leaf gradients back.
pub struct ParamSet<E: Scalar> {
    params: Vec<Param<E>>,
}

impl<E: Scalar> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar element count across all parameters.
    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<E> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<E> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<E>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<E>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<E>> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape().to_vec());
        }
    }

    /// Record every parameter on `tape`; `trainable` controls requires_grad.
    pub fn bind(&self, tape: &Tape<E>, trainable: bool) -> Result<Bound> {
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            vars.push(tape.leaf(p.value.clone(), trainable)?);
        }
        Ok(Bound { vars })
    }

    /// Accumulate the tape's leaf gradients into `grad` buffers.
    pub fn absorb_grads(&mut self, tape: &Tape<E>, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                p.grad.add_assign(&g)?;
            }
        }
        Ok(())
    }
}

/// Tape bindings of a [`ParamSet`], index-aligned with it.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
