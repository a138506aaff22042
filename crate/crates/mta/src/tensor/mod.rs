//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tensor`] is an immutable value. Operations on tensors that track
//! gradients record a node (the operation tag plus input edges) into the
//! result, forming a DAG. [`backward`] walks that DAG once in reverse
//! topological order and accumulates gradients additively into every tracked
//! tensor, so using a leaf twice yields the sum of both path gradients.
//!
//! Tensors are row-major. A rank-0 tensor (empty shape) is a scalar.

mod adam;
mod gradcheck;
mod ops;

pub use adam::{AdamConfig, AdamState, ParamSet};
pub use gradcheck::{finite_diff_gradient, max_rel_err, rel_err};
pub use ops::{cross_entropy, cross_entropy_per_sample, CE_DELTA};

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{MtaError, Result};
use crate::rng::DetRng;

/// Which p-norm a projection or measurement uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    L2,
    LInf,
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormKind::L2 => write!(f, "l2"),
            NormKind::LInf => write!(f, "inf"),
        }
    }
}

/// Operation tag recorded on a non-leaf node. Carries whatever static
/// parameters the backward rule needs.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    ClampMin(f64),
    Relu,
    Tanh,
    Log,
    Exp,
    Sqrt,
    Matmul,
    Conv2d { stride: usize, pad: usize },
    Sum,
    Mean,
    SumAxis { axis: usize },
    MeanAxis { axis: usize },
    Reshape,
    Upsample2x,
    Concat { axis: usize },
    Softmax { axis: usize },
    ProjectNorm { eps: f64, p: NormKind },
    ProjectNormBatch { eps: f64, p: NormKind },
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct TensorData {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Op>,
    inputs: Vec<Tensor>,
}

/// Immutable dense f64 tensor, cheaply cloneable (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<TensorData>,
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| MtaError::shape("tensor", format!("shape {shape:?} overflows")))
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Option<Op>,
        inputs: Vec<Tensor>,
    ) -> Tensor {
        debug_assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "internal: data length does not match shape"
        );
        Tensor {
            inner: Arc::new(TensorData {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op,
                inputs,
            }),
        }
    }

    /// Constant tensor (does not track gradients).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        if data.len() != n {
            return Err(MtaError::shape(
                "from_vec",
                format!("{} values for shape {shape:?} ({n} expected)", data.len()),
            ));
        }
        Ok(Tensor::build(shape.to_vec(), data, false, None, vec![]))
    }

    /// Leaf tensor that tracks gradients (a trainable parameter or an input
    /// being attacked).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(Tensor::build(t.inner.shape.clone(), t.inner.data.clone(), true, None, vec![]))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::build(shape.to_vec(), vec![0.0; n], false, None, vec![])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::build(shape.to_vec(), vec![value; n], false, None, vec![])
    }

    /// Rank-0 scalar constant.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![], vec![value], false, None, vec![])
    }

    /// Constant tensor with i.i.d. normal entries scaled by `std`.
    pub fn randn(rng: &mut DetRng, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Tensor::build(shape.to_vec(), data, false, None, vec![])
    }

    /// Constant tensor with i.i.d. uniform entries in `[0, 1)`.
    pub fn rand_uniform(rng: &mut DetRng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform()).collect();
        Tensor::build(shape.to_vec(), data, false, None, vec![])
    }

    pub(crate) fn node(shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: Vec<Tensor>) -> Tensor {
        let tracked = inputs.iter().any(|t| t.requires_grad());
        if tracked {
            Tensor::build(shape, data, true, Some(op), inputs)
        } else {
            // Nothing upstream wants gradients: drop the graph edges so
            // evaluation-only code never retains memory for backprop.
            Tensor::build(shape, data, false, None, vec![])
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    /// Value of a scalar (rank-0 or single-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    /// True when both handles share the same storage.
    pub fn ptr_eq(a: &Tensor, b: &Tensor) -> bool {
        Arc::ptr_eq(&a.inner, &b.inner)
    }

    /// Copy of the accumulated gradient, if any has been produced.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    pub(crate) fn accum_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Constant copy detached from the graph.
    pub fn detached(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.inner.data.clone(), false, None, vec![])
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn inputs(&self) -> &[Tensor] {
        &self.inner.inputs
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.inner.op.as_ref()
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &&self.inner.data[..self.inner.data.len().min(8)])
            .finish()
    }
}

/// Post-order over the tracked ancestry of `root` (children before parents).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    visited.insert(root.id());
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    while let Some((node, cursor)) = stack.pop() {
        let inputs = node.inputs();
        let mut advanced = false;
        for (c, child) in inputs.iter().enumerate().skip(cursor) {
            if child.requires_grad() && !visited.contains(&child.id()) {
                visited.insert(child.id());
                stack.push((node.clone(), c + 1));
                stack.push((child.clone(), 0));
                advanced = true;
                break;
            }
        }
        if !advanced {
            order.push(node);
        }
    }
    order
}

/// Run reverse-mode differentiation from a scalar loss.
///
/// Gradients accumulate additively into every tracked tensor reachable from
/// `loss`; call [`Tensor::zero_grad`] (or let the optimizer do it) between
/// steps. Returns an error for a non-scalar loss or one that does not depend
/// on any tracked tensor.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(MtaError::Graph(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(MtaError::Graph(
            "loss does not depend on any gradient-tracked tensor".into(),
        ));
    }
    loss.accum_grad(&[1.0]);
    let order = topo_order(loss);
    for node in order.iter().rev() {
        if node.op().is_some() {
            ops::backprop_node(node);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(2.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 2.5);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).unwrap_err();
        assert!(matches!(err, MtaError::Shape { .. }));
    }

    #[test]
    fn constant_ops_record_no_graph() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::from_vec(vec![3.0, 4.0], &[2]).unwrap();
        let c = a.add(&b).unwrap();
        assert!(!c.requires_grad());
        assert!(c.op().is_none());
        assert!(c.inputs().is_empty());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let a = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let b = a.relu();
        let err = backward(&b).unwrap_err();
        assert!(matches!(err, MtaError::Graph(_)));
    }

    #[test]
    fn leaf_used_twice_accumulates_both_paths() {
        // y = a*a + a  =>  dy/da = 2a + 1
        let a = Tensor::param(vec![3.0], &[1]).unwrap();
        let y = a.mul(&a).unwrap().add(&a).unwrap().sum();
        backward(&y).unwrap();
        let g = a.grad().unwrap();
        assert!((g[0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn two_backward_calls_add_gradients() {
        let a = Tensor::param(vec![2.0], &[1]).unwrap();
        let y1 = a.mul(&a).unwrap().sum();
        backward(&y1).unwrap();
        let first = a.grad().unwrap()[0];
        let y2 = a.mul(&a).unwrap().sum();
        backward(&y2).unwrap();
        let second = a.grad().unwrap()[0];
        assert!((second - 2.0 * first).abs() < 1e-12);
        a.zero_grad();
        assert!(a.grad().is_none());
    }

    #[test]
    fn detached_shares_values_but_not_graph() {
        let a = Tensor::param(vec![1.0, -1.0], &[2]).unwrap();
        let d = a.detached();
        assert_eq!(d.data(), a.data());
        assert!(!d.requires_grad());
    }
}
