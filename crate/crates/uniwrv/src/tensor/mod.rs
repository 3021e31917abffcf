//! Dense tensor core with reverse-mode differentiation.
//!
//! Tensors are flat `f64` buffers with a shape. Ops record themselves onto a
//! [`Tape`]; one reverse traversal of the tape fills the gradients of every
//! leaf marked `requires_grad`. A tape is confined to one logical thread;
//! separate threads use separate tapes.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub mod gradcheck;
pub mod ops;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Numeric precision of op outputs. Training runs `F32` (outputs rounded to
/// 32-bit after every primitive); gradient checking runs `F64` because finite
/// differences are unreliable at 32-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    has_producer: Cell<bool>,
}

/// Dense n-dimensional array. Cheap to clone (shared buffer).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Rc<Vec<f64>>, requires_grad: bool) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(TensorInner {
                id: fresh_id(),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                has_producer: Cell::new(false),
            }),
        }
    }

    pub fn new(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::build(shape.to_vec(), Rc::new(data), false)
    }

    /// Leaf tensor that collects gradients during `backward`.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::build(shape.to_vec(), Rc::new(data), true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![1.0; n])
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(&[1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| f(i)).collect())
    }

    /// New handle over the same buffer (used by the stop-gradient marker).
    pub(crate) fn sharing_data(other: &Tensor) -> Tensor {
        Tensor::build(other.inner.shape.clone(), Rc::clone(&other.inner.data), false)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn set_grad(&self, g: Vec<f64>) {
        *self.inner.grad.borrow_mut() = Some(g);
    }

    fn mark_produced(&self) {
        self.inner.has_producer.set(true);
    }

    /// Whether backward needs to accumulate a cotangent for this tensor.
    fn wants_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.has_producer.get()
    }
}

/// Cotangent buffers keyed by tensor id, filled during the reverse pass.
#[derive(Default)]
pub struct GradMap {
    map: HashMap<u64, Vec<f64>>,
}

impl GradMap {
    /// Apply `f` to the (zero-initialized) cotangent buffer of `t`. No-op for
    /// tensors that neither require grad nor were produced on the tape.
    pub fn accumulate(&mut self, t: &Tensor, f: impl FnOnce(&mut [f64])) {
        if !t.wants_grad() {
            return;
        }
        let buf = self
            .map
            .entry(t.id())
            .or_insert_with(|| vec![0.0; t.numel()]);
        f(buf);
    }
}

struct Node {
    op: &'static str,
    inputs: Vec<u64>,
    output: u64,
    backward: Box<dyn Fn(&[f64], &mut GradMap)>,
}

/// Ordered record of primitive applications plus the leaves they touched.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    precision: Cell<Precision>,
    leaves: RefCell<Vec<Tensor>>,
    leaf_ids: RefCell<HashSet<u64>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            precision: Cell::new(Precision::F64),
            leaves: RefCell::new(Vec::new()),
            leaf_ids: RefCell::new(HashSet::new()),
        }
    }

    /// Tape that records nothing; forward values only.
    pub fn inference() -> Tape {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn with_precision(precision: Precision) -> Tape {
        let t = Tape::new();
        t.precision.set(precision);
        t
    }

    pub fn set_precision(&self, precision: Precision) {
        self.precision.set(precision);
    }

    pub fn precision(&self) -> Precision {
        self.precision.get()
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Finish an op: round to the active precision, reject non-finite values,
    /// and record the node when the tape is live.
    pub(crate) fn emit(
        &self,
        op: &'static str,
        inputs: &[&Tensor],
        shape: Vec<usize>,
        mut data: Vec<f64>,
        backward: impl Fn(&[f64], &mut GradMap) + 'static,
    ) -> Result<Tensor> {
        if self.precision.get() == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let out = Tensor::build(shape, Rc::new(data), false);
        if self.recording {
            out.mark_produced();
            self.push_node(op, inputs, &out, backward);
        }
        Ok(out)
    }

    pub(crate) fn push_node(
        &self,
        op: &'static str,
        inputs: &[&Tensor],
        output: &Tensor,
        backward: impl Fn(&[f64], &mut GradMap) + 'static,
    ) {
        self.register_leaves(inputs);
        self.nodes.borrow_mut().push(Node {
            op,
            inputs: inputs.iter().map(|t| t.id()).collect(),
            output: output.id(),
            backward: Box::new(backward),
        });
    }

    pub(crate) fn register_leaves(&self, inputs: &[&Tensor]) {
        let mut ids = self.leaf_ids.borrow_mut();
        let mut leaves = self.leaves.borrow_mut();
        for t in inputs {
            if t.requires_grad() && !t.inner.has_producer.get() && ids.insert(t.id()) {
                leaves.push((*t).clone());
            }
        }
    }

    /// True when every node's inputs were produced earlier on the tape or are
    /// leaves. Holds by construction; exposed for the invariant tests.
    pub fn topology_is_ordered(&self) -> bool {
        let nodes = self.nodes.borrow();
        let all_outputs: HashSet<u64> = nodes.iter().map(|n| n.output).collect();
        let mut produced = HashSet::new();
        for n in nodes.iter() {
            for inp in &n.inputs {
                if all_outputs.contains(inp) && !produced.contains(inp) {
                    return false;
                }
            }
            produced.insert(n.output);
        }
        true
    }

    /// Names of recorded ops, in order (diagnostics).
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Reverse pass: seeds `d(loss)/d(loss) = 1`, walks the tape backwards, and
/// stores a gradient on every leaf that was marked `requires_grad` (zeros for
/// leaves the loss does not reach). Replaces any previous gradients.
pub fn backward(tape: &Tape, loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::NotScalar {
            numel: loss.numel(),
        });
    }
    let mut gm = GradMap::default();
    gm.map.insert(loss.id(), vec![1.0]);
    {
        let nodes = tape.nodes.borrow();
        for node in nodes.iter().rev() {
            if let Some(dout) = gm.map.remove(&node.output) {
                (node.backward)(&dout, &mut gm);
            }
        }
    }
    for leaf in tape.leaves.borrow().iter() {
        let g = gm
            .map
            .remove(&leaf.id())
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "backward" });
        }
        leaf.set_grad(g);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::ops;
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]);
        let y = ops::scale(&tape, &x, 2.0).unwrap();
        let err = backward(&tape, &y).unwrap_err();
        assert!(matches!(err, Error::NotScalar { numel: 3 }));
    }

    #[test]
    fn constant_scale_gradient() {
        let tape = Tape::new();
        let x = Tensor::param(&[4], vec![1.0, -2.0, 0.5, 3.0]);
        let y = ops::scale(&tape, &x, 2.0).unwrap();
        let loss = ops::sum(&tape, &y).unwrap();
        backward(&tape, &loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 4]);
    }

    #[test]
    fn stop_gradient_blocks_one_factor() {
        // loss = sum(sg(x) * x)  =>  d/dx = sg(x) values
        let tape = Tape::new();
        let x = Tensor::param(&[3], vec![1.0, -2.0, 3.0]);
        let frozen = ops::stop_grad(&tape, &x);
        let prod = ops::mul(&tape, &frozen, &x).unwrap();
        let loss = ops::sum(&tape, &prod).unwrap();
        backward(&tape, &loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let tape = Tape::new();
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let y = Tensor::param(&[2], vec![5.0, 6.0]);
        let _touch = ops::scale(&tape, &y, 1.0).unwrap();
        let loss = ops::sum(&tape, &x).unwrap();
        backward(&tape, &loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(y.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn tape_records_in_topological_order() {
        let tape = Tape::new();
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let a = ops::scale(&tape, &x, 3.0).unwrap();
        let b = ops::mul(&tape, &a, &x).unwrap();
        let c = ops::add(&tape, &a, &b).unwrap();
        let _loss = ops::sum(&tape, &c).unwrap();
        assert!(tape.topology_is_ordered());
        assert_eq!(tape.node_count(), 4);
    }

    #[test]
    fn shared_leaf_accumulates_across_uses() {
        // loss = sum(x) + sum(x)  =>  d/dx = 2
        let tape = Tape::new();
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let s1 = ops::sum(&tape, &x).unwrap();
        let s2 = ops::sum(&tape, &x).unwrap();
        let loss = ops::add(&tape, &s1, &s2).unwrap();
        backward(&tape, &loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn f32_precision_rounds_outputs() {
        let tape = Tape::with_precision(Precision::F32);
        let x = Tensor::new(&[1], vec![0.1]);
        let y = ops::scale(&tape, &x, 1.0).unwrap();
        assert_eq!(y.item(), 0.1f32 as f64);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::new();
        let x = Tensor::new(&[1], vec![0.0]);
        let err = ops::recip(&tape, &x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
