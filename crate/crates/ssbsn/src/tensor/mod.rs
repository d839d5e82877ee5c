//! Dense rank-4 tensors with a reverse-mode differentiation tape.
//!
//! Every value is a `(batch, channel, height, width)` array stored row-major.
//! Operations record themselves on a [`Tape`] when any input participates in
//! one; [`Tensor::backward`] replays the tape in reverse and accumulates
//! gradients for every reachable leaf.
//!
//! Forward/backward over one tape is single-threaded; independent tapes share
//! no mutable state.

mod conv;
mod ops;

pub use conv::conv2d;
pub use ops::{
    batch_to_space, bmm, bmm_nt, concat_channels, cosine_matrix, from_rows, grid_merge,
    grid_partition, layer_norm_channels, softmax_rows, space_to_batch, to_rows, GridView,
    COSINE_EPS, LAYER_NORM_EPS,
};

use crate::scalar::Scalar;
use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

/// Shape of a rank-4 tensor: `(batch, channels, rows, cols)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of `(n, c, y, x)`.
    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

pub type NodeId = usize;

/// Per-node gradient buffers, indexed by node id.
pub struct GradBuf<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradBuf<T> {
    /// Gradient accumulator for `id`, zero-initialized on first touch.
    pub fn accum(&mut self, id: NodeId, len: usize) -> &mut [T] {
        self.slots[id].get_or_insert_with(|| vec![T::zero(); len])
    }
}

type BackFn<T> = Box<dyn Fn(&[T], &mut GradBuf<T>)>;

struct Node<T> {
    len: usize,
    /// `None` marks a leaf: its gradient is kept after backward.
    back: Option<BackFn<T>>,
}

/// Records operations in topological order for reverse-mode differentiation.
pub struct Tape<T> {
    inner: Rc<RefCell<Vec<Node<T>>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn push(&self, len: usize, back: Option<BackFn<T>>) -> NodeId {
        let mut nodes = self.inner.borrow_mut();
        nodes.push(Node { len, back });
        nodes.len() - 1
    }

    /// Register `t` as a differentiable leaf on this tape.
    pub fn leaf(&self, t: &Tensor<T>) -> Tensor<T> {
        assert!(t.node.is_none(), "tensor is already on a tape");
        let id = self.push(t.shape.len(), None);
        Tensor {
            shape: t.shape,
            data: Arc::clone(&t.data),
            node: Some((self.clone(), id)),
        }
    }
}

/// Gradients produced by one backward sweep, keyed by tape node.
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `t`, as a tensor of the same shape.
    /// `None` when `t` was not reachable from the loss.
    pub fn get(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let (_, id) = t.node.as_ref()?;
        let g = self.slots.get(*id)?.as_ref()?;
        Some(Tensor::from_vec(t.shape, g.clone()))
    }

    pub(crate) fn by_node(&self, id: NodeId) -> Option<&[T]> {
        self.slots.get(id)?.as_deref()
    }
}

/// Dense rank-4 tensor, optionally attached to a tape node.
#[derive(Clone)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
    node: Option<(Tape<T>, NodeId)>,
}

impl<T: std::fmt::Debug> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("recorded", &self.node.is_some())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.len(),
            "data length {} does not match shape {}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn from_arc(shape: Shape, data: Arc<Vec<T>>) -> Self {
        assert_eq!(data.len(), shape.len());
        Tensor {
            shape,
            data,
            node: None,
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::from_vec(shape, vec![T::zero(); shape.len()])
    }

    pub fn full(shape: Shape, v: f64) -> Self {
        Tensor::from_vec(shape, vec![T::from_f64(v); shape.len()])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(Shape::scalar(), vec![T::from_f64(v)])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.shape.len(), 1, "item() requires a scalar tensor");
        self.data[0]
    }

    /// Detached copy: same values, no tape participation.
    pub fn detach(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate (sum) over
    /// fan-out; every reachable leaf ends up with a gradient of its own shape.
    pub fn backward(&self) -> Gradients<T> {
        let (tape, loss_id) = self
            .node
            .as_ref()
            .expect("backward requires a tensor recorded on a tape");
        assert_eq!(
            self.shape.len(),
            1,
            "backward is defined for scalar tensors only, got shape {}",
            self.shape
        );
        let nodes = tape.inner.borrow();
        let mut buf = GradBuf {
            slots: (0..nodes.len()).map(|_| None).collect(),
        };
        buf.slots[*loss_id] = Some(vec![T::one()]);
        for id in (0..=*loss_id).rev() {
            let Some(g) = buf.slots[id].take() else {
                continue;
            };
            debug_assert_eq!(g.len(), nodes[id].len);
            match &nodes[id].back {
                Some(back) => back(&g, &mut buf),
                None => buf.slots[id] = Some(g), // leaf: keep
            }
        }
        Gradients { slots: buf.slots }
    }
}

/// Tape shared by `inputs`, if any of them is recorded. Panics when inputs
/// sit on different tapes.
pub(crate) fn joint_tape<T: Scalar>(inputs: &[&Tensor<T>]) -> Option<Tape<T>> {
    let mut found: Option<Tape<T>> = None;
    for t in inputs {
        if let Some((tape, _)) = &t.node {
            match &found {
                None => found = Some(tape.clone()),
                Some(f) => assert!(f.same_tape(tape), "inputs recorded on different tapes"),
            }
        }
    }
    found
}

/// Every forward operation must produce finite values; NaN/Inf is an error
/// state, reported at the op that created it.
pub(crate) fn assert_finite<T: Scalar>(op: &str, data: &[T]) {
    for v in data {
        assert!(v.is_finite(), "{op} produced a non-finite value {v}");
    }
}

/// Attach `data` as the output of an op whose backward pass is `back`.
pub(crate) fn record_output<T: Scalar>(
    op: &str,
    tape: Option<Tape<T>>,
    shape: Shape,
    data: Vec<T>,
    back: impl FnOnce() -> BackFn<T>,
) -> Tensor<T> {
    assert_finite(op, &data);
    let mut out = Tensor::from_vec(shape, data);
    if let Some(tape) = tape {
        let id = tape.push(shape.len(), Some(back()));
        out.node = Some((tape, id));
    }
    out
}
