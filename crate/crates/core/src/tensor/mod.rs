//! Dense n-dimensional `f64` arrays with tape-free reverse-mode differentiation.
//!
//! Every [`Tensor`] produced by an operation keeps handles to its inputs and a
//! boxed backward rule, so the computation graph is simply the DAG of `Arc`
//! links reachable from a loss. [`Tensor::backward`] sorts that DAG
//! topologically and walks it once in reverse.
//!
//! Layout is always row-major. Volumetric tensors are channel-first
//! `[N, C, D, H, W]`; feature volumes that the method describes as
//! `h × w × d × c` are stored as `[N, c, h, w, d]`.

mod checkpoint;
mod conv;
mod gradcheck;
mod loss;
mod norm;
mod ops;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointEntry};
pub use conv::{conv2d, conv3d, conv_transpose3d, conv_nd, ConvParams};
pub use gradcheck::{finite_difference_check, finite_difference_check_many};
pub use loss::{mse, softmax_cross_entropy, softmax_channels};
pub use norm::instance_norm3d;
pub use ops::Axis;
pub use optim::{Adam, AdamState};

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: std::cell::Cell<bool> = const { std::cell::Cell::new(true) };
}

/// Run `f` without recording operations on this thread (inference).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

/// Backward rule of a recorded operation.
///
/// Receives the gradient flowing into the operation's output and returns one
/// optional gradient per parent, in parent order. `None` means the parent
/// receives no contribution.
pub(crate) trait Backward: Send + Sync {
    fn backward(&self, grad_out: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: AtomicBool,
    op: Option<Box<dyn Backward>>,
    parents: Vec<Tensor>,
}

/// Reference-counted handle to a value in the computation graph.
///
/// Cloning a `Tensor` is cheap and yields another handle to the same node.
#[derive(Clone)]
pub struct Tensor {
    node: Arc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Option<Box<dyn Backward>>,
        parents: Vec<Tensor>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad: AtomicBool::new(requires_grad),
                op,
                parents,
            }),
        }
    }

    /// A constant leaf. Fails if the shape does not match the data length.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized axis in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {} elements but {} were given",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::build(shape.to_vec(), data, false, None, Vec::new()))
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![0.0; numel(shape)], false, None, Vec::new())
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None, Vec::new())
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![1], vec![value], false, None, Vec::new())
    }

    /// Result of an operation. The backward rule is recorded only if some
    /// parent participates in differentiation.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        op: Box<dyn Backward>,
    ) -> Self {
        if GRAD_ENABLED.with(|g| g.get()) && parents.iter().any(Tensor::requires_grad) {
            Self::build(shape, data, true, Some(op), parents)
        } else {
            Self::build(shape, data, false, None, Vec::new())
        }
    }

    pub fn id(&self) -> usize {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.load(Ordering::Relaxed)
    }

    /// Toggle participation in differentiation. Only meaningful on leaves.
    pub fn set_requires_grad(&self, flag: bool) {
        self.node.requires_grad.store(flag, Ordering::Relaxed);
        if !flag {
            *self.node.grad.lock().unwrap() = None;
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.node.data.read().unwrap()
    }

    /// Mutable access to the values. Intended for optimizers and weight
    /// initialization on leaves; mutating an operation output invalidates any
    /// backward pass that depends on it.
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<f64>> {
        self.node.data.write().unwrap()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.shape());
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.node.grad.lock().unwrap();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// A constant copy of the current value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.shape().to_vec(), self.to_vec(), false, None, Vec::new())
    }

    /// Deep copy of the value with the same trainability flag.
    pub fn deep_clone(&self) -> Tensor {
        let t = self.detach();
        t.set_requires_grad(self.requires_grad());
        t
    }

    /// Reverse-mode sweep from a scalar. Gradients are added to whatever is
    /// already stored on each participating tensor; call [`Tensor::zero_grad`]
    /// (or [`Adam::step`], which zeroes) between iterations.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            if let Some(op) = &t.node.op {
                let parent_grads = op.backward(&g, &t.node.parents);
                debug_assert_eq!(parent_grads.len(), t.node.parents.len());
                for (p, pg) in t.node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel());
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
            t.accumulate_grad(&g);
        }
        Ok(())
    }

    /// Nodes reachable through differentiable edges, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children_pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.node.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
