//! The tape itself: node storage, leaves, constants and the backward pass.

use ndarray::ArrayD;
use std::cell::RefCell;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

static TAPE_COUNTER: AtomicU32 = AtomicU32::new(0);

/// Handle to a node on a [`Tape`]. Cheap to copy; only valid for the tape
/// that created it (checked at use).
#[derive(Copy, Clone, Debug)]
pub struct Var {
    pub(crate) tape_id: u32,
    pub(crate) idx: u32,
}

pub(crate) type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &mut GradBuf)>;

pub(crate) struct Node {
    pub value: Arc<ArrayD<f64>>,
    pub requires_grad: bool,
    pub backward: Option<BackwardFn>,
}

/// Gradient accumulation buffer used during the backward pass.
pub(crate) struct GradBuf {
    pub slots: Vec<Option<ArrayD<f64>>>,
    pub requires: Vec<bool>,
}

impl GradBuf {
    /// Adds `contrib` into the slot for node `idx`, skipping nodes that do
    /// not require gradients.
    pub fn accumulate(&mut self, idx: usize, contrib: ArrayD<f64>) {
        if !self.requires[idx] {
            return;
        }
        match &mut self.slots[idx] {
            Some(g) => *g += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }
}

/// Records a single forward computation.
pub struct Tape {
    pub(crate) id: u32,
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<f64>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            backward,
        });
        Var {
            tape_id: self.id,
            idx,
        }
    }

    /// Differentiable leaf (model parameter or attacked input).
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, true, None)
    }

    /// Non-differentiable leaf; gradients never flow into it.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, false, None)
    }

    /// Value held by a node.
    pub fn value(&self, v: Var) -> Arc<ArrayD<f64>> {
        self.check(v);
        Arc::clone(&self.nodes.borrow()[v.idx as usize].value)
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        a.iter().next().copied().unwrap()
    }

    pub(crate) fn check(&self, v: Var) {
        assert_eq!(v.tape_id, self.id, "Var used with a foreign tape");
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.check(v);
        self.nodes.borrow()[v.idx as usize].requires_grad
    }

    /// Runs reverse-mode accumulation from scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        self.check(loss);
        let nodes = self.nodes.borrow();
        let n = loss.idx as usize + 1;
        let requires: Vec<bool> = nodes.iter().take(n).map(|nd| nd.requires_grad).collect();
        let mut buf = GradBuf {
            slots: vec![None; n],
            requires,
        };
        let seed = ArrayD::<f64>::ones(nodes[loss.idx as usize].value.raw_dim());
        assert_eq!(seed.len(), 1, "backward() requires a scalar loss node");
        buf.slots[loss.idx as usize] = Some(seed);
        for idx in (0..n).rev() {
            if !buf.requires[idx] {
                continue;
            }
            let Some(grad) = buf.slots[idx].take() else {
                continue;
            };
            if let Some(f) = &nodes[idx].backward {
                f(&grad, &mut buf);
            }
            buf.slots[idx] = Some(grad);
        }
        Gradients {
            tape_id: self.id,
            slots: buf.slots,
        }
    }
}

/// Result of a backward pass: per-node gradients.
pub struct Gradients {
    tape_id: u32,
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        assert_eq!(v.tape_id, self.tape_id, "Var used with foreign gradients");
        self.slots.get(v.idx as usize).and_then(|s| s.as_ref())
    }

    /// Gradient with respect to `v`, or a zero array of the given shape.
    pub fn wrt_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(shape.to_vec()))
    }
}
