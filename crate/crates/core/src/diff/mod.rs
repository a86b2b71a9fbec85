//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted node holding a value, its parents and a
//! backward rule. Leaves created with [`Var::leaf`] request gradients;
//! [`Var::constant`] values do not, and operations whose inputs are all
//! constants record nothing (tracing off). Hand-derived backward rules are
//! plugged in through [`CustomGradOp`].

mod conv;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::{conv2d_forward, conv_out_extent};
pub use ops::sigmoid as sigmoid_fn;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Per-parent gradient rule: `(parents, output value, upstream gradient) -> grads`.
pub(crate) type BackwardFn = Box<dyn Fn(&[Var], &Tensor, &Tensor) -> Result<Vec<Option<Tensor>>>>;

/// An operation with a hand-written backward rule.
pub trait CustomGradOp {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// One entry per input, shape-matched to that input. `None` marks an
    /// input the op does not differentiate.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        upstream: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

/// A node of the differentiation graph.
pub struct DiffNode {
    id: usize,
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    grad: RefCell<Option<Tensor>>,
}

/// Shared handle to a [`DiffNode`].
#[derive(Clone)]
pub struct Var(Rc<DiffNode>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    fn make(value: Tensor, parents: Vec<Var>, backward: Option<BackwardFn>, requires_grad: bool) -> Var {
        Var(Rc::new(DiffNode {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            parents,
            backward,
            requires_grad,
            grad: RefCell::new(None),
        }))
    }

    /// A differentiable input.
    pub fn leaf(value: Tensor) -> Var {
        Self::make(value, Vec::new(), None, true)
    }

    /// A non-differentiable input.
    pub fn constant(value: Tensor) -> Var {
        Self::make(value, Vec::new(), None, false)
    }

    /// Records the result of an operation. When no parent requires a
    /// gradient the parents and rule are dropped.
    pub(crate) fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::make(value, parents, Some(backward), true)
        } else {
            Self::make(value, Vec::new(), None, false)
        }
    }

    /// Applies a [`CustomGradOp`] to `inputs`.
    pub fn apply(op: Rc<dyn CustomGradOp>, inputs: &[&Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| v.value()).collect();
        let out = op.forward(&values)?;
        let parents: Vec<Var> = inputs.iter().map(|&v| v.clone()).collect();
        Ok(Var::from_op(
            out,
            parents,
            Box::new(move |parents, output, upstream| {
                let values: Vec<&Tensor> = parents.iter().map(|p| p.value()).collect();
                let grads = op.backward(&values, output, upstream)?;
                if grads.len() != parents.len() {
                    return Err(Error::config(format!(
                        "{} backward returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        parents.len()
                    )));
                }
                Ok(grads)
            }),
        ))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    /// The accumulated gradient of a leaf after [`Var::backward`].
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A constant copy of the current value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    /// Back-propagates from a scalar root. Every reachable leaf receives
    /// `d root / d leaf` in its accumulator; the returned map holds the same
    /// values keyed by node id.
    pub fn backward(&self) -> Result<Gradients> {
        if self.value().len() != 1 {
            return Err(Error::NonScalarRoot(self.shape().to_vec()));
        }
        let mut grads: HashMap<usize, Tensor> = HashMap::new();
        if !self.requires_grad() {
            return Ok(Gradients { map: grads });
        }

        // Node ids grow monotonically, so descending id order is a valid
        // reverse topological order.
        let mut order: Vec<Var> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !seen.insert(v.id()) {
                continue;
            }
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push(p.clone());
                }
            }
            order.push(v);
        }
        order.sort_by(|a, b| b.id().cmp(&a.id()));

        grads.insert(self.id(), Tensor::ones(self.shape()));
        let mut leaves = HashMap::new();
        for node in &order {
            let Some(upstream) = grads.get(&node.id()).cloned() else {
                continue;
            };
            let Some(rule) = &node.0.backward else {
                leaves.insert(node.id(), upstream);
                continue;
            };
            grads.remove(&node.id());
            let parent_grads = rule(&node.0.parents, &node.0.value, &upstream)?;
            for (p, g) in node.0.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !p.requires_grad() {
                    continue;
                }
                g.same_shape(p.value(), "backward")?;
                match grads.get_mut(&p.id()) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        grads.insert(p.id(), g);
                    }
                }
            }
        }
        for node in &order {
            if node.0.backward.is_none() {
                if let Some(g) = leaves.get(&node.id()) {
                    let mut cell = node.0.grad.borrow_mut();
                    match cell.as_mut() {
                        Some(acc) => acc.add_assign(g)?,
                        None => *cell = Some(g.clone()),
                    }
                }
            }
        }
        Ok(Gradients { map: leaves })
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.map.get(&v.id())
    }

    /// Gradient of `v`, or zeros of its shape when `v` was unreachable.
    pub fn get_or_zeros(&self, v: &Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

/// Central finite-difference gradient of a scalar function, used by tests
/// and the self-check battery.
pub fn finite_difference(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// `max |a - b| / max(max |b|, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff = a.max_abs_diff(b).unwrap_or(f64::INFINITY);
    diff / b.max_abs().max(floor)
}
