use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::array::Array;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct ModeGuard(bool);

impl Drop for ModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Runs `f` with graph recording set to `enabled`, restoring the old mode after.
pub fn with_grad_mode<T>(enabled: bool, f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _guard = ModeGuard(prev);
    f()
}

/// Runs `f` without recording any graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    with_grad_mode(false, f)
}

/// Backward rule of a recorded operation. Rules are written in terms of
/// differentiable tensor ops so they can themselves be differentiated.
pub(crate) trait Op {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

struct Node {
    id: u64,
    value: Array,
    requires_grad: bool,
    op: Option<Box<dyn Op>>,
    inputs: Vec<Tensor>,
}

impl Drop for Node {
    // Long chains (recurrences, double-backward graphs) would otherwise drop
    // recursively.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor> = std::mem::take(&mut self.inputs);
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                stack.append(&mut node.inputs);
            }
        }
    }
}

/// A node in the computation graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl Tensor {
    fn make(value: Array, requires_grad: bool, op: Option<Box<dyn Op>>, inputs: Vec<Tensor>) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op,
            inputs,
        }))
    }

    /// Constant leaf; never receives gradients.
    pub fn constant(value: Array) -> Self {
        Self::make(value, false, None, Vec::new())
    }

    /// Trainable leaf.
    pub fn param(value: Array) -> Self {
        Self::make(value, true, None, Vec::new())
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Array::scalar(v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(Array::zeros(shape))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::constant(Array::ones(shape))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::constant(Array::new(shape, data))
    }

    pub(crate) fn from_op(value: Array, inputs: Vec<Tensor>, op: impl Op + 'static) -> Self {
        if is_grad_enabled() && inputs.iter().any(|t| t.requires_grad()) {
            Self::make(value, true, Some(Box::new(op)), inputs)
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn data(&self) -> &[f64] {
        self.0.value.data()
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.shape().len()
    }

    pub fn numel(&self) -> usize {
        self.0.value.numel()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape()[axis]
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Name of the op that produced this tensor, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|o| o.name())
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.value.clone())
    }

    pub fn to_array(&self) -> Array {
        self.0.value.clone()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, {:?}, grad={}, op={:?})",
            self.0.id,
            self.0.value,
            self.0.requires_grad,
            self.op_name()
        )
    }
}

/// Error raised by [`grad`].
#[derive(Debug, Clone, PartialEq)]
pub enum GradError {
    NotScalar(Vec<usize>),
    NoGraph,
}

impl fmt::Display for GradError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradError::NotScalar(s) => write!(f, "gradient output must be a scalar, got shape {s:?}"),
            GradError::NoGraph => write!(f, "output does not require grad"),
        }
    }
}

impl std::error::Error for GradError {}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for inp in &t.0.inputs {
            if inp.requires_grad() && !seen.contains(&inp.id()) {
                stack.push((inp.clone(), false));
            }
        }
    }
    order
}

/// Gradients of scalar `output` with respect to each tensor in `wrt`.
///
/// Entries are `None` when `output` does not depend on that tensor. With
/// `create_graph` the returned gradients are themselves differentiable.
/// Intermediate (non-leaf) tensors may appear in `wrt`.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Option<Tensor>>, GradError> {
    if output.numel() != 1 {
        return Err(GradError::NotScalar(output.shape().to_vec()));
    }
    if !output.requires_grad() {
        return Ok(vec![None; wrt.len()]);
    }
    let wanted: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
    let order = topo_order(output);
    with_grad_mode(create_graph, || {
        let mut grads: HashMap<u64, Tensor> = HashMap::new();
        let mut kept: HashMap<u64, Tensor> = HashMap::new();
        grads.insert(output.id(), Tensor::ones(output.shape()));
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if wanted.contains(&node.id()) {
                kept.insert(node.id(), g.clone());
            }
            let Some(op) = node.0.op.as_ref() else {
                continue;
            };
            let input_grads = op.backward(&node.0.inputs, node, &g);
            debug_assert_eq!(input_grads.len(), node.0.inputs.len(), "{}", op.name());
            for (inp, gi) in node.0.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if !inp.requires_grad() {
                    continue;
                }
                debug_assert_eq!(gi.shape(), inp.shape(), "grad shape from {}", op.name());
                let acc = match grads.remove(&inp.id()) {
                    Some(prev) => prev.add(&gi),
                    None => gi,
                };
                grads.insert(inp.id(), acc);
            }
        }
        Ok(wrt.iter().map(|t| kept.get(&t.id()).cloned()).collect())
    })
}

/// First-order gradients as arrays, zero-filled for unreachable inputs.
pub fn grad_arrays(output: &Tensor, wrt: &[&Tensor]) -> Result<Vec<Array>, GradError> {
    let gs = grad(output, wrt, false)?;
    Ok(gs
        .into_iter()
        .zip(wrt)
        .map(|(g, t)| g.map(|g| g.to_array()).unwrap_or_else(|| Array::zeros(t.shape())))
        .collect())
}
