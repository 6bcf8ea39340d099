//! Reverse-mode automatic differentiation on dense tensors.
//!
//! A [`Tape`] records every tensor produced during a forward pass as a node
//! holding its value, shape, and an optional backward closure. Nodes are
//! appended in creation order, which is already a topological order, so
//! [`Tensor::backward`] is a single reverse sweep over node indices. Fan-out
//! (the same tensor feeding several ops) accumulates gradients additively.
//! Everything runs on one thread per tape; batch parallelism is obtained by
//! giving each item its own tape.
//!
//! The element type is generic over [`Element`]: training runs in `f32`,
//! gradient checking in `f64`.

mod archive;
mod ops;
mod optim;

pub use archive::{load_weights, save_weights, WeightEntry};
pub use optim::{adam_step, AdamConfig, AdamState};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Scalar types the engine can compute with.
pub trait Element:
    num_traits::Float + ndarray::LinalgScalar + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Dtype name used in diagnostics.
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// Number of elements implied by a shape.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Backward closure: maps the output gradient to `(parent index, gradient
/// contribution)` pairs, reading any forward values it needs from the tape.
pub(crate) type BackFn<T> = Box<dyn Fn(&TapeNodes<T>, &[T]) -> Vec<(usize, Vec<T>)>>;

pub(crate) struct Node<T: Element> {
    value: Vec<T>,
    /// Leaf flag: gradients are retained for this node.
    requires_grad: bool,
    back: Option<BackFn<T>>,
}

/// Read-only view of recorded nodes, handed to backward closures.
pub(crate) struct TapeNodes<T: Element> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Element> TapeNodes<T> {
    pub(crate) fn data(&self, idx: usize) -> &[T] {
        &self.nodes[idx].value
    }

    /// Whether gradient flow into `idx` serves any purpose.
    pub(crate) fn needs_grad(&self, idx: usize) -> bool {
        let n = &self.nodes[idx];
        n.requires_grad || n.back.is_some()
    }
}

/// Records a computation graph and owns every tensor built on it.
pub struct Tape<T: Element> {
    inner: Rc<RefCell<TapeNodes<T>>>,
}

impl<T: Element> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    /// Fresh tape with gradient recording enabled.
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeNodes { nodes: Vec::new(), recording: true })),
        }
    }

    /// Toggles recording; with recording off no backward closures are kept,
    /// which turns forward passes into plain inference.
    pub fn set_recording(&self, recording: bool) {
        self.inner.borrow_mut().recording = recording;
    }

    /// Whether backward closures are currently being recorded.
    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Whether the tape holds no nodes yet.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Creates a leaf tensor. Leaves with `requires_grad` retain gradients
    /// in [`Gradients`]; others (inputs, constants) do not.
    pub fn leaf(&self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Tensor<T>> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(format!(
                "leaf data of {} elements does not fill shape {:?}",
                data.len(),
                shape
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("leaf tensor holds non-finite values".into()));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, None))
    }

    /// Creates a constant (no-gradient) leaf.
    pub fn constant(&self, shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        self.leaf(shape, data, false)
    }

    /// Constant scalar.
    pub fn scalar(&self, v: f64) -> Result<Tensor<T>> {
        self.constant(&[1], vec![T::from_f64(v)])
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
        back: Option<BackFn<T>>,
    ) -> Tensor<T> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        inner.nodes.push(Node { value, requires_grad, back });
        Tensor { tape: self.clone(), idx, shape }
    }

    /// Records the result of an op. `back` is only built (and aux data only
    /// captured) when recording is on and some parent can use a gradient.
    pub(crate) fn push_op(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        parents: &[usize],
        back: impl FnOnce() -> BackFn<T>,
    ) -> Tensor<T> {
        let wants = {
            let inner = self.inner.borrow();
            inner.recording && parents.iter().any(|&p| inner.needs_grad(p))
        };
        let back = if wants { Some(back()) } else { None };
        self.push(shape, value, false, back)
    }

    pub(crate) fn with_nodes<R>(&self, f: impl FnOnce(&TapeNodes<T>) -> R) -> R {
        f(&self.inner.borrow())
    }

    fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

/// Handle to one node of a tape.
pub struct Tensor<T: Element> {
    pub(crate) tape: Tape<T>,
    pub(crate) idx: usize,
    shape: Vec<usize>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { tape: self.tape.clone(), idx: self.idx, shape: self.shape.clone() }
    }
}

impl<T: Element> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    /// Copy of the tensor's value.
    pub fn value(&self) -> Vec<T> {
        self.tape.with_nodes(|n| n.data(self.idx).to_vec())
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "item() needs a one-element tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.tape.with_nodes(|n| n.data(self.idx)[0]))
    }

    pub(crate) fn same_tape(&self, other: &Tensor<T>) -> Result<()> {
        if self.tape.same_tape(&other.tape) {
            Ok(())
        } else {
            Err(Error::invalid("tensors live on different tapes"))
        }
    }

    /// Reverse sweep from this scalar, returning gradients for every
    /// `requires_grad` leaf that influenced it.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape
            )));
        }
        let inner = self.tape.inner.borrow();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.idx + 1];
        grads[self.idx] = Some(vec![T::one()]);
        for i in (0..=self.idx).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &inner.nodes[i];
            let Some(back) = &node.back else { continue };
            // Interior node: propagate and free its gradient buffer.
            let g = grads[i].take().expect("checked above");
            let contributions = back(&inner, &g);
            for (parent, contrib) in contributions {
                debug_assert!(parent < i, "backward edge {parent} -> {i} is not topological");
                if !inner.needs_grad(parent) {
                    continue;
                }
                debug_assert_eq!(contrib.len(), inner.nodes[parent].value.len());
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a = *a + *c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        // Keep gradients only for requires_grad leaves.
        for (i, g) in grads.iter_mut().enumerate() {
            if !inner.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { tape_id: self.tape.id(), grads })
    }
}

/// Gradients of one backward sweep, addressed by leaf tensor.
pub struct Gradients<T: Element> {
    tape_id: usize,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `leaf`, if it was recorded.
    pub fn get(&self, leaf: &Tensor<T>) -> Option<&[T]> {
        if leaf.tape.id() != self.tape_id {
            return None;
        }
        self.grads.get(leaf.idx)?.as_deref()
    }
}

/// Verifies analytic gradients against central finite differences.
///
/// `f` rebuilds the forward pass on the given tape from leaf tensors shaped
/// per `inputs`; it must return a scalar. Every input element is perturbed by
/// `±1e-4` in `f64`. Returns `‖analytic − numeric‖∞ / max(1, ‖numeric‖∞)`
/// taken over all elements of all inputs, so near-zero gradient vectors are
/// compared absolutely.
pub fn gradient_check<F>(inputs: &[(Vec<usize>, Vec<f64>)], f: F) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    gradient_check_with_step(inputs, 1e-4, f)
}

/// [`gradient_check`] with an explicit perturbation step.
///
/// Deep compositions can carry third derivatives large enough that the
/// central-difference truncation error at step `1e-4` rivals the tolerance;
/// a smaller step keeps the comparison meaningful for those graphs.
pub fn gradient_check_with_step<F>(
    inputs: &[(Vec<usize>, Vec<f64>)],
    step: f64,
    f: F,
) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }

    let eval = |points: &[Vec<f64>]| -> Result<f64> {
        let tape = Tape::<f64>::new();
        tape.set_recording(false);
        let leaves: Vec<Tensor<f64>> = inputs
            .iter()
            .zip(points)
            .map(|((shape, _), data)| tape.leaf(shape, data.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        f(&tape, &leaves)?.item()
    };

    // Analytic gradients.
    let tape = Tape::<f64>::new();
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(shape, data)| tape.leaf(shape, data.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&tape, &leaves)?;
    let grads = loss.backward()?;

    let mut max_diff = 0.0_f64;
    let mut max_numeric = 0.0_f64;
    let mut points: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(leaf)
            .ok_or_else(|| Error::Numeric(format!("no gradient recorded for input {which}")))?
            .to_vec();
        for elem in 0..points[which].len() {
            let orig = points[which][elem];
            points[which][elem] = orig + step;
            let up = eval(&points)?;
            points[which][elem] = orig - step;
            let down = eval(&points)?;
            points[which][elem] = orig;
            let numeric = (up - down) / (2.0 * step);
            max_diff = max_diff.max((analytic[elem] - numeric).abs());
            max_numeric = max_numeric.max(numeric.abs());
        }
    }
    Ok(max_diff / max_numeric.max(1.0))
}

/// Finite-difference checks every differentiable op at a small fixed input,
/// returning `(op name, max relative gradient error)` pairs.
///
/// Inputs stay clear of kink points (relu at zero, pooling ties), since a
/// central difference straddling one is meaningless.
pub fn op_gradient_errors(step: f64) -> Result<Vec<(&'static str, f64)>> {
    let x22 = (vec![2, 2], vec![0.7, -1.3, 0.4, 2.1]);
    let y22 = (vec![2, 2], vec![0.2, 0.5, -0.6, 1.1]);
    let x23 = (vec![2, 3], vec![0.5, -0.8, 1.2, -0.3, 0.9, -1.7]);
    let y32 = (vec![3, 2], vec![0.4, -0.2, 0.8, 0.3, -0.5, 1.3]);
    let img = (
        vec![1, 1, 4, 4],
        vec![
            0.31, -0.62, 0.95, 0.17, -0.48, 0.73, -0.29, 0.84, 0.56, -0.91, 0.22, -0.37, 0.68,
            0.13, -0.74, 0.49,
        ],
    );

    let mut out: Vec<(&'static str, f64)> = Vec::new();
    out.push((
        "add",
        gradient_check_with_step(&[x22.clone(), y22.clone()], step, |_, xs| {
            xs[0].add(&xs[1])?.sum_all()
        })?,
    ));
    out.push((
        "mul",
        gradient_check_with_step(&[x22.clone(), y22.clone()], step, |_, xs| {
            xs[0].mul(&xs[1])?.sum_all()
        })?,
    ));
    out.push((
        "scale",
        gradient_check_with_step(&[x23.clone()], step, |_, xs| xs[0].scale(-1.7)?.sum_all())?,
    ));
    out.push((
        "reshape",
        gradient_check_with_step(&[x23.clone(), y32.clone()], step, |_, xs| {
            xs[0].reshape(&[3, 2])?.mul(&xs[1])?.sum_all()
        })?,
    ));
    out.push((
        "transpose",
        gradient_check_with_step(&[x23.clone(), y32.clone()], step, |_, xs| {
            xs[0].transpose(&[1, 0])?.mul(&xs[1])?.sum_all()
        })?,
    ));
    out.push((
        "concat",
        gradient_check_with_step(
            &[x22.clone(), (vec![1, 2], vec![0.9, -0.4]), y32.clone()],
            step,
            |_, xs| Tensor::concat(&[&xs[0], &xs[1]], 0)?.mul(&xs[2])?.sum_all(),
        )?,
    ));
    out.push((
        "slice",
        gradient_check_with_step(&[y32.clone(), x22.clone()], step, |_, xs| {
            xs[0].slice(0, 1, 2)?.mul(&xs[1])?.sum_all()
        })?,
    ));
    out.push((
        "gather",
        gradient_check_with_step(&[x23.clone(), x22.clone()], step, |_, xs| {
            xs[0].gather(&[4, 0, 2, 4], &[2, 2])?.mul(&xs[1])?.sum_all()
        })?,
    ));
    out.push((
        "relu",
        gradient_check_with_step(&[x23.clone(), y32.clone()], step, |_, xs| {
            xs[0].relu()?.reshape(&[3, 2])?.mul(&xs[1])?.sum_all()
        })?,
    ));
    out.push((
        "gelu",
        gradient_check_with_step(&[x23.clone(), y32.clone()], step, |_, xs| {
            xs[0].gelu()?.reshape(&[3, 2])?.mul(&xs[1])?.sum_all()
        })?,
    ));
    out.push((
        "softmax",
        gradient_check_with_step(&[x23.clone(), y32.clone()], step, |_, xs| {
            xs[0].softmax(1)?.reshape(&[3, 2])?.mul(&xs[1])?.sum_all()
        })?,
    ));
    out.push((
        "layer_norm",
        gradient_check_with_step(
            &[
                x23.clone(),
                (vec![3], vec![1.1, 0.9, 1.3]),
                (vec![3], vec![0.1, -0.2, 0.05]),
                y32.clone(),
            ],
            step,
            |_, xs| {
                xs[0]
                    .layer_norm(&xs[1], &xs[2], 1, 1e-5)?
                    .reshape(&[3, 2])?
                    .mul(&xs[3])?
                    .sum_all()
            },
        )?,
    ));
    out.push((
        "matmul",
        gradient_check_with_step(&[x23.clone(), y32.clone()], step, |_, xs| {
            xs[0].matmul(&xs[1])?.sum_all()
        })?,
    ));
    out.push((
        "linear",
        gradient_check_with_step(
            &[x23.clone(), y32.clone(), (vec![2], vec![0.3, -0.6])],
            step,
            |_, xs| xs[0].linear(&xs[1], Some(&xs[2]))?.sum_all(),
        )?,
    ));
    out.push((
        "conv2d",
        gradient_check_with_step(
            &[
                img.clone(),
                (vec![2, 1, 2, 2], vec![0.5, -0.3, 0.8, 0.2, -0.7, 0.4, 0.1, 0.9]),
                (vec![2], vec![0.2, -0.1]),
            ],
            step,
            |_, xs| xs[0].conv2d(&xs[1], Some(&xs[2]), 1, 1)?.sum_all(),
        )?,
    ));
    out.push((
        "max_pool2d",
        gradient_check_with_step(&[img.clone(), x22.clone()], step, |_, xs| {
            xs[0].max_pool2d(2)?.reshape(&[2, 2])?.mul(&xs[1])?.sum_all()
        })?,
    ));
    out.push((
        "mean_pool2d",
        gradient_check_with_step(&[img.clone(), x22.clone()], step, |_, xs| {
            xs[0].mean_pool2d(2)?.reshape(&[2, 2])?.mul(&xs[1])?.sum_all()
        })?,
    ));
    out.push((
        "mse_loss",
        gradient_check_with_step(&[x22.clone(), y22.clone()], step, |_, xs| {
            xs[0].mse_loss(&xs[1])
        })?,
    ));
    out.push((
        "sum_all",
        gradient_check_with_step(&[x23.clone()], step, |_, xs| xs[0].sum_all())?,
    ));
    out.push((
        "mean_all",
        gradient_check_with_step(&[x23.clone()], step, |_, xs| xs[0].mean_all())?,
    ));
    out.push((
        "dropout",
        gradient_check_with_step(&[x23.clone(), y32.clone()], step, |_, xs| {
            xs[0].dropout(0.4, 9)?.reshape(&[3, 2])?.mul(&xs[1])?.sum_all()
        })?,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrips_value_and_shape() {
        let tape = Tape::<f32>::new();
        let t = tape.leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.value(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(tape.leaf(&[2, 2], vec![1.0], true).is_err());
        assert!(tape.leaf(&[1], vec![f32::NAN], true).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f32>::new();
        let t = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(t.backward().is_err());
    }

    #[test]
    fn item_rejects_non_scalar() {
        let tape = Tape::<f32>::new();
        let t = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(t.item().is_err());
        let s = tape.scalar(4.5).unwrap();
        assert_eq!(s.item().unwrap(), 4.5);
    }

    #[test]
    fn every_op_passes_its_gradient_check() {
        for (op, err) in op_gradient_errors(1e-4).unwrap() {
            assert!(err < 1e-4, "{op}: max relative gradient error {err:.3e}");
        }
    }

    #[test]
    fn gradients_are_scoped_to_their_tape() {
        let tape_a = Tape::<f32>::new();
        let a = tape_a.leaf(&[1], vec![2.0], true).unwrap();
        let loss = a.scale(3.0).unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&a).unwrap(), &[3.0]);

        let tape_b = Tape::<f32>::new();
        let b = tape_b.leaf(&[1], vec![2.0], true).unwrap();
        assert!(grads.get(&b).is_none());
    }

    #[test]
    fn fanout_accumulates_additively() {
        // d/dx (x·c1 + x·c2) = c1 + c2.
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&[3], vec![1.0, -2.0, 0.5], true).unwrap();
        let a = x.scale(2.0).unwrap();
        let b = x.scale(5.0).unwrap();
        let sum = a.add(&b).unwrap();
        let loss = sum.sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[7.0, 7.0, 7.0]);
    }

    #[test]
    fn recording_off_skips_backward_closures() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        tape.set_recording(false);
        let y = x.scale(2.0).unwrap();
        assert_eq!(y.value(), vec![2.0, 4.0]);
        tape.set_recording(true);
        // The detached node blocks gradient flow entirely.
        let loss = y.sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(&x).is_none());
    }
}
