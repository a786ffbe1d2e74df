//! Tape-based reverse-mode differentiation over real and complex tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute (define-by-run), so
//! every node's parents precede it and node order is already a topological
//! order. A complex value is differentiated as two independent real planes:
//! for a real loss `L` the gradient of a complex node is
//! `(∂L/∂re, ∂L/∂im)`, which is exactly ordinary real backprop on ℝ².
//!
//! ```
//! use phasefort_core::autodiff::{Tape, Value};
//! use phasefort_core::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Value::Real(Tensor::scalar(3.0)), true);
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.real(x).unwrap().item(), 6.0);
//! ```

pub mod gradcheck;
mod ops;
pub mod optim;
pub mod param;

pub use ops::NormStats;
pub(crate) use ops::softmax_rows;
pub use param::{ParamId, ParamStore, Parameter};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ComplexTensor, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Value<T> {
    Real(Tensor<T>),
    Complex(ComplexTensor<T>),
}

impl<T: Scalar> Value<T> {
    pub fn shape(&self) -> &[usize] {
        match self {
            Value::Real(t) => t.shape(),
            Value::Complex(z) => z.shape(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Value::Real(t) => t.is_finite(),
            Value::Complex(z) => z.is_finite(),
        }
    }

    pub fn is_complex(&self) -> bool {
        matches!(self, Value::Complex(_))
    }

    pub fn as_real(&self) -> Result<&Tensor<T>> {
        match self {
            Value::Real(t) => Ok(t),
            Value::Complex(_) => Err(shape_err("as_real", "expected a real value, found complex")),
        }
    }

    pub fn as_complex(&self) -> Result<&ComplexTensor<T>> {
        match self {
            Value::Complex(z) => Ok(z),
            Value::Real(_) => Err(shape_err("as_complex", "expected a complex value, found real")),
        }
    }

    pub fn into_real(self) -> Result<Tensor<T>> {
        match self {
            Value::Real(t) => Ok(t),
            Value::Complex(_) => Err(shape_err("into_real", "expected a real value, found complex")),
        }
    }

    pub fn into_complex(self) -> Result<ComplexTensor<T>> {
        match self {
            Value::Complex(z) => Ok(z),
            Value::Real(_) => Err(shape_err("into_complex", "expected a complex value, found real")),
        }
    }

    fn add_assign(&mut self, other: &Value<T>) -> Result<()> {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) => a.add_assign(b),
            (Value::Complex(a), Value::Complex(b)) => a.add_assign(b),
            _ => Err(shape_err("accumulate", "real/complex gradient kind mismatch")),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Receives the output gradient, the parent values and the output value;
/// returns one optional gradient per parent.
type BackFn<T> = Box<dyn Fn(&Value<T>, &[&Value<T>], &Value<T>) -> Result<Vec<Option<Value<T>>>>>;

struct Node<T> {
    value: Value<T>,
    parents: Vec<usize>,
    back: Option<BackFn<T>>,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
struct Binding {
    node: usize,
    store: u64,
    param: ParamId,
    version: u64,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bindings: Vec<Binding>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// New tape; the per-op NaN/Inf pass is on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Value<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            back: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Value<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn real_const(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Value::Real(t), false)
    }

    /// Binds a parameter; gradient flows to it iff it is trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let var = self.leaf(Value::Real(p.value.clone()), p.trainable);
        self.bindings.push(Binding {
            node: var.0,
            store: store.store_id(),
            param: id,
            version: p.version(),
        });
        var
    }

    /// Binds a parameter's current value as a constant (no gradient).
    pub fn param_detached(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(Value::Real(store.value(id).clone()))
    }

    pub fn value(&self, v: Var) -> &Value<T> {
        &self.nodes[v.0].value
    }

    pub fn real(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes[v.0].value.as_real()
    }

    pub fn complex_value(&self, v: Var) -> Result<&ComplexTensor<T>> {
        self.nodes[v.0].value.as_complex()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(
        &mut self,
        op: &str,
        value: Value<T>,
        parents: &[Var],
        back: impl Fn(&Value<T>, &[&Value<T>], &Value<T>) -> Result<Vec<Option<Value<T>>>> + 'static,
    ) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            back: if requires_grad { Some(Box::new(back)) } else { None },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar real loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let seed = match &self.nodes[loss.0].value {
            Value::Real(t) if t.len() == 1 => Value::Real(Tensor::ones(t.shape())),
            v => return Err(Error::LossNotScalar(v.shape().to_vec())),
        };
        let mut grads: Vec<Option<Value<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.back else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Value<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = back(&g, &inputs, &node.value)?;
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if pg.shape() != self.nodes[p].value.shape() {
                    return Err(shape_err(
                        "backward",
                        format!("gradient {:?} for value {:?}", pg.shape(), self.nodes[p].value.shape()),
                    ));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            bindings: self.bindings.clone(),
        })
    }

    /// Backward sweep followed by accumulation into `store`'s gradients.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.check_fresh(store)?;
        self.backward(loss)?.accumulate_into(store)
    }

    fn check_fresh(&self, store: &ParamStore<T>) -> Result<()> {
        for b in self.bindings.iter().filter(|b| b.store == store.store_id()) {
            let p = store.get(b.param);
            if p.version() != b.version {
                return Err(Error::StaleTape(p.name.clone()));
            }
        }
        Ok(())
    }
}

/// Per-node gradients from one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Value<T>>>,
    bindings: Vec<Binding>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Value<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn real(&self, v: Var) -> Option<&Tensor<T>> {
        self.get(v).and_then(|g| g.as_real().ok())
    }

    pub fn complex(&self, v: Var) -> Option<&ComplexTensor<T>> {
        self.get(v).and_then(|g| g.as_complex().ok())
    }

    /// Adds parameter gradients into `store`. Fails if any bound parameter
    /// changed since it was recorded.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mine: Vec<&Binding> = self.bindings.iter().filter(|b| b.store == store.store_id()).collect();
        for b in &mine {
            let p = store.get(b.param);
            if p.version() != b.version {
                return Err(Error::StaleTape(p.name.clone()));
            }
        }
        for b in mine {
            if !store.get(b.param).trainable {
                continue;
            }
            if let Some(Value::Real(g)) = &self.grads[b.node] {
                store.grad_mut(b.param).add_assign(g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use std::f64::consts::PI;

    fn scalar(v: f64) -> Value<f64> {
        Value::Real(Tensor::scalar(v))
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let l = tape.sum(y).unwrap();
        assert_eq!(tape.backward(l).unwrap().real(x).unwrap().item(), 6.0);
    }

    #[test]
    fn decrypt_graph_value_and_gradient() {
        // Re[e^{-iθ} x] at x = 1+1i, θ = π/2 → 1
        let theta = PI / 2.0;
        let mut tape = Tape::new();
        let z = ComplexTensor::new(Tensor::scalar(1.0), Tensor::scalar(1.0)).unwrap();
        let x = tape.leaf(Value::Complex(z), true);
        let r = tape.rotate(x, &[-theta]).unwrap();
        let re = tape.real_part(r).unwrap();
        let l = tape.sum(re).unwrap();
        assert!((tape.real(l).unwrap().item() - 1.0).abs() < 1e-15);
        let g = tape.backward(l).unwrap();
        let gz = g.complex(x).unwrap();
        assert!((gz.re().item() - theta.cos()).abs() < 1e-15);
        assert!((gz.im().item() - theta.sin()).abs() < 1e-15);
    }

    #[test]
    fn constant_graph_ignores_inputs() {
        for input in [1.0, -5.0] {
            let mut tape = Tape::new();
            let _x = tape.leaf(scalar(input), true);
            let c = tape.constant(scalar(2.5));
            let y = tape.scale(c, 2.0).unwrap();
            assert_eq!(tape.real(y).unwrap().item(), 5.0);
        }
    }

    #[test]
    fn forward_is_pure() {
        let run = || {
            let mut rng = Rng::new(1);
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Value::Real(rng.sample_gaussian(&[2, 3, 5, 5])), false);
            let w = tape.leaf(Value::Real(rng.sample_gaussian(&[4, 3, 3, 3])), false);
            let y = tape.conv2d(x, w, None, 1, 1).unwrap();
            tape.real(y).unwrap().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Value::Real(Tensor::zeros(&[2])), true);
        assert!(matches!(tape.backward(x), Err(Error::LossNotScalar(_))));
    }

    #[test]
    fn stale_tape_detected() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(2.0), true).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let l = tape.sum(w).unwrap();
        store.value_mut(id).data_mut()[0] = 3.0;
        assert!(matches!(tape.backward_into(l, &mut store), Err(Error::StaleTape(_))));
    }

    #[test]
    fn detached_parameters_get_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::scalar(2.0), true).unwrap();
        let b = store.add("b", Tensor::scalar(5.0), false).unwrap();
        let mut tape = Tape::new();
        let va = tape.param(&store, a);
        let vb = tape.param(&store, b);
        let p = tape.mul(va, vb).unwrap();
        let l = tape.sum(p).unwrap();
        tape.backward_into(l, &mut store).unwrap();
        assert_eq!(store.get(a).grad.item(), 5.0);
        assert_eq!(store.get(b).grad.item(), 0.0);
    }

    #[test]
    fn repeated_backward_with_zeroing_is_idempotent() {
        let mut rng = Rng::new(4);
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", rng.sample_gaussian(&[3, 2, 3, 3]), true).unwrap();
        let x: Tensor<f64> = rng.sample_gaussian(&[2, 2, 4, 4]);
        let mut tape = Tape::new();
        let xv = tape.real_const(x);
        let wv = tape.param(&store, w);
        let y = tape.conv2d(xv, wv, None, 1, 0).unwrap();
        let y2 = tape.mul(y, y).unwrap();
        let l = tape.sum(y2).unwrap();
        tape.backward_into(l, &mut store).unwrap();
        let first = store.get(w).grad.clone();
        store.zero_grad();
        tape.backward_into(l, &mut store).unwrap();
        assert_eq!(store.get(w).grad, first);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // ∇(f + g) == ∇f + ∇g on random small graphs
        let mut rng = Rng::new(17);
        for _ in 0..10 {
            let x: Tensor<f64> = rng.sample_gaussian(&[2, 2, 4, 4]);
            let w: Tensor<f64> = rng.sample_gaussian(&[3, 2, 3, 3]);
            let theta = rng.uniform(0.0, 6.0);
            let build = |which: u8| {
                let mut tape = Tape::new();
                let xv = tape.leaf(Value::Real(x.clone()), true);
                let wv = tape.leaf(Value::Real(w.clone()), true);
                let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
                let z = tape.complex(y, y).unwrap();
                let r = tape.rotate(z, &[theta]).unwrap();
                let d = tape.delta(r, &[1.0]).unwrap();
                let re = tape.real_part(d).unwrap();
                let im = tape.imag_part(d).unwrap();
                let f = tape.sum(re).unwrap();
                let sq = tape.mul(im, im).unwrap();
                let g = tape.mean(sq).unwrap();
                let l = match which {
                    0 => f,
                    1 => g,
                    _ => tape.add(f, g).unwrap(),
                };
                let grads = tape.backward(l).unwrap();
                grads.real(xv).unwrap().clone()
            };
            let sum = build(0).add(&build(1)).unwrap();
            assert!(sum.sub(&build(2)).unwrap().max_abs() < 1e-10);
        }
    }
}
