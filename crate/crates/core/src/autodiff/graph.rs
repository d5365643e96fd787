use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn<T> = Box<dyn Fn(&mut BackwardCtx<'_, T>) + Send + Sync>;

struct Node<T> {
    value: Tensor<T>,
    backward: Option<BackwardFn<T>>,
}

/// View handed to backward closures: input values, the incoming gradient,
/// and accumulation slots for the inputs.
pub(crate) struct BackwardCtx<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    grad_out: &'a [T],
}

impl<'a, T: Float> BackwardCtx<'a, T> {
    #[inline]
    pub fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn grad_out(&self) -> &'a [T] {
        self.grad_out
    }

    #[inline]
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Gradient slot of `v`, zero-initialised on first access.
    pub fn grad_mut(&mut self, v: Var) -> &mut [T] {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Accumulates `delta` into `v`'s gradient if `v` participates.
    pub fn add_grad(&mut self, v: Var, delta: &[T]) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b),
            None => *slot = Some(delta.to_vec()),
        }
    }
}

/// Dynamically built record of executed operations.
///
/// Node ids are assigned in execution order, so the id order is a topological
/// order and backward simply walks ids downwards.
pub struct Graph<'s, T: Float> {
    nodes: Vec<Node<T>>,
    store: Option<&'s ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Float> Graph<'s, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            param_vars: vec![None; store.len()],
            ..Self::new()
        }
    }

    /// A graph that records values only; nothing requires gradients.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::with_params(store)
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag is honoured when gradients
    /// are enabled.
    pub fn input(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad &= self.grad_enabled;
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.input(tensor)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return Ok(*v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::contract("graph has no parameter store"))?;
        let src = store.get(id)?;
        let mut t = Tensor::new(src.shape().to_vec(), src.data().to_vec())?;
        t.requires_grad = src.requires_grad;
        let v = self.input(t);
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    /// Parameters touched by this graph, paired with their leaf vars.
    pub fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_value(&self, v: Var) -> Tensor<T> {
        let src = &self.nodes[v.0].value;
        Tensor::new(src.shape().to_vec(), src.data().to_vec()).expect("node shape is consistent")
    }

    /// Appends an operation result. `parents` decide whether the node needs
    /// a backward closure; outputs must be finite.
    pub(crate) fn push<F>(
        &mut self,
        op: &'static str,
        mut value: Tensor<T>,
        parents: &[Var],
        backward: F,
    ) -> Result<Var>
    where
        F: Fn(&mut BackwardCtx<'_, T>) + Send + Sync + 'static,
    {
        if !value.all_finite() {
            return Err(Error::NumericFault { op });
        }
        let needs = self.grad_enabled && parents.iter().any(|p| self.requires_grad(*p));
        value.requires_grad = needs;
        value.grad = None;
        self.nodes.push(Node {
            value,
            backward: needs.then(|| Box::new(backward) as BackwardFn<T>),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar `loss`. Gradients of every leaf that
    /// requires them are added into the leaf's `grad` slot, so repeated calls
    /// accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(backward) = self.nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let mut ctx = BackwardCtx {
                nodes: &self.nodes,
                grads: &mut grads,
                grad_out: &grad_out,
            };
            backward(&mut ctx);
        }
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if node.backward.is_some() || !node.value.requires_grad {
                continue;
            }
            let n = node.value.numel();
            let delta = grads
                .get_mut(id)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![T::zero(); n]);
            node.value.accumulate_grad(&delta)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![3]).with_grad());
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn sum_gives_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(vec![3], &[1.0, -2.0, 5.0]).unwrap().with_grad());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap().with_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(0.0).with_grad());
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item().unwrap(), 0.5);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn chain_of_adds_accumulates_exactly() {
        for k in 1..6 {
            let mut g = Graph::<f32>::new();
            let x = g.input(Tensor::scalar(0.3).with_grad());
            let mut acc = g.constant(Tensor::scalar(0.0));
            for _ in 0..k {
                acc = g.add(acc, x).unwrap();
            }
            g.backward(acc).unwrap();
            assert_eq!(g.grad(x).unwrap(), &[k as f32]);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap().with_grad());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![2]).with_grad());
        let y = g.input(Tensor::scalar(1.0).with_grad());
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn inference_graph_records_no_gradients() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros(vec![2]).with_grad());
        let y = g.exp(x).unwrap();
        assert!(!g.requires_grad(y));
    }

    #[test]
    fn non_finite_output_is_a_numeric_fault() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::scalar(100.0));
        let err = g.exp(x).unwrap_err();
        assert!(err.is_numeric_fault());
    }
}
