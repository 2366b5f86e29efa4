//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op executed during one training step together
//! with whatever the op saved for its backward pass. [`Graph::backward`] walks
//! the tape in exact reverse order and accumulates parameter gradients into
//! the [`ParamStore`]. Graphs are record-and-free: build a new one per step.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Inputs handed to an op's backward rule.
pub(crate) struct BackwardCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// Whether each input wants a gradient.
    pub needs: Vec<bool>,
}

pub(crate) trait Backward<T: Scalar> {
    /// Returns one entry per recorded input; `None` where no gradient flows.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    bound: HashMap<ParamId, Var>,
    track_params: bool,
    done: bool,
    pub(crate) hwgq_taps: Option<Vec<HwgqTap<T>>>,
}

/// One recorded HWGQ application, kept when taps are enabled.
#[derive(Clone, Debug)]
pub struct HwgqTap<T> {
    pub input: Var,
    pub output: Var,
    pub sigma: T,
    pub levels: std::sync::Arc<crate::quant::GaussianLevels>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            track_params: true,
            done: false,
            hwgq_taps: None,
        }
    }

    /// A graph that binds parameters as constants; nothing is saved for backward.
    pub fn inference() -> Self {
        Graph {
            track_params: false,
            ..Self::new()
        }
    }

    /// Starts recording every HWGQ application for later inspection.
    pub fn enable_hwgq_taps(&mut self) {
        self.hwgq_taps.get_or_insert_with(Vec::new);
    }

    pub fn hwgq_taps(&self) -> &[HwgqTap<T>] {
        self.hwgq_taps.as_deref().unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the loss w.r.t. `v`, available after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// Records a leaf that receives gradient but is not a registry parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, None)
    }

    /// Binds a registry entry. Binding the same id twice returns the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let track = self.track_params && p.trainable();
        let v = self.leaf(p.value.clone(), track, Some(id));
        self.bound.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            rule: None,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an op result. Rejects non-finite outputs.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: Vec<Var>,
        rule: Box<dyn Backward<T>>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            rule: requires_grad.then_some(rule),
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Whether any of `vars` wants a gradient; ops use this to skip saving state.
    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Back-propagates from a scalar `loss`, adding parameter gradients into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::ones(&shape));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let (Some(rule), Some(grad)) = (node.rule.as_ref(), self.grads[idx].as_ref()) else {
                continue;
            };
            let ctx = BackwardCtx {
                grad,
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                needs: node
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect(),
            };
            let input_grads = rule.backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            let inputs = node.inputs.clone();
            for (var, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut self.grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                if node.requires_grad {
                    store.accumulate_grad(id, g);
                }
            }
        }
        Ok(())
    }
}
