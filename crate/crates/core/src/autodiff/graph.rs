use std::collections::HashMap;

use super::array::Array;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reverse-mode rule of one recorded operation.
pub(crate) trait Backward {
    /// Pushes the contribution of `grad` (gradient w.r.t. this node's output)
    /// into the gradients of the operation's inputs.
    fn backward(&self, grad: &[f64], values: &[Array], acc: &mut GradAcc<'_>);
}

/// Write access to input gradients during a backward sweep.
pub(crate) struct GradAcc<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    requires: &'a [bool],
    values: &'a [Array],
}

impl GradAcc<'_> {
    /// Gradient buffer of `v`, allocated on first use. `None` when `v` does
    /// not require a gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.requires[v.0] {
            return None;
        }
        let len = self.values[v.0].len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }
}

/// Batch statistics produced by a train-mode batch-norm node, queued for the
/// owner of the running statistics.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Record of the operations of one forward pass.
///
/// Nodes are appended in evaluation order, so the record is topological by
/// construction and a single reverse sweep visits every node once.
#[derive(Default)]
pub struct Graph {
    values: Vec<Array>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    ops: Vec<Option<Box<dyn Backward>>>,
    params: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate>,
    pub(crate) fault: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes every linear node report a doubled weight gradient. Only used to
    /// prove that the gradient checker catches a broken backward rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self) {
        self.fault = true;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        value: Array,
        inputs: &[Var],
        op: impl Backward + 'static,
    ) -> Var {
        let requires = inputs.iter().any(|v| self.requires[v.0]);
        let op: Option<Box<dyn Backward>> = if requires { Some(Box::new(op)) } else { None };
        self.push_node(value, requires, op)
    }

    fn push_node(&mut self, value: Array, requires: bool, op: Option<Box<dyn Backward>>) -> Var {
        let id = self.values.len();
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(id)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Array) -> Var {
        self.push_node(value, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push_node(value, false, None)
    }

    /// Registers a stored parameter as a leaf. Registering the same parameter
    /// twice returns the same node so that gradients from every use accumulate.
    pub fn param(&mut self, id: ParamId, store: &ParamStore) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push_node(p.value.clone(), p.trainable, None);
        self.params.insert(id, v);
        v
    }

    /// Node bound to `id`, if the parameter took part in this graph.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.param_var(id).and_then(|v| self.grad(v))
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the last backward sweep. `None` for nodes that do not
    /// require a gradient or were unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if !self.requires[v.0] {
            return None;
        }
        self.grads[v.0].as_deref()
    }

    pub(crate) fn queue_stat_update(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Propagates d(loss)/d(node) to every ancestor of `loss` that requires a
    /// gradient. Gradients from previous sweeps are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        let Graph {
            values,
            grads,
            requires,
            ops,
            ..
        } = self;
        for i in (0..=loss.0).rev() {
            let Some(op) = ops[i].as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let mut acc = GradAcc {
                grads: grads.as_mut_slice(),
                requires,
                values,
            };
            op.backward(&g, values, &mut acc);
            grads[i] = Some(g);
        }
        Ok(())
    }
}
