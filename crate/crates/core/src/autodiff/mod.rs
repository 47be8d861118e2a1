//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The tape is an arena of value buffers. Each op pushed onto it computes its
//! output eagerly and records what backward needs. Push order is evaluation
//! order, so walking the tape in reverse is already a topological traversal.
//! Gradients accumulate by summation, which handles fan-out (a `Var` used by
//! several ops) without any extra bookkeeping.
//!
//! Trainable parameters enter through [`Tape::param`], which caches leaves by
//! name. A recurrent layer can therefore bind its weights once per forward
//! pass no matter how many time steps reference them, and the trainer can pull
//! gradients back out by the same names.

mod gradcheck;
mod ops;

pub use gradcheck::{check_gradients, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use ops::Op;

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Handle to one tape slot. Cheap to copy; only valid for the tape that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Wengert-list tape. Build a fresh one per forward pass.
pub struct Tape {
    values: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    needs: Vec<bool>,
    params: HashMap<String, Var>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            shapes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.push(Op::Leaf, values, shape.to_vec(), false, "constant")
    }

    /// Anonymous differentiable leaf, mainly for tests.
    pub fn leaf(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.push(Op::Leaf, values, shape.to_vec(), true, "leaf")
    }

    /// Named trainable leaf. The first call in a pass registers the values;
    /// later calls with the same name return the cached slot so shared
    /// weights accumulate gradients in one place.
    pub fn param(&mut self, name: &str, values: &[f64], shape: &[usize]) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            debug_assert_eq!(self.shapes[v.0], shape, "shape changed for param {name}");
            return Ok(v);
        }
        let v = self.push(Op::Leaf, values.to_vec(), shape.to_vec(), true, "param")?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    /// Gradient of the loss w.r.t. `v`; `None` before backward or for
    /// branches no gradient reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Gradients of every named parameter that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.grads[v.0].as_deref().map(|g| (name.as_str(), g)))
    }

    pub(crate) fn push(
        &mut self,
        op: Op,
        values: Vec<f64>,
        shape: Vec<usize>,
        needs: bool,
        name: &'static str,
    ) -> Result<Var> {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let v = Var(self.values.len());
        self.values.push(values);
        self.shapes.push(shape);
        self.ops.push(op);
        self.grads.push(None);
        self.needs.push(needs);
        Ok(v)
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Reverse sweep from a scalar loss. Call once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        if self.values[loss.0].len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shapes[loss.0].clone(),
            });
        }
        if !self.needs[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.needs[i] {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            if !gout.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite {
                    op: self.ops[i].name(),
                });
            }
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            let res = ops::op_backward(
                &self.values,
                &self.shapes,
                &self.needs,
                &mut self.grads,
                &op,
                i,
                &gout,
            );
            self.ops[i] = op;
            self.grads[i] = Some(gout);
            res?;
        }
        Ok(())
    }
}
