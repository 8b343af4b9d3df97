//! Named parameters with persistent identity across optimizer steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
    /// Whether L2 regularization applies (weights yes; biases and SOP residuals no).
    pub decay: bool,
    /// Multiplier on the global learning rate.
    pub lr_scale: f64,
    /// Frozen parameters are skipped by the optimizer.
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: Tensor::zeros(r, c),
            momentum: Tensor::zeros(r, c),
            decay,
            lr_scale: 1.0,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != grad.shape() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: p.grad.shape(),
                rhs: grad.shape(),
            });
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    /// Adds `grad` into the selected rows of the accumulator.
    pub fn accumulate_rows(&mut self, id: ParamId, rows: &[usize], grad: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.rows() != rows.len() || grad.cols() != p.grad.cols() {
            return Err(Error::Shape {
                op: "accumulate_rows",
                lhs: (rows.len(), p.grad.cols()),
                rhs: grad.shape(),
            });
        }
        for (k, &r) in rows.iter().enumerate() {
            for (a, b) in p.grad.row_mut(r).iter_mut().zip(grad.row(k)) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Total number of scalar entries over the given parameters.
    pub fn count(&self, ids: impl IntoIterator<Item = ParamId>) -> usize {
        ids.into_iter()
            .map(|id| {
                let (r, c) = self.params[id.0].value.shape();
                r * c
            })
            .sum()
    }
}
