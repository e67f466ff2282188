use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor together with its gradient accumulator and AdamW state.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step: u64,
}

impl Parameter {
    fn new(name: String, value: Tensor) -> Self {
        let (r, c) = (value.rows(), value.cols());
        Self {
            name,
            value,
            grad: Tensor::zeros(r, c),
            first_moment: Tensor::zeros(r, c),
            second_moment: Tensor::zeros(r, c),
            step: 0,
        }
    }
}

/// Serialized form of one parameter; `data` is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name.into(), value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grads(&mut self, grads: Vec<(ParamId, Tensor)>) {
        for (id, g) in grads {
            self.params[id.0].grad.add_assign(&g);
        }
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: [p.value.rows(), p.value.cols()],
                data: p.value.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites parameter values from named tensors. Every parameter must be
    /// present with a matching shape; optimizer state is reset.
    pub fn load_named(&mut self, named: &[NamedTensor]) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Parameter(format!(
                "checkpoint holds {} tensors, model expects {}",
                named.len(),
                self.params.len()
            )));
        }
        for (p, n) in self.params.iter_mut().zip(named) {
            if p.name != n.name {
                return Err(Error::Parameter(format!(
                    "checkpoint tensor `{}` found where `{}` was expected",
                    n.name, p.name
                )));
            }
            if n.shape != [p.value.rows(), p.value.cols()] {
                return Err(Error::Shape {
                    op: "load_named",
                    left: p.value.shape(),
                    right: n.shape.to_vec(),
                });
            }
            *p = Parameter::new(
                p.name.clone(),
                Tensor::from_vec(n.shape[0], n.shape[1], n.data.clone())?,
            );
        }
        Ok(())
    }
}
