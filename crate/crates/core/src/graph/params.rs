use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BnId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Weight,
    Arch,
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub role: Role,
    pub requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, role: Role) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            role,
            requires_grad: true,
        });
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

    pub fn ids(&self, role: Role) -> Vec<ParamId> {
        (0..self.params.len())
            .map(ParamId)
            .filter(|&id| self.params[id.0].role == role)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_dtype(&mut self, dtype: DType) {
        for p in &mut self.params {
            p.value = p.value.cast(dtype);
        }
    }
}

/// Kaiming-uniform kernel with bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform<R: Rng>(rng: &mut R, shape: &[usize], dtype: DType) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data, dtype).expect("shape and data agree")
}

/// Running statistics of one batch-normalization instance.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct BnStore {
    states: Vec<BnState>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BnStore {
    pub fn add(&mut self, channels: usize) -> BnId {
        self.states.push(BnState {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        BnId(self.states.len() - 1)
    }

    pub fn get(&self, id: BnId) -> &BnState {
        &self.states[id.0]
    }

    pub fn update(&mut self, id: BnId, mean: &[f64], var: &[f64]) {
        let s = &mut self.states[id.0];
        for (r, &m) in s.mean.iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in s.var.iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}
