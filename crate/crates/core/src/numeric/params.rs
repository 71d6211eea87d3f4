use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{NumericError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Storage precision for parameters. Arithmetic is always done in f64; in
/// `F32` mode every stored value is rounded to the nearest f32 after
/// initialization and after each update, so checkpoints round-trip exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
    precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn add(&mut self, name: &str, mut tensor: Tensor) -> Result<ParamId, NumericError> {
        if self.index.contains_key(name) {
            return Err(NumericError::DuplicateParam(name.to_string()));
        }
        if self.precision == Precision::F32 {
            round_f32(&mut tensor);
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter { name: name.to_string(), tensor });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform in ±1/√fan_in where fan_in is the row count.
    pub fn add_linear_weight(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId, NumericError> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn add_embedding(
        &mut self,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId, NumericError> {
        let dist = Normal::new(0.0, 0.02).expect("valid normal");
        let data = (0..rows * dim).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(vec![rows, dim], data)?)
    }

    pub fn add_filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId, NumericError> {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Replace a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, mut tensor: Tensor) -> Result<(), NumericError> {
        let current = &self.params[id.0].tensor;
        if current.shape() != tensor.shape() {
            return Err(NumericError::shape("set", current.shape(), tensor.shape()));
        }
        if self.precision == Precision::F32 {
            round_f32(&mut tensor);
        }
        self.params[id.0].tensor = tensor;
        Ok(())
    }

    /// Re-apply the storage precision after an in-place update.
    pub fn settle(&mut self, id: ParamId) {
        if self.precision == Precision::F32 {
            round_f32(&mut self.params[id.0].tensor);
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        if precision == Precision::F32 {
            for p in &mut self.params {
                round_f32(&mut p.tensor);
            }
        }
        self
    }
}

fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// Per-parameter gradient buffers, indexed like the store they came from.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Gradients { grads: vec![None; num_params] }
    }

    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients { grads: store.params.iter().map(|p| Some(Tensor::zeros(p.tensor.shape()))).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.data().iter().all(|v| v.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}
