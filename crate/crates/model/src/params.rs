//! Named parameter storage with seeded initialization.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    Const(f64),
    Values(Vec<f64>),
}

/// Ordered collection of weight tensors. Frozen tensors are handed out
/// detached so no gradient is ever computed for them.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    vars: Vec<Var>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            names: Vec::new(),
            vars: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), ModelError> {
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Const(c) => vec![c; n],
            Init::Values(v) => {
                if v.len() != n {
                    return Err(ModelError::Shape(format!("{name}: {} values for {n}", v.len())));
                }
                v
            }
        };
        self.insert(name, shape, values, trainable)
    }

    pub fn insert(
        &mut self,
        name: &str,
        shape: &[usize],
        values: Vec<f64>,
        trainable: bool,
    ) -> Result<(), ModelError> {
        if self.index.contains_key(name) {
            return Err(ModelError::Config(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.index.insert(name.to_string(), self.vars.len());
        self.names.push(name.to_string());
        self.vars.push(Var::from_tensor(&t)?);
        self.trainable.push(trainable);
        Ok(())
    }

    fn position(&self, name: &str) -> Result<usize, ModelError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Config(format!("no parameter named {name}")))
    }

    /// Tensor for use in a forward pass.
    pub fn get(&self, name: &str) -> Result<Tensor, ModelError> {
        let i = self.position(name)?;
        let t = self.vars[i].as_tensor();
        Ok(if self.trainable[i] { t.clone() } else { t.detach() })
    }

    pub fn var(&self, name: &str) -> Result<&Var, ModelError> {
        Ok(&self.vars[self.position(name)?])
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool, ModelError> {
        Ok(self.trainable[self.position(name)?])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `(name, var, trainable)` in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var, bool)> {
        self.names
            .iter()
            .zip(&self.vars)
            .zip(&self.trainable)
            .map(|((n, v), t)| (n.as_str(), v, *t))
    }

    pub fn values_f64(&self, name: &str) -> Result<Vec<f64>, ModelError> {
        let t = self.var(name)?.as_tensor();
        Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }

    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<(), ModelError> {
        let var = self.var(name)?;
        if values.len() != var.elem_count() {
            return Err(ModelError::Shape(format!(
                "{name}: {} values for {}",
                values.len(),
                var.elem_count()
            )));
        }
        let t = Tensor::from_slice(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Deep copy in another precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self, ModelError> {
        let mut out = ParamStore::new(dtype, self.device.clone());
        for (name, var, trainable) in self.iter() {
            let shape = var.shape().dims().to_vec();
            out.insert(name, &shape, self.values_f64(name)?, trainable)?;
        }
        Ok(out)
    }

    /// Independent copy with the same precision.
    pub fn deep_clone(&self) -> Result<Self, ModelError> {
        self.to_dtype(self.dtype)
    }

    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(_, _, t)| *t)
            .map(|(_, v, _)| v.elem_count())
            .sum()
    }
}

/// Seeded generator used for all weight initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_1e11)
}
