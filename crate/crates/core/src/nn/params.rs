use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self { dtype, device, params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Uniform init on [-bound, bound].
    pub fn uniform(&mut self, rng: &mut SeededRng, name: &str, dims: &[usize], bound: f64) -> Result<Var> {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| ((rng.random::<f32>() * 2.0 - 1.0) as f64 * bound) as f32).collect();
        let t = Tensor::from_vec(data, dims, &self.device)?.to_dtype(self.dtype)?;
        self.insert_param(name, t)
    }

    pub fn constant(&mut self, name: &str, dims: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(dims, self.dtype, &self.device)? * value)?;
        self.insert_param(name, t)
    }

    pub fn buffer(&mut self, name: &str, dims: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(dims, self.dtype, &self.device)? * value)?;
        let var = Var::from_tensor(&t)?;
        if self.buffers.insert(name.to_string(), var.clone()).is_some() {
            return Err(Error::ConfigInvalid(format!("duplicate buffer {name}")));
        }
        Ok(var)
    }

    fn insert_param(&mut self, name: &str, t: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&t)?;
        if self.params.insert(name.to_string(), var.clone()).is_some() {
            return Err(Error::ConfigInvalid(format!("duplicate parameter {name}")));
        }
        Ok(var)
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters and buffers as plain tensors, for serialization.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrite every parameter and buffer from `tensors`. Names, shapes and
    /// the entry count must match exactly.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        let present = tensors.keys().filter(|k| !k.starts_with("__")).count();
        if present != expected {
            return Err(Error::CheckpointMismatch(format!(
                "archive holds {present} tensors, model expects {expected}"
            )));
        }
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {name}: archive shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Deep copy with freshly allocated variables.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.tensors()
            .into_iter()
            .map(|(k, t)| Ok((k, t.copy()?)))
            .collect()
    }
}
