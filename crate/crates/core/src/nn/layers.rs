use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::nn::norm::{channel_stats, standardize, Groups};
use crate::nn::ParamStore;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zeros(usize),
    /// Reflection padding of `kernel / 2` on every side.
    Reflect,
}

/// Mirror padding over the last two dims of an NCHW tensor (edge sample not repeated).
pub fn reflection_pad2d(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    let index = |n: usize| -> Result<Tensor> {
        let idx: Vec<u32> = (0..n + 2 * pad)
            .map(|i| {
                let i = i as i64 - pad as i64;
                let r = if i < 0 {
                    -i
                } else if i >= n as i64 {
                    2 * (n as i64 - 1) - i
                } else {
                    i
                };
                r as u32
            })
            .collect();
        Ok(Tensor::from_vec(idx, n + 2 * pad, x.device())?)
    };
    let x = x.index_select(&index(h)?, 2)?;
    Ok(x.index_select(&index(w)?, 3)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: Padding,
    kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = store.uniform(rng, &format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel], bound)?;
        let bias = if bias { Some(store.uniform(rng, &format!("{name}.bias"), &[out_channels], bound)?) } else { None };
        Ok(Self { weight, bias, stride, padding, kernel })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (x, pad) = match self.padding {
            Padding::Zeros(p) => (x.clone(), p),
            Padding::Reflect => (reflection_pad2d(x, self.kernel / 2)?, 0),
        };
        let y = super::conv::conv2d(&x, self.weight.as_tensor(), pad, self.stride)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Per-sample, per-channel normalization over spatial dims with a learned affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm2d {
    weight: Var,
    bias: Var,
    eps: f64,
}

impl InstanceNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            bias: store.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let normed = standardize(x, Groups::PerSample, self.eps)?;
        Ok(normed
            .broadcast_mul(&self.weight.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Batch normalization. Train mode normalizes with batch statistics and
/// updates the running estimates; eval mode uses the running estimates only.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            bias: store.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let shape = (1, c, 1, 1);
        let normed = match mode {
            Mode::Train => {
                let n = b * h * w;
                let (mean, var) = channel_stats(x)?;
                let unbiased: Vec<f64> = var.iter().map(|v| if n > 1 { v * n as f64 / (n as f64 - 1.0) } else { *v }).collect();
                let m = self.momentum;
                let blend = |running: &Var, batch: Vec<f64>| -> Result<()> {
                    let batch = Tensor::from_vec(batch, c, running.device())?.to_dtype(running.dtype())?;
                    running.set(&((running.as_tensor() * (1.0 - m))? + (batch * m)?)?)?;
                    Ok(())
                };
                blend(&self.running_mean, mean)?;
                blend(&self.running_var, unbiased)?;
                standardize(x, Groups::PerChannel, self.eps)?
            }
            Mode::Eval => {
                let mean = self.running_mean.as_tensor().detach();
                let var = self.running_var.as_tensor().detach();
                x.broadcast_sub(&mean.reshape(shape)?)?.broadcast_div(&(var + self.eps)?.sqrt()?.reshape(shape)?)?
            }
        };
        Ok(normed
            .broadcast_mul(&self.weight.as_tensor().reshape(shape)?)?
            .broadcast_add(&self.bias.as_tensor().reshape(shape)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        Ok(Self {
            weight: store.uniform(rng, &format!("{name}.weight"), &[outputs, inputs], bound)?,
            bias: store.uniform(rng, &format!("{name}.bias"), &[outputs], bound)?,
        })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[outputs, inputs], 0.0)?,
            bias: store.constant(&format!("{name}.bias"), &[outputs], 0.0)?,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn reflection_pad_mirrors_without_repeating_edge() {
        let x = Tensor::arange(0f32, 4.0, &Device::Cpu).unwrap().reshape((1, 1, 1, 4)).unwrap();
        let x = x.repeat((1, 1, 3, 1)).unwrap();
        let y = reflection_pad2d(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 7, 8]);
        let row: Vec<f32> = y.get(0).unwrap().get(0).unwrap().get(0).unwrap().to_vec1().unwrap();
        assert_eq!(row, vec![2.0, 1.0, 0.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let norm = InstanceNorm2d::new(&mut store, "in", 2).unwrap();
        let mut rng = crate::rng::seeded(3);
        let x = crate::rng::normal_tensor(&mut rng, &[3, 2, 5, 5], DType::F64, &Device::Cpu).unwrap();
        let x = ((x * 4.0).unwrap() + 7.0).unwrap();
        let y = norm.forward(&x).unwrap().reshape((6, 25)).unwrap();
        let means: Vec<f64> = y.mean(1).unwrap().to_vec1().unwrap();
        for m in means {
            assert!(m.abs() < 1e-10);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let bn = BatchNorm2d::new(&mut store, "bn", 1).unwrap();
        let x = Tensor::full(3f32, (2, 1, 2, 2), &Device::Cpu).unwrap();
        let y = bn.forward(&x, Mode::Eval).unwrap();
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&e| (e - 3.0 / (1.0f32 + 1e-5).sqrt()).abs() < 1e-6));
        bn.forward(&x, Mode::Train).unwrap();
        let rm: Vec<f32> = store.get("bn.running_mean").unwrap().as_tensor().to_vec1().unwrap();
        assert!((rm[0] - 0.3).abs() < 1e-6);
    }
}
