use candle_core::Tensor;
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel mean and standard deviation of a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Population statistics per channel, accumulated in f64.
pub fn compute_norm_stats<'a>(split: impl IntoIterator<Item = &'a Array3<f32>>) -> Result<NormStats> {
    let mut sum: Vec<f64> = Vec::new();
    let mut sq: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for x in split {
        let c = x.dim().0;
        if sum.is_empty() {
            sum = vec![0.0; c];
            sq = vec![0.0; c];
        } else if sum.len() != c {
            return Err(Error::shape(format!("{} channels", sum.len()), x.dim()));
        }
        for (ch, plane) in x.axis_iter(Axis(0)).enumerate() {
            for &v in plane.iter() {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        count += x.len() / c.max(1);
    }
    if count == 0 {
        return Err(Error::EmptyInput("cannot compute statistics of an empty split".into()));
    }
    let n = count as f64;
    let mut mean = Vec::with_capacity(sum.len());
    let mut std = Vec::with_capacity(sum.len());
    for (ch, (&s, &q)) in sum.iter().zip(&sq).enumerate() {
        let m = s / n;
        let var = (q / n - m * m).max(0.0);
        let sd = var.sqrt();
        if sd <= 1e-12 * m.abs().max(1.0) {
            return Err(Error::ZeroVariance { channel: ch });
        }
        mean.push(m as f32);
        std.push(sd as f32);
    }
    Ok(NormStats { mean, std })
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, channels: usize) -> Result<()> {
        if channels != self.channels() {
            return Err(Error::shape(format!("{} channels", self.channels()), format!("{channels} channels")));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        self.check(x.dim().0)?;
        let mut out = x.clone();
        for (ch, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        self.check(x.dim().0)?;
        let mut out = x.clone();
        for (ch, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            plane.mapv_inplace(|v| v * s + m);
        }
        Ok(out)
    }

    /// Differentiable normalization of an NCHW tensor.
    pub fn normalize_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        self.check(c)?;
        let mean = Tensor::from_slice(&self.mean, (1, c, 1, 1), x.device())?.to_dtype(x.dtype())?;
        let std = Tensor::from_slice(&self.std, (1, c, 1, 1), x.device())?.to_dtype(x.dtype())?;
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }
}
