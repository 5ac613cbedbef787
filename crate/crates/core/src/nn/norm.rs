//! Fused standardization `(x − mean) / sqrt(var + eps)` over groups of an
//! NCHW tensor with a closed-form backward pass. Population variance.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Groups {
    /// One group per channel over batch and space (batch norm).
    PerChannel,
    /// One group per (sample, channel) over space (instance norm).
    PerSample,
}

struct Standardize {
    groups: Groups,
    eps: f64,
}

struct Geometry {
    channels: usize,
    spatial: usize,
    groups: usize,
}

impl Groups {
    fn geometry(self, shape: &[usize]) -> candle_core::Result<Geometry> {
        let [b, c, h, w] = shape else { candle_core::bail!("standardize expects NCHW, got {shape:?}") };
        let groups = match self {
            Groups::PerChannel => *c,
            Groups::PerSample => b * c,
        };
        Ok(Geometry { channels: *c, spatial: h * w, groups })
    }

    fn group_of(self, g: &Geometry, row: usize) -> usize {
        match self {
            Groups::PerChannel => row % g.channels,
            Groups::PerSample => row,
        }
    }
}

fn host_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<(Vec<f64>, DType)> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("standardize expects a contiguous input".into()))?;
    Ok(match s {
        CpuStorage::F32(v) => (v[start..end].iter().map(|&x| x as f64).collect(), DType::F32),
        CpuStorage::F64(v) => (v[start..end].to_vec(), DType::F64),
        _ => candle_core::bail!("standardize supports f32 and f64 only"),
    })
}

fn tensor_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()
}

/// Per-group mean and population variance; rows are `(sample, channel)` planes.
fn stats(x: &[f64], groups: Groups, g: &Geometry) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; g.groups];
    let mut count = vec![0usize; g.groups];
    for (row, plane) in x.chunks(g.spatial).enumerate() {
        let k = groups.group_of(g, row);
        sum[k] += plane.iter().sum::<f64>();
        count[k] += plane.len();
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n.max(1) as f64).collect();
    let mut sq = vec![0.0; g.groups];
    for (row, plane) in x.chunks(g.spatial).enumerate() {
        let k = groups.group_of(g, row);
        sq[k] += plane.iter().map(|v| (v - mean[k]) * (v - mean[k])).sum::<f64>();
    }
    let var = sq.iter().zip(&count).map(|(s, &n)| s / n.max(1) as f64).collect();
    (mean, var)
}

fn storage(v: Vec<f64>, dtype: DType) -> CpuStorage {
    match dtype {
        DType::F32 => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(v),
    }
}

impl CustomOp1 for Standardize {
    fn name(&self) -> &'static str {
        "standardize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (x, dtype) = host_f64(s, l)?;
        let g = self.groups.geometry(l.dims())?;
        let (mean, var) = stats(&x, self.groups, &g);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut out = x;
        for (row, plane) in out.chunks_mut(g.spatial).enumerate() {
            let k = self.groups.group_of(&g, row);
            for v in plane {
                *v = (*v - mean[k]) * inv[k];
            }
        }
        Ok((storage(out, dtype), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = self.groups.geometry(arg.dims())?;
        let x = tensor_f64(arg)?;
        let xhat = tensor_f64(res)?;
        let dy = tensor_f64(grad)?;
        let (_, var) = stats(&x, self.groups, &g);
        let mut mean_dy = vec![0.0; g.groups];
        let mut mean_dy_xhat = vec![0.0; g.groups];
        let mut count = vec![0usize; g.groups];
        for (row, (d, xh)) in dy.chunks(g.spatial).zip(xhat.chunks(g.spatial)).enumerate() {
            let k = self.groups.group_of(&g, row);
            mean_dy[k] += d.iter().sum::<f64>();
            mean_dy_xhat[k] += d.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
            count[k] += d.len();
        }
        for k in 0..g.groups {
            let n = count[k].max(1) as f64;
            mean_dy[k] /= n;
            mean_dy_xhat[k] /= n;
        }
        let mut dx = dy;
        for (row, (d, xh)) in dx.chunks_mut(g.spatial).zip(xhat.chunks(g.spatial)).enumerate() {
            let k = self.groups.group_of(&g, row);
            let inv = 1.0 / (var[k] + self.eps).sqrt();
            for (v, &xh) in d.iter_mut().zip(xh) {
                *v = inv * (*v - mean_dy[k] - xh * mean_dy_xhat[k]);
            }
        }
        Ok(Some(Tensor::from_vec(dx, arg.shape(), &Device::Cpu)?.to_dtype(arg.dtype())?))
    }
}

pub fn standardize(x: &Tensor, groups: Groups, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Standardize { groups, eps })
}

/// Per-channel batch mean and population variance of an NCHW tensor (no gradient).
pub fn channel_stats(x: &Tensor) -> candle_core::Result<(Vec<f64>, Vec<f64>)> {
    let g = Groups::PerChannel.geometry(x.dims())?;
    Ok(stats(&tensor_f64(&x.detach())?, Groups::PerChannel, &g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform_tensor};
    use candle_core::{Var, D};

    fn reference(x: &Tensor, groups: Groups, eps: f64) -> Tensor {
        let (b, c, h, w) = x.dims4().unwrap();
        match groups {
            Groups::PerSample => {
                let flat = x.reshape((b, c, h * w)).unwrap();
                let centered = flat.broadcast_sub(&flat.mean_keepdim(D::Minus1).unwrap()).unwrap();
                let var = centered.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
                centered.broadcast_div(&(var + eps).unwrap().sqrt().unwrap()).unwrap().reshape((b, c, h, w)).unwrap()
            }
            Groups::PerChannel => {
                let mean = x.mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
                let centered = x.broadcast_sub(&mean).unwrap();
                let var = centered.sqr().unwrap().mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
                centered.broadcast_div(&(var + eps).unwrap().sqrt().unwrap()).unwrap()
            }
        }
    }

    #[test]
    fn matches_composed_ops_forward_and_backward() {
        let dev = Device::Cpu;
        for groups in [Groups::PerChannel, Groups::PerSample] {
            let x = Var::from_tensor(&(uniform_tensor(&mut seeded(1), &[3, 4, 5, 6], DType::F64, &dev).unwrap() * 3.0).unwrap()).unwrap();
            let probe = uniform_tensor(&mut seeded(2), &[3, 4, 5, 6], DType::F64, &dev).unwrap();
            let y = standardize(x.as_tensor(), groups, 1e-5).unwrap();
            let r = reference(x.as_tensor(), groups, 1e-5);
            let dy = (&y - &r).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(dy < 1e-12, "{groups:?} forward {dy}");
            let g1 = (&y * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (&r * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let d = (g1.get(x.as_tensor()).unwrap() - g2.get(x.as_tensor()).unwrap())
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(d < 1e-10, "{groups:?} backward {d}");
        }
    }

    #[test]
    fn channel_stats_are_population_moments() {
        let x = Tensor::from_vec(vec![1.0f32, 3.0, 10.0, 10.0, 5.0, 7.0, 20.0, 30.0], (2, 2, 1, 2), &Device::Cpu).unwrap();
        let (mean, var) = channel_stats(&x).unwrap();
        assert_eq!(mean, vec![4.0, 17.5]);
        assert_eq!(var, vec![5.0, 68.75]);
    }
}
