//! Contrastive objectives: the NT-Xent batch loss over paired views and the
//! memory-bank instance-discrimination loss.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Rows whose norm deviates from 1 by more than this are rejected.
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(Error::ConfigParse { field: "temperature".into(), message: format!("must be > 0, got {tau}") })
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(0.07)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Divide each row by its ℓ2 norm (differentiable).
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

fn row_norms(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.to_dtype(DType::F64)?.sqr()?.sum(D::Minus1)?.sqrt()?.to_vec1()?)
}

/// `2N×D` unit-norm embeddings; rows `2k` and `2k+1` are positives of each other.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch(Tensor);

impl EmbeddingBatch {
    /// Accepts rows that are already unit norm (within [`NORM_TOLERANCE`]).
    pub fn new(embeddings: Tensor) -> Result<Self> {
        Self::check_rows(&embeddings)?;
        for (row, norm) in row_norms(&embeddings)?.into_iter().enumerate() {
            if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(Error::NotNormalized { row, norm });
            }
        }
        Ok(Self(embeddings))
    }

    /// Normalizes raw encoder outputs row by row.
    pub fn from_raw(embeddings: &Tensor) -> Result<Self> {
        Self::check_rows(embeddings)?;
        Ok(Self(l2_normalize_rows(embeddings)?))
    }

    /// Interleaves two `N×D` view embeddings into pair-major order.
    pub fn from_views(first: &Tensor, second: &Tensor) -> Result<Self> {
        let (n, d) = first.dims2()?;
        if second.dims() != first.dims() {
            return Err(Error::shape(first.dims(), second.dims()));
        }
        Self::from_raw(&Tensor::stack(&[first, second], 1)?.reshape((2 * n, d))?)
    }

    fn check_rows(t: &Tensor) -> Result<()> {
        let (rows, _) = t.dims2().map_err(|_| Error::shape("2N×D", t.dims()))?;
        if rows < 2 || rows % 2 != 0 {
            return Err(Error::shape("2N×D with N >= 1", t.dims()));
        }
        Ok(())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn pairs(&self) -> usize {
        self.0.dims()[0] / 2
    }
}

/// NT-Xent loss averaged over all `2N` anchors:
/// `ℓ(i,j) = −log(exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ))`.
///
/// Rows are renormalized internally, so cosine similarity reduces to a dot product.
pub fn nt_xent_loss(batch: &EmbeddingBatch, tau: Temperature) -> Result<Tensor> {
    let z = l2_normalize_rows(batch.tensor())?;
    let (rows, _) = z.dims2()?;
    let dtype = z.dtype();
    let device = z.device();
    let sim = (z.matmul(&z.t()?)? / tau.value())?;

    let mut diag = vec![0f64; rows * rows];
    let mut partner = vec![0f64; rows * rows];
    for i in 0..rows {
        diag[i * rows + i] = f64::NEG_INFINITY;
        partner[i * rows + (i ^ 1)] = 1.0;
    }
    let diag = Tensor::from_vec(diag, (rows, rows), device)?.to_dtype(dtype)?;
    let partner = Tensor::from_vec(partner, (rows, rows), device)?.to_dtype(dtype)?;

    let masked = (&sim + diag)?;
    let shift = masked.max_keepdim(1)?.detach();
    let lse = (masked.broadcast_sub(&shift)?.exp()?.sum_keepdim(1)?.log()? + shift)?.squeeze(1)?;
    let positive = (sim * partner)?.sum(1)?;
    Ok((lse - positive)?.mean_all()?)
}

fn default_update_rate() -> f64 {
    0.5
}
fn default_negatives() -> usize {
    4096
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryBankConfig {
    #[serde(default = "default_update_rate")]
    pub update_rate: f64,
    #[serde(default = "default_negatives")]
    pub num_negatives: usize,
}

impl Default for MemoryBankConfig {
    fn default() -> Self {
        Self { update_rate: default_update_rate(), num_negatives: default_negatives() }
    }
}

/// Per-example unit-norm feature slots, updated by momentum averaging.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    slots: Vec<f32>,
    len: usize,
    dim: usize,
    update_rate: f64,
    num_negatives: usize,
}

impl MemoryBank {
    /// Slots initialized to independent uniformly random unit vectors.
    pub fn new(len: usize, dim: usize, config: MemoryBankConfig, rng: &mut SeededRng) -> Result<Self> {
        if len < 2 || dim == 0 {
            return Err(Error::ConfigInvalid(format!("memory bank needs >= 2 slots and dim >= 1, got {len}×{dim}")));
        }
        if !(0.0..=1.0).contains(&config.update_rate) {
            return Err(Error::ConfigInvalid(format!("update_rate {} outside [0, 1]", config.update_rate)));
        }
        let mut slots = Vec::with_capacity(len * dim);
        for _ in 0..len {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            slots.extend(v.iter().map(|x| (x / n) as f32));
        }
        Ok(Self { slots, len, dim, update_rate: config.update_rate, num_negatives: config.num_negatives })
    }

    /// Bank with explicit slot contents; rows are normalized on entry.
    pub fn from_slots(rows: &[Vec<f64>], update_rate: f64, num_negatives: usize) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.len() < 2 || dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::ConfigInvalid("memory bank rows must be >= 2 and share a nonzero dim".into()));
        }
        let mut slots = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            slots.extend(r.iter().map(|x| (x / n) as f32));
        }
        Ok(Self { slots, len: rows.len(), dim, update_rate, num_negatives })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn update_rate(&self) -> f64 {
        self.update_rate
    }

    pub fn num_negatives(&self) -> usize {
        self.num_negatives
    }

    pub fn slot(&self, i: usize) -> &[f32] {
        &self.slots[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.slots, (self.len, self.dim), device)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor, config: MemoryBankConfig) -> Result<Self> {
        let (len, dim) = t.dims2()?;
        let slots: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        Ok(Self { slots, len, dim, update_rate: config.update_rate, num_negatives: config.num_negatives })
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.len {
            Err(Error::IndexOutOfRange { index, len: self.len })
        } else {
            Ok(())
        }
    }

    /// Uniform sample of `num_negatives` distinct slots other than `own`.
    pub fn sample_negatives(&self, own: usize, rng: &mut SeededRng) -> Vec<usize> {
        rand::seq::index::sample(rng, self.len - 1, self.num_negatives)
            .into_iter()
            .map(|j| if j >= own { j + 1 } else { j })
            .collect()
    }

    /// `m_i ← normalize((1 − r)·m_i + r·z_i)` for each (embedding, index) row.
    pub fn update(&mut self, embeddings: &Tensor, indices: &[usize]) -> Result<()> {
        let (rows, dim) = embeddings.dims2()?;
        if rows != indices.len() || dim != self.dim {
            return Err(Error::shape((indices.len(), self.dim), embeddings.dims()));
        }
        for &i in indices {
            self.check_index(i)?;
        }
        let z: Vec<f64> = embeddings.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let r = self.update_rate;
        for (row, &slot) in indices.iter().enumerate() {
            let zi = &z[row * dim..(row + 1) * dim];
            let zn = zi.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let mixed: Vec<f64> =
                self.slot(slot).iter().zip(zi).map(|(&m, &z)| (1.0 - r) * m as f64 + r * z / zn).collect();
            let n = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
            let target = &mut self.slots[slot * dim..(slot + 1) * dim];
            if n < 1e-12 {
                for (t, z) in target.iter_mut().zip(zi) {
                    *t = (z / zn) as f32;
                }
            } else {
                for (t, m) in target.iter_mut().zip(&mixed) {
                    *t = (m / n) as f32;
                }
            }
        }
        Ok(())
    }
}

/// Sampled-softmax instance discrimination: each embedding must pick out its
/// own bank slot among `num_negatives` uniformly drawn other slots.
pub fn instdisc_loss(
    embeddings: &Tensor,
    indices: &[usize],
    bank: &MemoryBank,
    tau: Temperature,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let (rows, dim) = embeddings.dims2()?;
    if rows != indices.len() || dim != bank.dim() || rows == 0 {
        return Err(Error::shape((indices.len(), bank.dim()), embeddings.dims()));
    }
    for &i in indices {
        bank.check_index(i)?;
    }
    if bank.num_negatives == 0 || bank.num_negatives > bank.len - 1 {
        return Err(Error::ConfigInvalid(format!(
            "num_negatives {} must lie in [1, {}]",
            bank.num_negatives,
            bank.len - 1
        )));
    }
    let z = l2_normalize_rows(embeddings)?;
    let k = bank.num_negatives + 1;
    let mut columns = Vec::with_capacity(rows * k);
    for &own in indices {
        columns.push(own as u32);
        columns.extend(bank.sample_negatives(own, rng).into_iter().map(|j| j as u32));
    }
    let columns = Tensor::from_vec(columns, (rows, k), z.device())?;
    let slots = bank.to_tensor(z.dtype(), z.device())?;
    let logits = (z.matmul(&slots.t()?)? / tau.value())?.gather(&columns, 1)?;
    let shift = logits.max_keepdim(1)?.detach();
    let lse = (logits.broadcast_sub(&shift)?.exp()?.sum_keepdim(1)?.log()? + shift)?;
    let positive = logits.narrow(1, 0, 1)?;
    Ok((lse - positive)?.mean_all()?)
}
