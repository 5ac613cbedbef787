//! Budget algebra for bounded perturbations.
//!
//! A perturbation for a `C×W×H` input is rescaled onto the ℓp sphere of
//! radius `ε·C·W·H`, added to the input, and optionally clamped to `[0, 1]`.
//! All tensors here are NCHW batches; the radius applies per example.

use std::fmt;

use candle_core::{DType, Tensor, D};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng::{normal_tensor, SeededRng};

/// Norms below this are treated as a dead generator output.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormOrder {
    #[default]
    L1,
    L2,
    LInf,
}

impl Serialize for NormOrder {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            NormOrder::L1 => s.serialize_u8(1),
            NormOrder::L2 => s.serialize_u8(2),
            NormOrder::LInf => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for NormOrder {
    fn deserialize<De: Deserializer<'de>>(d: De) -> std::result::Result<Self, De::Error> {
        struct OrderVisitor;
        impl Visitor<'_> for OrderVisitor {
            type Value = NormOrder;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("1, 2 or \"inf\"")
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<NormOrder, E> {
                match v {
                    1 => Ok(NormOrder::L1),
                    2 => Ok(NormOrder::L2),
                    _ => Err(E::custom(format!("unsupported norm order {v}"))),
                }
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<NormOrder, E> {
                self.visit_i64(v as i64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<NormOrder, E> {
                match v {
                    "1" | "l1" => Ok(NormOrder::L1),
                    "2" | "l2" => Ok(NormOrder::L2),
                    "inf" | "linf" => Ok(NormOrder::LInf),
                    _ => Err(E::custom(format!("unsupported norm order {v:?}"))),
                }
            }
        }
        d.deserialize_any(OrderVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbDomain {
    #[default]
    Signal,
    Dct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationBudget {
    #[serde(default)]
    pub p: NormOrder,
    pub epsilon: f64,
    /// Clamp views to [0, 1]. Only meaningful for pixel inputs.
    pub clamp: bool,
    #[serde(default)]
    pub domain: PerturbDomain,
}

impl PerturbationBudget {
    /// ℓ1 budget for pixel images (clamped).
    pub fn image(epsilon: f64) -> Self {
        Self { p: NormOrder::L1, epsilon, clamp: true, domain: PerturbDomain::Signal }
    }

    /// ℓ1 budget for spectrogram-like inputs (never clamped).
    pub fn spectrogram(epsilon: f64) -> Self {
        Self { p: NormOrder::L1, epsilon, clamp: false, domain: PerturbDomain::Signal }
    }

    pub fn with_order(mut self, p: NormOrder) -> Self {
        self.p = p;
        self
    }

    pub fn with_domain(mut self, domain: PerturbDomain) -> Self {
        self.domain = domain;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::ConfigParse {
                field: "epsilon".into(),
                message: format!("distortion budget must be finite and >= 0, got {}", self.epsilon),
            });
        }
        Ok(())
    }

    /// Sphere radius `ε·C·W·H` for one example of the given dims.
    pub fn radius(&self, channels: usize, width: usize, height: usize) -> f64 {
        self.epsilon * (channels * width * height) as f64
    }
}

/// A perturbation batch that has been scaled onto its budget sphere.
#[derive(Debug, Clone)]
pub struct Perturbation(Tensor);

impl Perturbation {
    /// Wraps a tensor the caller asserts is already on budget (or zero).
    pub fn from_projected(values: Tensor) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_inner(self) -> Tensor {
        self.0
    }

    /// Per-example norms of the given order.
    pub fn norms(&self, p: NormOrder) -> Result<Vec<f64>> {
        per_example_norm(&self.0, p)?.to_dtype(DType::F64)?.to_vec1::<f64>().map_err(Into::into)
    }
}

/// A view together with the projected perturbation that produced it.
#[derive(Debug, Clone)]
pub struct PerturbedView {
    pub view: Tensor,
    pub perturbation: Perturbation,
}

fn batch_dims(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    t.dims4().map_err(|_| Error::shape("N×C×W×H", t.dims()))
}

/// Differentiable per-example norm over all non-batch dims; shape `(N,)`.
pub fn per_example_norm(t: &Tensor, p: NormOrder) -> Result<Tensor> {
    let flat = t.flatten_from(1)?;
    let norm = match p {
        NormOrder::L1 => flat.abs()?.sum(D::Minus1)?,
        NormOrder::L2 => flat.sqr()?.sum(D::Minus1)?.sqrt()?,
        NormOrder::LInf => flat.abs()?.max(D::Minus1)?,
    };
    Ok(norm)
}

/// Scales each example of `raw` exactly onto the sphere of radius `ε·C·W·H`.
///
/// Small perturbations are scaled up, large ones down. Fails with
/// [`Error::DegenerateNorm`] if any example has norm below [`DEGENERATE_NORM`].
pub fn project_to_budget(raw: &Tensor, budget: &PerturbationBudget) -> Result<Perturbation> {
    let (_, c, w, h) = batch_dims(raw)?;
    let norms = per_example_norm(raw, budget.p)?;
    let host: Vec<f64> = norms.to_dtype(DType::F64)?.to_vec1()?;
    if let Some(&bad) = host.iter().find(|n| !(**n >= DEGENERATE_NORM)) {
        return Err(Error::DegenerateNorm { norm: bad });
    }
    let radius = budget.radius(c, w, h);
    let scale = norms.recip()?.affine(radius, 0.0)?.reshape(((), 1, 1, 1))?;
    Ok(Perturbation(raw.broadcast_mul(&scale)?))
}

/// `clamp(X + P, 0, 1)` when the budget clamps, `X + P` otherwise.
pub fn apply_perturbation(x: &Tensor, p: &Perturbation, budget: &PerturbationBudget) -> Result<Tensor> {
    if x.dims() != p.0.dims() {
        return Err(Error::shape(x.dims(), p.0.dims()));
    }
    let sum = (x + &p.0)?;
    if budget.clamp {
        Ok(sum.clamp(0.0, 1.0)?)
    } else {
        Ok(sum)
    }
}

/// Random-noise baseline: standard Gaussian noise projected onto the budget.
pub fn gaussian_noise_view(x: &Tensor, budget: &PerturbationBudget, rng: &mut SeededRng) -> Result<PerturbedView> {
    batch_dims(x)?;
    let noise = normal_tensor(rng, x.dims(), x.dtype(), x.device())?;
    let perturbation = project_to_budget(&noise, budget)?;
    let view = apply_perturbation(x, &perturbation, budget)?;
    Ok(PerturbedView { view, perturbation })
}

/// Orthonormal type-II DCT matrix of size `n×n`; its transpose is the inverse.
pub fn dct_matrix(n: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut m = vec![0f64; n * n];
    for k in 0..n {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] = s * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    Ok(Tensor::from_vec(m, (n, n), device)?.to_dtype(dtype)?)
}

/// Separable 2-D DCT-II over the last two dims of an NCHW tensor.
pub fn dct2d(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = batch_dims(x)?;
    let dh = dct_matrix(h, x.dtype(), x.device())?;
    let dw = dct_matrix(w, x.dtype(), x.device())?;
    Ok(dh.broadcast_matmul(x)?.broadcast_matmul(&dw.t()?)?)
}

/// Inverse of [`dct2d`] (type-III).
pub fn idct2d(y: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = batch_dims(y)?;
    let dh = dct_matrix(h, y.dtype(), y.device())?;
    let dw = dct_matrix(w, y.dtype(), y.device())?;
    Ok(dh.t()?.broadcast_matmul(y)?.broadcast_matmul(&dw)?)
}

/// Frequency-domain view: perturb the DCT coefficients and transform back.
///
/// `raw` is projected onto the budget in coefficient space. A zero `raw` is
/// accepted and yields the DCT round trip of `x`.
pub fn dct_view(x: &Tensor, raw: &Tensor, budget: &PerturbationBudget) -> Result<PerturbedView> {
    if budget.domain != PerturbDomain::Dct {
        return Err(Error::ConfigInvalid("dct_view requires a budget with domain = dct".into()));
    }
    if x.dims() != raw.dims() {
        return Err(Error::shape(x.dims(), raw.dims()));
    }
    let coeffs = dct2d(x)?;
    let zero = per_example_norm(raw, budget.p)?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?
        .iter()
        .all(|&n| n == 0.0);
    let perturbation = if zero { Perturbation(raw.clone()) } else { project_to_budget(raw, budget)? };
    let spatial = idct2d(&(coeffs + perturbation.values())?)?;
    let view = if budget.clamp { spatial.clamp(0.0, 1.0)? } else { spatial };
    Ok(PerturbedView { view, perturbation })
}
