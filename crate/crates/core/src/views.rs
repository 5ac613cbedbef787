//! View-pair bookkeeping shared by the trainer and the evaluation protocols.

use candle_core::Tensor;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::augment::{
    image_expert_view, spectral_mask_view, waveform_view, ImageExpertPolicy, SpectralMaskPolicy, WaveformPolicy,
};
use crate::dataprep::{self, waveform_to_logmel, Example, Modality, NormStats, PreprocessMode, SpectrogramSpec};
use crate::error::{Error, Result};
use crate::perturb::{gaussian_noise_view, per_example_norm, Perturbation, PerturbationBudget};
use crate::rng::SeededRng;
use crate::viewmaker::Viewmaker;

/// Where the two views of an input come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSourceKind {
    Viewmaker,
    Expert,
    /// Expert pipeline first, then a viewmaker perturbation of the result.
    Combined,
    GaussianNoise,
    DctViewmaker,
}

impl ViewSourceKind {
    pub fn uses_viewmaker(self) -> bool {
        matches!(self, Self::Viewmaker | Self::Combined | Self::DctViewmaker)
    }

    pub fn uses_expert(self) -> bool {
        matches!(self, Self::Expert | Self::Combined)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Viewmaker => "viewmaker",
            Self::Expert => "expert",
            Self::Combined => "combined",
            Self::GaussianNoise => "gaussian_noise",
            Self::DctViewmaker => "dct_viewmaker",
        }
    }
}

/// Two independently generated views of the same batch.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub first: Tensor,
    pub second: Tensor,
    /// Projected perturbations, when the source perturbs on a budget.
    pub perturbations: Option<(Perturbation, Perturbation)>,
    pub source: ViewSourceKind,
}

/// A handcrafted view pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpertPolicy {
    Image(ImageExpertPolicy),
    /// Crop + noise on the raw waveform, then a fresh training-mode spectrogram.
    Waveform {
        #[serde(default)]
        policy: WaveformPolicy,
        spectrogram: SpectrogramSpec,
    },
    SpectralMask(SpectralMaskPolicy),
}

impl ExpertPolicy {
    pub fn validate(&self, modality: Modality) -> Result<()> {
        let ok = match self {
            ExpertPolicy::Image(p) => {
                p.validate()?;
                modality == Modality::Image
            }
            ExpertPolicy::Waveform { policy, spectrogram } => {
                policy.validate()?;
                spectrogram.validate()?;
                modality == Modality::Spectrogram
            }
            ExpertPolicy::SpectralMask(_) => modality != Modality::Image,
        };
        if !ok {
            return Err(Error::ConfigParse {
                field: "expert.kind".into(),
                message: format!("{self:?} does not apply to {modality:?} inputs"),
            });
        }
        Ok(())
    }

    fn apply(&self, example: &Example, stats: &NormStats, rng: &mut SeededRng) -> Result<Array3<f32>> {
        match self {
            ExpertPolicy::Image(p) => Ok(image_expert_view(&example.input.view(), p, rng)),
            ExpertPolicy::Waveform { policy, spectrogram } => {
                let wave = example
                    .waveform
                    .as_ref()
                    .ok_or_else(|| Error::ConfigInvalid("waveform views need examples loaded from audio".into()))?;
                let crop = waveform_view(wave, policy, rng)?;
                let spec = waveform_to_logmel(&crop.samples, spectrogram, PreprocessMode::Train, rng)?;
                stats.normalize(&spec)
            }
            ExpertPolicy::SpectralMask(p) => spectral_mask_view(&example.input.view(), p, rng),
        }
    }
}

/// Turns a batch into encoder-ready views.
///
/// Image batches hold raw `[0, 1]` pixels: views are made in pixel space and
/// standardized afterwards with `stats`. Spectral batches are already
/// standardized, so views are fed to the encoder as they are.
pub struct ViewPipeline<'a> {
    pub kind: ViewSourceKind,
    pub viewmaker: Option<&'a Viewmaker>,
    pub expert: Option<&'a ExpertPolicy>,
    pub noise_budget: Option<PerturbationBudget>,
    pub stats: &'a NormStats,
    pub modality: Modality,
}

impl ViewPipeline<'_> {
    fn expert_batch(&self, examples: &[&Example], x: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        let policy = self.expert.ok_or_else(|| Error::ConfigInvalid("expert views need an expert policy".into()))?;
        let views = examples.iter().map(|e| policy.apply(e, self.stats, rng)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Array3<f32>> = views.iter().collect();
        dataprep::stack(&refs, x.dtype(), x.device())
    }

    fn viewmaker(&self) -> Result<&Viewmaker> {
        self.viewmaker.ok_or_else(|| Error::ConfigInvalid(format!("{} views need a viewmaker", self.kind.as_str())))
    }

    /// One view of every example. `x` is the stacked batch of `examples`.
    pub fn view(&self, examples: &[&Example], x: &Tensor, rng: &mut SeededRng) -> Result<(Tensor, Option<Perturbation>)> {
        let (view, perturbation) = match self.kind {
            ViewSourceKind::Expert => (self.expert_batch(examples, x, rng)?, None),
            ViewSourceKind::Viewmaker | ViewSourceKind::DctViewmaker => {
                let v = self.viewmaker()?.generate_view(x, rng)?;
                (v.view, Some(v.perturbation))
            }
            ViewSourceKind::Combined => {
                let expert = self.expert_batch(examples, x, rng)?;
                let v = self.viewmaker()?.generate_view(&expert, rng)?;
                (v.view, Some(v.perturbation))
            }
            ViewSourceKind::GaussianNoise => {
                let budget = self
                    .noise_budget
                    .ok_or_else(|| Error::ConfigInvalid("gaussian_noise views need a noise budget".into()))?;
                let v = gaussian_noise_view(x, &budget, rng)?;
                (v.view, Some(v.perturbation))
            }
        };
        let view = if self.modality.normalize_before_views() { view } else { self.stats.normalize_tensor(&view)? };
        Ok((view, perturbation))
    }

    /// Two views with independent randomness, drawn in order from `rng`.
    pub fn pair(&self, examples: &[&Example], x: &Tensor, rng: &mut SeededRng) -> Result<ViewPair> {
        let (first, p1) = self.view(examples, x, rng)?;
        let (second, p2) = self.view(examples, x, rng)?;
        let perturbations = p1.zip(p2);
        Ok(ViewPair { first, second, perturbations, source: self.kind })
    }
}

impl ViewPair {
    /// Mean per-example norm of both perturbations, before any clamping.
    pub fn mean_perturbation_norm(&self, budget: &PerturbationBudget) -> Result<Option<f64>> {
        let Some((a, b)) = &self.perturbations else { return Ok(None) };
        let mut norms = Vec::new();
        for p in [a, b] {
            let n = per_example_norm(p.values(), budget.p)?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
            norms.extend(n);
        }
        Ok(Some(norms.iter().sum::<f64>() / norms.len().max(1) as f64))
    }
}
