//! The viewmaker: a stochastic image-to-image generator whose output is
//! projected onto a perturbation budget and added to its input.
//!
//! Layout follows the fast style-transfer network: a 9×9 stem, two stride-2
//! downsampling convolutions, a stack of residual blocks, two
//! nearest-upsample + convolution stages and a final 9×9 convolution back to
//! the input channel count. Instance norm and ReLU follow every layer except
//! the output, which is linear. A fresh uniform noise map is concatenated to
//! the input and again before each residual block, so the residual stack
//! widens by `noise_dim` channels per block.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, InstanceNorm2d, ParamStore, Padding};
use crate::perturb::{self, PerturbDomain, PerturbationBudget, PerturbedView};
use crate::rng::{uniform_tensor, SeededRng};
use crate::views::{ViewPair, ViewSourceKind};

fn default_blocks() -> usize {
    3
}
fn default_noise_dim() -> usize {
    1
}
fn default_base_channels() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewmakerConfig {
    pub in_channels: usize,
    #[serde(default = "default_blocks")]
    pub num_residual_blocks: usize,
    pub budget: PerturbationBudget,
    #[serde(default = "default_noise_dim")]
    pub noise_dim: usize,
    /// Width of the stem; the bottleneck has four times as many channels.
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
}

impl ViewmakerConfig {
    pub fn new(in_channels: usize, budget: PerturbationBudget) -> Self {
        Self {
            in_channels,
            num_residual_blocks: default_blocks(),
            budget,
            noise_dim: default_noise_dim(),
            base_channels: default_base_channels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::ConfigInvalid("viewmaker in_channels must be >= 1".into()));
        }
        if self.num_residual_blocks == 0 {
            return Err(Error::ConfigInvalid("viewmaker num_residual_blocks must be >= 1".into()));
        }
        if self.noise_dim == 0 || self.base_channels == 0 {
            return Err(Error::ConfigInvalid("viewmaker noise_dim and base_channels must be >= 1".into()));
        }
        self.budget.validate()
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    norm: InstanceNorm2d,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, kernel, stride, Padding::Reflect, true)?,
            norm: InstanceNorm2d::new(store, &format!("{name}.norm"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: Conv2d,
    norm1: InstanceNorm2d,
    conv2: Conv2d,
    norm2: InstanceNorm2d,
}

impl ResidualBlock {
    fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), channels, channels, 3, 1, Padding::Reflect, true)?,
            norm1: InstanceNorm2d::new(store, &format!("{name}.norm1"), channels)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), channels, channels, 3, 1, Padding::Reflect, true)?,
            norm2: InstanceNorm2d::new(store, &format!("{name}.norm2"), channels)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.norm2.forward(&self.conv2.forward(&y)?)?;
        Ok((y + x)?)
    }
}

#[derive(Debug, Clone)]
struct UpsampleBlock {
    inner: ConvBlock,
}

impl UpsampleBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.inner.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)
    }
}

/// Generator parameters plus the configuration that shaped them.
#[derive(Debug)]
pub struct Viewmaker {
    config: ViewmakerConfig,
    store: ParamStore,
    stem: ConvBlock,
    down1: ConvBlock,
    down2: ConvBlock,
    residuals: Vec<ResidualBlock>,
    up1: UpsampleBlock,
    up2: UpsampleBlock,
    head: Conv2d,
}

impl Viewmaker {
    pub fn build(config: ViewmakerConfig, rng: &mut SeededRng, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, device.clone());
        let s = &mut store;
        let b = config.base_channels;
        let noise = config.noise_dim;
        let stem = ConvBlock::new(s, rng, "stem", config.in_channels + noise, b, 9, 1)?;
        let down1 = ConvBlock::new(s, rng, "down1", b, 2 * b, 3, 2)?;
        let down2 = ConvBlock::new(s, rng, "down2", 2 * b, 4 * b, 3, 2)?;
        let residuals = (1..=config.num_residual_blocks)
            .map(|i| ResidualBlock::new(s, rng, &format!("res{i}"), 4 * b + i * noise))
            .collect::<Result<Vec<_>>>()?;
        let widest = 4 * b + config.num_residual_blocks * noise;
        let up1 = UpsampleBlock { inner: ConvBlock::new(s, rng, "up1", widest, 2 * b, 3, 1)? };
        let up2 = UpsampleBlock { inner: ConvBlock::new(s, rng, "up2", 2 * b, b, 3, 1)? };
        let head = Conv2d::new(s, rng, "head", b, config.in_channels, 9, 1, Padding::Reflect, true)?;
        Ok(Self { config, store, stem, down1, down2, residuals, up1, up2, head })
    }

    pub fn config(&self) -> &ViewmakerConfig {
        &self.config
    }

    pub fn budget(&self) -> &PerturbationBudget {
        &self.config.budget
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4().map_err(|_| Error::shape("N×C×W×H", x.dims()))?;
        if c != self.config.in_channels || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                format!("N×{}×H×W with H, W positive multiples of 4", self.config.in_channels),
                x.dims(),
            ));
        }
        Ok(())
    }

    fn with_noise(&self, x: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let noise = uniform_tensor(rng, &[b, self.config.noise_dim, h, w], x.dtype(), x.device())?;
        Ok(Tensor::cat(&[x, &noise], 1)?)
    }

    /// Raw (unprojected) generator output `V(X, δ)` with fresh noise from `rng`.
    pub fn raw_perturbation(&self, x: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        self.check_input(x)?;
        let x = x.to_dtype(self.store.dtype())?;
        let mut y = self.stem.forward(&self.with_noise(&x, rng)?)?;
        y = self.down1.forward(&y)?;
        y = self.down2.forward(&y)?;
        for block in &self.residuals {
            y = block.forward(&self.with_noise(&y, rng)?)?;
        }
        y = self.up1.forward(&y)?;
        y = self.up2.forward(&y)?;
        self.head.forward(&y)
    }

    /// One view per example: generate, project onto the budget, apply.
    /// Differentiable with respect to both the parameters and `x`.
    pub fn generate_view(&self, x: &Tensor, rng: &mut SeededRng) -> Result<PerturbedView> {
        let raw = self.raw_perturbation(x, rng)?;
        let x = x.to_dtype(self.store.dtype())?;
        match self.config.budget.domain {
            PerturbDomain::Signal => {
                let perturbation = perturb::project_to_budget(&raw, &self.config.budget)?;
                let view = perturb::apply_perturbation(&x, &perturbation, &self.config.budget)?;
                Ok(PerturbedView { view, perturbation })
            }
            PerturbDomain::Dct => perturb::dct_view(&x, &raw, &self.config.budget),
        }
    }

    /// Two views with independent noise draws.
    pub fn view_pair(&self, x: &Tensor, rng: &mut SeededRng) -> Result<ViewPair> {
        let a = self.generate_view(x, rng)?;
        let b = self.generate_view(x, rng)?;
        let source = match self.config.budget.domain {
            PerturbDomain::Signal => ViewSourceKind::Viewmaker,
            PerturbDomain::Dct => ViewSourceKind::DctViewmaker,
        };
        Ok(ViewPair { first: a.view, second: b.view, perturbations: Some((a.perturbation, b.perturbation)), source })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_string(&self.config).expect("viewmaker config serializes");
        archive::save(path, &self.store.tensors(), Some(&cfg))
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let (tensors, cfg) = archive::load(path)?;
        let cfg = cfg.ok_or_else(|| Error::CheckpointMismatch(format!("{} has no viewmaker config", path.display())))?;
        let config: ViewmakerConfig = serde_json::from_str(&cfg)
            .map_err(|e| Error::CheckpointMismatch(format!("{} is not a viewmaker checkpoint: {e}", path.display())))?;
        let vm = Self::build(config, &mut crate::rng::seeded(0), dtype, device)?;
        vm.store.load(&tensors)?;
        Ok(vm)
    }
}
