//! ResNet encoders exposing two feature surfaces: the contrastive embedding
//! (after global pooling and the head) and the flattened pre-pooling
//! activations of the last convolutional stage, used for linear evaluation.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Linear, Mode, ParamStore, Padding};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// 3×3 stride-1 stem, no max-pool: for 32×32 inputs.
    SmallResnet18,
    StandardResnet18,
    /// Bottleneck ResNet-50 with a two-layer MLP projection head.
    Resnet50Mlp,
}

fn default_embedding_dim() -> usize {
    128
}
fn default_mlp_hidden() -> usize {
    2048
}
fn default_width() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub input_channels: usize,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    /// Hidden width of the projection head (resnet50_mlp only).
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
    /// Channels of the first stage; later stages double it.
    #[serde(default = "default_width")]
    pub width: usize,
}

impl EncoderConfig {
    pub fn new(variant: EncoderVariant, input_channels: usize) -> Self {
        Self {
            variant,
            input_channels,
            embedding_dim: default_embedding_dim(),
            mlp_hidden: default_mlp_hidden(),
            width: default_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.embedding_dim == 0 || self.width == 0 || self.mlp_hidden == 0 {
            return Err(Error::ConfigInvalid("encoder dimensions must be >= 1".into()));
        }
        Ok(())
    }

    fn expansion(&self) -> usize {
        match self.variant {
            EncoderVariant::Resnet50Mlp => 4,
            _ => 1,
        }
    }

    /// Total spatial downsampling between input and the last stage.
    pub fn stride(&self) -> usize {
        match self.variant {
            EncoderVariant::SmallResnet18 => 8,
            _ => 32,
        }
    }

    pub fn final_channels(&self) -> usize {
        8 * self.width * self.expansion()
    }

    /// Length of the flattened pre-pooling feature vector for an `h×w` input.
    pub fn prepool_dim(&self, h: usize, w: usize) -> usize {
        let (fh, fw) = match self.variant {
            EncoderVariant::SmallResnet18 => (h.div_ceil(8), w.div_ceil(8)),
            _ => {
                let stem = |n: usize| (n + 6 - 7) / 2 + 1;
                let pool = |n: usize| (n + 2 - 3) / 2 + 1;
                let halve = |n: usize| n.div_ceil(2);
                (halve(halve(halve(pool(stem(h))))), halve(halve(halve(pool(stem(w))))))
            }
        };
        self.final_channels() * fh * fw
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        s: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(s, rng, &format!("{name}.conv"), cin, cout, k, stride, Padding::Zeros(pad), false)?,
            bn: BatchNorm2d::new(s, &format!("{name}.bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, mode)
    }
}

#[derive(Debug, Clone)]
enum Block {
    Basic { a: ConvBn, b: ConvBn, shortcut: Option<ConvBn> },
    Bottleneck { a: ConvBn, b: ConvBn, c: ConvBn, shortcut: Option<ConvBn> },
}

impl Block {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (y, shortcut) = match self {
            Block::Basic { a, b, shortcut } => {
                let y = a.forward(x, mode)?.relu()?;
                (b.forward(&y, mode)?, shortcut)
            }
            Block::Bottleneck { a, b, c, shortcut } => {
                let y = a.forward(x, mode)?.relu()?;
                let y = b.forward(&y, mode)?.relu()?;
                (c.forward(&y, mode)?, shortcut)
            }
        };
        let residual = match shortcut {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        Ok((y + residual)?.relu()?)
    }
}

#[derive(Debug, Clone)]
enum Head {
    Linear(Linear),
    Mlp(Linear, Linear),
}

/// Outputs of one encoder pass.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    /// Head output feeding the contrastive loss (not yet normalized).
    pub embedding: Tensor,
    /// Flattened last-stage activations, `N × prepool_dim`.
    pub prepool: Tensor,
}

#[derive(Debug)]
pub struct Encoder {
    config: EncoderConfig,
    store: ParamStore,
    stem: ConvBn,
    max_pool: bool,
    blocks: Vec<Block>,
    head: Head,
}

impl Encoder {
    pub fn build(config: EncoderConfig, rng: &mut SeededRng, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, device.clone());
        let s = &mut store;
        let w = config.width;
        let (stem, max_pool) = match config.variant {
            EncoderVariant::SmallResnet18 => (ConvBn::new(s, rng, "stem", config.input_channels, w, 3, 1, 1)?, false),
            _ => (ConvBn::new(s, rng, "stem", config.input_channels, w, 7, 2, 3)?, true),
        };
        let (depths, bottleneck) = match config.variant {
            EncoderVariant::Resnet50Mlp => ([3, 4, 6, 3], true),
            _ => ([2, 2, 2, 2], false),
        };
        let expansion = config.expansion();
        let mut blocks = Vec::new();
        let mut cin = w;
        for (stage, &depth) in depths.iter().enumerate() {
            let planes = w << stage;
            for i in 0..depth {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let name = format!("layer{}.{i}", stage + 1);
                let cout = planes * expansion;
                let shortcut = if stride != 1 || cin != cout {
                    Some(ConvBn::new(s, rng, &format!("{name}.shortcut"), cin, cout, 1, stride, 0)?)
                } else {
                    None
                };
                let block = if bottleneck {
                    Block::Bottleneck {
                        a: ConvBn::new(s, rng, &format!("{name}.a"), cin, planes, 1, 1, 0)?,
                        b: ConvBn::new(s, rng, &format!("{name}.b"), planes, planes, 3, stride, 1)?,
                        c: ConvBn::new(s, rng, &format!("{name}.c"), planes, cout, 1, 1, 0)?,
                        shortcut,
                    }
                } else {
                    Block::Basic {
                        a: ConvBn::new(s, rng, &format!("{name}.a"), cin, planes, 3, stride, 1)?,
                        b: ConvBn::new(s, rng, &format!("{name}.b"), planes, planes, 3, 1, 1)?,
                        shortcut,
                    }
                };
                blocks.push(block);
                cin = cout;
            }
        }
        let head = match config.variant {
            EncoderVariant::Resnet50Mlp => Head::Mlp(
                Linear::new(s, rng, "head.hidden", cin, config.mlp_hidden)?,
                Linear::new(s, rng, "head.out", config.mlp_hidden, config.embedding_dim)?,
            ),
            _ => Head::Linear(Linear::new(s, rng, "head.out", cin, config.embedding_dim)?),
        };
        Ok(Self { config, store, stem, max_pool, blocks, head })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Forward pass. `Mode::Eval` is deterministic and leaves every parameter
    /// and buffer untouched; `Mode::Train` uses batch statistics and updates
    /// the running estimates.
    pub fn encode(&self, x: &Tensor, mode: Mode) -> Result<FeatureBundle> {
        let (_, c, h, w) = x.dims4().map_err(|_| Error::shape("N×C×H×W", x.dims()))?;
        if c != self.config.input_channels || h < self.config.stride() || w < self.config.stride() {
            return Err(Error::shape(
                format!("N×{}×H×W with H, W >= {}", self.config.input_channels, self.config.stride()),
                x.dims(),
            ));
        }
        let x = x.to_dtype(self.store.dtype())?;
        let mut y = self.stem.forward(&x, mode)?.relu()?;
        if self.max_pool {
            // post-ReLU activations are non-negative, so zero padding acts as -inf padding
            y = y.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?.max_pool2d_with_stride(3, 2)?;
        }
        for block in &self.blocks {
            y = block.forward(&y, mode)?;
        }
        let prepool = y.flatten_from(1)?;
        let pooled = y.mean((2, 3))?;
        let embedding = match &self.head {
            Head::Linear(l) => l.forward(&pooled)?,
            Head::Mlp(a, b) => b.forward(&a.forward(&pooled)?.relu()?)?,
        };
        Ok(FeatureBundle { embedding, prepool })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_string(&self.config).expect("encoder config serializes");
        archive::save(path, &self.store.tensors(), Some(&cfg))
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let (tensors, cfg) = archive::load(path)?;
        let cfg = cfg.ok_or_else(|| Error::CheckpointMismatch(format!("{} has no encoder config", path.display())))?;
        let config: EncoderConfig = serde_json::from_str(&cfg)
            .map_err(|e| Error::CheckpointMismatch(format!("{} is not an encoder checkpoint: {e}", path.display())))?;
        let enc = Self::build(config, &mut crate::rng::seeded(0), dtype, device)?;
        enc.store.load(&tensors)?;
        Ok(enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform_tensor};

    fn input(dims: &[usize]) -> Tensor {
        uniform_tensor(&mut seeded(1), dims, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn small_resnet18_prepool_is_8192() {
        let cfg = EncoderConfig::new(EncoderVariant::SmallResnet18, 3);
        assert_eq!(cfg.prepool_dim(32, 32), 8192);
        let enc = Encoder::build(cfg, &mut seeded(0), DType::F32, &Device::Cpu).unwrap();
        let f = enc.encode(&input(&[2, 3, 32, 32]), Mode::Eval).unwrap();
        assert_eq!(f.prepool.dims(), &[2, 8192]);
        assert_eq!(f.embedding.dims(), &[2, 128]);
    }

    #[test]
    fn standard_resnet18_accepts_64x64_spectrograms() {
        let cfg = EncoderConfig::new(EncoderVariant::StandardResnet18, 1);
        let enc = Encoder::build(cfg.clone(), &mut seeded(0), DType::F32, &Device::Cpu).unwrap();
        let f = enc.encode(&input(&[1, 1, 64, 64]), Mode::Eval).unwrap();
        assert_eq!(f.prepool.dims(), &[1, cfg.prepool_dim(64, 64)]);
        assert_eq!(cfg.prepool_dim(64, 64), 512 * 2 * 2);
    }

    #[test]
    fn resnet50_mlp_head_on_112x112() {
        let cfg = EncoderConfig::new(EncoderVariant::Resnet50Mlp, 1);
        let enc = Encoder::build(cfg.clone(), &mut seeded(0), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(enc.params().get("head.hidden.weight").unwrap().dims(), &[2048, 2048]);
        let f = enc.encode(&input(&[1, 1, 112, 112]), Mode::Eval).unwrap();
        assert_eq!(f.embedding.dims(), &[1, 128]);
        assert_eq!(f.prepool.dims(), &[1, 2048 * 4 * 4]);
        assert_eq!(cfg.prepool_dim(112, 112), 2048 * 4 * 4);
    }

    #[test]
    fn small_and_standard_param_counts_are_close() {
        let small = Encoder::build(EncoderConfig::new(EncoderVariant::SmallResnet18, 3), &mut seeded(0), DType::F32, &Device::Cpu)
            .unwrap()
            .params()
            .param_count() as f64;
        let standard =
            Encoder::build(EncoderConfig::new(EncoderVariant::StandardResnet18, 3), &mut seeded(0), DType::F32, &Device::Cpu)
                .unwrap()
                .params()
                .param_count() as f64;
        assert!((small - standard).abs() / standard < 0.05);
        // ResNet-18 body: ~11.2M parameters
        assert!((11.0e6..11.5e6).contains(&standard), "{standard}");
    }

    #[test]
    fn eval_mode_is_deterministic_and_pure() {
        let mut cfg = EncoderConfig::new(EncoderVariant::SmallResnet18, 3);
        cfg.width = 8;
        let enc = Encoder::build(cfg, &mut seeded(0), DType::F32, &Device::Cpu).unwrap();
        let before = enc.params().snapshot().unwrap();
        let x = input(&[3, 3, 32, 32]);
        let a: Vec<f32> = enc.encode(&x, Mode::Eval).unwrap().prepool.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = enc.encode(&x, Mode::Eval).unwrap().prepool.flatten_all().unwrap().to_vec1().unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        for (k, t) in enc.params().tensors() {
            let d = (t - &before[&k]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0, "{k}");
        }
    }

    #[test]
    fn wrong_channels_rejected() {
        let mut cfg = EncoderConfig::new(EncoderVariant::SmallResnet18, 52);
        cfg.width = 4;
        let enc = Encoder::build(cfg, &mut seeded(0), DType::F32, &Device::Cpu).unwrap();
        assert!(enc.encode(&input(&[1, 52, 32, 32]), Mode::Eval).is_ok());
        assert!(matches!(enc.encode(&input(&[1, 3, 32, 32]), Mode::Eval), Err(Error::ShapeMismatch { .. })));
    }
}
