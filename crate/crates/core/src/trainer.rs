//! Min-max pretraining: the encoder descends the contrastive loss while the
//! viewmaker ascends it, both from one backward pass per batch.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::dataprep::{compute_norm_stats, Dataset, DatasetSpec, Example, Modality, NormStats};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Direction, Mode, Sgd, SgdConfig};
use crate::objectives::{instdisc_loss, l2_normalize_rows, nt_xent_loss, EmbeddingBatch, MemoryBank, MemoryBankConfig, Temperature};
use crate::perturb::{PerturbDomain, PerturbationBudget};
use crate::rng::{derive, SeededRng};
use crate::viewmaker::{Viewmaker, ViewmakerConfig};
use crate::views::{ExpertPolicy, ViewPipeline, ViewSourceKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Simclr,
    Instdisc,
}

fn d_batch() -> usize {
    256
}
fn d_epochs() -> usize {
    200
}
fn d_ckpt_every() -> usize {
    10
}

/// Declarative description of a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Name of the run directory; derived from the settings when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub view_source: ViewSourceKind,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub temperature: Temperature,
    /// Checkpoint period in epochs; the final step is always saved.
    #[serde(default = "d_ckpt_every")]
    pub checkpoint_every_epochs: usize,
    #[serde(default)]
    pub optimizer: SgdConfig,
    /// Defaults to `optimizer`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viewmaker_optimizer: Option<SgdConfig>,
    #[serde(default)]
    pub memory_bank: MemoryBankConfig,
    /// Budget of the random-noise baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_budget: Option<PerturbationBudget>,
    pub encoder: EncoderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viewmaker: Option<ViewmakerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert: Option<ExpertPolicy>,
    pub dataset: DatasetSpec,
}

/// Budget used when a viewmaker section leaves `epsilon` out.
pub fn default_epsilon(kind: ViewSourceKind) -> f64 {
    match kind {
        ViewSourceKind::Combined => 0.01,
        _ => 0.05,
    }
}

fn parse_err(field: impl Into<String>, message: impl ToString) -> Error {
    Error::ConfigParse { field: field.into(), message: message.to_string() }
}

impl ExperimentConfig {
    /// Parses TOML, filling budget defaults that depend on other fields:
    /// `epsilon` (0.01 for combined views, 0.05 otherwise), `clamp` (pixel
    /// inputs only) and the viewmaker's channel count.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            parse_err(format!("<document> line {line}"), e.message())
        })?;
        let kind = doc.get("view_source").and_then(|v| v.as_str()).map(str::to_owned);
        let image = doc
            .get("dataset")
            .and_then(|d| d.as_table())
            .map(|d| match d.get("kind").and_then(|k| k.as_str()) {
                Some("cifar10") => true,
                Some("pamap2") => false,
                _ => d.get("modality").and_then(|m| m.as_str()).unwrap_or("image") == "image",
            })
            .unwrap_or(true);
        let channels = doc.get("encoder").and_then(|e| e.get("input_channels")).cloned();
        let eps = match kind.as_deref() {
            Some("combined") => 0.01,
            _ => 0.05,
        };
        let fill_budget = |budget: &mut toml::Table| {
            budget.entry("epsilon").or_insert(toml::Value::Float(eps));
            budget.entry("clamp").or_insert(toml::Value::Boolean(image));
        };
        if let Some(vm) = doc.get_mut("viewmaker").and_then(|v| v.as_table_mut()) {
            if let (false, Some(c)) = (vm.contains_key("in_channels"), channels) {
                vm.insert("in_channels".into(), c);
            }
            let budget = vm.entry("budget").or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let Some(b) = budget.as_table_mut() {
                fill_budget(b);
            }
        }
        if let Some(b) = doc.get_mut("noise_budget").and_then(|v| v.as_table_mut()) {
            fill_budget(b);
        }
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(doc)).map_err(|e| {
            let path = e.path().to_string();
            parse_err(if path == "." { "<document>".to_string() } else { path }, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment config serializes to TOML")
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| {
            let objective = match self.objective {
                Objective::Simclr => "simclr",
                Objective::Instdisc => "instdisc",
            };
            format!("{}-{objective}-seed{}", self.view_source.as_str(), self.seed)
        })
    }

    pub fn viewmaker_optimizer(&self) -> SgdConfig {
        self.viewmaker_optimizer.unwrap_or(self.optimizer)
    }

    pub fn modality(&self) -> Modality {
        self.dataset.modality()
    }

    /// Budget behind `gaussian_noise` views: `noise_budget`, else the viewmaker's.
    pub fn noise_budget(&self) -> Option<PerturbationBudget> {
        self.noise_budget.or_else(|| self.viewmaker.as_ref().map(|v| v.budget))
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.view_source;
        if self.batch_size == 0 {
            return Err(parse_err("batch_size", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(parse_err("epochs", "must be >= 1"));
        }
        if self.checkpoint_every_epochs == 0 {
            return Err(parse_err("checkpoint_every_epochs", "must be >= 1"));
        }
        self.optimizer.validate("optimizer")?;
        self.viewmaker_optimizer().validate("viewmaker_optimizer")?;
        self.encoder.validate().map_err(|e| parse_err("encoder", e))?;
        self.dataset.validate()?;
        if kind.uses_viewmaker() {
            let vm = self.viewmaker.as_ref().ok_or_else(|| parse_err("viewmaker", format!("{} views need a viewmaker section", kind.as_str())))?;
            vm.budget.validate().map_err(|e| parse_err("viewmaker.budget.epsilon", e))?;
            vm.validate().map_err(|e| parse_err("viewmaker", e))?;
            if vm.in_channels != self.encoder.input_channels {
                return Err(parse_err("viewmaker.in_channels", "must equal encoder.input_channels"));
            }
            let want = if kind == ViewSourceKind::DctViewmaker { PerturbDomain::Dct } else { PerturbDomain::Signal };
            if vm.budget.domain != want {
                return Err(parse_err("viewmaker.budget.domain", format!("{} views need domain {want:?}", kind.as_str())));
            }
        }
        if kind.uses_expert() {
            let expert = self.expert.as_ref().ok_or_else(|| parse_err("expert", format!("{} views need an expert section", kind.as_str())))?;
            expert.validate(self.modality())?;
        }
        if kind == ViewSourceKind::GaussianNoise {
            let b = self.noise_budget().ok_or_else(|| parse_err("noise_budget", "gaussian_noise views need a budget"))?;
            b.validate().map_err(|e| parse_err("noise_budget.epsilon", e))?;
        }
        if self.objective == Objective::Instdisc && self.memory_bank.num_negatives == 0 {
            return Err(parse_err("memory_bank.num_negatives", "must be >= 1"));
        }
        Ok(())
    }
}

const STEP_STREAM: u64 = 1 << 32;
const SHUFFLE_STREAM: u64 = 1 << 48;

/// Randomness for step `step` of a run: views, noise and negative sampling.
pub fn step_rng(seed: u64, step: u64) -> SeededRng {
    derive(seed, STEP_STREAM + step)
}

/// Example order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive(seed, SHUFFLE_STREAM + epoch));
    order
}

/// Everything needed to continue a run exactly.
pub struct TrainState {
    pub encoder: Encoder,
    pub viewmaker: Option<Viewmaker>,
    pub encoder_opt: Sgd,
    pub viewmaker_opt: Option<Sgd>,
    pub bank: Option<MemoryBank>,
    /// Number of completed steps.
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RngRecord {
    seed: u64,
    step: u64,
}

impl TrainState {
    pub fn init(config: &ExperimentConfig, dataset_len: usize, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::build(config.encoder.clone(), &mut derive(config.seed, 1), dtype, device)?;
        let viewmaker = match (&config.viewmaker, config.view_source.uses_viewmaker()) {
            (Some(vm), true) => Some(Viewmaker::build(vm.clone(), &mut derive(config.seed, 2), dtype, device)?),
            _ => None,
        };
        let bank = match config.objective {
            Objective::Simclr => None,
            Objective::Instdisc => {
                let mut cfg = config.memory_bank;
                if cfg.num_negatives > dataset_len.saturating_sub(1) {
                    log::warn!("memory bank: {} negatives requested, dataset allows {}", cfg.num_negatives, dataset_len.saturating_sub(1));
                    cfg.num_negatives = dataset_len.saturating_sub(1);
                }
                Some(MemoryBank::new(dataset_len, config.encoder.embedding_dim, cfg, &mut derive(config.seed, 3))?)
            }
        };
        let encoder_opt = Sgd::new(encoder.params().trainable(), config.optimizer);
        let viewmaker_opt = viewmaker.as_ref().map(|v| Sgd::new(v.params().trainable(), config.viewmaker_optimizer()));
        Ok(Self { encoder, viewmaker, encoder_opt, viewmaker_opt, bank, step: 0, seed: config.seed })
    }

    /// Writes `encoder`, `viewmaker`, `optimizer`, `config` and `rng` files into `dir`.
    pub fn save(&self, dir: &Path, config: &ExperimentConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.encoder.save(&dir.join(ENCODER_FILE))?;
        if let Some(vm) = &self.viewmaker {
            vm.save(&dir.join(VIEWMAKER_FILE))?;
        }
        let mut opt: BTreeMap<String, Tensor> =
            self.encoder_opt.state().into_iter().map(|(k, v)| (format!("encoder/{k}"), v)).collect();
        if let Some(v) = &self.viewmaker_opt {
            opt.extend(v.state().into_iter().map(|(k, v)| (format!("viewmaker/{k}"), v)));
        }
        if let Some(bank) = &self.bank {
            opt.insert("memory_bank".into(), bank.to_tensor(DType::F32, &Device::Cpu)?);
        }
        archive::save(&dir.join(OPTIMIZER_FILE), &opt, None)?;
        write_file(&dir.join(CONFIG_FILE), config.to_toml_string().as_bytes())?;
        let rng = serde_json::to_string(&RngRecord { seed: self.seed, step: self.step }).expect("rng record serializes");
        write_file(&dir.join(RNG_FILE), rng.as_bytes())
    }

    /// Restores a state written by [`TrainState::save`], with its config.
    pub fn load(dir: &Path, dtype: DType, device: &Device) -> Result<(Self, ExperimentConfig)> {
        let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        let rng_path = dir.join(RNG_FILE);
        let rng_text = std::fs::read_to_string(&rng_path).map_err(|e| Error::io(&rng_path, e))?;
        let rng: RngRecord = serde_json::from_str(&rng_text).map_err(|e| Error::CheckpointMismatch(format!("{}: {e}", rng_path.display())))?;
        let encoder = Encoder::load(&dir.join(ENCODER_FILE), dtype, device)?;
        if encoder.config() != &config.encoder {
            return Err(Error::CheckpointMismatch("encoder checkpoint does not match the run config".into()));
        }
        let viewmaker = if config.view_source.uses_viewmaker() {
            Some(Viewmaker::load(&dir.join(VIEWMAKER_FILE), dtype, device)?)
        } else {
            None
        };
        let (opt, _) = archive::load(&dir.join(OPTIMIZER_FILE))?;
        let section = |prefix: &str| -> HashMap<String, Tensor> {
            opt.iter().filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone()))).collect()
        };
        let mut encoder_opt = Sgd::new(encoder.params().trainable(), config.optimizer);
        encoder_opt.load_state(&section("encoder/"))?;
        let viewmaker_opt = match &viewmaker {
            Some(vm) => {
                let mut o = Sgd::new(vm.params().trainable(), config.viewmaker_optimizer());
                o.load_state(&section("viewmaker/"))?;
                Some(o)
            }
            None => None,
        };
        let bank = match config.objective {
            Objective::Simclr => None,
            Objective::Instdisc => {
                let t = opt.get("memory_bank").ok_or_else(|| Error::CheckpointMismatch("instdisc checkpoint has no memory bank".into()))?;
                let mut cfg = config.memory_bank;
                cfg.num_negatives = cfg.num_negatives.min(t.dims()[0].saturating_sub(1));
                Some(MemoryBank::from_tensor(t, cfg)?)
            }
        };
        let state = Self { encoder, viewmaker, encoder_opt, viewmaker_opt, bank, step: rng.step, seed: rng.seed };
        Ok((state, config))
    }
}

pub const ENCODER_FILE: &str = "encoder.safetensors";
pub const VIEWMAKER_FILE: &str = "viewmaker.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const CONFIG_FILE: &str = "config.toml";
pub const RNG_FILE: &str = "rng.json";
pub const NORM_FILE: &str = "norm.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn step_dir_name(step: u64) -> String {
    format!("step-{step}")
}

/// One training batch: examples, their dataset indices, and their stacked inputs.
pub struct Batch<'a> {
    pub examples: Vec<&'a Example>,
    pub indices: Vec<usize>,
    pub inputs: Tensor,
    /// Position of the batch within its epoch.
    pub index: u64,
}

impl<'a> Batch<'a> {
    pub fn from_dataset(data: &'a Dataset, indices: &[usize], index: u64, dtype: DType, device: &Device) -> Result<Self> {
        let inputs = data.batch(indices, dtype, device)?;
        Ok(Self { examples: indices.iter().map(|&i| &data.examples[i]).collect(), indices: indices.to_vec(), inputs, index })
    }
}

/// Which networks a step updates. Both by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepControl {
    pub update_encoder: bool,
    pub update_viewmaker: bool,
}

impl Default for StepControl {
    fn default() -> Self {
        Self { update_encoder: true, update_viewmaker: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Completed steps after this update.
    pub step: u64,
    pub loss: f64,
    /// Mean pre-clamp perturbation norm over both views.
    pub perturbation_norm: Option<f64>,
    pub lr: f64,
    pub wall_time: f64,
    pub encoder_grad_norm: Option<f64>,
    pub viewmaker_grad_norm: Option<f64>,
}

impl StepMetrics {
    /// The record without its timing field, for run-to-run comparisons.
    pub fn without_time(&self) -> Self {
        Self { wall_time: 0.0, ..self.clone() }
    }
}

/// Views and objective for one batch, without any update. Also returns the
/// mean perturbation norm and the view-1 embeddings.
pub fn batch_loss(
    state: &TrainState,
    config: &ExperimentConfig,
    batch: &Batch<'_>,
    stats: &NormStats,
    rng: &mut SeededRng,
) -> Result<(Tensor, Option<f64>, Tensor)> {
    let pipeline = ViewPipeline {
        kind: config.view_source,
        viewmaker: state.viewmaker.as_ref(),
        expert: config.expert.as_ref(),
        noise_budget: config.noise_budget(),
        stats,
        modality: config.modality(),
    };
    let pair = pipeline.pair(&batch.examples, &batch.inputs, rng)?;
    let norm = match (state.viewmaker.as_ref().map(|v| *v.budget()).or(config.noise_budget()), &pair.perturbations) {
        (Some(budget), Some(_)) => pair.mean_perturbation_norm(&budget)?,
        _ => None,
    };
    let n = batch.indices.len();
    let z = state.encoder.encode(&Tensor::cat(&[&pair.first, &pair.second], 0)?, Mode::Train)?.embedding;
    let (z1, z2) = (z.narrow(0, 0, n)?, z.narrow(0, n, n)?);
    let loss = match config.objective {
        Objective::Simclr => nt_xent_loss(&EmbeddingBatch::from_views(&z1, &z2)?, config.temperature)?,
        Objective::Instdisc => {
            let bank = state.bank.as_ref().ok_or_else(|| Error::ConfigInvalid("instdisc needs a memory bank".into()))?;
            let a = instdisc_loss(&z1, &batch.indices, bank, config.temperature, rng)?;
            let b = instdisc_loss(&z2, &batch.indices, bank, config.temperature, rng)?;
            ((a + b)? * 0.5)?
        }
    };
    Ok((loss, norm, z1))
}

/// One min-max update: views, objective, encoder descent and viewmaker
/// ascent from the same backward pass, then the memory-bank update.
/// Inputs and dataset are never modified.
pub fn pretrain_step(
    state: &mut TrainState,
    config: &ExperimentConfig,
    batch: &Batch<'_>,
    stats: &NormStats,
    control: StepControl,
) -> Result<StepMetrics> {
    let mut rng = step_rng(state.seed, state.step);
    let (loss, perturbation_norm, z1) = batch_loss(state, config, batch, stats, &mut rng)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        log::error!("non-finite loss {value} at step {} batch {} (examples {:?})", state.step, batch.index, batch.indices);
        return Err(Error::NonFiniteLoss { loss: value, step: state.step, batch: batch.index });
    }
    let grads = loss.backward()?;
    let encoder_grad_norm =
        if control.update_encoder { Some(state.encoder_opt.step(&grads, Direction::Descent)?) } else { None };
    let viewmaker_grad_norm = match (&mut state.viewmaker_opt, control.update_viewmaker) {
        (Some(opt), true) => Some(opt.step(&grads, Direction::Ascent)?),
        _ => None,
    };
    if let Some(bank) = &mut state.bank {
        bank.update(&l2_normalize_rows(&z1.detach())?, &batch.indices)?;
    }
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        loss: value,
        perturbation_norm,
        lr: state.encoder_opt.lr(),
        wall_time: 0.0,
        encoder_grad_norm,
        viewmaker_grad_norm,
    })
}

/// Training split prepared for pretraining: spectral inputs are standardized
/// up front, image inputs keep raw pixels.
pub struct PreparedData {
    pub train: Dataset,
    pub stats: NormStats,
}

pub fn prepare_training_data(config: &ExperimentConfig, data_root: Option<&Path>) -> Result<PreparedData> {
    let splits = config.dataset.load(data_root)?;
    let mut train = splits.train;
    if train.len() < 2 {
        return Err(Error::DatasetTooSmall { got: train.len(), need: 2 });
    }
    let stats = compute_norm_stats(train.inputs().take(10_000))?;
    if config.modality().normalize_before_views() {
        for e in &mut train.examples {
            e.input = stats.normalize(&e.input)?;
        }
    }
    Ok(PreparedData { train, stats })
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    /// Metrics of the steps run in this call.
    pub metrics: Vec<StepMetrics>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn steps_per_epoch(config: &ExperimentConfig, n: usize) -> (usize, u64) {
    let b = config.batch_size.min(n);
    (b, (n / b) as u64)
}

/// Runs (or resumes) a pretraining run. Checkpoints go to
/// `{out}/{run_id}/step-{n}/`, metrics to `{out}/{run_id}/metrics.jsonl`.
/// A resumed run continues in the run directory of its checkpoint.
pub fn pretrain(
    config: &ExperimentConfig,
    data_root: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<PretrainOutcome> {
    let device = Device::Cpu;
    let dtype = DType::F32;
    let (mut state, config, run_dir) = match resume {
        Some(dir) => {
            let (state, cfg) = TrainState::load(dir, dtype, &device)?;
            let run_dir = dir.parent().map(Path::to_path_buf).unwrap_or_else(|| out.to_path_buf());
            (Some(state), cfg, run_dir)
        }
        None => (None, config.clone(), out.join(config.run_id())),
    };
    config.validate()?;
    let data = prepare_training_data(&config, data_root)?;
    let n = data.train.len();
    let mut state = match state.take() {
        Some(s) => s,
        None => TrainState::init(&config, n, dtype, &device)?,
    };
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let norm_path = run_dir.join(NORM_FILE);
    write_file(&norm_path, serde_json::to_string(&data.stats).expect("stats serialize").as_bytes())?;

    let metrics_path = run_dir.join(METRICS_FILE);
    let kept: Vec<StepMetrics> = if resume.is_some() && metrics_path.exists() {
        read_metrics(&metrics_path)?.into_iter().filter(|m| m.step <= state.step).collect()
    } else {
        vec![]
    };
    let mut metrics_file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    for m in &kept {
        writeln!(metrics_file, "{}", serde_json::to_string(m).expect("metrics serialize")).map_err(|e| Error::io(&metrics_path, e))?;
    }
    drop(metrics_file);
    let mut metrics_file = OpenOptions::new().append(true).open(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

    let (b, spe) = steps_per_epoch(&config, n);
    let total = spe * config.epochs as u64;
    let period = spe * config.checkpoint_every_epochs as u64;
    let start = Instant::now();
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    let mut checkpoints = Vec::new();
    let mut metrics = Vec::new();
    log::info!("pretraining {}: {n} examples, {spe} steps/epoch, {total} steps", config.run_id());
    while state.step < total {
        let epoch = state.step / spe;
        if epoch != order_epoch {
            order = epoch_order(state.seed, epoch, n);
            order_epoch = epoch;
        }
        let pos = (state.step % spe) as usize;
        let batch = Batch::from_dataset(&data.train, &order[pos * b..(pos + 1) * b], pos as u64, dtype, &device)?;
        let mut m = pretrain_step(&mut state, &config, &batch, &data.stats, StepControl::default())?;
        m.wall_time = start.elapsed().as_secs_f64();
        writeln!(metrics_file, "{}", serde_json::to_string(&m).expect("metrics serialize")).map_err(|e| Error::io(&metrics_path, e))?;
        if state.step % spe == 0 {
            log::info!("epoch {} step {} loss {:.4}", state.step / spe, state.step, m.loss);
        }
        metrics.push(m);
        if state.step % period == 0 || state.step == total {
            let dir = run_dir.join(step_dir_name(state.step));
            state.save(&dir, &config)?;
            checkpoints.push(dir);
        }
    }
    let final_checkpoint = run_dir.join(step_dir_name(total));
    if !final_checkpoint.exists() {
        state.save(&final_checkpoint, &config)?;
    }
    Ok(PretrainOutcome { run_dir, checkpoints, final_checkpoint, metrics })
}

/// Frozen networks from a checkpoint directory, for transfer.
pub struct LoadedCheckpoint {
    pub config: ExperimentConfig,
    pub encoder: Encoder,
    pub viewmaker: Option<Viewmaker>,
}

pub fn load_checkpoint(dir: &Path, dtype: DType, device: &Device) -> Result<LoadedCheckpoint> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let encoder = Encoder::load(&dir.join(ENCODER_FILE), dtype, device)?;
    let vm_path = dir.join(VIEWMAKER_FILE);
    let viewmaker = if vm_path.exists() { Some(Viewmaker::load(&vm_path, dtype, device)?) } else { None };
    Ok(LoadedCheckpoint { config, encoder, viewmaker })
}
