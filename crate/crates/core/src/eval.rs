//! Transfer protocols on frozen encoders: linear evaluation on pre-pooling
//! features, corruption robustness, the labeled-subject comparison, and Top-k.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::augment::gaussian_blur;
use crate::dataprep::{compute_norm_stats, DataSplits, Dataset, Modality, NormStats};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Direction, Linear, Mode, ParamStore, Sgd, SgdConfig};
use crate::rng::{derive, SeededRng};
use crate::trainer::LoadedCheckpoint;
use crate::views::ViewPipeline;

fn d_opt() -> SgdConfig {
    SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.0, clip_grad_norm: None }
}
fn d_batch() -> usize {
    128
}
fn d_epochs() -> usize {
    100
}
fn d_drops() -> Vec<usize> {
    vec![60, 80]
}
fn d_drop_factor() -> f64 {
    0.1
}
fn d_true() -> bool {
    true
}
fn d_patience() -> usize {
    10
}
fn d_max_epochs() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearEvalConfig {
    #[serde(default = "d_opt")]
    pub optimizer: SgdConfig,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Epochs (0-based) at which the learning rate is multiplied by `drop_factor`.
    #[serde(default = "d_drops")]
    pub lr_drops: Vec<usize>,
    #[serde(default = "d_drop_factor")]
    pub drop_factor: f64,
    /// Train on views from the frozen pretraining view source; validation never uses views.
    #[serde(default = "d_true")]
    pub train_views: bool,
    /// Extra Top-k accuracies to report.
    #[serde(default)]
    pub topk: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Early-stopping patience of the supervised arm of the subject comparison.
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_max_epochs")]
    pub max_supervised_epochs: usize,
}

impl Default for LinearEvalConfig {
    fn default() -> Self {
        Self {
            optimizer: d_opt(),
            batch_size: d_batch(),
            epochs: d_epochs(),
            lr_drops: d_drops(),
            drop_factor: d_drop_factor(),
            train_views: true,
            topk: vec![],
            seed: 0,
            patience: d_patience(),
            max_supervised_epochs: d_max_epochs(),
        }
    }
}

impl LinearEvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, m: &str| Err(Error::ConfigParse { field: field.into(), message: m.into() });
        self.optimizer.validate("optimizer")?;
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.lr_drops.iter().any(|&e| e < 1 || e > self.epochs) {
            return bad("lr_drops", "every drop epoch must lie in [1, epochs]");
        }
        if self.topk.contains(&0) {
            return bad("topk", "k must be >= 1");
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::ConfigParse {
            field: e.path().to_string(),
            message: e.into_inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&d| d <= epoch).count();
        self.optimizer.lr * self.drop_factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MacroF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub metric: Metric,
    /// Percentage in [0, 100].
    pub value: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub topk: BTreeMap<usize, f64>,
    pub train_examples: usize,
    pub val_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionResult {
    pub corruption: String,
    pub severity: u8,
    pub accuracy: f64,
}

/// Clean accuracy, mean corrupted accuracy and their difference (corrupted − clean).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSummary {
    pub clean: f64,
    pub corrupted: f64,
    pub diff: f64,
    pub per_corruption: Vec<CorruptionResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub tasks: Vec<TaskResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionSummary>,
}

fn in_range(v: f64) -> bool {
    (0.0..=100.0).contains(&v)
}

impl EvalReport {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.into(), checkpoint: None, tasks: vec![], corruption: None }
    }

    pub fn validate(&self) -> Result<()> {
        let mut values: Vec<f64> = self.tasks.iter().flat_map(|t| std::iter::once(t.value).chain(t.topk.values().copied())).collect();
        if let Some(c) = &self.corruption {
            values.extend([c.clean, c.corrupted]);
            values.extend(c.per_corruption.iter().map(|r| r.accuracy));
        }
        match values.iter().find(|v| !in_range(**v)) {
            Some(v) => Err(Error::Format(format!("accuracy {v} outside [0, 100]"))),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Key/value header, then one table row per task and per corruption.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "report: {}", self.kind);
        if let Some(c) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint: {c}");
        }
        if let Some(c) = &self.corruption {
            let _ = writeln!(s, "clean: {:.2}", c.clean);
            let _ = writeln!(s, "corrupted: {:.2}", c.corrupted);
            let _ = writeln!(s, "diff: {:.2}", c.diff);
        }
        if !self.tasks.is_empty() {
            let _ = writeln!(s, "\n{:<32} {:<10} {:>8} {:>7} {:>7}  topk", "task", "metric", "value", "train", "val");
            for t in &self.tasks {
                let metric = match t.metric {
                    Metric::Accuracy => "accuracy",
                    Metric::MacroF1 => "macro_f1",
                };
                let topk: Vec<String> = t.topk.iter().map(|(k, v)| format!("top{k}={v:.2}")).collect();
                let _ = writeln!(
                    s,
                    "{:<32} {:<10} {:>8.2} {:>7} {:>7}  {}",
                    t.task,
                    metric,
                    t.value,
                    t.train_examples,
                    t.val_examples,
                    topk.join(" ")
                );
            }
        }
        if let Some(c) = &self.corruption {
            let _ = writeln!(s, "\n{:<20} {:>8} {:>8}", "corruption", "severity", "accuracy");
            for r in &c.per_corruption {
                let _ = writeln!(s, "{:<20} {:>8} {:>8.2}", r.corruption, r.severity, r.accuracy);
            }
        }
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))
    }
}

/// Percentage of rows whose true label ranks among the `k` largest logits.
/// Rank counts strictly larger logits, so ties favor the true label.
pub fn topk_accuracy(logits: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::shape(labels.len(), logits.len()));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput("no logits".into()));
    }
    let classes = logits[0].len();
    if k > classes {
        return Err(Error::KTooLarge { k, classes });
    }
    if k == 0 {
        return Err(Error::ConfigInvalid("k must be >= 1".into()));
    }
    let mut hits = 0usize;
    for (row, &y) in logits.iter().zip(labels) {
        if row.len() != classes {
            return Err(Error::shape(classes, row.len()));
        }
        if y >= classes {
            return Err(Error::IndexOutOfRange { index: y, len: classes });
        }
        let rank = row.iter().filter(|&&v| v > row[y]).count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Macro-averaged F1 (percent) for multi-label predictions: a logit above zero
/// predicts the attribute. Attributes with no positives and no predictions score 1.
pub fn macro_f1(logits: &[Vec<f64>], targets: &[Vec<bool>]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::shape(targets.len(), logits.len()));
    }
    let attrs = targets[0].len();
    let mut total = 0.0;
    for a in 0..attrs {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (l, t) in logits.iter().zip(targets) {
            match (l[a] > 0.0, t[a]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        total += if tp + fp + fneg == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64 };
    }
    Ok(100.0 * total / attrs.max(1) as f64)
}

/// Splits arrive with raw inputs; spectral modalities are standardized here
/// with training statistics, images are standardized per batch after views.
pub struct EvalData {
    pub train: Dataset,
    pub val: Dataset,
    pub stats: NormStats,
}

pub fn prepare_eval_data(splits: &DataSplits) -> Result<EvalData> {
    if splits.train.is_empty() {
        return Err(Error::EmptyInput("training split is empty".into()));
    }
    let stats = compute_norm_stats(splits.train.inputs().take(10_000))?;
    let (mut train, mut val) = (splits.train.clone(), splits.val.clone());
    if train.modality.normalize_before_views() {
        for e in train.examples.iter_mut().chain(val.examples.iter_mut()) {
            e.input = stats.normalize(&e.input)?;
        }
    }
    Ok(EvalData { train, val, stats })
}

fn encoder_ready(x: &Tensor, stats: &NormStats, modality: Modality) -> Result<Tensor> {
    if modality.normalize_before_views() {
        Ok(x.clone())
    } else {
        stats.normalize_tensor(x)
    }
}

/// Frozen pre-pooling features of un-viewed inputs, `N × D`.
pub fn extract_features(encoder: &Encoder, data: &Dataset, stats: &NormStats, batch_size: usize) -> Result<Tensor> {
    let dtype = encoder.params().dtype();
    let device = encoder.params().device().clone();
    let mut chunks = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(batch_size.max(1)) {
        let x = encoder_ready(&data.batch(part, dtype, &device)?, stats, data.modality)?;
        chunks.push(encoder.encode(&x, Mode::Eval)?.prepool.detach());
    }
    Ok(Tensor::cat(&chunks, 0)?)
}

fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let labels = Tensor::from_vec(labels.iter().map(|&l| l as u32).collect::<Vec<_>>(), (labels.len(), 1), logits.device())?;
    let shift = logits.max_keepdim(1)?.detach();
    let lse = (logits.broadcast_sub(&shift)?.exp()?.sum_keepdim(1)?.log()? + shift)?;
    let picked = logits.gather(&labels, 1)?;
    Ok((lse - picked)?.mean_all()?)
}

/// A linear classifier over frozen features plus the input statistics it was trained with.
pub struct LinearProbe {
    store: ParamStore,
    linear: Linear,
    pub classes: usize,
    pub stats: NormStats,
    pub modality: Modality,
}

#[derive(Serialize, Deserialize)]
struct ProbeMeta {
    in_features: usize,
    classes: usize,
    stats: NormStats,
    modality: Modality,
}

impl LinearProbe {
    pub fn new(in_features: usize, classes: usize, stats: NormStats, modality: Modality, rng: &mut SeededRng, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(dtype, device.clone());
        let linear = Linear::new(&mut store, rng, "linear", in_features, classes)?;
        Ok(Self { store, linear, classes, stats, modality })
    }

    pub fn in_features(&self) -> usize {
        self.linear.in_features()
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let (_, d) = features.dims2()?;
        if d != self.in_features() {
            return Err(Error::CheckpointMismatch(format!(
                "feature dim {d} does not match classifier input dim {}",
                self.in_features()
            )));
        }
        self.linear.forward(features)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ProbeMeta { in_features: self.in_features(), classes: self.classes, stats: self.stats.clone(), modality: self.modality };
        archive::save(path, &self.store.tensors(), Some(&serde_json::to_string(&meta).expect("probe meta serializes")))
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let (tensors, meta) = archive::load(path)?;
        let meta: ProbeMeta = meta
            .and_then(|m| serde_json::from_str(&m).ok())
            .ok_or_else(|| Error::CheckpointMismatch(format!("{} is not a linear probe", path.display())))?;
        let probe = Self::new(meta.in_features, meta.classes, meta.stats, meta.modality, &mut derive(0, 0), dtype, device)?;
        probe.store.load(&tensors)?;
        Ok(probe)
    }
}

fn host_logits(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

/// Trains a linear classifier on fixed features with the schedule of `cfg`.
/// `feature_batch` supplies the features of a training batch for an epoch;
/// it is how views enter training. Returns the probe and final-epoch logits
/// on `val_features`.
pub fn train_linear_classifier<F>(
    probe: &mut LinearProbe,
    train_labels: &[usize],
    mut feature_batch: F,
    cfg: &LinearEvalConfig,
) -> Result<()>
where
    F: FnMut(&[usize], u64) -> Result<Tensor>,
{
    cfg.validate()?;
    let n = train_labels.len();
    if n == 0 {
        return Err(Error::EmptyInput("no labeled training examples".into()));
    }
    if let Some(&bad) = train_labels.iter().find(|&&y| y >= probe.classes) {
        return Err(Error::IndexOutOfRange { index: bad, len: probe.classes });
    }
    let mut opt = Sgd::new(probe.store.trainable(), cfg.optimizer);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        opt.set_lr(cfg.lr_at(epoch));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive(cfg.seed, (1 << 40) + epoch as u64));
        for part in order.chunks(cfg.batch_size) {
            let feats = feature_batch(part, step)?;
            let labels: Vec<usize> = part.iter().map(|&i| train_labels[i]).collect();
            let loss = cross_entropy(&probe.logits(&feats)?, &labels)?;
            let grads = loss.backward()?;
            opt.step(&grads, Direction::Descent)?;
            step += 1;
        }
    }
    Ok(())
}

fn task_result(task: &str, logits: &[Vec<f64>], labels: &[usize], topk: &[usize], train_examples: usize) -> Result<TaskResult> {
    let value = topk_accuracy(logits, labels, 1)?;
    let classes = logits.first().map_or(0, Vec::len);
    let topk = topk
        .iter()
        .filter(|&&k| k > 1)
        .map(|&k| {
            if k > classes {
                Err(Error::KTooLarge { k, classes })
            } else {
                Ok((k, topk_accuracy(logits, labels, k)?))
            }
        })
        .collect::<Result<_>>()?;
    Ok(TaskResult { task: task.into(), metric: Metric::Accuracy, value, topk, train_examples, val_examples: labels.len() })
}

/// Linear evaluation of a frozen checkpoint: a linear layer on pre-pooling
/// features of (optionally viewed) training inputs, scored on un-viewed
/// validation inputs after the final epoch. Neither network is modified.
pub fn linear_eval(ckpt: &LoadedCheckpoint, splits: &DataSplits, cfg: &LinearEvalConfig, task: &str) -> Result<(EvalReport, LinearProbe)> {
    cfg.validate()?;
    let data = prepare_eval_data(splits)?;
    if data.val.is_empty() {
        return Err(Error::EmptyInput("validation split is empty".into()));
    }
    let encoder = &ckpt.encoder;
    let dtype = encoder.params().dtype();
    let device = encoder.params().device().clone();
    let (c, h, w) = data.train.dims().expect("nonempty");
    if c != encoder.config().input_channels {
        return Err(Error::CheckpointMismatch(format!("encoder expects {} channels, dataset has {c}", encoder.config().input_channels)));
    }
    let classes = splits.train.num_classes.max(splits.val.num_classes);
    let feat_dim = encoder.config().prepool_dim(h, w);
    let mut probe = LinearProbe::new(feat_dim, classes, data.stats.clone(), data.train.modality, &mut derive(cfg.seed, 7), dtype, &device)?;
    let train_labels = data.train.labels()?;
    let val_labels = data.val.labels()?;

    let pipeline = ViewPipeline {
        kind: ckpt.config.view_source,
        viewmaker: ckpt.viewmaker.as_ref(),
        expert: ckpt.config.expert.as_ref(),
        noise_budget: ckpt.config.noise_budget(),
        stats: &data.stats,
        modality: data.train.modality,
    };
    let precomputed = if cfg.train_views { None } else { Some(extract_features(encoder, &data.train, &data.stats, cfg.batch_size)?) };
    train_linear_classifier(
        &mut probe,
        &train_labels,
        |part, step| match &precomputed {
            Some(all) => {
                let idx = Tensor::from_vec(part.iter().map(|&i| i as u32).collect::<Vec<_>>(), part.len(), &device)?;
                Ok(all.index_select(&idx, 0)?)
            }
            None => {
                let x = data.train.batch(part, dtype, &device)?;
                let examples: Vec<_> = part.iter().map(|&i| &data.train.examples[i]).collect();
                let mut rng = derive(cfg.seed, (1 << 44) + step);
                let (view, _) = pipeline.view(&examples, &x, &mut rng)?;
                Ok(encoder.encode(&view, Mode::Eval)?.prepool.detach())
            }
        },
        cfg,
    )?;
    let val_feats = extract_features(encoder, &data.val, &data.stats, cfg.batch_size)?;
    let logits = host_logits(&probe.logits(&val_feats)?)?;
    let mut report = EvalReport::new("linear_eval");
    report.tasks.push(task_result(task, &logits, &val_labels, &cfg.topk, data.train.len())?);
    report.validate()?;
    Ok((report, probe))
}

/// Accuracy (percent) of a probe on un-viewed inputs. `data` must already be
/// in the probe's input space (raw pixels for images, standardized otherwise).
pub fn probe_accuracy(encoder: &Encoder, probe: &LinearProbe, data: &Dataset, batch_size: usize) -> Result<f64> {
    let feats = extract_features(encoder, data, &probe.stats, batch_size)?;
    topk_accuracy(&host_logits(&probe.logits(&feats)?)?, &data.labels()?, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Identity,
    GaussianNoise,
    GaussianBlur,
    Contrast,
}

impl Corruption {
    pub const ALL: [Corruption; 4] = [Corruption::Identity, Corruption::GaussianNoise, Corruption::GaussianBlur, Corruption::Contrast];

    pub fn as_str(self) -> &'static str {
        match self {
            Corruption::Identity => "identity",
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::GaussianBlur => "gaussian_blur",
            Corruption::Contrast => "contrast",
        }
    }

    /// Strength at severity 1..=5 (noise std, blur sigma, contrast factor).
    fn strength(self, severity: u8) -> f64 {
        let i = (severity.clamp(1, 5) - 1) as usize;
        match self {
            Corruption::Identity => 0.0,
            Corruption::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10][i],
            Corruption::GaussianBlur => [0.4, 0.6, 0.7, 0.8, 1.0][i],
            Corruption::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15][i],
        }
    }

    /// Corrupts a `[0, 1]` image; the result is clamped back to `[0, 1]`.
    pub fn apply(self, img: &Array3<f32>, severity: u8, rng: &mut SeededRng) -> Array3<f32> {
        let s = self.strength(severity);
        let mut out = match self {
            Corruption::Identity => return img.clone(),
            Corruption::GaussianNoise => img.mapv(|v| v + (s * rng.sample::<f64, _>(StandardNormal)) as f32),
            Corruption::GaussianBlur => {
                let radius = (2.0 * s).ceil() as usize;
                gaussian_blur(img, 2 * radius + 1, s)
            }
            Corruption::Contrast => {
                let mean = img.mean().unwrap_or(0.0);
                img.mapv(|v| (v - mean) * s as f32 + mean)
            }
        };
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        out
    }
}

/// Corrupted copies of a raw image split, one per (corruption, severity).
pub fn synthetic_corruptions(clean: &Dataset, corruptions: &[Corruption], severities: &[u8], seed: u64) -> Vec<(String, u8, Dataset)> {
    let mut out = Vec::new();
    for (ci, &c) in corruptions.iter().enumerate() {
        let sevs: &[u8] = if c == Corruption::Identity { &[1] } else { severities };
        for &s in sevs {
            let mut rng = derive(seed, (ci as u64) << 8 | s as u64);
            let mut d = clean.clone();
            for e in &mut d.examples {
                e.input = c.apply(&e.input, s, &mut rng);
            }
            out.push((c.as_str().to_string(), s, d));
        }
    }
    out
}

/// Scores a trained probe on clean and corrupted splits without any update.
/// Splits are raw; spectral ones are standardized with the probe's statistics.
pub fn corruption_eval(encoder: &Encoder, probe: &LinearProbe, clean: &Dataset, variants: &[(String, u8, Dataset)], batch_size: usize) -> Result<EvalReport> {
    let prep = |d: &Dataset| -> Result<Dataset> {
        let mut d = d.clone();
        if d.modality.normalize_before_views() {
            for e in &mut d.examples {
                e.input = probe.stats.normalize(&e.input)?;
            }
        }
        Ok(d)
    };
    let clean_acc = probe_accuracy(encoder, probe, &prep(clean)?, batch_size)?;
    let mut per = Vec::new();
    for (name, severity, data) in variants {
        let accuracy = probe_accuracy(encoder, probe, &prep(data)?, batch_size)?;
        per.push(CorruptionResult { corruption: name.clone(), severity: *severity, accuracy });
    }
    let corrupted = if per.is_empty() { clean_acc } else { per.iter().map(|r| r.accuracy).sum::<f64>() / per.len() as f64 };
    let mut report = EvalReport::new("corruption_eval");
    report.corruption = Some(CorruptionSummary { clean: clean_acc, corrupted, diff: corrupted - clean_acc, per_corruption: per });
    report.validate()?;
    Ok(report)
}

/// Supervised arm: a randomly initialized encoder and linear head trained
/// end to end on the labeled split until validation accuracy has not improved
/// for `patience` epochs (at most `max_supervised_epochs`). Reports the last epoch.
pub fn supervised_baseline(encoder_config: &EncoderConfig, data: &EvalData, cfg: &LinearEvalConfig) -> Result<(f64, usize)> {
    let device = Device::Cpu;
    let dtype = DType::F32;
    let encoder = Encoder::build(encoder_config.clone(), &mut derive(cfg.seed, 11), dtype, &device)?;
    let (_, h, w) = data.train.dims().ok_or_else(|| Error::EmptyInput("no labeled examples".into()))?;
    let classes = data.train.num_classes.max(data.val.num_classes);
    let mut probe = LinearProbe::new(encoder_config.prepool_dim(h, w), classes, data.stats.clone(), data.train.modality, &mut derive(cfg.seed, 12), dtype, &device)?;
    let mut params = encoder.params().trainable();
    params.extend(probe.store.trainable());
    let mut opt = Sgd::new(params, cfg.optimizer);
    let labels = data.train.labels()?;
    let (mut best, mut since, mut last, mut epochs) = (f64::NEG_INFINITY, 0usize, 0.0, 0usize);
    for epoch in 0..cfg.max_supervised_epochs {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut derive(cfg.seed, (1 << 42) + epoch as u64));
        for part in order.chunks(cfg.batch_size) {
            let x = encoder_ready(&data.train.batch(part, dtype, &device)?, &data.stats, data.train.modality)?;
            let feats = encoder.encode(&x, Mode::Train)?.prepool;
            let y: Vec<usize> = part.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy(&probe.logits(&feats)?, &y)?;
            opt.step(&loss.backward()?, Direction::Descent)?;
        }
        probe.stats = data.stats.clone();
        last = probe_accuracy(&encoder, &probe, &data.val, cfg.batch_size)?;
        epochs = epoch + 1;
        if last > best {
            best = last;
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    Ok((last, epochs))
}

/// Two arms on the labeled subjects: supervised training from scratch versus
/// linear evaluation of the pretrained checkpoint. Validation uses every
/// subject of the validation split.
pub fn semi_supervised_compare(ckpt: &LoadedCheckpoint, splits: &DataSplits, labeled_subjects: &[String], cfg: &LinearEvalConfig) -> Result<EvalReport> {
    if labeled_subjects.is_empty() {
        return Err(Error::UnknownSubject("no labeled subjects given".into()));
    }
    let labeled = splits.train.filter_subjects(labeled_subjects)?;
    if labeled.is_empty() {
        return Err(Error::UnknownSubject(format!("{labeled_subjects:?} have no labeled examples")));
    }
    let sub = DataSplits { train: labeled, val: splits.val.clone() };
    let tag = format!("{}_subjects", labeled_subjects.len());
    let data = prepare_eval_data(&sub)?;
    let (sup, _) = supervised_baseline(ckpt.encoder.config(), &data, cfg)?;
    let (lin, _) = linear_eval(ckpt, &sub, cfg, &format!("pretrained_linear/{tag}"))?;
    let mut report = EvalReport::new("semi_supervised_compare");
    report.tasks.push(TaskResult {
        task: format!("supervised/{tag}"),
        metric: Metric::Accuracy,
        value: sup,
        topk: BTreeMap::new(),
        train_examples: data.train.len(),
        val_examples: data.val.len(),
    });
    report.tasks.extend(lin.tasks);
    report.validate()?;
    Ok(report)
}
