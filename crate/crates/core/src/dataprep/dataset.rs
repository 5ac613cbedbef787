//! In-memory labeled datasets and the adapters that build them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::resize_bilinear;
use super::io::{read_cifar10_batch, read_manifest, read_pnm, read_wav, ManifestRecord, MANIFEST_FILE};
use super::logmel::{waveform_to_logmel, PreprocessMode, SpectrogramSpec};
use super::sensor::{load_pamap2, sensor_window_to_spectrograms, SensorRecording, SensorWindowSpec};
use crate::archive;
use crate::error::{Error, Result};
use crate::rng::{derive, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Image,
    Spectrogram,
    Sensor,
}

impl Modality {
    /// Images get views in pixel space and are standardized afterwards;
    /// spectral inputs are standardized before any view is made.
    pub fn normalize_before_views(self) -> bool {
        self != Modality::Image
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub input: Array3<f32>,
    pub label: Option<usize>,
    pub subject: Option<String>,
    /// Raw audio kept for waveform-domain expert views.
    pub waveform: Option<Arc<Vec<f32>>>,
}

impl Example {
    pub fn new(input: Array3<f32>, label: Option<usize>) -> Self {
        Self { input, label, subject: None, waveform: None }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub modality: Modality,
    pub num_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.examples.first().map(|e| e.input.dim())
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Array3<f32>> {
        self.examples.iter().map(|e| &e.input)
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| e.label.ok_or_else(|| Error::Format(format!("example {i} has no label"))))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let examples = indices
            .iter()
            .map(|&i| self.examples.get(i).cloned().ok_or(Error::IndexOutOfRange { index: i, len: self.len() }))
            .collect::<Result<_>>()?;
        Ok(Dataset { modality: self.modality, num_classes: self.num_classes, examples })
    }

    pub fn subjects(&self) -> BTreeSet<String> {
        self.examples.iter().filter_map(|e| e.subject.clone()).collect()
    }

    /// Keeps only examples from the given subjects; every requested subject must be present.
    pub fn filter_subjects(&self, subjects: &[String]) -> Result<Dataset> {
        let known = self.subjects();
        if let Some(missing) = subjects.iter().find(|s| !known.contains(*s)) {
            return Err(Error::UnknownSubject(missing.clone()));
        }
        let examples = self
            .examples
            .iter()
            .filter(|e| e.subject.as_ref().is_some_and(|s| subjects.contains(s)))
            .cloned()
            .collect();
        Ok(Dataset { modality: self.modality, num_classes: self.num_classes, examples })
    }

    /// Stacks the selected inputs into an `N×C×H×W` tensor.
    pub fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let arrays: Vec<&Array3<f32>> = indices
            .iter()
            .map(|&i| self.examples.get(i).map(|e| &e.input).ok_or(Error::IndexOutOfRange { index: i, len: self.len() }))
            .collect::<Result<_>>()?;
        stack(&arrays, dtype, device)
    }
}

pub fn stack(arrays: &[&Array3<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = arrays.first().ok_or_else(|| Error::EmptyInput("empty batch".into()))?;
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(arrays.len() * c * h * w);
    for a in arrays {
        if a.dim() != (c, h, w) {
            return Err(Error::shape((c, h, w), a.dim()));
        }
        data.extend(a.iter().copied());
    }
    Ok(Tensor::from_vec(data, (arrays.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Splits an `N×C×H×W` tensor back into per-example arrays.
pub fn unstack(t: &Tensor) -> Result<Vec<Array3<f32>>> {
    let (n, c, h, w) = t.dims4()?;
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok((0..n)
        .map(|i| Array3::from_shape_vec((c, h, w), flat[i * c * h * w..(i + 1) * c * h * w].to_vec()).expect("sizes match"))
        .collect())
}

#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
}

fn d_channels() -> usize {
    3
}
fn d_size() -> usize {
    32
}
fn d_classes() -> usize {
    10
}
fn d_noise() -> f32 {
    0.1
}
fn d_subjects() -> usize {
    4
}
fn d_cifar_dir() -> PathBuf {
    "cifar-10-batches-bin".into()
}
fn d_true() -> bool {
    true
}
fn d_train() -> String {
    "train".into()
}
fn d_val() -> String {
    "test".into()
}
fn d_pamap_dir() -> PathBuf {
    "PAMAP2_Dataset".into()
}

/// Where the data for a run comes from. Relative paths resolve against the data root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Class-prototype images plus Gaussian noise; needs no files.
    Synthetic {
        #[serde(default)]
        modality: Modality,
        train: usize,
        val: usize,
        #[serde(default = "d_channels")]
        channels: usize,
        #[serde(default = "d_size")]
        size: usize,
        #[serde(default = "d_classes")]
        classes: usize,
        #[serde(default = "d_noise")]
        noise: f32,
        #[serde(default = "d_subjects")]
        subjects: usize,
        #[serde(default)]
        seed: u64,
    },
    /// CIFAR-10 binary batches (`data_batch_{1..5}.bin`, `test_batch.bin`).
    Cifar10 {
        #[serde(default = "d_cifar_dir")]
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        val_limit: Option<usize>,
    },
    /// A directory with `manifest.jsonl`; entries are PGM/PPM images, WAV
    /// files (turned into log-mel spectrograms) or `.safetensors` files
    /// holding an `input` tensor.
    Manifest {
        dir: PathBuf,
        #[serde(default)]
        modality: Modality,
        #[serde(default)]
        spectrogram: Option<SpectrogramSpec>,
        #[serde(default = "d_true")]
        cache: bool,
        #[serde(default = "d_train")]
        train_split: String,
        #[serde(default = "d_val")]
        val_split: String,
    },
    /// Pamap2 protocol recordings, random windows inside single-activity segments.
    Pamap2 {
        #[serde(default = "d_pamap_dir")]
        dir: PathBuf,
        train_subjects: Vec<String>,
        val_subjects: Vec<String>,
        train_windows: usize,
        val_windows: usize,
        #[serde(default)]
        window: SensorWindowSpec,
        #[serde(default)]
        seed: u64,
    },
}

/// Activity ids of the Pamap2 protocol, in label order.
pub const PAMAP2_ACTIVITIES: [u32; 12] = [1, 2, 3, 4, 5, 6, 7, 12, 13, 16, 17, 24];

impl DatasetSpec {
    pub fn modality(&self) -> Modality {
        match self {
            DatasetSpec::Synthetic { modality, .. } | DatasetSpec::Manifest { modality, .. } => *modality,
            DatasetSpec::Cifar10 { .. } => Modality::Image,
            DatasetSpec::Pamap2 { .. } => Modality::Sensor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Err(Error::ConfigParse { field: format!("dataset.{field}"), message: message.into() });
        match self {
            DatasetSpec::Synthetic { train, classes, size, channels, noise, .. } => {
                if *train < 2 {
                    return bad("train", "need at least 2 training examples");
                }
                if *classes == 0 {
                    return bad("classes", "must be positive");
                }
                if *size == 0 || *channels == 0 {
                    return bad("size", "image dims must be positive");
                }
                if !(noise.is_finite() && *noise >= 0.0) {
                    return bad("noise", "must be finite and non-negative");
                }
            }
            DatasetSpec::Manifest { spectrogram: Some(s), .. } => s.validate()?,
            DatasetSpec::Pamap2 { train_subjects, train_windows, .. } => {
                if train_subjects.is_empty() {
                    return bad("train_subjects", "must name at least one subject");
                }
                if *train_windows == 0 {
                    return bad("train_windows", "must be positive");
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn load(&self, data_root: Option<&Path>) -> Result<DataSplits> {
        self.validate()?;
        let resolve = |p: &Path| match data_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        };
        match self {
            DatasetSpec::Synthetic { modality, train, val, channels, size, classes, noise, subjects, seed } => {
                Ok(synthetic(*modality, *train, *val, *channels, *size, *classes, *noise, *subjects, *seed))
            }
            DatasetSpec::Cifar10 { dir, train_limit, val_limit } => load_cifar10(&resolve(dir), *train_limit, *val_limit),
            DatasetSpec::Manifest { dir, modality, spectrogram, cache, train_split, val_split } => {
                let dir = resolve(dir);
                let all = load_manifest_dir(&dir, *modality, spectrogram.as_ref(), *cache)?;
                let pick = |split: &str| -> Dataset {
                    let examples = all.iter().filter(|(s, _)| s == split).map(|(_, e)| e.clone()).collect();
                    Dataset { modality: *modality, num_classes: 0, examples }
                };
                let mut train = pick(train_split);
                let mut val = pick(val_split);
                if train.is_empty() {
                    return Err(Error::EmptyInput(format!("{}: no records in split {train_split:?}", dir.display())));
                }
                let classes = all.iter().filter_map(|(_, e)| e.label).max().map_or(0, |m| m + 1);
                train.num_classes = classes;
                val.num_classes = classes;
                Ok(DataSplits { train, val })
            }
            DatasetSpec::Pamap2 { dir, train_subjects, val_subjects, train_windows, val_windows, window, seed } => {
                let dir = resolve(dir);
                let load = |subjects: &[String]| -> Result<Vec<SensorRecording>> {
                    subjects.iter().map(|s| load_pamap2(&pamap2_path(&dir, s))).collect()
                };
                let train = pamap2_windows(&load(train_subjects)?, *train_windows, window, &mut derive(*seed, 0))?;
                let val = if val_subjects.is_empty() {
                    Dataset { modality: Modality::Sensor, num_classes: PAMAP2_ACTIVITIES.len(), examples: vec![] }
                } else {
                    pamap2_windows(&load(val_subjects)?, *val_windows, window, &mut derive(*seed, 1))?
                };
                Ok(DataSplits { train, val })
            }
        }
    }
}

/// Smooth random class prototypes (a coarse grid upsampled to full size)
/// with per-example Gaussian noise. Images are clamped to `[0, 1]`;
/// other modalities are left unbounded.
#[allow(clippy::too_many_arguments)]
pub fn synthetic(
    modality: Modality,
    train: usize,
    val: usize,
    channels: usize,
    size: usize,
    classes: usize,
    noise: f32,
    subjects: usize,
    seed: u64,
) -> DataSplits {
    let mut proto_rng = derive(seed, 0);
    let grid = 4.min(size);
    let prototypes: Vec<Array3<f32>> = (0..classes)
        .map(|_| {
            let coarse = Array3::from_shape_fn((channels, grid, grid), |_| 0.2 + 0.6 * proto_rng.random::<f32>());
            resize_bilinear(&coarse.view(), size, size)
        })
        .collect();
    let make = |n: usize, stream: u64| -> Dataset {
        let mut rng = derive(seed, stream);
        let examples = (0..n)
            .map(|i| {
                let label = i % classes;
                let mut x = prototypes[label].clone();
                x.mapv_inplace(|v| v + noise * rng.sample::<f32, _>(StandardNormal));
                if modality == Modality::Image {
                    x.mapv_inplace(|v| v.clamp(0.0, 1.0));
                }
                let mut e = Example::new(x, Some(label));
                e.subject = Some(format!("s{}", i % subjects.max(1)));
                e
            })
            .collect();
        Dataset { modality, num_classes: classes, examples }
    };
    DataSplits { train: make(train, 1), val: make(val, 2) }
}

fn load_cifar10(dir: &Path, train_limit: Option<usize>, val_limit: Option<usize>) -> Result<DataSplits> {
    let mut train = Vec::new();
    for b in 1..=5 {
        let left = train_limit.map(|l| l.saturating_sub(train.len()));
        if left == Some(0) {
            break;
        }
        train.extend(read_cifar10_batch(&dir.join(format!("data_batch_{b}.bin")), left)?);
    }
    let val = read_cifar10_batch(&dir.join("test_batch.bin"), val_limit)?;
    let wrap = |recs: Vec<(Array3<f32>, usize)>| Dataset {
        modality: Modality::Image,
        num_classes: 10,
        examples: recs.into_iter().map(|(x, y)| Example::new(x, Some(y))).collect(),
    };
    Ok(DataSplits { train: wrap(train), val: wrap(val) })
}

/// Content hash of a source file and the preprocessing spec that turns it into a tensor.
pub fn cache_key(file_bytes: &[u8], spec_json: &str) -> String {
    let mut h = Sha256::new();
    h.update(file_bytes);
    h.update(spec_json.as_bytes());
    hex::encode(h.finalize())
}

pub const CACHE_DIR: &str = ".cache";

fn array_from_archive(path: &Path) -> Result<Array3<f32>> {
    let (tensors, _) = archive::load(path)?;
    let t = tensors.get("input").ok_or_else(|| Error::Format(format!("{}: no `input` tensor", path.display())))?;
    let t = match t.rank() {
        2 => t.unsqueeze(0)?,
        3 => t.clone(),
        _ => return Err(Error::shape("C×H×W", t.dims())),
    };
    Ok(unstack(&t.unsqueeze(0)?)?.remove(0))
}

/// One stored input: a PGM/PPM image or a `.safetensors` file with an `input` tensor.
pub fn read_input_file(path: &Path) -> Result<Array3<f32>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "ppm" | "pgm" | "pnm" => read_pnm(path),
        "safetensors" => array_from_archive(path),
        other => Err(Error::Format(format!("{}: unsupported file type {other:?}", path.display()))),
    }
}

pub fn write_input_file(path: &Path, x: &Array3<f32>) -> Result<()> {
    array_to_archive(path, x)
}

fn array_to_archive(path: &Path, x: &Array3<f32>) -> Result<()> {
    let t = stack(&[x], DType::F32, &Device::Cpu)?.squeeze(0)?;
    archive::save(path, &BTreeMap::from([("input".to_string(), t)]), None)
}

/// Log-mel spectrogram of a WAV file, reusing a cached archive when the
/// content hash of (file, spec) matches.
pub fn cached_logmel(path: &Path, spec: &SpectrogramSpec, cache_dir: Option<&Path>) -> Result<(Array3<f32>, Vec<f32>)> {
    let (wave, _) = read_wav(path)?;
    let Some(cache_dir) = cache_dir else {
        return Ok((waveform_to_logmel(&wave, spec, PreprocessMode::Eval, &mut seeded(0))?, wave));
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let key = cache_key(&bytes, &serde_json::to_string(spec).expect("spec serializes"));
    let cached = cache_dir.join(format!("{key}.safetensors"));
    if cached.exists() {
        return Ok((array_from_archive(&cached)?, wave));
    }
    let x = waveform_to_logmel(&wave, spec, PreprocessMode::Eval, &mut seeded(0))?;
    array_to_archive(&cached, &x)?;
    Ok((x, wave))
}

fn load_record(dir: &Path, rec: &ManifestRecord, spec: Option<&SpectrogramSpec>, cache: bool) -> Result<Example> {
    let path = dir.join(&rec.path);
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let (input, waveform) = match ext.as_str() {
        "ppm" | "pgm" | "pnm" => (read_pnm(&path)?, None),
        "safetensors" => (array_from_archive(&path)?, None),
        "wav" => {
            let spec = spec.ok_or_else(|| Error::ConfigParse {
                field: "dataset.spectrogram".into(),
                message: "audio manifests need a spectrogram spec".into(),
            })?;
            let cache_dir = cache.then(|| dir.join(CACHE_DIR));
            let (x, wave) = cached_logmel(&path, spec, cache_dir.as_deref())?;
            (x, Some(Arc::new(wave)))
        }
        other => return Err(Error::Format(format!("{}: unsupported file type {other:?}", path.display()))),
    };
    Ok(Example { input, label: rec.label, subject: rec.subject_id.clone(), waveform })
}

/// All manifest records of a directory with their split names.
pub fn load_manifest_dir(
    dir: &Path,
    modality: Modality,
    spec: Option<&SpectrogramSpec>,
    cache: bool,
) -> Result<Vec<(String, Example)>> {
    let records = read_manifest(&dir.join(MANIFEST_FILE))?;
    let mut out = Vec::with_capacity(records.len());
    for rec in &records {
        let ex = load_record(dir, rec, spec, cache)?;
        if modality == Modality::Spectrogram && ex.input.dim().0 != 1 {
            return Err(Error::shape("1×S×S spectrogram", ex.input.dim()));
        }
        out.push((rec.split.clone(), ex));
    }
    Ok(out)
}

fn pamap2_path(dir: &Path, subject: &str) -> PathBuf {
    let nested = dir.join("Protocol").join(format!("{subject}.dat"));
    if nested.exists() {
        nested
    } else {
        dir.join(format!("{subject}.dat"))
    }
}

/// Samples `n` windows, each strictly inside one (subject, activity) segment.
pub fn pamap2_windows(
    recordings: &[SensorRecording],
    n: usize,
    spec: &SensorWindowSpec,
    rng: &mut crate::rng::SeededRng,
) -> Result<Dataset> {
    let len = spec.window_len();
    let usable: Vec<(usize, usize, usize, usize)> = recordings
        .iter()
        .enumerate()
        .flat_map(|(r, rec)| {
            rec.segments.iter().filter_map(move |seg| {
                let label = PAMAP2_ACTIVITIES.iter().position(|&a| a == seg.activity)?;
                (seg.end - seg.start >= len).then_some((r, label, seg.start, seg.end))
            })
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::DatasetTooSmall { got: 0, need: 1 });
    }
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let (r, label, start, end) = usable[rng.random_range(0..usable.len())];
        let t0 = rng.random_range(start..=end - len);
        let x = sensor_window_to_spectrograms(&recordings[r].data.view(), t0, spec)?;
        let mut e = Example::new(x, Some(label));
        e.subject = Some(recordings[r].subject.clone());
        examples.push(e);
    }
    Ok(Dataset { modality: Modality::Sensor, num_classes: PAMAP2_ACTIVITIES.len(), examples })
}

/// Renders a recording in the Pamap2 protocol text format.
pub fn pamap2_text(activities: &[u32], data: &Array2<f32>) -> String {
    let mut s = String::new();
    for (t, (a, row)) in activities.iter().zip(data.rows()).enumerate() {
        s.push_str(&format!("{:.2} {a}", t as f64 / 100.0));
        for v in row {
            if v.is_nan() {
                s.push_str(" NaN");
            } else {
                s.push_str(&format!(" {v}"));
            }
        }
        s.push('\n');
    }
    s
}
