//! Multichannel wearable-sensor windows turned into stacked log spectrograms.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use super::stft::power_spectrogram;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorWindowSpec {
    pub window_seconds: f64,
    pub sample_rate: f64,
    pub channels: usize,
    pub fft_bins: usize,
    pub hop: usize,
    pub power: f64,
    pub log_offset: f64,
}

impl Default for SensorWindowSpec {
    fn default() -> Self {
        Self { window_seconds: 10.0, sample_rate: 100.0, channels: 52, fft_bins: 63, hop: 32, power: 2.0, log_offset: 1e-6 }
    }
}

impl SensorWindowSpec {
    pub fn window_len(&self) -> usize {
        (self.window_seconds * self.sample_rate).round() as usize
    }

    /// `(frequency bins, frames)` of one channel's spectrogram.
    pub fn output_dims(&self) -> (usize, usize) {
        (self.fft_bins / 2 + 1, 1 + self.window_len() / self.hop)
    }
}

/// Fills NaN gaps in each column by linear interpolation between the nearest
/// observed neighbours. Leading/trailing gaps take the nearest observed value;
/// a column with no observations becomes zeros.
pub fn interpolate_missing(data: &mut Array2<f32>) {
    for mut col in data.columns_mut() {
        let known: Vec<usize> = (0..col.len()).filter(|&i| col[i].is_finite()).collect();
        if known.is_empty() {
            col.fill(0.0);
            continue;
        }
        if known.len() == col.len() {
            continue;
        }
        let (first, last) = (known[0], *known.last().expect("nonempty"));
        let (head, tail) = (col[first], col[last]);
        for i in 0..first {
            col[i] = head;
        }
        for i in last + 1..col.len() {
            col[i] = tail;
        }
        for pair in known.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b > a + 1 {
                let (va, vb) = (col[a], col[b]);
                for i in a + 1..b {
                    let t = (i - a) as f32 / (b - a) as f32;
                    col[i] = va + t * (vb - va);
                }
            }
        }
    }
}

/// Log spectrograms for one window starting at sample `start` of a
/// `time × channels` recording (NaN marks missing samples). Output is
/// `channels × freq × frames`, i.e. `[52, 32, 32]` for the default spec.
pub fn sensor_window_to_spectrograms(recording: &ArrayView2<f32>, start: usize, spec: &SensorWindowSpec) -> Result<Array3<f32>> {
    let (len, channels) = recording.dim();
    if channels != spec.channels {
        return Err(Error::shape(format!("T×{}", spec.channels), recording.dim()));
    }
    let n = spec.window_len();
    if start + n > len {
        return Err(Error::WindowOutOfBounds { start, end: start + n, len });
    }
    let mut filled = recording.to_owned();
    if filled.iter().any(|v| !v.is_finite()) {
        interpolate_missing(&mut filled);
    }
    let window = filled.slice(s![start..start + n, ..]);
    let (bins, frames) = spec.output_dims();
    let mut out = Array3::<f32>::zeros((channels, bins, frames));
    let exponent = spec.power / 2.0;
    for ch in 0..channels {
        let signal: Vec<f32> = window.column(ch).to_vec();
        let power = power_spectrogram(&signal, spec.fft_bins, spec.fft_bins, spec.hop);
        for ((f, t), &p) in power.indexed_iter() {
            out[[ch, f, t]] = (p.powf(exponent) + spec.log_offset).ln() as f32;
        }
    }
    Ok(out)
}

/// One contiguous run of a single activity within a subject's recording.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivitySegment {
    pub activity: u32,
    pub start: usize,
    pub end: usize,
}

/// A subject's 52-channel recording with its activity segmentation.
#[derive(Debug, Clone)]
pub struct SensorRecording {
    pub subject: String,
    pub data: Array2<f32>,
    pub segments: Vec<ActivitySegment>,
}

/// Parses a Pamap2 protocol file: whitespace-separated rows of
/// `timestamp activity heart_rate imu×51`, NaN for missing readings.
/// Rows with activity 0 (transient) split segments and are otherwise kept.
pub fn parse_pamap2(text: &str, subject: &str) -> Result<SensorRecording> {
    let mut rows: Vec<f32> = Vec::new();
    let mut activities: Vec<u32> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 54 {
            return Err(Error::Format(format!("{subject}: line {} has {} columns, expected 54", lineno + 1, fields.len())));
        }
        let activity: f64 = fields[1]
            .parse()
            .map_err(|_| Error::Format(format!("{subject}: line {} bad activity id", lineno + 1)))?;
        activities.push(activity as u32);
        for f in &fields[2..] {
            let v = if f.eq_ignore_ascii_case("nan") {
                f32::NAN
            } else {
                f.parse().map_err(|_| Error::Format(format!("{subject}: line {} bad value {f:?}", lineno + 1)))?
            };
            rows.push(v);
        }
    }
    let t = activities.len();
    let mut data = Array2::from_shape_vec((t, 52), rows).map_err(|e| Error::Format(e.to_string()))?;
    interpolate_missing(&mut data);
    let mut segments = Vec::new();
    let mut i = 0;
    while i < t {
        let a = activities[i];
        let mut j = i;
        while j < t && activities[j] == a {
            j += 1;
        }
        if a != 0 {
            segments.push(ActivitySegment { activity: a, start: i, end: j });
        }
        i = j;
    }
    Ok(SensorRecording { subject: subject.to_string(), data, segments })
}

pub fn load_pamap2(path: &Path) -> Result<SensorRecording> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let subject = path.file_stem().and_then(|s| s.to_str()).unwrap_or("unknown").to_string();
    parse_pamap2(&text, &subject)
}
