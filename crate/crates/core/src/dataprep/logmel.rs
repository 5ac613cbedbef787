use ndarray::{s, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::stft::power_spectrogram;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessMode {
    Train,
    Eval,
}

fn default_max_frames() -> usize {
    150_000
}
fn default_sample_rate() -> u32 {
    16_000
}
fn default_n_fft() -> usize {
    1024
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrogramSpec {
    #[serde(default = "default_max_frames")]
    pub max_frames: usize,
    pub hop: usize,
    /// Analysis window length in samples.
    pub fft_window: usize,
    /// FFT size; the window is zero-padded up to it.
    #[serde(default = "default_n_fft")]
    pub n_fft: usize,
    pub n_mels: usize,
    #[serde(default = "default_true")]
    pub mel: bool,
    #[serde(default = "default_true")]
    pub power_to_db: bool,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    /// Side length of the square output.
    pub output_size: usize,
}

impl SpectrogramSpec {
    /// 64×64 log-mel spectrograms (hop 2360, 64-sample window).
    pub fn librispeech_64() -> Self {
        Self {
            max_frames: 150_000,
            hop: 2360,
            fft_window: 64,
            n_fft: 1024,
            n_mels: 64,
            mel: true,
            power_to_db: true,
            sample_rate: 16_000,
            output_size: 64,
        }
    }

    /// 112×112 log-mel spectrograms (hop 672, 112-sample window).
    pub fn librispeech_112() -> Self {
        Self { hop: 672, fft_window: 112, n_mels: 112, output_size: 112, ..Self::librispeech_64() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.fft_window == 0 || self.n_fft < self.fft_window || self.max_frames == 0 {
            return Err(Error::ConfigInvalid("spectrogram hop, window and max_frames must be positive, n_fft >= window".into()));
        }
        let rows = if self.mel { self.n_mels } else { self.n_fft / 2 + 1 };
        if rows < self.output_size {
            return Err(Error::ConfigInvalid(format!("{rows} frequency rows cannot fill a {} output", self.output_size)));
        }
        Ok(())
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, `n_mels × (n_fft/2 + 1)`, unnormalized.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Array2<f64> {
    let bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let points: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64)).collect();
    let freqs: Vec<f64> = (0..bins).map(|k| nyquist * k as f64 / (bins - 1) as f64).collect();
    let mut fb = Array2::<f64>::zeros((n_mels, bins));
    for m in 0..n_mels {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        for (k, &f) in freqs.iter().enumerate() {
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            fb[[m, k]] = up.min(down).max(0.0);
        }
    }
    fb
}

/// `10·log10(max(x, 1e-10))`.
pub fn power_to_db(x: f64) -> f64 {
    10.0 * x.max(1e-10).log10()
}

/// Truncates to `max_frames` (random head/tail in training, tail in
/// evaluation), zero-pads short input, and computes a square log-mel
/// spectrogram `1×S×S` (mel bands × frames). Frames beyond `S` are dropped;
/// missing frames are filled with the decibel floor.
pub fn waveform_to_logmel(
    wave: &[f32],
    spec: &SpectrogramSpec,
    mode: PreprocessMode,
    rng: &mut SeededRng,
) -> Result<Array3<f32>> {
    if wave.is_empty() {
        return Err(Error::EmptyInput("waveform has no samples".into()));
    }
    spec.validate()?;
    let keep_tail = wave.len() > spec.max_frames && mode == PreprocessMode::Train && rng.random::<bool>();
    let clipped = if wave.len() > spec.max_frames {
        if keep_tail {
            &wave[wave.len() - spec.max_frames..]
        } else {
            &wave[..spec.max_frames]
        }
    } else {
        wave
    };
    let mut signal = vec![0f32; spec.max_frames];
    signal[..clipped.len()].copy_from_slice(clipped);

    let power = power_spectrogram(&signal, spec.n_fft, spec.fft_window, spec.hop);
    let features = if spec.mel { mel_filterbank(spec.n_mels, spec.n_fft, spec.sample_rate).dot(&power) } else { power };
    let s = spec.output_size;
    let floor = if spec.power_to_db { power_to_db(0.0) } else { 0.0 };
    let mut out = Array3::<f32>::from_elem((1, s, s), floor as f32);
    let frames = features.dim().1.min(s);
    let rows = features.slice(s![..s, ..frames]);
    for ((f, t), &v) in rows.indexed_iter() {
        out[[0, f, t]] = if spec.power_to_db { power_to_db(v) } else { v } as f32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::StandardNormal;

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = seeded(seed);
        (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * 0.1).collect()
    }

    #[test]
    fn reference_shapes() {
        let w = noise(150_000, 1);
        let a = waveform_to_logmel(&w, &SpectrogramSpec::librispeech_64(), PreprocessMode::Eval, &mut seeded(0)).unwrap();
        assert_eq!(a.dim(), (1, 64, 64));
        let b = waveform_to_logmel(&w, &SpectrogramSpec::librispeech_112(), PreprocessMode::Eval, &mut seeded(0)).unwrap();
        assert_eq!(b.dim(), (1, 112, 112));
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_mode_is_deterministic_and_keeps_the_head() {
        let w = noise(200_000, 2);
        let spec = SpectrogramSpec::librispeech_64();
        let a = waveform_to_logmel(&w, &spec, PreprocessMode::Eval, &mut seeded(1)).unwrap();
        let b = waveform_to_logmel(&w, &spec, PreprocessMode::Eval, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
        let head = waveform_to_logmel(&w[..150_000], &spec, PreprocessMode::Eval, &mut seeded(0)).unwrap();
        assert_eq!(a, head);
    }

    #[test]
    fn train_mode_picks_head_or_tail() {
        let w = noise(200_000, 3);
        let spec = SpectrogramSpec::librispeech_64();
        let head = waveform_to_logmel(&w[..150_000], &spec, PreprocessMode::Eval, &mut seeded(0)).unwrap();
        let tail = waveform_to_logmel(&w[50_000..], &spec, PreprocessMode::Eval, &mut seeded(0)).unwrap();
        let mut saw = (false, false);
        for seed in 0..16 {
            let v = waveform_to_logmel(&w, &spec, PreprocessMode::Train, &mut seeded(seed)).unwrap();
            assert!(v == head || v == tail);
            saw.0 |= v == head;
            saw.1 |= v == tail;
        }
        assert!(saw.0 && saw.1);
    }

    #[test]
    fn short_input_is_zero_padded() {
        let w = noise(1000, 4);
        let out = waveform_to_logmel(&w, &SpectrogramSpec::librispeech_64(), PreprocessMode::Eval, &mut seeded(0)).unwrap();
        // silent tail sits at the decibel floor
        assert_eq!(out[[0, 10, 63]], -100.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        let err = waveform_to_logmel(&[], &SpectrogramSpec::librispeech_64(), PreprocessMode::Eval, &mut seeded(0));
        assert!(matches!(err, Err(Error::EmptyInput(_))));
    }

    #[test]
    fn filterbank_rows_are_nonempty_triangles() {
        let fb = mel_filterbank(112, 1024, 16_000);
        for row in fb.rows() {
            let peak = row.iter().cloned().fold(0.0, f64::max);
            assert!(peak > 0.0 && peak <= 1.0);
        }
    }
}
