use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Centered short-time power spectrum `|STFT|²`, shape `(n_fft/2 + 1) × frames`.
///
/// The signal is reflect-padded by `n_fft/2` on both sides; a periodic Hann
/// window of `win_length` samples is zero-padded to `n_fft` and centered.
/// Frame count is `1 + len / hop`.
pub fn power_spectrogram(signal: &[f32], n_fft: usize, win_length: usize, hop: usize) -> Array2<f64> {
    assert!(win_length <= n_fft && hop > 0 && !signal.is_empty());
    let pad = n_fft / 2;
    let frames = 1 + signal.len() / hop;
    let bins = n_fft / 2 + 1;
    let window = hann(win_length);
    let offset = (n_fft - win_length) / 2;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Array2::<f64>::zeros((bins, frames));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..frames {
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(0.0, 0.0);
            if k >= offset && k < offset + win_length {
                let src = (t * hop + k) as i64 - pad as i64;
                *slot = Complex::new(signal[reflect(src, signal.len())] as f64 * window[k - offset], 0.0);
            }
        }
        fft.process(&mut buf);
        for f in 0..bins {
            out[[f, t]] = buf[f].norm_sqr();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_counts() {
        assert_eq!(power_spectrogram(&vec![0.0; 150_000], 64, 64, 2360).dim(), (33, 64));
        assert_eq!(power_spectrogram(&vec![0.0; 1000], 63, 63, 32).dim(), (32, 32));
    }

    #[test]
    fn pure_tone_peaks_at_its_bin() {
        let n_fft = 64;
        let sig: Vec<f32> = (0..640).map(|i| (2.0 * std::f32::consts::PI * 8.0 * i as f32 / n_fft as f32).cos()).collect();
        let spec = power_spectrogram(&sig, n_fft, n_fft, 16);
        let col = spec.column(10);
        let argmax = col.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        assert_eq!(argmax, 8);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
    }
}
