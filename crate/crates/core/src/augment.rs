//! Handcrafted view pipelines: SimCLR-style image transforms, waveform
//! crop + noise, and SpecAugment-style spectrogram masking.

use ndarray::{s, Array3, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

fn unit_interval(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

fn check_scale(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::ConfigParse { field: name.into(), message: format!("({lo}, {hi}) must satisfy 0 < lo <= hi <= 1") });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageExpertPolicy {
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    /// Probability that the color-jitter stage runs at all.
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_kernel: usize,
    pub blur_sigma: (f64, f64),
}

impl Default for ImageExpertPolicy {
    fn default() -> Self {
        Self::simclr()
    }
}

impl ImageExpertPolicy {
    /// Full pipeline: crop, flip, jitter, grayscale, blur.
    pub fn simclr() -> Self {
        Self {
            crop_scale: (0.08, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.8,
            contrast: 0.8,
            saturation: 0.8,
            hue: 0.2,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_kernel: 3,
            blur_sigma: (0.1, 2.0),
        }
    }

    /// Cropping and horizontal flipping only, no color or blur.
    pub fn crop_flip_only() -> Self {
        Self { jitter_prob: 0.0, grayscale_prob: 0.0, blur_prob: 0.0, ..Self::simclr() }
    }

    pub fn identity() -> Self {
        Self { crop_scale: (1.0, 1.0), flip_prob: 0.0, ..Self::crop_flip_only() }
    }

    pub fn validate(&self) -> Result<()> {
        check_scale("crop_scale", self.crop_scale)?;
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !unit_interval(p) {
                return Err(Error::ConfigParse { field: name.into(), message: format!("probability {p} outside [0, 1]") });
            }
        }
        if !(self.crop_ratio.0 > 0.0 && self.crop_ratio.0 <= self.crop_ratio.1) {
            return Err(Error::ConfigParse { field: "crop_ratio".into(), message: "must be positive and ordered".into() });
        }
        if self.hue < 0.0 || self.hue > 0.5 || self.brightness < 0.0 || self.contrast < 0.0 || self.saturation < 0.0 {
            return Err(Error::ConfigParse { field: "jitter".into(), message: "strengths must be >= 0, hue <= 0.5".into() });
        }
        if self.blur_kernel % 2 == 0 {
            return Err(Error::ConfigParse { field: "blur_kernel".into(), message: "must be odd".into() });
        }
        Ok(())
    }
}

fn uniform(rng: &mut SeededRng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Crop box `(top, left, height, width)` with the random-resized-crop sampler:
/// ten rejection attempts, then a center crop clamped to the ratio range.
fn crop_box(rng: &mut SeededRng, h: usize, w: usize, scale: (f64, f64), ratio: (f64, f64)) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let log_ratio = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale);
        let aspect = uniform(rng, log_ratio).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && cw <= w && ch > 0 && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < ratio.0 {
        (((w as f64) / ratio.0).round() as usize, w)
    } else if in_ratio > ratio.1 {
        (h, ((h as f64) * ratio.1).round() as usize)
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Bilinear resize (half-pixel centers, no antialiasing) of every channel.
pub fn resize_bilinear(img: &ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = img[[ch, y0, x0]] * (1.0 - lx) + img[[ch, y0, x1]] * lx;
                let bottom = img[[ch, y1, x0]] * (1.0 - lx) + img[[ch, y1, x1]] * lx;
                out[[ch, oy, ox]] = top * (1.0 - ly) + bottom * ly;
            }
        }
    }
    out
}

fn luma(img: &Array3<f32>) -> ndarray::Array2<f32> {
    &img.index_axis(Axis(0), 0) * 0.299 + &img.index_axis(Axis(0), 1) * 0.587 + &img.index_axis(Axis(0), 2) * 0.114
}

fn blend(a: &mut Array3<f32>, b: &Array3<f32>, factor: f32) {
    a.zip_mut_with(b, |x, &y| *x = (factor * *x + (1.0 - factor) * y).clamp(0.0, 1.0));
}

fn adjust_brightness(img: &mut Array3<f32>, f: f32) {
    img.mapv_inplace(|v| (v * f).clamp(0.0, 1.0));
}

fn adjust_contrast(img: &mut Array3<f32>, f: f32) {
    let mean = luma(img).mean().unwrap_or(0.0);
    let target = Array3::from_elem(img.dim(), mean);
    blend(img, &target, f);
}

fn adjust_saturation(img: &mut Array3<f32>, f: f32) {
    let gray = luma(img);
    let target = gray.broadcast(img.dim()).expect("gray broadcasts over channels").to_owned();
    blend(img, &target, f);
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn adjust_hue(img: &mut Array3<f32>, shift: f32) {
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let (hh, ss, vv) = rgb_to_hsv(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            let (r, g, b) = hsv_to_rgb(hh + shift, ss, vv);
            img[[0, y, x]] = r.clamp(0.0, 1.0);
            img[[1, y, x]] = g.clamp(0.0, 1.0);
            img[[2, y, x]] = b.clamp(0.0, 1.0);
        }
    }
}

pub fn gaussian_blur(img: &Array3<f32>, kernel: usize, sigma: f64) -> Array3<f32> {
    let r = kernel as i64 / 2;
    let weights: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let total: f32 = weights.iter().sum();
    let weights: Vec<f32> = weights.iter().map(|w| w / total).collect();
    let (c, h, w) = img.dim();
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        let mut i = i;
        if n == 1 {
            return 0;
        }
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let mut horizontal = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                horizontal[[ch, y, x]] = (-r..=r)
                    .zip(&weights)
                    .map(|(d, wt)| wt * img[[ch, y, reflect(x as i64 + d, w)]])
                    .sum();
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = (-r..=r)
                    .zip(&weights)
                    .map(|(d, wt)| wt * horizontal[[ch, reflect(y as i64 + d, h), x]])
                    .sum();
            }
        }
    }
    out
}

/// SimCLR-style expert view of a `C×H×W` image in `[0, 1]`: random resized
/// crop, horizontal flip, color jitter, random grayscale, Gaussian blur.
/// Color stages only run on 3-channel inputs.
pub fn image_expert_view(img: &ArrayView3<f32>, policy: &ImageExpertPolicy, rng: &mut SeededRng) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let (top, left, ch, cw) = crop_box(rng, h, w, policy.crop_scale, policy.crop_ratio);
    let crop = img.slice(s![.., top..top + ch, left..left + cw]);
    let mut out = resize_bilinear(&crop, h, w);

    if rng.random::<f64>() < policy.flip_prob {
        out.invert_axis(Axis(2));
        out = out.as_standard_layout().to_owned();
    }
    if c == 3 && rng.random::<f64>() < policy.jitter_prob {
        let mut order = [0u8, 1, 2, 3];
        order.shuffle(rng);
        for op in order {
            match op {
                0 if policy.brightness > 0.0 => {
                    let f = uniform(rng, ((1.0 - policy.brightness).max(0.0), 1.0 + policy.brightness));
                    adjust_brightness(&mut out, f as f32);
                }
                1 if policy.contrast > 0.0 => {
                    let f = uniform(rng, ((1.0 - policy.contrast).max(0.0), 1.0 + policy.contrast));
                    adjust_contrast(&mut out, f as f32);
                }
                2 if policy.saturation > 0.0 => {
                    let f = uniform(rng, ((1.0 - policy.saturation).max(0.0), 1.0 + policy.saturation));
                    adjust_saturation(&mut out, f as f32);
                }
                3 if policy.hue > 0.0 => {
                    let f = uniform(rng, (-policy.hue, policy.hue));
                    adjust_hue(&mut out, f as f32);
                }
                _ => {}
            }
        }
    }
    if c == 3 && rng.random::<f64>() < policy.grayscale_prob {
        let gray = luma(&out);
        for ch in 0..3 {
            out.index_axis_mut(Axis(0), ch).assign(&gray);
        }
    }
    if rng.random::<f64>() < policy.blur_prob {
        let sigma = uniform(rng, policy.blur_sigma);
        out = gaussian_blur(&out, policy.blur_kernel, sigma);
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveformPolicy {
    pub crop_scale: (f64, f64),
    pub noise_scale: f64,
}

impl Default for WaveformPolicy {
    fn default() -> Self {
        Self { crop_scale: (0.08, 1.0), noise_scale: 1.0 }
    }
}

impl WaveformPolicy {
    pub fn validate(&self) -> Result<()> {
        check_scale("crop_scale", self.crop_scale)?;
        if !(self.noise_scale >= 0.0) {
            return Err(Error::ConfigParse { field: "noise_scale".into(), message: "must be >= 0".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CroppedWaveform {
    pub samples: Vec<f32>,
    /// Offset of the crop in the source waveform.
    pub start: usize,
}

/// Random contiguous crop with relative length in `crop_scale`, plus additive
/// Gaussian noise of standard deviation `noise_scale`.
pub fn waveform_view(wave: &[f32], policy: &WaveformPolicy, rng: &mut SeededRng) -> Result<CroppedWaveform> {
    let n = wave.len();
    if n == 0 {
        return Err(Error::EmptyInput("waveform has no samples".into()));
    }
    let lo = ((policy.crop_scale.0 * n as f64).ceil() as usize).clamp(1, n);
    let hi = ((policy.crop_scale.1 * n as f64).floor() as usize).clamp(lo, n);
    let len = ((uniform(rng, policy.crop_scale) * n as f64).round() as usize).clamp(lo, hi);
    let start = rng.random_range(0..=n - len);
    let samples = wave[start..start + len]
        .iter()
        .map(|&v| {
            if policy.noise_scale > 0.0 {
                v + (policy.noise_scale * rng.sample::<f64, _>(StandardNormal)) as f32
            } else {
                v
            }
        })
        .collect();
    Ok(CroppedWaveform { samples, start })
}

fn default_mask_factor() -> usize {
    40
}
fn default_noise_std() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralMaskPolicy {
    #[serde(default = "default_mask_factor")]
    pub mask_factor: usize,
    pub apply_noise: bool,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    pub shared_mask_across_channels: bool,
}

impl Default for SpectralMaskPolicy {
    fn default() -> Self {
        Self { mask_factor: 40, apply_noise: true, noise_std: 1.0, shared_mask_across_channels: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Band {
    start: usize,
    width: usize,
}

fn draw_band(rng: &mut SeededRng, extent: usize, factor: usize) -> Band {
    let width = rng.random_range(0..=factor);
    let start = rng.random_range(0..=extent - width);
    Band { start, width }
}

/// Optional Gaussian noise, then one frequency band and one time band of
/// width at most `mask_factor` set to zero. Input is `C×F×T`.
pub fn spectral_mask_view(spec: &ArrayView3<f32>, policy: &SpectralMaskPolicy, rng: &mut SeededRng) -> Result<Array3<f32>> {
    let (c, f, t) = spec.dim();
    for extent in [f, t] {
        if policy.mask_factor > extent {
            return Err(Error::MaskTooLarge { mask_factor: policy.mask_factor, extent });
        }
    }
    let mut out = spec.to_owned();
    if policy.apply_noise && policy.noise_std > 0.0 {
        out.mapv_inplace(|v| v + (policy.noise_std * rng.sample::<f64, _>(StandardNormal)) as f32);
    }
    let shared = policy
        .shared_mask_across_channels
        .then(|| (draw_band(rng, f, policy.mask_factor), draw_band(rng, t, policy.mask_factor)));
    for ch in 0..c {
        let (fb, tb) = match shared {
            Some(bands) => bands,
            None => (draw_band(rng, f, policy.mask_factor), draw_band(rng, t, policy.mask_factor)),
        };
        out.slice_mut(s![ch, fb.start..fb.start + fb.width, ..]).fill(0.0);
        out.slice_mut(s![ch, .., tb.start..tb.start + tb.width]).fill(0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Array3<f32> {
        let mut rng = seeded(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.random::<f32>())
    }

    #[test]
    fn identity_policy_returns_input() {
        let img = random_image(1, 3, 32, 32);
        for seed in 0..20 {
            let out = image_expert_view(&img.view(), &ImageExpertPolicy::identity(), &mut seeded(seed));
            let err = (&out - &img).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn expert_views_stay_in_range_and_shape() {
        let img = random_image(2, 3, 32, 32);
        let policy = ImageExpertPolicy::simclr();
        let mut rng = seeded(3);
        for _ in 0..1000 {
            let out = image_expert_view(&img.view(), &policy, &mut rng);
            assert_eq!(out.dim(), (3, 32, 32));
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn crop_flip_only_preserves_colors() {
        // a constant-color image stays constant under crop/flip
        let img = Array3::from_shape_fn((3, 32, 32), |(c, _, _)| [0.2f32, 0.5, 0.9][c]);
        let out = image_expert_view(&img.view(), &ImageExpertPolicy::crop_flip_only(), &mut seeded(4));
        let err = (&out - &img).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
        assert!(err < 1e-6);
        let policy = ImageExpertPolicy::crop_flip_only();
        assert_eq!((policy.jitter_prob, policy.grayscale_prob, policy.blur_prob), (0.0, 0.0, 0.0));
    }

    #[test]
    fn expert_views_are_deterministic_per_seed() {
        let img = random_image(5, 3, 32, 32);
        let a = image_expert_view(&img.view(), &ImageExpertPolicy::simclr(), &mut seeded(9));
        let b = image_expert_view(&img.view(), &ImageExpertPolicy::simclr(), &mut seeded(9));
        assert_eq!(a, b);
    }

    #[test]
    fn hsv_roundtrip() {
        for &(r, g, b) in &[(0.1f32, 0.5, 0.9), (0.9, 0.1, 0.3), (0.4, 0.4, 0.4), (0.0, 1.0, 0.5)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn invalid_policy_is_rejected() {
        let mut p = ImageExpertPolicy::simclr();
        p.flip_prob = 1.5;
        assert!(p.validate().is_err());
        p = ImageExpertPolicy::simclr();
        p.crop_scale = (0.0, 1.0);
        assert!(p.validate().is_err());
        assert!(ImageExpertPolicy::simclr().validate().is_ok());
    }

    #[test]
    fn waveform_identity_policy() {
        let wave: Vec<f32> = (0..100).map(|i| (i as f32 * 0.1).sin()).collect();
        let out = waveform_view(&wave, &WaveformPolicy { crop_scale: (1.0, 1.0), noise_scale: 0.0 }, &mut seeded(0)).unwrap();
        assert_eq!(out.samples, wave);
        assert_eq!(out.start, 0);
    }

    #[test]
    fn waveform_crop_lengths_in_range() {
        let wave = vec![0.0f32; 1000];
        let policy = WaveformPolicy { crop_scale: (0.08, 1.0), noise_scale: 0.0 };
        let mut rng = seeded(1);
        for _ in 0..1000 {
            let out = waveform_view(&wave, &policy, &mut rng).unwrap();
            assert!((80..=1000).contains(&out.samples.len()));
            assert!(out.start + out.samples.len() <= 1000);
        }
    }

    #[test]
    fn waveform_crop_tracks_its_source_span() {
        let mut rng = seeded(2);
        let mut acc = 0.0f32;
        let wave: Vec<f32> = (0..4000)
            .map(|_| {
                acc += rng.sample::<f32, _>(StandardNormal);
                acc
            })
            .collect();
        let policy = WaveformPolicy { crop_scale: (0.2, 0.3), noise_scale: 1.0 };
        for _ in 0..20 {
            let out = waveform_view(&wave, &policy, &mut rng).unwrap();
            let len = out.samples.len();
            let corr = |off: usize| pearson(&out.samples, &wave[off..off + len]);
            let own = corr(out.start);
            let other = if out.start >= len { 0 } else { wave.len() - len };
            if (other as i64 - out.start as i64).unsigned_abs() as usize >= len {
                assert!(own > corr(other).abs());
            }
            assert!(own > 0.9);
        }
    }

    fn pearson(a: &[f32], b: &[f32]) -> f32 {
        let n = a.len() as f32;
        let ma = a.iter().sum::<f32>() / n;
        let mb = b.iter().sum::<f32>() / n;
        let cov: f32 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f32 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f32 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn empty_waveform_is_an_error() {
        assert!(matches!(waveform_view(&[], &WaveformPolicy::default(), &mut seeded(0)), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn zero_mask_factor_is_identity() {
        let spec = random_image(3, 1, 64, 64);
        let policy = SpectralMaskPolicy { mask_factor: 0, apply_noise: false, noise_std: 1.0, shared_mask_across_channels: true };
        assert_eq!(spectral_mask_view(&spec.view(), &policy, &mut seeded(0)).unwrap(), spec);
    }

    #[test]
    fn shared_masks_match_across_channels() {
        let spec = random_image(4, 52, 32, 32).mapv(|v| v + 1.0);
        let policy = SpectralMaskPolicy { mask_factor: 20, apply_noise: false, noise_std: 1.0, shared_mask_across_channels: true };
        let mut rng = seeded(5);
        for _ in 0..50 {
            let out = spectral_mask_view(&spec.view(), &policy, &mut rng).unwrap();
            let zeros0 = out.index_axis(Axis(0), 0).mapv(|v| v == 0.0);
            for ch in 1..52 {
                assert_eq!(out.index_axis(Axis(0), ch).mapv(|v| v == 0.0), zeros0);
            }
        }
    }

    #[test]
    fn masked_fraction_is_bounded() {
        let spec = random_image(6, 2, 64, 48).mapv(|v| v + 1.0);
        let policy = SpectralMaskPolicy { mask_factor: 10, apply_noise: false, noise_std: 1.0, shared_mask_across_channels: false };
        let bound = (10.0 * 64.0 + 10.0 * 48.0) / (64.0 * 48.0);
        let mut rng = seeded(7);
        for _ in 0..1000 {
            let out = spectral_mask_view(&spec.view(), &policy, &mut rng).unwrap();
            for ch in 0..2 {
                let zeros = out.index_axis(Axis(0), ch).iter().filter(|&&v| v == 0.0).count() as f64;
                assert!(zeros / (64.0 * 48.0) <= bound);
            }
        }
    }

    #[test]
    fn mask_larger_than_axis_is_rejected() {
        let spec = Array3::<f32>::zeros((1, 32, 32));
        let policy = SpectralMaskPolicy::default();
        assert!(matches!(
            spectral_mask_view(&spec.view(), &policy, &mut seeded(0)),
            Err(Error::MaskTooLarge { mask_factor: 40, extent: 32 })
        ));
    }
}
