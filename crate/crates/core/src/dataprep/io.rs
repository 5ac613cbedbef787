//! File formats: binary PPM/PGM images, WAV audio, CIFAR-10 binary batches
//! and line-delimited dataset manifests.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit quantization used for image files.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1-channel image as binary PGM (P5) or a 3-channel image as binary PPM (P6).
pub fn write_pnm(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (c, h, w) = img.dim();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::shape("1 or 3 channels", img.dim())),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(to_u8(img[[ch, y, x]]));
            }
        }
    }
    write!(out, "{magic}\n{w} {h}\n255\n").and_then(|_| out.write_all(&bytes)).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

fn next_token(data: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&data[start..*pos]).into_owned())
}

/// Reads binary PGM/PPM into `[0, 1]` floats, `C×H×W`.
pub fn read_pnm(path: &Path) -> Result<Array3<f32>> {
    let mut data = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut data)).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let channels = match next_token(&data, &mut pos).as_deref() {
        Some("P5") => 1,
        Some("P6") => 3,
        _ => return Err(bad("not a binary PGM/PPM file")),
    };
    let mut num = || -> Result<usize> { next_token(&data, &mut pos).and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad header")) };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let body = &data[pos + 1..];
    if body.len() < w * h * channels {
        return Err(bad("truncated pixel data"));
    }
    Ok(Array3::from_shape_fn((channels, h, w), |(c, y, x)| body[(y * w + x) * channels + c] as f32 / 255.0))
}

/// Mono waveform as floats in `[-1, 1]`; multichannel files are averaged.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let fmt = |e: hound::Error| Error::Format(format!("{}: {e}", path.display()));
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>().map_err(fmt)?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(fmt)?
        }
    };
    let ch = spec.channels.max(1) as usize;
    let mono = interleaved.chunks(ch).map(|f| f.iter().sum::<f32>() / ch as f32).collect();
    Ok((mono, spec.sample_rate))
}

pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let fmt = |e: hound::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(fmt)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(fmt)?;
    }
    w.finalize().map_err(fmt)
}

/// One CIFAR-10 binary batch: records of one label byte plus 3072 pixel bytes.
pub fn read_cifar10_batch(path: &Path, limit: Option<usize>) -> Result<Vec<(Array3<f32>, usize)>> {
    const RECORD: usize = 1 + 3 * 32 * 32;
    let mut data = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut data)).map_err(|e| Error::io(path, e))?;
    if data.len() % RECORD != 0 {
        return Err(Error::Format(format!("{}: size {} is not a multiple of {RECORD}", path.display(), data.len())));
    }
    let n = (data.len() / RECORD).min(limit.unwrap_or(usize::MAX));
    Ok((0..n)
        .map(|i| {
            let rec = &data[i * RECORD..(i + 1) * RECORD];
            let img = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| rec[1 + c * 1024 + y * 32 + x] as f32 / 255.0);
            (img, rec[0] as usize)
        })
        .collect())
}

/// A manifest line: `{path, label, split, subject_id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: PathBuf,
    #[serde(default)]
    pub label: Option<usize>,
    pub split: String,
    #[serde(default)]
    pub subject_id: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("manifest record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
