//! Dataset adapters and deterministic preprocessing.

mod corners;
mod dataset;
pub mod io;
mod logmel;
mod norm;
mod sensor;
mod stft;

pub use corners::{audit_corners, make_corners_dataset, make_corners_with, CornersAudit, CornersProvenance, MIN_IMAGES};
pub use dataset::{
    cache_key, cached_logmel, load_manifest_dir, pamap2_text, pamap2_windows, read_input_file, write_input_file, stack, synthetic, unstack, DataSplits,
    Dataset, DatasetSpec, Example, Modality, CACHE_DIR, PAMAP2_ACTIVITIES,
};
pub use logmel::{mel_filterbank, power_to_db, waveform_to_logmel, PreprocessMode, SpectrogramSpec};
pub use norm::{compute_norm_stats, NormStats};
pub use sensor::{
    interpolate_missing, load_pamap2, parse_pamap2, sensor_window_to_spectrograms, ActivitySegment, SensorRecording,
    SensorWindowSpec,
};
pub use stft::{hann, power_spectrogram};
