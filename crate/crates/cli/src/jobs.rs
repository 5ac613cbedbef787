//! Configs of the evaluation verbs (transfer, robustness, semisup).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use viewcraft::dataprep::{load_manifest_dir, DataSplits, Dataset, DatasetSpec, Modality};
use viewcraft::eval::{synthetic_corruptions, Corruption, LinearEvalConfig};
use viewcraft::{Error, Result};

fn d_task() -> String {
    "transfer".into()
}
fn d_severities() -> Vec<u8> {
    vec![1, 2, 3, 4, 5]
}
fn d_corruptions() -> Vec<Corruption> {
    Corruption::ALL.to_vec()
}

/// Where corrupted copies of the clean validation split come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorruptionSource {
    /// Generated on the fly from the clean split.
    Synthetic {
        #[serde(default = "d_corruptions")]
        corruptions: Vec<Corruption>,
        #[serde(default = "d_severities")]
        severities: Vec<u8>,
        #[serde(default)]
        seed: u64,
    },
    /// Precomputed corruptions: a manifest directory whose split names are
    /// `{corruption}/{severity}`.
    Manifest { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalJob {
    /// Task name used in reports.
    #[serde(default = "d_task")]
    pub task: String,
    #[serde(default)]
    pub linear: LinearEvalConfig,
    /// Defaults to the checkpoint's pretraining dataset.
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub corruptions: Option<CorruptionSource>,
    /// Subjects whose labels the subject comparison may use.
    #[serde(default)]
    pub labeled_subjects: Vec<String>,
}

impl Default for EvalJob {
    fn default() -> Self {
        Self { task: d_task(), linear: LinearEvalConfig::default(), dataset: None, corruptions: None, labeled_subjects: vec![] }
    }
}

impl EvalJob {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let job: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.into_inner();
            let line = inner.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::ConfigParse { field: format!("<document> line {line}"), message: inner.message().to_string() }
        })?;
        job.validate()?;
        Ok(job)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.linear.validate().map_err(|e| match e {
            Error::ConfigParse { field, message } => Error::ConfigParse { field: format!("linear.{field}"), message },
            other => other,
        })?;
        if let Some(d) = &self.dataset {
            d.validate()?;
        }
        if let Some(CorruptionSource::Synthetic { severities, .. }) = &self.corruptions {
            if severities.is_empty() || severities.iter().any(|s| !(1..=5).contains(s)) {
                return Err(Error::ConfigParse { field: "corruptions.severities".into(), message: "severities must lie in 1..=5".into() });
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("job serializes")
    }

    pub fn load_splits(&self, fallback: &DatasetSpec, data_root: Option<&Path>) -> Result<DataSplits> {
        self.dataset.as_ref().unwrap_or(fallback).load(data_root)
    }
}

/// Corrupted variants `(name, severity, split)` of a clean split.
pub fn corrupted_variants(source: &CorruptionSource, clean: &Dataset, data_root: Option<&Path>) -> Result<Vec<(String, u8, Dataset)>> {
    match source {
        CorruptionSource::Synthetic { corruptions, severities, seed } => {
            if clean.modality != Modality::Image {
                return Err(Error::ConfigParse {
                    field: "corruptions.kind".into(),
                    message: "synthetic corruptions are defined for images only".into(),
                });
            }
            Ok(synthetic_corruptions(clean, corruptions, severities, *seed))
        }
        CorruptionSource::Manifest { dir } => {
            let dir = match data_root {
                Some(root) if dir.is_relative() => root.join(dir),
                _ => dir.clone(),
            };
            let mut groups: BTreeMap<(String, u8), Dataset> = BTreeMap::new();
            for (split, ex) in load_manifest_dir(&dir, clean.modality, None, false)? {
                let (name, sev) = match split.split_once('/') {
                    Some((n, s)) => (n.to_string(), s.parse().map_err(|_| Error::Format(format!("{}: bad severity in split {split:?}", dir.display())))?),
                    None => (split.clone(), 0),
                };
                groups
                    .entry((name, sev))
                    .or_insert_with(|| Dataset { modality: clean.modality, num_classes: clean.num_classes, examples: vec![] })
                    .examples
                    .push(ex);
            }
            if groups.is_empty() {
                return Err(Error::EmptyInput(format!("{} lists no corrupted examples", dir.display())));
            }
            Ok(groups.into_iter().map(|((n, s), d)| (n, s, d)).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_job_uses_defaults() {
        let job = EvalJob::from_toml_str("").unwrap();
        assert_eq!(job, EvalJob::default());
        assert_eq!(EvalJob::from_toml_str(&job.to_toml_string()).unwrap(), job);
    }

    #[test]
    fn errors_name_the_field() {
        let e = EvalJob::from_toml_str("[linear]\nepochs = 0\n").unwrap_err();
        assert!(matches!(e, Error::ConfigParse { ref field, .. } if field == "linear.epochs"), "{e}");
        let e = EvalJob::from_toml_str("[corruptions]\nkind = \"synthetic\"\nseverities = [9]\n").unwrap_err();
        assert!(matches!(e, Error::ConfigParse { ref field, .. } if field == "corruptions.severities"), "{e}");
        let e = EvalJob::from_toml_str("task = \"a\"\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    fn tomls(sub: &str) -> Vec<std::path::PathBuf> {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(sub);
        let mut out: Vec<_> = std::fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        out.sort();
        out
    }

    #[test]
    fn shipped_configs_parse() {
        let pretrain = tomls("pretrain");
        let eval = tomls("eval");
        assert!(!pretrain.is_empty() && !eval.is_empty());
        for p in &pretrain {
            let cfg = viewcraft::trainer::ExperimentConfig::load(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        }
        for p in &eval {
            EvalJob::load(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        }
    }
}
