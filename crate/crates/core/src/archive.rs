//! Named-tensor archives (safetensors) with an embedded JSON config blob.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

const CONFIG_KEY: &str = "__config__";

pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>, config_json: Option<&str>) -> Result<()> {
    let mut all: HashMap<String, Tensor> = tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    if let Some(cfg) = config_json {
        let bytes = cfg.as_bytes().to_vec();
        let n = bytes.len();
        all.insert(CONFIG_KEY.to_string(), Tensor::from_vec(bytes, n, &Device::Cpu)?);
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    candle_core::safetensors::save(&all, path).map_err(|e| match e {
        candle_core::Error::Io(io) => Error::io(path, io),
        other => Error::Tensor(other),
    })
}

/// Loads an archive, returning tensors (without the config entry) and the config text if present.
pub fn load(path: &Path) -> Result<(HashMap<String, Tensor>, Option<String>)> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such archive")));
    }
    let mut all = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| match e {
        candle_core::Error::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let config = match all.remove(CONFIG_KEY) {
        Some(t) => {
            let bytes: Vec<u8> = t.to_vec1()?;
            Some(String::from_utf8(bytes).map_err(|e| Error::Format(format!("config blob is not utf-8: {e}")))?)
        }
        None => None,
    };
    Ok((all, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        let mut rng = crate::rng::seeded(1);
        let t = crate::rng::normal_tensor(&mut rng, &[3, 5], DType::F32, &Device::Cpu).unwrap();
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), t.clone());
        save(&path, &map, Some("{\"a\":1}")).unwrap();
        let (back, cfg) = load(&path).unwrap();
        assert_eq!(cfg.as_deref(), Some("{\"a\":1}"));
        let a: Vec<u32> = t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|f| f.to_bits()).collect();
        let b: Vec<u32> = back["w"].flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|f| f.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_archive_names_the_path() {
        let err = load(Path::new("/nonexistent/x.safetensors")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.safetensors"));
    }
}
