//! Parameter checkpoints: a flat little-endian `f64` array (`<stem>.bin`)
//! plus a JSON sidecar (`<stem>.json`) describing how to rebuild the model.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn params_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn sidecar_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn encode_params(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "parameter file length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn save<S: Serialize>(stem: &Path, params: &[f64], sidecar: &S) -> Result<()> {
    fs::write(params_path(stem), encode_params(params))?;
    fs::write(sidecar_path(stem), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn load<S: DeserializeOwned>(stem: &Path) -> Result<(Vec<f64>, S)> {
    let params = decode_params(&fs::read(params_path(stem))?)?;
    let sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(stem))?)?;
    Ok((params, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn params_round_trip(v in prop::collection::vec(any::<f64>(), 0..64)) {
            let back = decode_params(&encode_params(&v)).unwrap();
            prop_assert_eq!(back.len(), v.len());
            for (a, b) in back.iter().zip(&v) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn little_endian_layout() {
        assert_eq!(encode_params(&[1.0]), 1.0f64.to_le_bytes().to_vec());
        assert!(decode_params(&[0u8; 7]).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        save(&stem, &[0.5, -2.0], &serde_json::json!({"seed": 3})).unwrap();
        let (p, meta): (Vec<f64>, serde_json::Value) = load(&stem).unwrap();
        assert_eq!(p, vec![0.5, -2.0]);
        assert_eq!(meta["seed"], 3);
    }
}
