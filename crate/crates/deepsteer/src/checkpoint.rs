//! Binary model checkpoints. Layout (all integers little-endian):
//!
//! ```text
//! magic "DSCK" | u32 version | u32 entry_count
//! per entry: u32 name_len | name bytes (utf-8)
//!            u32 ndims    | ndims x u32 dims
//!            f32 payload (product of dims values)
//! ```
//!
//! Entry order and names come from `ModelParams::entries`, so a checkpoint
//! can only be loaded into a model built from a matching configuration.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DSCK";
const VERSION: u32 = 1;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let entries = params.entries();
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(entries.len() as u32).to_le_bytes())?;
    for (name, dims, data) in &entries {
        put(&(name.len() as u32).to_le_bytes())?;
        put(name.as_bytes())?;
        put(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            put(&(d as u32).to_le_bytes())?;
        }
        for &v in *data {
            put(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut u32_buf = [0u8; 4];
    let mut next_u32 = |r: &mut std::io::BufReader<std::fs::File>| -> Result<u32> {
        r.read_exact(&mut u32_buf).map_err(|e| io_err(path, e))?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{}: not a checkpoint file", path.display())));
    }
    let version = next_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let count = next_u32(&mut r)? as usize;

    let mut params = ModelParams::zeros(config)?;
    let expected: Vec<(String, Vec<usize>, usize)> = params
        .entries()
        .iter()
        .map(|(n, d, v)| (n.clone(), d.clone(), v.len()))
        .collect();
    if count != expected.len() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has {count} entries, model expects {}",
            expected.len()
        )));
    }
    let mut flat = Vec::with_capacity(params.num_params());
    for (name, dims, len) in &expected {
        let name_len = next_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(|e| io_err(path, e))?;
        let got_name = String::from_utf8(name_buf)
            .map_err(|_| Error::Data("checkpoint entry name is not utf-8".into()))?;
        if &got_name != name {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint entry '{got_name}' where '{name}' expected"
            )));
        }
        let ndims = next_u32(&mut r)? as usize;
        let mut got_dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            got_dims.push(next_u32(&mut r)? as usize);
        }
        if &got_dims != dims {
            return Err(Error::ShapeMismatch(format!(
                "entry '{name}': checkpoint dims {got_dims:?} != model dims {dims:?}"
            )));
        }
        let mut payload = vec![0u8; len * 4];
        r.read_exact(&mut payload).map_err(|e| io_err(path, e))?;
        for chunk in payload.chunks_exact(4) {
            flat.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
    }
    params.assign_from_flat(&flat);
    Ok(params)
}

/// Serialize any serde value as pretty JSON (used for config and
/// standardizer sidecars next to checkpoints).
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serialize json: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Standardizer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_values_to_f32() {
        let config = ModelConfig::grad_check_tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.dsck");
        write_checkpoint(&path, &params).unwrap();
        let loaded = read_checkpoint(&path, &config).unwrap();
        for (a, b) in params.flatten().iter().zip(loaded.flatten().iter()) {
            assert_eq!(*a as f32, *b as f32);
            assert!((a - b).abs() < 1e-6);
        }
        // a second save of the loaded params is byte-identical
        let path2 = dir.path().join("model2.dsck");
        write_checkpoint(&path2, &loaded).unwrap();
        let loaded2 = read_checkpoint(&path2, &config).unwrap();
        assert_eq!(loaded.flatten(), loaded2.flatten());
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let config = ModelConfig::grad_check_tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.dsck");
        write_checkpoint(&path, &params).unwrap();
        let other = ModelConfig::desk_default();
        assert!(read_checkpoint(&path, &other).is_err());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.dsck");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(read_checkpoint(&path, &ModelConfig::grad_check_tiny()).is_err());
    }

    #[test]
    fn json_sidecars_round_trip() {
        let dir = tempdir().unwrap();
        let st = Standardizer {
            mean: [8.0, 0.0, 0.1],
            std: [0.5, 1.5, 0.2],
        };
        let path = dir.path().join("standardizer.json");
        write_json(&path, &st).unwrap();
        let back: Standardizer = read_json(&path).unwrap();
        assert_eq!(st, back);
        let cfg = ModelConfig::desk_default();
        let cpath = dir.path().join("config.json");
        write_json(&cpath, &cfg).unwrap();
        let cback: ModelConfig = read_json(&cpath).unwrap();
        assert_eq!(cfg, cback);
    }
}
