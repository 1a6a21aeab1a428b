//! Checkpoint directories: `manifest.json`, `vocab.json` and one raw
//! little-endian `f64` file per parameter.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TlsiModel};
use crate::params::ParamStore;
use crate::temporal::DatasetClock;
use crate::tensor::DenseArray;

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f64-le";
pub const MANIFEST: &str = "manifest.json";
pub const VOCAB: &str = "vocab.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub clock: DatasetClock,
    /// Effective run configuration, kept for reference only.
    pub run_config: serde_json::Value,
    pub parameters: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TlsiModel,
    pub vocab: Vocabulary,
    pub clock: DatasetClock,
    pub run_config: serde_json::Value,
}

fn file_name(name: &str) -> String {
    format!("{name}.bin")
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn staging_dir(dir: &Path) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    dir.with_file_name(format!(".{name}.partial"))
}

/// Saves into a staging directory that replaces `dir` only once complete.
pub fn save(
    dir: &Path,
    model: &TlsiModel,
    vocab: &Vocabulary,
    clock: &DatasetClock,
    run_config: serde_json::Value,
) -> Result<()> {
    let stage = staging_dir(dir);
    if stage.exists() {
        fs::remove_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
    }
    fs::create_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
    let mut parameters = Vec::with_capacity(model.params.len());
    for (_, p) in model.params.iter() {
        let file = file_name(&p.name);
        let mut bytes = Vec::with_capacity(p.value.len() * 8);
        for v in p.value.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = stage.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        parameters.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: DTYPE.into(),
        model: model.config.clone(),
        clock: *clock,
        run_config,
        parameters,
    };
    let path = stage.join(VOCAB);
    fs::write(&path, serde_json::to_vec(vocab)?).map_err(|e| Error::io(&path, e))?;
    let path = stage.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&stage, dir).map_err(|e| Error::io(dir, e))
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::Checkpoint(format!(
            "dtype `{}` is not supported (expected `{DTYPE}`)",
            manifest.dtype
        )));
    }
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let mut store = ParamStore::new();
    for entry in &manifest.parameters {
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` points outside the checkpoint: {}",
                entry.name, entry.file
            )));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected: usize = entry.shape.iter().product::<usize>() * 8;
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "parameter `{}`: {} bytes on disk, shape {:?} needs {expected}",
                entry.name,
                bytes.len(),
                entry.shape
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = DenseArray::new(entry.shape.clone(), values)
            .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {e}", entry.name)))?;
        store.add(&entry.name, value, entry.trainable)?;
    }
    let model = TlsiModel::from_params(manifest.model.clone(), store)?;
    let path = dir.join(VOCAB);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let vocab: Vocabulary = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if vocab.items.table_size() != model.config.n_items
        || vocab.categories.table_size() != model.config.n_categories
    {
        return Err(Error::Checkpoint(format!(
            "vocabulary sizes ({} items, {} categories) do not match the embedding tables ({}, {})",
            vocab.items.table_size(),
            vocab.categories.table_size(),
            model.config.n_items,
            model.config.n_categories
        )));
    }
    Ok(Checkpoint {
        model,
        vocab,
        clock: manifest.clock,
        run_config: manifest.run_config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.json");
        write_atomic(&p, b"{}").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"{}");
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn truncated_parameter_file_names_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("ck");
        let records: Vec<crate::data::EventRecord> = (0..4)
            .map(|i| crate::data::EventRecord {
                user: crate::data::RawId::Int(0),
                item: crate::data::RawId::Int(i),
                category: crate::data::RawId::Int(i % 2),
                ts: 1000 + i as u64,
            })
            .collect();
        let ds = crate::data::Dataset::from_records(&records);
        let cfg = ModelConfig::new(
            Variant::TlsiL,
            ds.vocab.items.table_size(),
            ds.vocab.categories.table_size(),
        );
        let model = TlsiModel::new(cfg, 1).unwrap();
        save(&ck, &model, &ds.vocab, &ds.clock, serde_json::Value::Null).unwrap();
        let back = load(&ck).unwrap();
        assert_eq!(back.model.params, model.params);
        fs::write(ck.join("long.W_c.bin"), [0u8; 16]).unwrap();
        let err = load(&ck).unwrap_err().to_string();
        assert!(err.contains("long.W_c"), "{err}");
    }
}
