use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MMILModel, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::store;

const MANIFEST: &str = "model.json";
const TENSOR_DIR: &str = "tensors";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

pub fn save_checkpoint(model: &MMILModel, dir: &Path) -> Result<()> {
    store::create_dir(&dir.join(TENSOR_DIR))?;
    let mut entries = Vec::new();
    let mut result = Ok(());
    model.visit("", &mut |name, t| {
        if result.is_err() {
            return;
        }
        let file = format!("{TENSOR_DIR}/{:04}.bin", entries.len());
        result = store::write_f64s(&dir.join(&file), t.data());
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            file,
        });
    });
    result?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors: entries,
    };
    store::write_json(&dir.join(MANIFEST), &manifest)
}

/// Loads a checkpoint, checking every tensor against the shapes its config implies.
pub fn load_checkpoint(dir: &Path) -> Result<MMILModel> {
    let manifest: CheckpointManifest = store::read_json(&dir.join(MANIFEST))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            MANIFEST,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let mut model =
        MMILModel::init(manifest.config, 0).map_err(|e| Error::format(MANIFEST, e.to_string()))?;

    let mut expected = Vec::new();
    model.visit("", &mut |name, t| expected.push((name, t.shape().to_vec())));
    if expected.len() != manifest.tensors.len() {
        return Err(Error::format(
            MANIFEST,
            format!(
                "config implies {} tensors, checkpoint lists {}",
                expected.len(),
                manifest.tensors.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        let record = format!("tensor {}", entry.name);
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::format(
                record,
                format!("expected {name} with shape {shape:?}, found shape {:?}", entry.shape),
            ));
        }
        let n = shape.iter().product();
        values.push(store::read_f64s(&dir.join(&entry.file), n, &record)?);
    }
    let mut it = values.into_iter();
    model.visit_mut("", &mut |_, t| {
        t.data_mut().copy_from_slice(&it.next().expect("counted above"));
    });
    Ok(model)
}
