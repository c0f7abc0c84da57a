//! Dataset directory layout:
//!
//! ```text
//! <dir>/manifest.json                 bags, labels, splits, instance metadata
//! <dir>/instances/<bag>_<k>.bin       raw little-endian f64 features
//! <dir>/diagnostics/hidden_truth.json labels withheld from unlabeled bags
//! ```
//!
//! Training code only ever reads the manifest and instance files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bag, Class, Dataset, HiddenTruth, Instance, Modality, Split};
use crate::error::{Error, Result};
use crate::store;

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const INSTANCE_DIR: &str = "instances";
const DIAGNOSTICS_DIR: &str = "diagnostics";
const HIDDEN_TRUTH: &str = "hidden_truth.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    bags: Vec<ManifestBag>,
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct ManifestBag {
    id: String,
    label: Option<i64>,
    split: String,
    instances: Vec<ManifestInstance>,
}

#[derive(Serialize, Deserialize)]
struct ManifestInstance {
    modality: String,
    shape: Vec<usize>,
    relevance: Option<f64>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct HiddenTruthFile {
    labels: BTreeMap<String, Class>,
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    store::create_dir(&dir.join(INSTANCE_DIR))?;
    let mut bags = Vec::with_capacity(dataset.bags().len());
    for (b, bag) in dataset.bags().iter().enumerate() {
        let split = dataset.split_of(&bag.id).expect("validated split");
        let mut instances = Vec::with_capacity(bag.cine.len() + bag.doppler.len());
        for (k, inst) in bag.cine.iter().chain(&bag.doppler).enumerate() {
            let file = format!("{INSTANCE_DIR}/{b:06}_{k:04}.bin");
            store::write_f64s(&dir.join(&file), inst.features())?;
            instances.push(ManifestInstance {
                modality: inst.modality().as_str().to_string(),
                shape: inst.shape().to_vec(),
                relevance: inst.relevance(),
                file,
            });
        }
        bags.push(ManifestBag {
            id: bag.id.clone(),
            label: bag.label.map(|c| c.index() as i64),
            split: split.as_str().to_string(),
            instances,
        });
    }
    let manifest = Manifest {
        bags,
        format_version: FORMAT_VERSION,
    };
    store::write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(MANIFEST, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            MANIFEST,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }

    let mut bags = Vec::with_capacity(manifest.bags.len());
    let mut splits = BTreeMap::new();
    for mb in manifest.bags {
        let bag_record = format!("bag {}", mb.id);
        let label = match mb.label {
            None => None,
            Some(l) => Some(
                u8::try_from(l)
                    .ok()
                    .and_then(|l| Class::new(l).ok())
                    .ok_or_else(|| Error::format(&bag_record, format!("label {l} outside {{0,1,2}}")))?,
            ),
        };
        let split: Split = mb
            .split
            .parse()
            .map_err(|_| Error::format(&bag_record, format!("unknown split {:?}", mb.split)))?;

        let mut cine = Vec::new();
        let mut doppler = Vec::new();
        for (k, mi) in mb.instances.into_iter().enumerate() {
            let record = format!("bag {} instance {k} ({})", mb.id, mi.file);
            let modality: Modality = mi.modality.parse().map_err(|e: String| Error::format(&record, e))?;
            let expected: usize = mi.shape.iter().product();
            let features = store::read_f64s(&dir.join(&mi.file), expected, &record)?;
            let inst = Instance::new(modality, mi.shape, features, mi.relevance)
                .map_err(|e| Error::format(&record, e.to_string()))?;
            match modality {
                Modality::Cine => cine.push(inst),
                Modality::Doppler => doppler.push(inst),
            }
        }
        let bag = Bag::new(mb.id.clone(), cine, doppler, label)
            .map_err(|e| Error::format(&bag_record, e.to_string()))?;
        if splits.insert(mb.id.clone(), split).is_some() {
            return Err(Error::format(&bag_record, "duplicate bag id"));
        }
        bags.push(bag);
    }
    Dataset::new(bags, splits).map_err(|e| Error::format(MANIFEST, e.to_string()))
}

/// Writes withheld labels to the diagnostics side file.
pub fn save_hidden_truth(truth: &HiddenTruth, dir: &Path) -> Result<()> {
    let diag = dir.join(DIAGNOSTICS_DIR);
    store::create_dir(&diag)?;
    let file = HiddenTruthFile {
        labels: truth.labels.clone(),
    };
    store::write_json(&diag.join(HIDDEN_TRUTH), &file)
}

/// Reads the diagnostics side file; `None` when the dataset has none.
pub fn load_hidden_truth(dir: &Path) -> Result<Option<HiddenTruth>> {
    let path = dir.join(DIAGNOSTICS_DIR).join(HIDDEN_TRUTH);
    if !path.exists() {
        return Ok(None);
    }
    let file: HiddenTruthFile = store::read_json(&path)?;
    Ok(Some(HiddenTruth { labels: file.labels }))
}
