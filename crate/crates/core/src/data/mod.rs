//! Multimodal bags, datasets with fixed splits, storage, and synthetic data.

mod format;
mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{load, load_hidden_truth, save, save_hidden_truth, FORMAT_VERSION};
pub use synthetic::{generate_synthetic, GeneratorConfig, HiddenTruth, SyntheticData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Cine,
    Doppler,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Cine => "cine",
            Modality::Doppler => "doppler",
        }
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cine" => Ok(Modality::Cine),
            "doppler" => Ok(Modality::Doppler),
            other => Err(format!("unknown modality {other:?}")),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Severity class: 0 = none, 1 = early, 2 = significant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Class(u8);

impl Class {
    pub const COUNT: usize = 3;
    pub const ALL: [Class; 3] = [Class(0), Class(1), Class(2)];

    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < Self::COUNT {
            Ok(Class(value))
        } else {
            Err(Error::Contract(format!("class {value} outside {{0,1,2}}")))
        }
    }

    pub fn from_index(index: usize) -> Self {
        assert!(index < Self::COUNT, "class index {index} out of range");
        Class(index as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl TryFrom<u8> for Class {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Class::new(value).map_err(|e| e.to_string())
    }
}

impl From<Class> for u8 {
    fn from(c: Class) -> u8 {
        c.0
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One observation inside a bag.
///
/// Cine instances are frame stacks `[frames, height, width]`; doppler
/// instances are `[height, width]` images. Only cine instances carry a view
/// relevance score.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    modality: Modality,
    shape: Vec<usize>,
    features: Vec<f64>,
    relevance: Option<f64>,
}

impl Instance {
    pub fn new(
        modality: Modality,
        shape: Vec<usize>,
        features: Vec<f64>,
        relevance: Option<f64>,
    ) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!("invalid instance shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != features.len() {
            return Err(Error::dim("instance", &shape, &[features.len()]));
        }
        if let Some(r) = relevance {
            if modality != Modality::Cine {
                return Err(Error::Contract("relevance is only defined for cine instances".into()));
            }
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Contract(format!("relevance {r} outside [0, 1]")));
            }
        }
        Ok(Instance {
            modality,
            shape,
            features,
            relevance,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn relevance(&self) -> Option<f64> {
        self.relevance
    }
}

/// A study: unordered cine and doppler instances with an optional label.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub id: String,
    pub cine: Vec<Instance>,
    pub doppler: Vec<Instance>,
    pub label: Option<Class>,
}

impl Bag {
    pub fn new(
        id: impl Into<String>,
        cine: Vec<Instance>,
        doppler: Vec<Instance>,
        label: Option<Class>,
    ) -> Result<Self> {
        let id = id.into();
        if cine.is_empty() && doppler.is_empty() {
            return Err(Error::Data {
                bag: id,
                detail: "bag has no instances".into(),
            });
        }
        if let Some(inst) = cine.iter().find(|i| i.modality != Modality::Cine) {
            return Err(Error::Data {
                bag: id,
                detail: format!("{} instance in cine list", inst.modality),
            });
        }
        if let Some(inst) = doppler.iter().find(|i| i.modality != Modality::Doppler) {
            return Err(Error::Data {
                bag: id,
                detail: format!("{} instance in doppler list", inst.modality),
            });
        }
        Ok(Bag {
            id,
            cine,
            doppler,
            label,
        })
    }

    pub fn instances(&self, modality: Modality) -> &[Instance] {
        match modality {
            Modality::Cine => &self.cine,
            Modality::Doppler => &self.doppler,
        }
    }

    /// Raw relevance scores of all cine instances, if every one has a score.
    pub fn cine_relevance(&self) -> Option<Vec<f64>> {
        self.cine.iter().map(|i| i.relevance).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unlabeled,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Unlabeled];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unlabeled" => Ok(Split::Unlabeled),
            other => Err(Error::Usage(format!(
                "unknown split {other:?} (expected train, val, test or unlabeled)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A bag paired with the label training should use for it.
///
/// For true labels this is `bag.label`; for pseudo-labeled bags it is the
/// model's prediction, never a hidden ground truth.
#[derive(Clone, Copy, Debug)]
pub struct LabeledBag<'a> {
    pub bag: &'a Bag,
    pub label: Class,
}

/// Immutable collection of bags with a split assignment for each bag.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    bags: Vec<Bag>,
    splits: BTreeMap<String, Split>,
}

impl Dataset {
    pub fn new(bags: Vec<Bag>, splits: BTreeMap<String, Split>) -> Result<Self> {
        let mut seen = HashSet::new();
        for bag in &bags {
            if !seen.insert(bag.id.as_str()) {
                return Err(Error::Data {
                    bag: bag.id.clone(),
                    detail: "duplicate bag id".into(),
                });
            }
            let split = splits.get(&bag.id).ok_or_else(|| Error::Data {
                bag: bag.id.clone(),
                detail: "bag has no split assignment".into(),
            })?;
            match (split, bag.label) {
                (Split::Unlabeled, Some(_)) => {
                    return Err(Error::Data {
                        bag: bag.id.clone(),
                        detail: "unlabeled bag carries a label".into(),
                    })
                }
                (Split::Train | Split::Val | Split::Test, None) => {
                    return Err(Error::Data {
                        bag: bag.id.clone(),
                        detail: format!("{split} bag has no label"),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = splits.keys().find(|id| !seen.contains(id.as_str())) {
            return Err(Error::Data {
                bag: extra.clone(),
                detail: "split assignment for unknown bag".into(),
            });
        }
        Ok(Dataset { bags, splits })
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.splits.get(id).copied()
    }

    pub fn split_assignment(&self) -> &BTreeMap<String, Split> {
        &self.splits
    }

    /// Bags of one split, sorted by id.
    pub fn iterate_split(&self, split: Split) -> Vec<&Bag> {
        let mut out: Vec<&Bag> = self
            .bags
            .iter()
            .filter(|b| self.splits.get(&b.id) == Some(&split))
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    pub fn iterate_split_named(&self, split: &str) -> Result<Vec<&Bag>> {
        Ok(self.iterate_split(split.parse()?))
    }

    /// Labeled bags of a labeled split, sorted by id.
    pub fn labeled(&self, split: Split) -> Vec<LabeledBag<'_>> {
        self.iterate_split(split)
            .into_iter()
            .filter_map(|bag| bag.label.map(|label| LabeledBag { bag, label }))
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.values().filter(|&&s| s == split).count()
    }
}
