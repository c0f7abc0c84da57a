//! Curriculum pseudo-labeling.
//!
//! Round 1 trains on the labeled set. Round `r > 1` pseudo-labels every
//! unlabeled bag with the previous round's model, keeps the most confident
//! `(r - 1) / steps_to_full` of them, and trains a freshly initialized model
//! on labeled plus selected bags. The schedule ends with the round that uses
//! all unlabeled bags.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Bag, Class, Dataset, HiddenTruth, LabeledBag, Split};
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::model::{MMILModel, ModelConfig};
use crate::train::{train_supervised, TrainConfig, TrainHistory};

const ROUND_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Rounds after the first until every unlabeled bag is selected; the
    /// selected fraction grows by `1 / steps_to_full` per round.
    pub steps_to_full: usize,
    /// Stop early when a round's validation balanced accuracy falls this far
    /// below the best round so far.
    pub early_abort_drop: Option<f64>,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            steps_to_full: 5,
            early_abort_drop: None,
        }
    }
}

impl CurriculumConfig {
    pub fn rounds(&self) -> usize {
        self.steps_to_full + 1
    }

    /// `min((round - 1) / steps_to_full, 1)` for 1-based `round`.
    pub fn fraction(&self, round: usize) -> f64 {
        assert!(round >= 1, "rounds are 1-based");
        ((round - 1) as f64 / self.steps_to_full as f64).min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub bag_id: String,
    pub predicted_class: Class,
    /// Largest class probability.
    pub confidence: f64,
}

impl PseudoLabelRecord {
    pub fn from_probs(bag_id: impl Into<String>, probs: &[f64; 3]) -> Self {
        let predicted_class = argmax(probs);
        PseudoLabelRecord {
            bag_id: bag_id.into(),
            predicted_class,
            confidence: probs[predicted_class.index()],
        }
    }
}

/// One record per bag the model can score; degenerate bags are skipped.
pub fn pseudo_label(model: &MMILModel, bags: &[&Bag]) -> Result<Vec<PseudoLabelRecord>> {
    let outputs: Vec<Result<Option<PseudoLabelRecord>>> = bags
        .par_iter()
        .map(|bag| match model.forward(bag) {
            Ok(out) => Ok(Some(PseudoLabelRecord::from_probs(bag.id.clone(), &out.probs))),
            Err(Error::EmptyBag(id)) => {
                log::warn!("pseudo-labeling skipped bag {id}: no usable instances");
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect();
    let mut records = Vec::with_capacity(bags.len());
    for out in outputs {
        if let Some(r) = out? {
            records.push(r);
        }
    }
    Ok(records)
}

/// Ids of the `floor(fraction * N)` most confident records; equal
/// confidences are ordered by bag id.
pub fn select_confident(records: &[PseudoLabelRecord], fraction: f64) -> BTreeSet<String> {
    let fraction = fraction.clamp(0.0, 1.0);
    // The epsilon absorbs products such as 0.6 * 500 landing just below an integer.
    let count = ((fraction * records.len() as f64) + 1e-9).floor() as usize;
    let count = count.min(records.len());
    let mut ranked: Vec<&PseudoLabelRecord> = records.iter().collect();
    ranked.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.bag_id.cmp(&b.bag_id))
    });
    ranked.into_iter().take(count).map(|r| r.bag_id.clone()).collect()
}

/// Initialization seed for a round; round 1 uses `base` unchanged.
pub fn round_seed(base: u64, round: usize) -> u64 {
    base ^ ((round as u64 - 1).wrapping_mul(ROUND_SEED_STRIDE))
}

/// SHA-256 over the little-endian bytes of every parameter, hex encoded.
pub fn weight_digest(model: &MMILModel) -> String {
    let mut hasher = Sha256::new();
    for t in model.flat_params() {
        for v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub selected_fraction: f64,
    pub selected_count: usize,
    pub train_size: usize,
    pub val_balanced_accuracy: Option<f64>,
    /// Agreement of selected pseudo-labels with withheld labels (diagnostic).
    pub pseudo_label_accuracy: Option<f64>,
    pub init_seed: u64,
    pub init_digest: String,
    /// Digest of the weights this round returned.
    pub final_digest: String,
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct CurriculumOutcome {
    pub model: MMILModel,
    pub best_round: usize,
    pub rounds: Vec<RoundReport>,
    pub histories: Vec<TrainHistory>,
}

impl CurriculumOutcome {
    /// One JSON object per line, one line per round.
    pub fn report_jsonl(&self) -> String {
        self.rounds
            .iter()
            .map(|r| serde_json::to_string(r).expect("report serializes") + "\n")
            .collect()
    }
}

/// Runs the full schedule. `hidden_truth` feeds only the diagnostic
/// pseudo-label accuracy and never reaches training.
pub fn run_curriculum(
    dataset: &Dataset,
    hidden_truth: Option<&HiddenTruth>,
    model_config: &ModelConfig,
    init_seed: u64,
    train_cfg: &TrainConfig,
    cfg: &CurriculumConfig,
) -> Result<CurriculumOutcome> {
    if cfg.steps_to_full == 0 {
        return Err(Error::Config("steps_to_full must be positive".into()));
    }
    if cfg.early_abort_drop.is_some_and(|d| !(d >= 0.0 && d.is_finite())) {
        return Err(Error::Config("early_abort_drop must be a non-negative number".into()));
    }
    let labeled = dataset.labeled(Split::Train);
    let val = dataset.labeled(Split::Val);
    let unlabeled = dataset.iterate_split(Split::Unlabeled);
    let rounds = if unlabeled.is_empty() {
        log::warn!("no unlabeled bags; running supervised training only");
        1
    } else {
        cfg.rounds()
    };

    let mut reports: Vec<RoundReport> = Vec::new();
    let mut histories = Vec::new();
    let mut best: Option<(Option<f64>, usize, MMILModel)> = None;
    let mut previous: Option<MMILModel> = None;

    for round in 1..=rounds {
        let fraction = cfg.fraction(round);
        let (selected, pseudo_accuracy) = match &previous {
            Some(prev) if fraction > 0.0 => {
                let records = pseudo_label(prev, &unlabeled)?;
                let ids = select_confident(&records, fraction);
                let chosen: Vec<PseudoLabelRecord> =
                    records.into_iter().filter(|r| ids.contains(&r.bag_id)).collect();
                let accuracy = hidden_truth.and_then(|truth| {
                    let known: Vec<bool> = chosen
                        .iter()
                        .filter_map(|r| truth.labels.get(&r.bag_id).map(|&t| t == r.predicted_class))
                        .collect();
                    (!known.is_empty())
                        .then(|| known.iter().filter(|&&ok| ok).count() as f64 / known.len() as f64)
                });
                (chosen, accuracy)
            }
            _ => (Vec::new(), None),
        };

        let mut train_set: Vec<LabeledBag<'_>> = labeled.clone();
        for rec in &selected {
            let bag = unlabeled
                .iter()
                .find(|b| b.id == rec.bag_id)
                .expect("selected ids come from the unlabeled split");
            train_set.push(LabeledBag {
                bag,
                label: rec.predicted_class,
            });
        }

        let seed = round_seed(init_seed, round);
        let init_digest = weight_digest(&MMILModel::init(model_config.clone(), seed)?);
        let (model, history) = train_supervised(model_config, seed, &train_set, &val, train_cfg)?;
        let val_score = history.best_val_balanced_accuracy;
        log::info!(
            "round {round}: fraction {fraction:.2}, {} pseudo-labeled, val balanced accuracy {val_score:?}",
            selected.len()
        );

        reports.push(RoundReport {
            round,
            selected_fraction: fraction,
            selected_count: selected.len(),
            train_size: train_set.len(),
            val_balanced_accuracy: val_score,
            pseudo_label_accuracy: pseudo_accuracy,
            init_seed: seed,
            init_digest,
            final_digest: weight_digest(&model),
            best_epoch: history.best_epoch,
        });
        histories.push(history);

        let improves = match &best {
            None => true,
            // Ties go to the later round, which saw more (pseudo-)labeled data.
            Some((b, _, _)) => match (val_score, b) {
                (Some(v), Some(bv)) => v >= *bv,
                (Some(_), None) | (None, None) => true,
                (None, Some(_)) => false,
            },
        };
        if improves {
            best = Some((val_score, round, model.clone()));
        }

        if let (Some(drop), Some(v), Some((Some(bv), _, _))) = (cfg.early_abort_drop, val_score, &best) {
            if bv - v > drop {
                log::warn!("round {round}: validation dropped {:.3} below best; stopping", bv - v);
                break;
            }
        }
        previous = Some(model);
    }

    let (_, best_round, model) = best.expect("at least one round ran");
    Ok(CurriculumOutcome {
        model,
        best_round,
        rounds: reports,
        histories,
    })
}
