//! Study-level evaluation: balanced accuracy, binary screening tasks
//! (AUROC / average precision), confusion matrices and bootstrap percentile
//! intervals.
//!
//! # Bootstrap stream
//!
//! Resample `b` (0-based) draws from its own [`SplitMix64`] generator whose
//! seed is output `b` of a master `SplitMix64` seeded with the user seed,
//! i.e. `mix(seed + (b + 1) * 0x9E3779B97F4A7C15)`. Each row index is
//! `next_u64() % n`. A resample on which the metric fails (a required class
//! is missing) is replaced by the next `n` draws of the same generator, at
//! most 100 times.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Class;
use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
pub const MAX_RESAMPLE_RETRIES: usize = 100;
pub const DEFAULT_BOOTSTRAP_SAMPLES: usize = 5000;

/// SplitMix64 (Steele, Lea & Flood): `state += GAMMA`, then the standard
/// 30/27/31 xor-shift-multiply finalizer.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the generator used for resample `b`.
pub fn resample_seed(seed: u64, b: usize) -> u64 {
    mix(seed.wrapping_add((b as u64 + 1).wrapping_mul(GOLDEN_GAMMA)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub bag_id: String,
    pub true_label: Class,
    pub probs: [f64; 3],
}

impl PredictionRow {
    pub fn predicted(&self) -> Class {
        argmax(&self.probs)
    }
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(probs: &[f64; 3]) -> Class {
    let mut best = 0;
    for i in 1..probs.len() {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    Class::from_index(best)
}

/// Validated prediction table with unique bag ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    rows: Vec<PredictionRow>,
}

impl PredictionSet {
    pub fn new(rows: Vec<PredictionRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for row in &rows {
            if !seen.insert(row.bag_id.as_str()) {
                return Err(Error::Metric(format!("duplicate bag id {}", row.bag_id)));
            }
            let total: f64 = row.probs.iter().sum();
            if (total - 1.0).abs() > 1e-6 || row.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Metric(format!(
                    "probabilities of {} do not form a distribution: {:?}",
                    row.bag_id, row.probs
                )));
            }
        }
        Ok(PredictionSet { rows })
    }

    pub fn rows(&self) -> &[PredictionRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn per_class_recall(rows: &[PredictionRow]) -> [(usize, usize); 3] {
    let mut counts = [(0usize, 0usize); 3];
    for row in rows {
        let c = row.true_label.index();
        counts[c].1 += 1;
        if row.predicted() == row.true_label {
            counts[c].0 += 1;
        }
    }
    counts
}

/// Mean of the three per-class recalls.
pub fn balanced_accuracy(rows: &[PredictionRow]) -> Result<f64> {
    let counts = per_class_recall(rows);
    let mut total = 0.0;
    for (c, &(hit, n)) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::Metric(format!("class {c} absent from predictions")));
        }
        total += hit as f64 / n as f64;
    }
    Ok(total / Class::COUNT as f64)
}

/// Mean recall over the classes that occur; equals [`balanced_accuracy`]
/// when all three occur. Used for checkpoint selection on small splits.
pub fn mean_present_recall(rows: &[PredictionRow]) -> Option<f64> {
    let recalls: Vec<f64> = per_class_recall(rows)
        .iter()
        .filter(|(_, n)| *n > 0)
        .map(|&(hit, n)| hit as f64 / n as f64)
        .collect();
    if recalls.is_empty() {
        return None;
    }
    Some(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_matrix(rows: &[PredictionRow]) -> [[usize; 3]; 3] {
    let mut m = [[0; 3]; 3];
    for row in rows {
        m[row.true_label.index()][row.predicted().index()] += 1;
    }
    m
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("binary metric needs both classes present".into()));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUROC with tied pairs counted as one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg_rank * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision: `sum_t (R_t - R_{t-1}) P_t` over distinct score
/// thresholds in descending order.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Binary screening tasks derived from the three-class output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreeningTask {
    /// Positive: class 1 or 2; score `p1 + p2`; all rows.
    NoVsSome,
    /// Rows with class 1 or 2 only; positive: class 2; score `p2 / (p1 + p2)`.
    EarlyVsSig,
    /// Positive: class 2; score `p2`; all rows.
    SigVsNoSig,
}

impl ScreeningTask {
    pub const ALL: [ScreeningTask; 3] = [
        ScreeningTask::NoVsSome,
        ScreeningTask::EarlyVsSig,
        ScreeningTask::SigVsNoSig,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScreeningTask::NoVsSome => "no_vs_some",
            ScreeningTask::EarlyVsSig => "early_vs_sig",
            ScreeningTask::SigVsNoSig => "sig_vs_nosig",
        }
    }

    pub fn scores_and_labels(self, rows: &[PredictionRow]) -> (Vec<f64>, Vec<bool>) {
        let mut scores = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for row in rows {
            let [_, p1, p2] = row.probs;
            let y = row.true_label.index();
            match self {
                ScreeningTask::NoVsSome => {
                    scores.push(p1 + p2);
                    labels.push(y != 0);
                }
                ScreeningTask::EarlyVsSig => {
                    if y == 0 {
                        continue;
                    }
                    let denom = p1 + p2;
                    scores.push(if denom > 0.0 { p2 / denom } else { 0.5 });
                    labels.push(y == 2);
                }
                ScreeningTask::SigVsNoSig => {
                    scores.push(p2);
                    labels.push(y == 2);
                }
            }
        }
        (scores, labels)
    }

    pub fn auroc(self, rows: &[PredictionRow]) -> Result<f64> {
        let (s, l) = self.scores_and_labels(rows);
        auroc(&s, &l)
    }

    pub fn aupr(self, rows: &[PredictionRow]) -> Result<f64> {
        let (s, l) = self.scores_and_labels(rows);
        aupr(&s, &l)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Linear interpolation between order statistics of sorted `values`, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn one_resample<F>(metric: &F, rows: &[PredictionRow], seed: u64, b: usize) -> Result<f64>
where
    F: Fn(&[PredictionRow]) -> Result<f64>,
{
    let n = rows.len() as u64;
    let mut rng = SplitMix64::new(resample_seed(seed, b));
    let mut sample = Vec::with_capacity(rows.len());
    let mut last_err = None;
    for _ in 0..=MAX_RESAMPLE_RETRIES {
        sample.clear();
        for _ in 0..rows.len() {
            sample.push(rows[(rng.next_u64() % n) as usize].clone());
        }
        match metric(&sample) {
            Ok(v) => return Ok(v),
            Err(e) => last_err = Some(e),
        }
    }
    Err(Error::Metric(format!(
        "bootstrap resample {b} failed after {MAX_RESAMPLE_RETRIES} retries: {}",
        last_err.expect("at least one attempt")
    )))
}

/// Point estimate plus 2.5 / 97.5 percentile interval over `n_boot`
/// study-level resamples.
pub fn bootstrap_ci<F>(metric: F, rows: &[PredictionRow], n_boot: usize, seed: u64) -> Result<Interval>
where
    F: Fn(&[PredictionRow]) -> Result<f64> + Sync,
{
    if n_boot == 0 {
        return Err(Error::Metric("n_boot must be at least 1".into()));
    }
    let point = metric(rows)?;
    let mut values = (0..n_boot)
        .into_par_iter()
        .map(|b| one_resample(&metric, rows, seed, b))
        .collect::<Result<Vec<f64>>>()?;
    values.sort_by(f64::total_cmp);
    Ok(Interval {
        point,
        lo: percentile(&values, 0.025),
        hi: percentile(&values, 0.975),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, Interval>,
    pub confusion_matrix: [[usize; 3]; 3],
    pub n_rows: usize,
    pub n_boot: usize,
    pub seed: u64,
}

/// Balanced accuracy and AUROC/AUPR for every screening task, each with a
/// bootstrap interval.
pub fn evaluate(preds: &PredictionSet, n_boot: usize, seed: u64) -> Result<EvalReport> {
    let rows = preds.rows();
    let mut metrics = BTreeMap::new();
    metrics.insert(
        "balanced_accuracy".to_string(),
        bootstrap_ci(balanced_accuracy, rows, n_boot, seed)?,
    );
    for task in ScreeningTask::ALL {
        metrics.insert(
            format!("{}_auroc", task.name()),
            bootstrap_ci(|r: &[PredictionRow]| task.auroc(r), rows, n_boot, seed)?,
        );
        metrics.insert(
            format!("{}_aupr", task.name()),
            bootstrap_ci(|r: &[PredictionRow]| task.aupr(r), rows, n_boot, seed)?,
        );
    }
    Ok(EvalReport {
        metrics,
        confusion_matrix: confusion_matrix(rows),
        n_rows: rows.len(),
        n_boot,
        seed,
    })
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    bag_id: String,
    true_label: u8,
    p0: f64,
    p1: f64,
    p2: f64,
}

/// Writes `bag_id,true_label,p0,p1,p2`.
pub fn write_predictions_csv(path: &Path, preds: &PredictionSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    for row in preds.rows() {
        w.serialize(CsvRow {
            bag_id: row.bag_id.clone(),
            true_label: row.true_label.into(),
            p0: row.probs[0],
            p1: row.probs[1],
            p2: row.probs[2],
        })
        .map_err(|e| Error::format(row.bag_id.clone(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions_csv(path: &Path) -> Result<PredictionSet> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let header = r
        .headers()
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["bag_id", "true_label", "p0", "p1", "p2"] {
        return Err(Error::format(
            path.display().to_string(),
            format!("unexpected header {header:?}"),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<CsvRow>().enumerate() {
        let rec = rec.map_err(|e| Error::format(format!("prediction row {}", i + 1), e.to_string()))?;
        let true_label =
            Class::new(rec.true_label).map_err(|e| Error::format(rec.bag_id.clone(), e.to_string()))?;
        rows.push(PredictionRow {
            bag_id: rec.bag_id,
            true_label,
            probs: [rec.p0, rec.p1, rec.p2],
        });
    }
    PredictionSet::new(rows).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}
