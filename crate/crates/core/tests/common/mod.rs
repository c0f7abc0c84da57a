//! Independent reference implementations used by the integration tests.
//!
//! Everything here is written with plain loops over `f64` slices and never
//! touches the tape, so agreement with the library is meaningful.
#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smmil::data::{Bag, Class, Dataset, Instance, Modality, Split};
use smmil::metrics::{resample_seed, PredictionRow, SplitMix64};
use smmil::model::{MMILModel, ModelConfig};
use smmil::nn::{Activation, Linear};
use smmil::pooling::AttentionModule;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Model math

pub fn small_config() -> ModelConfig {
    ModelConfig {
        cine_shape: vec![3, 2, 3],
        doppler_shape: vec![2, 4],
        embed_dim: 5,
        hidden_sizes: vec![4],
        attention_dim: 3,
        ..ModelConfig::default()
    }
}

/// Bag with `k_cine` cine and `k_doppler` doppler instances of random content.
pub fn random_bag(rng: &mut ChaCha8Rng, cfg: &ModelConfig, id: &str, k_cine: usize, k_doppler: usize) -> Bag {
    let cine_len: usize = cfg.cine_shape.iter().product();
    let dop_len: usize = cfg.doppler_shape.iter().product();
    let cine = (0..k_cine)
        .map(|_| {
            let rel = rng.random_range(0.01..0.99);
            Instance::new(Modality::Cine, cfg.cine_shape.clone(), uniform_vec(rng, cine_len, 1.5), Some(rel)).unwrap()
        })
        .collect();
    let doppler = (0..k_doppler)
        .map(|_| Instance::new(Modality::Doppler, cfg.doppler_shape.clone(), uniform_vec(rng, dop_len, 1.5), None).unwrap())
        .collect();
    Bag::new(id, cine, doppler, None).unwrap()
}

fn activate(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Tanh => x.tanh(),
        Activation::Relu => x.max(0.0),
    }
}

/// `x W^T + b` for a single input vector.
pub fn linear(layer: &Linear, x: &[f64]) -> Vec<f64> {
    let (out, inp) = (layer.weight.shape()[0], layer.weight.shape()[1]);
    assert_eq!(x.len(), inp);
    let w = layer.weight.data();
    (0..out)
        .map(|o| {
            let mut acc = layer.bias.data()[o];
            for i in 0..inp {
                acc += w[o * inp + i] * x[i];
            }
            acc
        })
        .collect()
}

pub fn mlp(layers: &[Linear], act: Activation, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in layers {
        h = linear(layer, &h).into_iter().map(|v| activate(act, v)).collect();
    }
    h
}

/// Per-instance encoder input: frame average for cine, raw values for doppler.
pub fn encoder_input(inst: &Instance) -> Vec<f64> {
    match inst.modality() {
        Modality::Doppler => inst.features().to_vec(),
        Modality::Cine => {
            let frames = inst.shape()[0];
            let per = inst.features().len() / frames;
            (0..per)
                .map(|p| (0..frames).map(|f| inst.features()[f * per + p]).sum::<f64>() / frames as f64)
                .collect()
        }
    }
}

/// `w^T tanh(U h)`.
pub fn attention_score(att: &AttentionModule, h: &[f64]) -> f64 {
    let (l, m) = (att.u.shape()[0], att.u.shape()[1]);
    let u = att.u.data();
    (0..l)
        .map(|j| {
            let pre: f64 = (0..m).map(|i| u[j * m + i] * h[i]).sum();
            att.w.data()[j] * pre.tanh()
        })
        .sum()
}

/// Softmax written out as `exp(x_k) / sum exp(x_j)` (inputs are small).
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn weighted_sum(weights: &[f64], h: &[Vec<f64>]) -> Vec<f64> {
    let m = h[0].len();
    (0..m).map(|i| weights.iter().zip(h).map(|(a, row)| a * row[i]).sum()).collect()
}

/// Plain attention pooling: `(representation, weights)`.
pub fn attention_pool(att: &AttentionModule, h: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = h.iter().map(|row| attention_score(att, row)).collect();
    let a = softmax(&scores);
    (weighted_sum(&a, h), a)
}

/// Dual attention pooling: `(representation, combined weights c, A)`.
pub fn supervised_pool(att_a: &AttentionModule, att_b: &AttentionModule, h: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let a = softmax(&h.iter().map(|row| attention_score(att_a, row)).collect::<Vec<_>>());
    let b = softmax(&h.iter().map(|row| attention_score(att_b, row)).collect::<Vec<_>>());
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let total: f64 = ab.iter().sum();
    let c: Vec<f64> = ab.iter().map(|v| v / total).collect();
    (weighted_sum(&c, h), c, a)
}

pub fn kl(r: &[f64], a: &[f64]) -> f64 {
    r.iter().zip(a).map(|(r, a)| r * (r / a).ln()).sum()
}

/// Gate written literally: `eta(v) = exp(score(v))`, `alpha = eta(z) / (eta(z) + eta(z~))`.
pub fn fuse(att: &AttentionModule, z: &[f64], zd: &[f64]) -> (Vec<f64>, f64) {
    let ez = attention_score(att, z).exp();
    let ed = attention_score(att, zd).exp();
    let alpha = ez / (ez + ed);
    let s = z.iter().zip(zd).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
    (s, alpha)
}

pub struct OracleForward {
    pub probs: Vec<f64>,
    pub embedding: Vec<f64>,
    pub alpha: f64,
    pub attention_a: Option<Vec<f64>>,
}

pub fn model_forward(model: &MMILModel, bag: &Bag) -> OracleForward {
    let cfg = model.config();
    let act = cfg.activation;
    let cine = cfg.use_cine && !bag.cine.is_empty();
    let dop = cfg.use_doppler && !bag.doppler.is_empty();
    assert!(cine || dop, "oracle needs a usable modality");

    let mut attention_a = None;
    let z = cine.then(|| {
        let h: Vec<Vec<f64>> = bag
            .cine
            .iter()
            .map(|i| mlp(model.cine_encoder.layers(), act, &encoder_input(i)))
            .collect();
        let (z, _, a) = supervised_pool(&model.att_a, &model.att_b, &h);
        attention_a = Some(a);
        z
    });
    let zd = dop.then(|| {
        let h: Vec<Vec<f64>> = bag
            .doppler
            .iter()
            .map(|i| mlp(model.doppler_encoder.layers(), act, &encoder_input(i)))
            .collect();
        attention_pool(&model.att_doppler, &h).0
    });
    let (embedding, alpha) = match (z, zd) {
        (Some(z), Some(zd)) => fuse(&model.att_fusion, &z, &zd),
        (Some(z), None) => (z, 1.0),
        (None, Some(zd)) => (zd, 0.0),
        (None, None) => unreachable!(),
    };
    let probs = softmax(&linear(&model.output, &embedding));
    OracleForward {
        probs,
        embedding,
        alpha,
        attention_a,
    }
}

/// `-ln rho_Y + lambda KL(R || A)` with `R = softmax(r / tau)`.
pub fn model_loss(model: &MMILModel, bag: &Bag, label: Class) -> f64 {
    let cfg = model.config();
    let fwd = model_forward(model, bag);
    let mut loss = -fwd.probs[label.index()].ln();
    if let Some(a) = fwd.attention_a {
        if cfg.lambda > 0.0 {
            let raw: Vec<f64> = bag.cine.iter().map(|i| i.relevance().unwrap() / cfg.tau).collect();
            loss += cfg.lambda * kl(&softmax(&raw), &a);
        }
    }
    loss
}

// ---------------------------------------------------------------------------
// Nearest-centroid baseline on bag-mean doppler features

fn doppler_mean(bag: &Bag) -> Vec<f64> {
    let n = bag.doppler.len() as f64;
    let len = bag.doppler[0].features().len();
    (0..len).map(|i| bag.doppler.iter().map(|d| d.features()[i]).sum::<f64>() / n).collect()
}

pub struct CentroidScores {
    pub val: f64,
    pub test: f64,
}

/// Fits one centroid per class on the training split and reports balanced
/// accuracy of nearest-centroid prediction on the validation and test splits.
pub fn nearest_centroid(ds: &Dataset) -> CentroidScores {
    let train = ds.labeled(Split::Train);
    let dim = doppler_mean(train[0].bag).len();
    let mut sums = vec![vec![0.0; dim]; 3];
    let mut counts = [0usize; 3];
    for lb in &train {
        let c = lb.label.index();
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(doppler_mean(lb.bag)) {
            *s += x;
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(counts)
        .map(|(s, n)| s.iter().map(|v| v / n as f64).collect())
        .collect();
    let score = |split: Split| {
        let mut hit = [0usize; 3];
        let mut total = [0usize; 3];
        for lb in ds.labeled(split) {
            let x = doppler_mean(lb.bag);
            let dist = |c: &Vec<f64>| c.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let mut best = 0;
            for k in 1..3 {
                if dist(&centroids[k]) < dist(&centroids[best]) {
                    best = k;
                }
            }
            let y = lb.label.index();
            total[y] += 1;
            hit[y] += usize::from(best == y);
        }
        (0..3).map(|c| hit[c] as f64 / total[c] as f64).sum::<f64>() / 3.0
    };
    CentroidScores {
        val: score(Split::Val),
        test: score(Split::Test),
    }
}

// ---------------------------------------------------------------------------
// Metrics by brute force

/// Random prediction set; scores sit on a coarse grid so ties occur.
pub fn random_predictions(rng: &mut ChaCha8Rng, n: usize) -> Vec<PredictionRow> {
    (0..n)
        .map(|i| {
            let raw: Vec<f64> = (0..3).map(|_| f64::from(rng.random_range(1..=8u32))).collect();
            let total: f64 = raw.iter().sum();
            let label = if i < 3 { i } else { rng.random_range(0..3) };
            PredictionRow {
                bag_id: format!("r{i:04}"),
                true_label: Class::from_index(label),
                probs: [raw[0] / total, raw[1] / total, raw[2] / total],
            }
        })
        .collect()
}

pub fn brute_balanced_accuracy(rows: &[PredictionRow]) -> f64 {
    let mut recall_sum = 0.0;
    for c in 0..3 {
        let mut n = 0usize;
        let mut hit = 0usize;
        for r in rows.iter().filter(|r| r.true_label.index() == c) {
            n += 1;
            let p = r.probs;
            let mut pred = 0;
            if p[1] > p[pred] {
                pred = 1;
            }
            if p[2] > p[pred] {
                pred = 2;
            }
            hit += usize::from(pred == c);
        }
        recall_sum += hit as f64 / n as f64;
    }
    recall_sum / 3.0
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                credit += 1.0;
            } else if si == sj {
                credit += 0.5;
            }
        }
    }
    credit / pairs as f64
}

/// Average precision by recounting at every distinct threshold.
pub fn brute_aupr(scores: &[f64], labels: &[bool]) -> f64 {
    let npos = labels.iter().filter(|&&l| l).count();
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let above: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = above.iter().filter(|&&i| labels[i]).count();
        let recall = tp as f64 / npos as f64;
        let precision = tp as f64 / above.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Screening-task scores computed from scratch: `(no_vs_some, early_vs_sig, sig_vs_nosig)`.
pub fn brute_task(rows: &[PredictionRow], task: usize) -> (Vec<f64>, Vec<bool>) {
    let mut s = Vec::new();
    let mut l = Vec::new();
    for r in rows {
        let y = r.true_label.index();
        let [_, p1, p2] = r.probs;
        match task {
            0 => {
                s.push(p1 + p2);
                l.push(y > 0);
            }
            1 if y > 0 => {
                s.push(if p1 + p2 > 0.0 { p2 / (p1 + p2) } else { 0.5 });
                l.push(y == 2);
            }
            1 => {}
            _ => {
                s.push(p2);
                l.push(y == 2);
            }
        }
    }
    (s, l)
}

/// Two nested loops over resamples and draws, then the 2.5 / 97.5
/// percentiles by linear interpolation.
pub fn two_loop_bootstrap<F>(metric: F, rows: &[PredictionRow], n_boot: usize, seed: u64) -> (f64, f64, f64)
where
    F: Fn(&[PredictionRow]) -> Option<f64>,
{
    let n = rows.len();
    let mut values = Vec::with_capacity(n_boot);
    for b in 0..n_boot {
        let mut gen = SplitMix64::new(resample_seed(seed, b));
        let mut value = None;
        for _attempt in 0..=100 {
            let mut sample = Vec::with_capacity(n);
            for _ in 0..n {
                let idx = (gen.next_u64() % n as u64) as usize;
                sample.push(rows[idx].clone());
            }
            if let Some(v) = metric(&sample) {
                value = Some(v);
                break;
            }
        }
        values.push(value.expect("resample succeeded"));
    }
    values.sort_by(f64::total_cmp);
    let pct = |q: f64| {
        let pos = q * (n_boot - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n_boot - 1);
        values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
    };
    (metric(rows).unwrap(), pct(0.025), pct(0.975))
}

/// Independent check of the splitmix stream: `resample_seed(s, b)` must be
/// output `b` of a generator seeded with `s`.
pub fn master_stream(seed: u64, count: usize) -> Vec<u64> {
    let mut state = seed;
    (0..count)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Curriculum selection

/// Top `floor(f N)` ids after a full sort by (confidence desc, id asc).
pub fn brute_select(records: &[(String, f64)], fraction: f64) -> Vec<String> {
    let mut sorted = records.to_vec();
    // Insertion sort keeps this independent of the library's sort call.
    for i in 1..sorted.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (&sorted[j - 1], &sorted[j]);
            let out_of_order = a.1 < b.1 || (a.1 == b.1 && a.0 > b.0);
            if !out_of_order {
                break;
            }
            sorted.swap(j - 1, j);
            j -= 1;
        }
    }
    let count = ((fraction * records.len() as f64) + 1e-9).floor() as usize;
    let mut ids: Vec<String> = sorted.into_iter().take(count).map(|r| r.0).collect();
    ids.sort();
    ids
}
