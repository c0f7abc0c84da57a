//! Acceptance sweeps. Each returns a one-line summary on success and a
//! description of the first failure otherwise.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use smmil::autodiff::gradcheck::{check_gradients, relative_error};
use smmil::autodiff::{Tape, Tensor, Var};
use smmil::curriculum::{
    pseudo_label, round_seed, run_curriculum, select_confident, weight_digest, CurriculumConfig, PseudoLabelRecord,
};
use smmil::data::{generate_synthetic, Bag, Class, GeneratorConfig, LabeledBag, Split};
use smmil::metrics::{
    auroc, aupr, balanced_accuracy, bootstrap_ci, resample_seed, PredictionRow, ScreeningTask,
};
use smmil::model::{fuse, MMILModel, ModelConfig};
use smmil::nn::Parameters;
use smmil::pooling::{relevance_renormalize, sa_loss, stack, supervised_attention_pool, AttentionModule};
use smmil::train::{predict_labeled, train_supervised, TrainConfig};
use smmil::Result as SResult;

use super::*;

pub type Check = std::result::Result<String, String>;

pub const GRAD_SEEDS: u64 = 20;
pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
pub const ORACLE_TOL: f64 = 1e-10;

/// Nearest-centroid balanced accuracy on the reference validation split.
pub const REFERENCE_CENTROID_VAL: f64 = 1.0;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Gradients

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> SResult<Var>>;

/// Contracts an arbitrary-shape output against fixed non-uniform weights.
fn reduce(tape: &mut Tape, out: Var) -> SResult<Var> {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let weights = (0..n).map(|i| ((i + 1) as f64 * 0.7).sin()).collect();
    let c = tape.constant(Tensor::new(shape, weights)?);
    let prod = tape.mul(out, c)?;
    Ok(tape.sum(prod))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in `±[0.1, 1.5]`, away from the ReLU kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape, 0.1, 1.5);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let m34 = |rng: &mut ChaCha8Rng| rand_tensor(rng, &[3, 4], -1.5, 1.5);
    let v5 = |rng: &mut ChaCha8Rng| rand_tensor(rng, &[5], -2.0, 2.0);
    vec![
        (
            "matmul",
            Box::new(|t: &mut Tape, x: &[Var]| {
                let y = t.matmul(x[0], x[1])?;
                reduce(t, y)
            }) as OpFn,
            vec![m34(rng), rand_tensor(rng, &[4, 2], -1.5, 1.5)],
        ),
        ("transpose", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.transpose(x[0])?; reduce(t, y) }), vec![m34(rng)]),
        ("reshape", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.reshape(x[0], &[2, 6])?; reduce(t, y) }), vec![m34(rng)]),
        ("add", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.add(x[0], x[1])?; reduce(t, y) }), vec![m34(rng), m34(rng)]),
        ("sub", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.sub(x[0], x[1])?; reduce(t, y) }), vec![m34(rng), m34(rng)]),
        ("mul", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.mul(x[0], x[1])?; reduce(t, y) }), vec![m34(rng), m34(rng)]),
        ("scalar_mul", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.scalar_mul(x[0], -1.7); reduce(t, y) }), vec![m34(rng)]),
        ("neg", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.neg(x[0]); reduce(t, y) }), vec![m34(rng)]),
        ("tanh", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.tanh(x[0]); reduce(t, y) }), vec![m34(rng)]),
        ("relu", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.relu(x[0]); reduce(t, y) }), vec![off_zero(rng, &[3, 4])]),
        ("sigmoid", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.sigmoid(x[0]); reduce(t, y) }), vec![m34(rng)]),
        ("exp", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.exp(x[0]); reduce(t, y) }), vec![m34(rng)]),
        ("log", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.log(x[0])?; reduce(t, y) }), vec![rand_tensor(rng, &[3, 4], 0.3, 3.0)]),
        ("sum", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.tanh(x[0]); Ok(t.sum(y)) }), vec![m34(rng)]),
        ("softmax", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.softmax(x[0])?; reduce(t, y) }), vec![v5(rng)]),
        ("log_softmax", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.log_softmax(x[0])?; reduce(t, y) }), vec![v5(rng)]),
        ("normalize", Box::new(|t: &mut Tape, x: &[Var]| { let y = t.normalize(x[0])?; reduce(t, y) }), vec![rand_tensor(rng, &[5], 0.1, 2.0)]),
        (
            "scale",
            Box::new(|t: &mut Tape, x: &[Var]| { let y = t.scale(x[0], x[1])?; reduce(t, y) }),
            vec![v5(rng), rand_tensor(rng, &[1], -2.0, 2.0)],
        ),
        (
            "add_row_bias",
            Box::new(|t: &mut Tape, x: &[Var]| { let y = t.add_row_bias(x[0], x[1])?; reduce(t, y) }),
            vec![m34(rng), rand_tensor(rng, &[4], -1.0, 1.0)],
        ),
        (
            "pick",
            Box::new(|t: &mut Tape, x: &[Var]| {
                let y = t.log_softmax(x[0])?;
                let p = t.pick(y, 2)?;
                Ok(t.neg(p))
            }),
            vec![v5(rng)],
        ),
    ]
}

/// Builds `f(theta)` where `theta` indexes the flattened parameters.
fn perturbed(model: &MMILModel, tensor: usize, elem: usize, delta: f64) -> MMILModel {
    let mut m = model.clone();
    let mut i = 0;
    m.visit_mut("", &mut |_, t| {
        if i == tensor {
            t.data_mut()[elem] += delta;
        }
        i += 1;
    });
    m
}

/// Worst elementwise relative error of the full-model gradient.
pub fn model_gradient_error(model: &MMILModel, bag: &Bag, label: Class, step: f64) -> f64 {
    let (_, _, grads) = model.loss_and_gradients(bag, label).unwrap();
    let mut worst: f64 = 0.0;
    for (ti, g) in grads.iter().enumerate() {
        for j in 0..g.numel() {
            let plus = perturbed(model, ti, j, step).total_loss(bag, label).unwrap().0;
            let minus = perturbed(model, ti, j, -step).total_loss(bag, label).unwrap().0;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(g.data()[j], numeric));
        }
    }
    worst
}

pub fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut worst_op: f64 = 0.0;
    let mut ops = 0;
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(seed);
        for (name, f, inputs) in op_cases(&mut r) {
            let report = check_gradients(f, &inputs, 1e-6).map_err(|e| format!("{name}: {e}"))?;
            ensure(report.max_rel_error < OP_TOL, || {
                format!("{name} seed {seed}: rel err {:.3e} at {:?}", report.max_rel_error, report.worst)
            })?;
            worst_op = worst_op.max(report.max_rel_error);
            ops += 1;
        }
    }
    let mut worst_model: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(1000 + seed);
        let cfg = ModelConfig {
            lambda: r.random_range(0.5..10.0),
            tau: r.random_range(0.3..1.5),
            ..small_config()
        };
        let model = MMILModel::init(cfg.clone(), seed).unwrap();
        let k_cine = r.random_range(1..5);
        let k_dop = r.random_range(1..4);
        let bag = random_bag(&mut r, &cfg, "g", k_cine, k_dop);
        let label = Class::from_index(r.random_range(0..3));
        let err = model_gradient_error(&model, &bag, label, 1e-6);
        ensure(err < MODEL_TOL, || format!("full model seed {seed}: rel err {err:.3e}"))?;
        worst_model = worst_model.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{ops} op checks worst {worst_op:.2e}, {GRAD_SEEDS} model checks worst {worst_model:.2e}, {secs:.1}s"
    ))
}

// ---------------------------------------------------------------------------
// Equation oracles

fn random_embeddings(r: &mut ChaCha8Rng, k: usize, m: usize) -> Vec<Vec<f64>> {
    (0..k).map(|_| uniform_vec(r, m, 1.0)).collect()
}

fn tensors(rows: &[Vec<f64>]) -> Vec<Tensor> {
    rows.iter().map(|r| Tensor::vector(r.clone())).collect()
}

pub fn check_attention_pool(seed: u64) -> std::result::Result<f64, String> {
    let mut r = rng(seed);
    let (m, l, k) = (r.random_range(2..7), r.random_range(2..6), r.random_range(1..7));
    let att = AttentionModule::init(m, l, seed);
    let h = random_embeddings(&mut r, k, m);
    let got = att.pool(&tensors(&h)).map_err(|e| e.to_string())?;
    let (rep, w) = attention_pool(&att, &h);
    Ok(max_abs_diff(got.representation.data(), &rep).max(max_abs_diff(got.weights.data(), &w)))
}

pub fn check_supervised_pool(seed: u64) -> std::result::Result<f64, String> {
    let mut r = rng(seed);
    let (m, l, k) = (r.random_range(2..7), r.random_range(2..6), r.random_range(1..7));
    let att_a = AttentionModule::init(m, l, seed);
    let att_b = AttentionModule::init(m, l, seed + 1);
    let h = random_embeddings(&mut r, k, m);
    let mut tape = Tape::new();
    let ba = att_a.bind(&mut tape, &mut Vec::new());
    let bb = att_b.bind(&mut tape, &mut Vec::new());
    let hv = stack(&mut tape, &tensors(&h)).map_err(|e| e.to_string())?;
    let (pooled, a) = supervised_attention_pool(&mut tape, ba, bb, hv).map_err(|e| e.to_string())?;
    let (rep, c, a_ref) = supervised_pool(&att_a, &att_b, &h);
    Ok(max_abs_diff(tape.value(pooled.representation).data(), &rep)
        .max(max_abs_diff(tape.value(pooled.weights).data(), &c))
        .max(max_abs_diff(tape.value(a).data(), &a_ref)))
}

pub fn check_sa_loss(seed: u64) -> std::result::Result<f64, String> {
    let mut r = rng(seed);
    let k = r.random_range(1..8);
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.0..1.0)).collect();
    let tau = r.random_range(0.05..2.0);
    let logits = uniform_vec(&mut r, k, 2.0);
    let rt = relevance_renormalize(&raw, tau).map_err(|e| e.to_string())?;
    let r_ref = softmax(&raw.iter().map(|x| x / tau).collect::<Vec<_>>());
    let a_ref = softmax(&logits);
    let mut tape = Tape::new();
    let rv = tape.constant(rt.clone());
    let av = tape.constant(Tensor::vector(a_ref.clone()));
    let loss = sa_loss(&mut tape, rv, av).map_err(|e| e.to_string())?;
    Ok(max_abs_diff(rt.data(), &r_ref).max((tape.value(loss).item() - kl(&r_ref, &a_ref)).abs()))
}

pub fn check_fuse(seed: u64) -> std::result::Result<f64, String> {
    let mut r = rng(seed);
    let (m, l) = (r.random_range(2..8), r.random_range(2..6));
    let att = AttentionModule::init(m, l, seed);
    let z = uniform_vec(&mut r, m, 1.0);
    let zd = uniform_vec(&mut r, m, 1.0);
    let mut tape = Tape::new();
    let bound = att.bind(&mut tape, &mut Vec::new());
    let zv = tape.constant(Tensor::vector(z.clone()));
    let zdv = tape.constant(Tensor::vector(zd.clone()));
    let (s, alpha) = fuse(&mut tape, zv, zdv, bound).map_err(|e| e.to_string())?;
    let (s_ref, alpha_ref) = super::fuse(&att, &z, &zd);
    Ok(max_abs_diff(tape.value(s).data(), &s_ref).max((tape.value(alpha).item() - alpha_ref).abs()))
}

pub fn check_total_loss(seed: u64) -> std::result::Result<f64, String> {
    let mut r = rng(seed);
    let cfg = ModelConfig {
        lambda: r.random_range(0.0..12.0),
        tau: r.random_range(0.2..2.0),
        ..small_config()
    };
    let model = MMILModel::init(cfg.clone(), seed).map_err(|e| e.to_string())?;
    let k_cine = r.random_range(1..6);
    let k_dop = r.random_range(1..4);
    let bag = random_bag(&mut r, &cfg, "eq", k_cine, k_dop);
    let label = Class::from_index(r.random_range(0..3));
    let (loss, out) = model.total_loss(&bag, label).map_err(|e| e.to_string())?;
    let fwd = model_forward(&model, &bag);
    Ok((loss - model_loss(&model, &bag, label))
        .abs()
        .max(max_abs_diff(&out.probs, &fwd.probs))
        .max((out.alpha - fwd.alpha).abs()))
}

pub fn equation_oracles(n: u64) -> Check {
    type Oracle = fn(u64) -> std::result::Result<f64, String>;
    let checks: [(&str, Oracle); 5] = [
        ("attention_pool", check_attention_pool),
        ("supervised_attention_pool", check_supervised_pool),
        ("sa_loss", check_sa_loss),
        ("fuse", check_fuse),
        ("total_loss", check_total_loss),
    ];
    let mut summary = Vec::new();
    for (name, f) in checks {
        let mut worst: f64 = 0.0;
        for seed in 0..n {
            let err = f(seed)?;
            ensure(err <= ORACLE_TOL, || format!("{name} input {seed}: diff {err:.3e}"))?;
            worst = worst.max(err);
        }
        summary.push(format!("{name} {worst:.1e}"));
    }
    Ok(format!("{n} inputs each; worst {}", summary.join(", ")))
}

// ---------------------------------------------------------------------------
// Invariances

/// Reorders instances within each modality; relevance travels with its instance.
pub fn permuted(bag: &Bag, r: &mut ChaCha8Rng) -> Bag {
    let mut cine = bag.cine.clone();
    let mut doppler = bag.doppler.clone();
    cine.shuffle(r);
    doppler.shuffle(r);
    Bag::new(bag.id.clone(), cine, doppler, bag.label).unwrap()
}

pub fn invariance_suite() -> Check {
    let mut worst_perm: f64 = 0.0;
    let mut worst_norm: f64 = 0.0;
    for seed in 0..100u64 {
        let mut r = rng(5000 + seed);
        let cfg = small_config();
        let model = MMILModel::init(cfg.clone(), seed).unwrap();
        let k_cine = r.random_range(1..8);
        let k_dop = r.random_range(1..6);
        let bag = random_bag(&mut r, &cfg, "p", k_cine, k_dop);
        let a = model.forward(&bag).unwrap();
        let b = model.forward(&permuted(&bag, &mut r)).unwrap();
        let d = max_abs_diff(&a.probs, &b.probs);
        ensure(d <= 1e-12, || format!("permutation changed probabilities by {d:.3e}"))?;
        worst_perm = worst_perm.max(d);

        for w in [&a.cine_weights, &a.cine_attention, &a.doppler_weights] {
            let w = w.as_ref().unwrap();
            let e = (w.iter().sum::<f64>() - 1.0).abs();
            ensure(e <= 1e-9 && w.iter().all(|&x| x >= 0.0), || format!("weights {w:?} not normalized"))?;
            worst_norm = worst_norm.max(e);
        }
    }

    for seed in 0..200u64 {
        let mut r = rng(7000 + seed);
        let k = r.random_range(1..8);
        let rv = softmax(&uniform_vec(&mut r, k, 3.0));
        let av = softmax(&uniform_vec(&mut r, k, 3.0));
        let value = |x: &[f64], y: &[f64]| {
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::vector(x.to_vec()));
            let yv = tape.constant(Tensor::vector(y.to_vec()));
            let l = sa_loss(&mut tape, xv, yv).unwrap();
            tape.value(l).item()
        };
        let self_kl = value(&rv, &rv);
        ensure(self_kl == 0.0, || format!("KL(R||R) = {self_kl:e}"))?;
        let cross = value(&rv, &av);
        ensure(cross >= 0.0, || format!("negative KL {cross:e}"))?;
        if max_abs_diff(&rv, &av) > 1e-6 {
            ensure(cross > 0.0, || "KL zero for distinct distributions".into())?;
        }
    }

    for seed in 0..50u64 {
        let mut r = rng(9000 + seed);
        let base = small_config();
        let k = r.random_range(1..5);
        let bag = random_bag(&mut r, &base, "ab", k, 3);
        let extra = random_bag(&mut r, &base, "x", 1, 2);

        let no_doppler = MMILModel::init(ModelConfig { use_doppler: false, ..base.clone() }, seed).unwrap();
        let fewer = Bag::new("ab", bag.cine.clone(), bag.doppler[..1].to_vec(), None).unwrap();
        let none = Bag::new("ab", bag.cine.clone(), vec![], None).unwrap();
        let more = Bag::new("ab", bag.cine.clone(), [bag.doppler.clone(), extra.doppler.clone()].concat(), None).unwrap();
        let reference = no_doppler.forward(&bag).unwrap().probs;
        for variant in [&fewer, &none, &more] {
            let p = no_doppler.forward(variant).unwrap().probs;
            ensure(p.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                "use_doppler=false output depends on doppler instances".into()
            })?;
        }

        let no_cine = MMILModel::init(ModelConfig { use_cine: false, ..base.clone() }, seed).unwrap();
        let swapped = Bag::new("ab", extra.cine.clone(), bag.doppler.clone(), None).unwrap();
        let empty_cine = Bag::new("ab", vec![], bag.doppler.clone(), None).unwrap();
        let reference = no_cine.forward(&bag).unwrap().probs;
        for variant in [&swapped, &empty_cine] {
            let p = no_cine.forward(variant).unwrap().probs;
            ensure(p.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                "use_cine=false output depends on cine instances".into()
            })?;
        }
    }
    Ok(format!(
        "permutation worst {worst_perm:.1e}, normalization worst {worst_norm:.1e}, KL and ablations exact"
    ))
}

// ---------------------------------------------------------------------------
// Curriculum

pub fn random_records(r: &mut ChaCha8Rng, n: usize) -> Vec<PseudoLabelRecord> {
    (0..n)
        .map(|i| PseudoLabelRecord {
            bag_id: format!("u{:04}-{i:03}", r.random_range(0..10_000u32)),
            predicted_class: Class::from_index(r.random_range(0..3)),
            // Coarse grid so that equal confidences are common.
            confidence: f64::from(r.random_range(34..=100u32)) / 100.0,
        })
        .collect()
}

/// Small problem on which the curriculum runs in a few seconds.
pub fn small_problem(seed: u64, n_unlabeled: usize) -> (smmil::data::SyntheticData, ModelConfig, TrainConfig) {
    let gen = GeneratorConfig {
        n_labeled: 24,
        n_val: 18,
        n_test: 18,
        n_unlabeled,
        cine_bag_size: [2, 4],
        doppler_bag_size: [1, 3],
        cine_shape: [2, 3, 3],
        doppler_shape: [3, 4],
        seed,
        ..GeneratorConfig::default()
    };
    let model = ModelConfig {
        cine_shape: gen.cine_shape.to_vec(),
        doppler_shape: gen.doppler_shape.to_vec(),
        embed_dim: 8,
        hidden_sizes: vec![8],
        attention_dim: 6,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        learning_rate: 5e-3,
        max_epochs: 6,
        patience: 3,
        ..TrainConfig::default()
    };
    (generate_synthetic(&gen).unwrap(), model, train)
}

/// Replays every round from its own fresh initialization and compares
/// digests with the curriculum's report.
pub fn replay_rounds(seed: u64) -> std::result::Result<usize, String> {
    let (data, model_cfg, train_cfg) = small_problem(seed, 40);
    let ds = &data.dataset;
    let cur = CurriculumConfig::default();
    let out = run_curriculum(ds, None, &model_cfg, seed, &train_cfg, &cur).map_err(|e| e.to_string())?;
    ensure(out.rounds.len() == cur.rounds(), || format!("{} rounds ran", out.rounds.len()))?;

    let labeled = ds.labeled(Split::Train);
    let val = ds.labeled(Split::Val);
    let unlabeled = ds.iterate_split(Split::Unlabeled);
    let mut previous: Option<MMILModel> = None;
    for (idx, report) in out.rounds.iter().enumerate() {
        let round = idx + 1;
        let init_seed = round_seed(seed, round);
        let fresh = MMILModel::init(model_cfg.clone(), init_seed).unwrap();
        ensure(report.init_digest == weight_digest(&fresh), || format!("round {round}: init digest"))?;
        if let Some(prev) = &previous {
            ensure(report.init_digest != weight_digest(prev), || format!("round {round} warm-started"))?;
        }
        let mut train = labeled.clone();
        if let Some(prev) = &previous {
            let records = pseudo_label(prev, &unlabeled).unwrap();
            let ids = select_confident(&records, cur.fraction(round));
            for rec in records.iter().filter(|r| ids.contains(&r.bag_id)) {
                let bag = unlabeled.iter().find(|b| b.id == rec.bag_id).unwrap();
                train.push(LabeledBag { bag, label: rec.predicted_class });
            }
        }
        ensure(train.len() == report.train_size, || format!("round {round}: train size"))?;
        let (model, _) = train_supervised(&model_cfg, init_seed, &train, &val, &train_cfg).unwrap();
        ensure(weight_digest(&model) == report.final_digest, || format!("round {round}: final weights differ"))?;
        previous = Some(model);
    }
    let digests: std::collections::BTreeSet<&String> = out.rounds.iter().map(|r| &r.init_digest).collect();
    ensure(digests.len() == out.rounds.len(), || "two rounds share an initialization".into())?;
    Ok(out.rounds.len())
}

pub fn curriculum_mechanics() -> Check {
    let cur = CurriculumConfig::default();
    let fractions: Vec<f64> = (1..=cur.rounds()).map(|r| cur.fraction(r)).collect();
    ensure(fractions == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], || format!("fractions {fractions:?}"))?;

    for seed in 0..1000u64 {
        let mut r = rng(20_000 + seed);
        let n = r.random_range(0..60);
        let records = random_records(&mut r, n);
        let fraction = if r.random_bool(0.5) {
            fractions[r.random_range(0..fractions.len())]
        } else {
            r.random_range(0.0..=1.0)
        };
        let got: Vec<String> = select_confident(&records, fraction).into_iter().collect();
        let pairs: Vec<(String, f64)> = records.iter().map(|r| (r.bag_id.clone(), r.confidence)).collect();
        let want = brute_select(&pairs, fraction);
        ensure(got == want, || format!("set {seed}: selection differs from sort oracle"))?;
    }

    let mut rounds = 0;
    for seed in [3u64, 11] {
        rounds += replay_rounds(seed)?;
    }
    Ok(format!("fractions {fractions:?}; 1000 selection sets match; {rounds} rounds replayed from fresh init"))
}

// ---------------------------------------------------------------------------
// End to end

pub struct EndToEnd {
    pub supervised_val: f64,
    pub supervised_test: f64,
    pub curriculum_test: f64,
    pub best_round: usize,
    pub seconds: f64,
}

pub fn end_to_end_reference() -> EndToEnd {
    let start = Instant::now();
    let data = generate_synthetic(&GeneratorConfig::default()).unwrap();
    let ds = &data.dataset;
    let model_cfg = ModelConfig::default();
    let train_cfg = TrainConfig::default();
    let test = ds.labeled(Split::Test);
    let (model, hist) =
        train_supervised(&model_cfg, 7, &ds.labeled(Split::Train), &ds.labeled(Split::Val), &train_cfg).unwrap();
    let supervised_test = balanced_accuracy(&predict_labeled(&model, &test).unwrap()).unwrap();
    let out = run_curriculum(ds, Some(&data.hidden_truth), &model_cfg, 7, &train_cfg, &CurriculumConfig::default())
        .unwrap();
    let curriculum_test = balanced_accuracy(&predict_labeled(&out.model, &test).unwrap()).unwrap();
    EndToEnd {
        supervised_val: hist.best_val_balanced_accuracy.unwrap(),
        supervised_test,
        curriculum_test,
        best_round: out.best_round,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn end_to_end() -> Check {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let e = pool.install(end_to_end_reference);
    let summary = format!(
        "supervised val {:.4} (centroid {:.4}), supervised test {:.4}, curriculum test {:.4} (round {}), {:.1}s on one thread",
        e.supervised_val, REFERENCE_CENTROID_VAL, e.supervised_test, e.curriculum_test, e.best_round, e.seconds
    );
    ensure(e.supervised_val >= REFERENCE_CENTROID_VAL - 0.05, || format!("{summary}: validation too low"))?;
    ensure(e.curriculum_test >= e.supervised_test - 0.02, || format!("{summary}: curriculum below baseline"))?;
    ensure(e.seconds < 600.0, || format!("{summary}: too slow"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Metrics

pub fn metrics_suite() -> Check {
    for seed in 0..200u64 {
        let mut r = rng(40_000 + seed);
        let n = r.random_range(6..80);
        let rows = random_predictions(&mut r, n);
        let ba = balanced_accuracy(&rows).map_err(|e| e.to_string())?;
        ensure(ba == brute_balanced_accuracy(&rows), || format!("set {seed}: balanced accuracy"))?;
        for (t, task) in ScreeningTask::ALL.into_iter().enumerate() {
            let (s, l) = brute_task(&rows, t);
            let (ls, ll) = task.scores_and_labels(&rows);
            ensure(ls == s && ll == l, || format!("set {seed}: {} scores", task.name()))?;
            if l.iter().all(|&x| x) || l.iter().all(|&x| !x) {
                continue;
            }
            let got = (auroc(&s, &l).unwrap(), aupr(&s, &l).unwrap());
            let want = (brute_auroc(&s, &l), brute_aupr(&s, &l));
            ensure(got == want, || format!("set {seed}: {} got {got:?} want {want:?}", task.name()))?;
        }
    }

    let stream = master_stream(99, 50);
    for (b, &v) in stream.iter().enumerate() {
        ensure(resample_seed(99, b) == v, || format!("resample seed {b} off the documented stream"))?;
    }

    let mut r = rng(41_000);
    let rows = random_predictions(&mut r, 40);
    let ba = |x: &[PredictionRow]| balanced_accuracy(x);
    let sig = |x: &[PredictionRow]| ScreeningTask::EarlyVsSig.auroc(x);
    for seed in [1u64, 2024] {
        let a = bootstrap_ci(ba, &rows, 5000, seed).unwrap();
        let b = bootstrap_ci(ba, &rows, 5000, seed).unwrap();
        ensure(a == b, || "bootstrap not deterministic".into())?;
        let (p, lo, hi) = two_loop_bootstrap(|x| balanced_accuracy(x).ok(), &rows, 5000, seed);
        ensure(
            a.point.to_bits() == p.to_bits() && a.lo.to_bits() == lo.to_bits() && a.hi.to_bits() == hi.to_bits(),
            || format!("balanced accuracy interval {a:?} vs oracle ({p}, {lo}, {hi})"),
        )?;
        let a = bootstrap_ci(sig, &rows, 5000, seed).unwrap();
        let (p, lo, hi) = two_loop_bootstrap(|x| sig(x).ok(), &rows, 5000, seed);
        ensure(
            a.point.to_bits() == p.to_bits() && a.lo.to_bits() == lo.to_bits() && a.hi.to_bits() == hi.to_bits(),
            || format!("AUROC interval {a:?} vs oracle ({p}, {lo}, {hi})"),
        )?;
    }
    Ok("200 sets exact for balanced accuracy and 3x AUROC/AUPR; bootstrap n=5000 bitwise equal to oracle".into())
}

// ---------------------------------------------------------------------------
// Modality ablation

pub struct AblationResult {
    pub full: f64,
    pub no_doppler: f64,
}

/// Only doppler carries the class; compares the full model with the
/// no-doppler ablation after curriculum training.
pub fn doppler_ablation() -> AblationResult {
    let gen = GeneratorConfig {
        signal_in_cine: false,
        n_unlabeled: 200,
        ..GeneratorConfig::default()
    };
    let data = generate_synthetic(&gen).unwrap();
    let ds = &data.dataset;
    let test = ds.labeled(Split::Test);
    let score = |use_doppler: bool| {
        let cfg = ModelConfig { use_doppler, ..ModelConfig::default() };
        let out = run_curriculum(ds, None, &cfg, 7, &TrainConfig::default(), &CurriculumConfig::default()).unwrap();
        balanced_accuracy(&predict_labeled(&out.model, &test).unwrap()).unwrap()
    };
    AblationResult {
        full: score(true),
        no_doppler: score(false),
    }
}
