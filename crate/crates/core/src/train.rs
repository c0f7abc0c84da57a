//! Supervised training: SGD with momentum, one bag per step, checkpoint
//! selection by validation balanced accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::LabeledBag;
use crate::error::{Error, Result};
use crate::metrics::{mean_present_recall, PredictionRow};
use crate::model::{MMILModel, ModelConfig};
use crate::nn::Parameters;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            momentum: 0.9,
            max_epochs: 40,
            patience: 10,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs and patience must be positive".into()));
        }
        Ok(())
    }
}

/// Heavy-ball SGD with weight decay folded into the gradient:
/// `v <- momentum * v + grad + weight_decay * theta`, `theta <- theta - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Sgd {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `grads` must follow the model's [`Parameters::visit`] order.
    pub fn step(&mut self, model: &mut MMILModel, grads: &[Tensor]) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
        }
        let (lr, mu, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        let mut i = 0;
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |_, theta| {
            let v = &mut velocity[i];
            let g = grads[i].data();
            for ((t, vk), gk) in theta.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vk = mu * *vk + gk + wd * *t;
                *t -= lr * *vk;
            }
            i += 1;
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_balanced_accuracy: Option<f64>,
    pub skipped_bags: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned (1-based; 0 means the initial weights).
    pub best_epoch: usize,
    pub best_val_balanced_accuracy: Option<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_balanced_accuracy,skipped_bags\n");
        for e in &self.epochs {
            let val = e.val_balanced_accuracy.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, val, e.skipped_bags));
        }
        out
    }
}

/// Predictions for labeled bags; bags with no usable instances are skipped.
pub fn predict_labeled(model: &MMILModel, bags: &[LabeledBag<'_>]) -> Result<Vec<PredictionRow>> {
    let mut rows = Vec::with_capacity(bags.len());
    for lb in bags {
        match model.forward(lb.bag) {
            Ok(out) => rows.push(PredictionRow {
                bag_id: lb.bag.id.clone(),
                true_label: lb.label,
                probs: out.probs,
            }),
            Err(Error::EmptyBag(id)) => log::warn!("skipping bag {id}: no usable instances"),
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

fn validation_score(model: &MMILModel, val: &[LabeledBag<'_>]) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    Ok(mean_present_recall(&predict_labeled(model, val)?))
}

/// Trains a freshly initialized model and returns the epoch checkpoint with
/// the best validation balanced accuracy (earliest on ties).
pub fn train_supervised(
    model_config: &ModelConfig,
    init_seed: u64,
    train: &[LabeledBag<'_>],
    val: &[LabeledBag<'_>],
    cfg: &TrainConfig,
) -> Result<(MMILModel, TrainHistory)> {
    let model = MMILModel::init(model_config.clone(), init_seed)?;
    train_from(model, train, val, cfg)
}

/// Same as [`train_supervised`] but starting from given weights.
pub fn train_from(
    mut model: MMILModel,
    train: &[LabeledBag<'_>],
    val: &[LabeledBag<'_>],
    cfg: &TrainConfig,
) -> Result<(MMILModel, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, MMILModel)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut used = 0usize;
        let mut skipped = 0usize;
        for &i in &order {
            let lb = &train[i];
            match model.loss_and_gradients(lb.bag, lb.label) {
                Ok((loss, _, grads)) => {
                    sgd.step(&mut model, &grads);
                    total += loss;
                    used += 1;
                }
                Err(Error::EmptyBag(id)) => {
                    log::warn!("skipping bag {id}: no usable instances");
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            return Err(Error::Usage("no trainable bags in training set".into()));
        }
        let val_score = validation_score(&model, val)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / used as f64,
            val_balanced_accuracy: val_score,
            skipped_bags: skipped,
        });
        log::debug!("epoch {epoch}: loss {:.5} val {:?}", total / used as f64, val_score);

        match val_score {
            Some(score) if best.as_ref().is_none_or(|(b, _)| score > *b) => {
                best = Some((score, model.clone()));
                history.best_epoch = epoch;
                history.best_val_balanced_accuracy = Some(score);
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
            None => history.best_epoch = epoch,
        }
    }

    let model = match best {
        Some((_, m)) => m,
        None => model,
    };
    Ok((model, history))
}
