use std::collections::BTreeMap;
use std::path::Path;

use smmil::curriculum::run_curriculum;
use smmil::data::{self, generate_synthetic, Class, Dataset, Modality, Split};
use smmil::metrics::{evaluate, read_predictions_csv, write_predictions_csv, Interval, PredictionSet};
use smmil::model::{load_checkpoint, save_checkpoint, MMILModel, ModelConfig};
use smmil::train::{predict_labeled, train_supervised, TrainHistory};
use smmil::{Error, Result};

use crate::config::RunConfig;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = RunConfig::require(&cfg.paths.data, "--data")?;
    data::load(&dir)
}

/// Fails early when instance shapes in the data disagree with the model config.
fn check_shapes(ds: &Dataset, model: &ModelConfig) -> Result<()> {
    for bag in ds.bags() {
        for (modality, want) in [(Modality::Cine, &model.cine_shape), (Modality::Doppler, &model.doppler_shape)] {
            if let Some(inst) = bag.instances(modality).first() {
                if inst.shape() != want.as_slice() {
                    return Err(Error::Config(format!(
                        "bag {} has {modality} shape {:?} but the model expects {want:?}",
                        bag.id,
                        inst.shape()
                    )));
                }
            }
        }
    }
    Ok(())
}

pub fn gen_data(cfg: RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let synthetic = generate_synthetic(&cfg.data)?;
    let ds = &synthetic.dataset;
    data::save(ds, &out)?;
    data::save_hidden_truth(&synthetic.hidden_truth, &out)?;
    cfg.echo(&out)?;

    println!("wrote {} bags to {}", ds.bags().len(), out.display());
    for split in [Split::Train, Split::Val, Split::Test, Split::Unlabeled] {
        let mut hist = [0usize; Class::COUNT];
        let bags = ds.iterate_split(split);
        for bag in &bags {
            let label = bag.label.or_else(|| synthetic.hidden_truth.labels.get(&bag.id).copied());
            if let Some(c) = label {
                hist[c.index()] += 1;
            }
        }
        println!("  {:<10} {:>5} bags, classes {:?}", split.as_str(), bags.len(), hist);
    }
    Ok(())
}

fn save_model(model: &MMILModel, history: &TrainHistory, out: &Path) -> Result<()> {
    create_dir(out)?;
    save_checkpoint(model, &out.join("checkpoint"))?;
    write_text(&out.join("history.csv"), &history.to_csv())
}

pub fn train(cfg: RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let ds = load_dataset(&cfg)?;
    check_shapes(&ds, &cfg.model)?;
    let (model, history) = train_supervised(
        &cfg.model,
        cfg.seed(),
        &ds.labeled(Split::Train),
        &ds.labeled(Split::Val),
        &cfg.train,
    )?;
    save_model(&model, &history, &out)?;
    cfg.echo(&out)?;
    println!(
        "best epoch {} of {}, validation balanced accuracy {}",
        history.best_epoch,
        history.epochs.len(),
        fmt_score(history.best_val_balanced_accuracy)
    );
    Ok(())
}

pub fn ssl(cfg: RunConfig) -> Result<()> {
    if cfg.ablate_ssl {
        log::info!("--ablate-ssl: training on labeled bags only");
        return train(cfg);
    }
    let out = cfg.out_dir()?;
    let data_dir = RunConfig::require(&cfg.paths.data, "--data")?;
    let ds = data::load(&data_dir)?;
    check_shapes(&ds, &cfg.model)?;
    let truth = data::load_hidden_truth(&data_dir)?;
    let outcome = run_curriculum(&ds, truth.as_ref(), &cfg.model, cfg.seed(), &cfg.train, &cfg.curriculum)?;
    save_model(&outcome.model, &outcome.histories[outcome.best_round - 1], &out)?;
    write_text(&out.join("rounds.jsonl"), &outcome.report_jsonl())?;
    cfg.echo(&out)?;
    for r in &outcome.rounds {
        println!(
            "round {}: {:>4} pseudo-labeled, train {:>4}, validation balanced accuracy {}",
            r.round,
            r.selected_count,
            r.train_size,
            fmt_score(r.val_balanced_accuracy)
        );
    }
    println!("selected round {}", outcome.best_round);
    Ok(())
}

fn predictions_in_process(cfg: &RunConfig) -> Result<PredictionSet> {
    let split: Split = cfg.eval.split.parse()?;
    if split == Split::Unlabeled {
        return Err(Error::Usage("predictions are written for labeled splits only".into()));
    }
    let ds = load_dataset(cfg)?;
    let model = load_checkpoint(&RunConfig::require(&cfg.paths.checkpoint, "--checkpoint")?)?;
    check_shapes(&ds, model.config())?;
    PredictionSet::new(predict_labeled(&model, &ds.labeled(split))?)
}

pub fn predict(cfg: RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let preds = predictions_in_process(&cfg)?;
    create_dir(&out)?;
    let path = out.join("predictions.csv");
    write_predictions_csv(&path, &preds)?;
    cfg.echo(&out)?;
    println!("wrote {} predictions to {}", preds.len(), path.display());
    Ok(())
}

pub fn eval(cfg: RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let preds = match &cfg.paths.predictions {
        Some(path) => read_predictions_csv(path)?,
        None => predictions_in_process(&cfg)?,
    };
    let report = evaluate(&preds, cfg.eval.n_boot, cfg.seed())?;
    create_dir(&out)?;
    let metrics: &BTreeMap<String, Interval> = &report.metrics;
    write_text(
        &out.join("report.json"),
        &(serde_json::to_string_pretty(metrics).expect("report serializes") + "\n"),
    )?;
    let mut cm = String::from("true_label,pred_0,pred_1,pred_2\n");
    for (c, row) in report.confusion_matrix.iter().enumerate() {
        cm.push_str(&format!("{c},{},{},{}\n", row[0], row[1], row[2]));
    }
    write_text(&out.join("confusion_matrix.csv"), &cm)?;
    cfg.echo(&out)?;

    println!("{} studies, {} bootstrap resamples", report.n_rows, report.n_boot);
    for (name, ci) in metrics {
        println!("  {name:<20} {:.4}  [{:.4}, {:.4}]", ci.point, ci.lo, ci.hi);
    }
    Ok(())
}

fn fmt_score(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}
