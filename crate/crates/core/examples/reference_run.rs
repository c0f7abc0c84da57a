//! Trains on the reference synthetic config and prints validation/test
//! scores for the supervised baseline and the curriculum run.
//!
//! `cargo run --release -p smmil --example reference_run`

use std::time::Instant;

use smmil::curriculum::{run_curriculum, CurriculumConfig};
use smmil::data::{generate_synthetic, GeneratorConfig, Split};
use smmil::metrics::balanced_accuracy;
use smmil::model::ModelConfig;
use smmil::train::{predict_labeled, train_supervised, TrainConfig};

fn main() -> smmil::Result<()> {
    let start = Instant::now();
    let data = generate_synthetic(&GeneratorConfig::default())?;
    let ds = &data.dataset;
    let model_cfg = ModelConfig::default();
    let train_cfg = TrainConfig::default();

    let train = ds.labeled(Split::Train);
    let val = ds.labeled(Split::Val);
    let test = ds.labeled(Split::Test);

    let (model, hist) = train_supervised(&model_cfg, 7, &train, &val, &train_cfg)?;
    let test_ba = balanced_accuracy(&predict_labeled(&model, &test)?)?;
    println!(
        "supervised: best epoch {} val {:?} test {test_ba:.4} ({:.1}s)",
        hist.best_epoch,
        hist.best_val_balanced_accuracy,
        start.elapsed().as_secs_f64()
    );

    let out = run_curriculum(ds, Some(&data.hidden_truth), &model_cfg, 7, &train_cfg, &CurriculumConfig::default())?;
    for r in &out.rounds {
        println!(
            "round {}: frac {} selected {} val {:?} pseudo acc {:?}",
            r.round, r.selected_fraction, r.selected_count, r.val_balanced_accuracy, r.pseudo_label_accuracy
        );
    }
    let test_ba = balanced_accuracy(&predict_labeled(&out.model, &test)?)?;
    println!(
        "curriculum: best round {} test {test_ba:.4} ({:.1}s total)",
        out.best_round,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
