//! Scratch experiment (manual): training convergence on the synthetic set.
//! Run: cargo test -p wavemg-core --test scratch_learning -- --ignored --nocapture

use wavemg_core::model::{Model, ModelConfig};
use wavemg_core::signal::{segment_all, split_windows, synth_gestures, zscore_normalize, SynthConfig};
use wavemg_core::train::{evaluate, train, TrainConfig};

#[test]
#[ignore]
fn scratch_training_run() {
    let t0 = std::time::Instant::now();
    let synth = SynthConfig::new(6, 8, 200, 42);
    let recs = synth_gestures(&synth).unwrap();
    let recs: Vec<_> = recs.iter().map(|r| zscore_normalize(r).unwrap()).collect();
    let windows = segment_all(&recs, 200, 0.5).unwrap();
    let split = split_windows(&windows, 42);
    println!(
        "windows: {} train / {} val / {} test (gen {:?})",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        t0.elapsed()
    );

    let cfg = ModelConfig {
        layers: 2,
        embed_dim: 64,
        heads: 8,
        ffn_dim: 256,
        num_classes: 6,
        ..Default::default()
    };
    let (model, warnings) = Model::<f32>::init(cfg, 42).unwrap();
    println!("params: {} warnings {warnings:?}", model.param_count());

    let tcfg = TrainConfig {
        lr: 1e-3,
        epochs: 30,
        warmup_epochs: 2,
        batch: 64,
        seed: 42,
        ..Default::default()
    };
    let t1 = std::time::Instant::now();
    let outcome = train(model, &windows, &split, &tcfg).unwrap();
    println!("training took {:?}, best epoch {} val acc {:.4}, stopped_early={}",
        t1.elapsed(), outcome.best_epoch, outcome.best_val_accuracy, outcome.stopped_early);
    for row in &outcome.history {
        println!("  epoch {:2} {:5} loss {:.4} acc {:.4}", row.epoch, row.split, row.loss, row.accuracy);
    }
    let (_, report) = evaluate(&outcome.model, &windows, &split.test, 64).unwrap();
    println!("TEST acc {:.4} f1 {:.4} auroc {:?} (total {:?})", report.accuracy, report.macro_f1, report.auroc, t0.elapsed());
}
