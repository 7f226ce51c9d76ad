//! Scratch experiment (manual): per-epoch val accuracy, full vs -rope.

use wavemg_core::model::{Model, ModelConfig};
use wavemg_core::signal::{segment_all, split_windows, synth_gestures, zscore_normalize, SynthConfig};
use wavemg_core::train::{train, TrainConfig};

#[test]
#[ignore]
fn scratch_epoch_dynamics() {
    for seed in [0u64, 1, 2] {
        let synth = SynthConfig::new(6, 8, 100, 200 + seed);
        let recs = synth_gestures(&synth).unwrap();
        let recs: Vec<_> = recs.iter().map(|r| zscore_normalize(r).unwrap()).collect();
        let windows = segment_all(&recs, 200, 0.5).unwrap();
        let split = split_windows(&windows, 200 + seed);

        for use_rope in [true, false] {
            let cfg = ModelConfig {
                layers: 1,
                embed_dim: 64,
                heads: 8,
                ffn_dim: 256,
                num_classes: 6,
                use_rope,
                ..Default::default()
            };
            let tcfg = TrainConfig {
                lr: 1.5e-3,
                epochs: 10,
                warmup_epochs: 1,
                batch: 64,
                seed: 200 + seed,
                early_stop_patience: 20,
                ..Default::default()
            };
            let (model, _) = Model::<f32>::init(cfg, 200 + seed).unwrap();
            let outcome = train(model, &windows, &split, &tcfg).unwrap();
            let accs: Vec<String> = outcome
                .history
                .iter()
                .filter(|r| r.split == "val")
                .map(|r| format!("{:.3}", r.accuracy))
                .collect();
            println!("seed {seed} rope={use_rope}: {}", accs.join(" "));
        }
    }
}
