//! Scratch experiment (manual): full vs -rope across seeds.

use wavemg_core::model::ModelConfig;
use wavemg_core::signal::{segment_all, split_windows, synth_gestures, zscore_normalize, SynthConfig};
use wavemg_core::train::{ablation_run, TrainConfig};

#[test]
#[ignore]
fn scratch_ablation_direction() {
    let t0 = std::time::Instant::now();
    let mut wins = 0;
    let mut wavelet_wins = 0;
    for seed in 0..5u64 {
        let synth = SynthConfig::new(6, 8, 100, 100 + seed);
        let recs = synth_gestures(&synth).unwrap();
        let recs: Vec<_> = recs.iter().map(|r| zscore_normalize(r).unwrap()).collect();
        let windows = segment_all(&recs, 200, 0.5).unwrap();
        let split = split_windows(&windows, 100 + seed);

        let cfg = ModelConfig {
            layers: 1,
            embed_dim: 64,
            heads: 8,
            ffn_dim: 256,
            num_classes: 6,
            ..Default::default()
        };
        let tcfg = TrainConfig {
            lr: 1.5e-3,
            epochs: 30,
            warmup_epochs: 1,
            batch: 64,
            seed: 100 + seed,
            early_stop_patience: 5,
            ..Default::default()
        };
        let table = ablation_run::<f32>(&cfg, &tcfg, &windows, &split).unwrap();
        let full = table[0].1.accuracy;
        let no_wavelet = table[1].1.accuracy;
        let no_rope = table[2].1.accuracy;
        println!("seed {seed}: full {full:.4} | -wavelet {no_wavelet:.4} | -rope {no_rope:.4}");
        if full > no_rope { wins += 1; }
        if full >= no_wavelet { wavelet_wins += 1; }
    }
    println!("full beats -rope in {wins}/5 seeds; full >= -wavelet in {wavelet_wins}/5 ({:?})", t0.elapsed());
}
