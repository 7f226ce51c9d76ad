//! Synthetic gesture generator: a desk-scale stand-in for real sEMG corpora.
//!
//! Classes come in pairs. Each pair owns a base DFT bin (bins spread
//! geometrically below half-Nyquist), a shared channel activation mask and
//! a shared burst envelope; within a pair the even class bursts early in
//! the window and the odd class late, and their carrier tones sit exactly
//! one DFT bin apart. Across pairs the spectra separate easily; within a
//! pair the burst-carrying patch contents are identically distributed, so
//! temporal position is the dominant usable cue. Per-recording random
//! phases keep the classes linearly inseparable in the raw time domain,
//! and white noise is added at roughly 10 dB SNR.

use super::{Recording, SignalError};
use crate::rng::{mix2, SplitMix64};

/// Generation parameters. `snr_db: None` disables noise entirely.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub per_class: usize,
    /// Samples per recording: one segmentation window each.
    pub window: usize,
    pub seed: u64,
    pub snr_db: Option<f64>,
}

impl SynthConfig {
    pub fn new(num_classes: usize, channels: usize, per_class: usize, seed: u64) -> Self {
        Self { num_classes, channels, per_class, window: 200, seed, snr_db: Some(10.0) }
    }
}

/// Deterministic description of one recording's burst, exposed so tests can
/// evaluate closed-form energies independently of the sample loop.
#[derive(Clone, Debug)]
pub struct BurstSpec {
    pub start: usize,
    pub duration: usize,
    pub frequency: f64,
    /// Phase per channel; inactive channels carry amplitude 0.
    pub phases: Vec<f64>,
    pub active: Vec<bool>,
}

/// The DFT bin (at full-window resolution) of a class's carrier tone.
/// Pair `m = class/2` gets a geometric base bin; the odd member sits one
/// bin above the even member. Consecutive pairs stay >= 3 bins apart.
pub fn class_bin(class: usize, num_classes: usize, window: usize) -> usize {
    debug_assert!(class < num_classes && num_classes >= 2);
    let pairs = num_classes.div_ceil(2);
    let lo = (window / 20).max(4);
    let hi = ((21 * window) / 100).max(lo + 3 * pairs);
    let mut base = lo;
    for m in 1..=class / 2 {
        let t = m as f64 / (pairs.max(2) - 1) as f64;
        let geometric = (lo as f64 * (hi as f64 / lo as f64).powf(t)).round() as usize;
        base = geometric.max(base + 3);
    }
    base + class % 2
}

/// Class center frequency in cycles/sample: an exact DFT bin of the window.
/// Each recording's realized carrier jitters +-1 bin around this center
/// ([`burst_spec`]), so within a pair the frequency distributions overlap
/// heavily and the class-mean spectrum still peaks at the center bin.
pub fn class_frequency(class: usize, num_classes: usize, window: usize) -> f64 {
    class_bin(class, num_classes, window) as f64 / window as f64
}

/// Per-recording frequency jitter half-width, in DFT bins.
pub const FREQ_JITTER_BINS: f64 = 1.0;

/// Channel activation mask, shared within each class pair.
pub fn class_active_channels(class: usize, channels: usize) -> Vec<bool> {
    let pair = class / 2;
    (0..channels).map(|c| (c + pair) % 4 != 0).collect()
}

/// Whether a class bursts in the first half of the window.
pub fn class_bursts_early(class: usize) -> bool {
    class % 2 == 0
}

/// The burst layout of recording `idx` of `class`. Bursts stay away from
/// the window edges: the early slot starts at 20% of the window, the late
/// slot at 40%, both with 10%-of-window start jitter and a 30% duration,
/// so edge effects cannot stand in for temporal position.
pub fn burst_spec(cfg: &SynthConfig, class: usize, idx: usize) -> BurstSpec {
    let mut rng = SplitMix64::new(mix2(mix2(cfg.seed, class as u64), idx as u64));
    let duration = (3 * cfg.window) / 10;
    let range = (cfg.window / 10).max(1);
    let lo = if class_bursts_early(class) { cfg.window / 5 } else { (2 * cfg.window) / 5 };
    let start = lo + rng.next_below(range);
    let jitter = (rng.next_f64() * 2.0 - 1.0) * FREQ_JITTER_BINS / cfg.window as f64;
    let frequency = class_frequency(class, cfg.num_classes, cfg.window) + jitter;
    let active = class_active_channels(class, cfg.channels);
    let phases = (0..cfg.channels).map(|_| rng.next_f64() * std::f64::consts::TAU).collect();
    BurstSpec { start, duration, frequency, phases, active }
}

/// Generate the full recording set, class-major then index order.
pub fn synth_gestures(cfg: &SynthConfig) -> Result<Vec<Recording>, SignalError> {
    if cfg.num_classes < 2 {
        return Err(SignalError::Parameter(format!(
            "need at least 2 classes, got {}",
            cfg.num_classes
        )));
    }
    if cfg.channels == 0 || cfg.per_class == 0 || cfg.window < 8 {
        return Err(SignalError::Parameter("channels/per_class/window too small".into()));
    }
    let mut out = Vec::with_capacity(cfg.num_classes * cfg.per_class);
    for class in 0..cfg.num_classes {
        for idx in 0..cfg.per_class {
            out.push(render(cfg, class, idx));
        }
    }
    Ok(out)
}

fn render(cfg: &SynthConfig, class: usize, idx: usize) -> Recording {
    let spec = burst_spec(cfg, class, idx);
    let mut channels = vec![vec![0.0f64; cfg.window]; cfg.channels];
    let mut power = 0.0f64;
    for (c, ch) in channels.iter_mut().enumerate() {
        if !spec.active[c] {
            continue;
        }
        for t in spec.start..(spec.start + spec.duration).min(cfg.window) {
            let arg = std::f64::consts::TAU * spec.frequency * t as f64 + spec.phases[c];
            let v = arg.sin();
            ch[t] = v;
            power += v * v;
        }
    }
    if let Some(snr_db) = cfg.snr_db {
        // Noise is drawn after the burst from the same per-recording stream,
        // so it never perturbs start/phase draws.
        let mut rng =
            SplitMix64::new(mix2(mix2(mix2(cfg.seed, class as u64), idx as u64), 0x6E01))
                ;
        let mean_power = power / (cfg.channels * cfg.window) as f64;
        let sigma = (mean_power / 10f64.powf(snr_db / 10.0)).sqrt();
        for ch in channels.iter_mut() {
            for v in ch.iter_mut() {
                *v += sigma * rng.next_normal();
            }
        }
    }
    Recording::new(channels, class).expect("synthetic recording is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig::new(4, 6, 3, 99);
        let a = synth_gestures(&cfg).unwrap();
        let b = synth_gestures(&cfg).unwrap();
        assert_eq!(a, b);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 100;
        assert_ne!(synth_gestures(&cfg2).unwrap(), a);
    }

    #[test]
    fn rejects_single_class() {
        assert!(matches!(
            synth_gestures(&SynthConfig::new(1, 4, 2, 0)),
            Err(SignalError::Parameter(_))
        ));
    }

    /// Naive DFT power at integer bins; test-side oracle.
    fn power_spectrum(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for (t, &v) in x.iter().enumerate() {
                    let a = std::f64::consts::TAU * k as f64 * t as f64 / n as f64;
                    re += v * a.cos();
                    im -= v * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn class_mean_spectra_peak_at_distinct_bins() {
        let cfg = SynthConfig::new(6, 8, 48, 7);
        let recs = synth_gestures(&cfg).unwrap();
        let mut peaks = Vec::new();
        for class in 0..cfg.num_classes {
            // Average the power spectra of every active channel of the class.
            let mut acc = vec![0.0f64; cfg.window / 2];
            for rec in recs.iter().filter(|r| r.label() == class) {
                for c in 0..cfg.channels {
                    let spec = power_spectrum(rec.channel(c));
                    for (a, s) in acc.iter_mut().zip(&spec) {
                        *a += s;
                    }
                }
            }
            // Skip DC and the first couple of bins where noise dominates.
            let peak = (2..acc.len()).max_by(|&a, &b| acc[a].total_cmp(&acc[b])).unwrap();
            let expect = class_bin(class, cfg.num_classes, cfg.window);
            assert_eq!(
                peak, expect,
                "class {class}: peak bin {peak}, expected {expect}"
            );
            peaks.push(peak);
        }
        for i in 0..peaks.len() {
            for j in 0..i {
                assert_ne!(peaks[i], peaks[j], "classes {i} and {j} share peak bin");
            }
        }
    }

    #[test]
    fn pair_structure_of_bins_and_masks() {
        // Within a pair: one bin apart, same channel mask. Across pairs:
        // at least three bins apart.
        for k in (0..6).step_by(2) {
            let even = class_bin(k, 6, 200);
            let odd = class_bin(k + 1, 6, 200);
            assert_eq!(odd, even + 1);
            assert_eq!(class_active_channels(k, 8), class_active_channels(k + 1, 8));
            assert!(class_bursts_early(k) && !class_bursts_early(k + 1));
        }
        assert!(class_bin(2, 6, 200) >= class_bin(1, 6, 200) + 2);
        assert!(class_bin(4, 6, 200) >= class_bin(3, 6, 200) + 2);
        // Everything stays below half-Nyquist.
        for k in 0..6 {
            assert!(class_frequency(k, 6, 200) < 0.25);
        }
    }

    /// Closed-form burst energy via the Dirichlet cosine-sum identity:
    /// `sum_{j=0}^{n-1} cos(a + b j) = cos(a + b(n-1)/2) sin(bn/2) / sin(b/2)`.
    fn analytic_energy(spec: &BurstSpec, window: usize) -> Vec<f64> {
        let n = spec.duration.min(window - spec.start) as f64;
        let b = 2.0 * std::f64::consts::TAU * spec.frequency;
        spec.phases
            .iter()
            .zip(&spec.active)
            .map(|(&phase, &active)| {
                if !active {
                    return 0.0;
                }
                let a = b * spec.start as f64 + 2.0 * phase;
                let cos_sum = ((a + b * (n - 1.0) / 2.0).cos() * (b * n / 2.0).sin())
                    / (b / 2.0).sin();
                n / 2.0 - cos_sum / 2.0
            })
            .collect()
    }

    #[test]
    fn zero_noise_energy_matches_closed_form() {
        let mut cfg = SynthConfig::new(5, 7, 4, 21);
        cfg.snr_db = None;
        let recs = synth_gestures(&cfg).unwrap();
        for class in 0..cfg.num_classes {
            for idx in 0..cfg.per_class {
                let rec = &recs[class * cfg.per_class + idx];
                let spec = burst_spec(&cfg, class, idx);
                let expect = analytic_energy(&spec, cfg.window);
                for c in 0..cfg.channels {
                    let got: f64 = rec.channel(c).iter().map(|v| v * v).sum();
                    assert!(
                        (got - expect[c]).abs() <= 1e-9 * expect[c].abs().max(1.0),
                        "class {class} idx {idx} ch {c}: {got} vs {}",
                        expect[c]
                    );
                }
            }
        }
    }

    #[test]
    fn burst_slots_respect_class_parity_and_stay_interior() {
        let cfg = SynthConfig::new(6, 8, 5, 3);
        let (w, jitter) = (cfg.window, cfg.window / 10);
        for class in 0..6 {
            for idx in 0..5 {
                let spec = burst_spec(&cfg, class, idx);
                let lo = if class_bursts_early(class) { w / 5 } else { 2 * w / 5 };
                assert!(spec.start >= lo && spec.start < lo + jitter, "class {class}");
                // Interior: never touching the first or last fifth.
                assert!(spec.start >= w / 5);
                assert!(spec.start + spec.duration <= w - w / 5);
            }
        }
    }
}
