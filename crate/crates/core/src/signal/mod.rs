//! Recordings, normalization, windowing, splits and batching.
//!
//! A [`Recording`] is a `C x L` multi-channel signal with one class label.
//! The pipeline is: z-score per channel, segment into fixed-length windows
//! with overlap, split window indices deterministically, batch into tensors.

mod csvio;
mod synth;

pub use csvio::{load_csv, write_recordings_csv};
pub use synth::{synth_gestures, SynthConfig};

use crate::rng::{mix2, SplitMix64};
use crate::tensor::{Scalar, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("input error: {0}")]
    Input(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("range error at line {line}: {msg}")]
    Range { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Multi-channel recording with a per-recording class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    channels: Vec<Vec<f64>>,
    label: usize,
}

impl Recording {
    pub fn new(channels: Vec<Vec<f64>>, label: usize) -> Result<Self, SignalError> {
        if channels.is_empty() {
            return Err(SignalError::Input("recording has no channels".into()));
        }
        let len = channels[0].len();
        if len == 0 {
            return Err(SignalError::Input("recording has no samples".into()));
        }
        if channels.iter().any(|c| c.len() != len) {
            return Err(SignalError::Input("channels have inconsistent lengths".into()));
        }
        Ok(Self { channels, label })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor rejects empty recordings
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }
}

/// Channel-wise z-score with population standard deviation. A zero-variance
/// channel maps to all zeros (the denominator is clamped at `1e-8`).
pub fn zscore_normalize(rec: &Recording) -> Result<Recording, SignalError> {
    if rec.len() < 2 {
        return Err(SignalError::Input(
            "z-score needs more than one sample per channel".into(),
        ));
    }
    let n = rec.len() as f64;
    let channels = rec
        .channels
        .iter()
        .map(|ch| {
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let denom = var.sqrt().max(1e-8);
            ch.iter().map(|x| (x - mean) / denom).collect()
        })
        .collect();
    Recording::new(channels, rec.label)
}

/// One fixed-length window cut from a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Sample offset of the window start within its recording.
    pub offset: usize,
    /// Number of zero-padded samples at the tail (0 for full windows).
    pub padded: usize,
    /// `C x T`, channel-major.
    pub data: Vec<Vec<f64>>,
    pub label: usize,
}

/// Slice a recording into windows of `window` samples starting at multiples
/// of `stride = floor(window * (1 - overlap))`. A trailing partial window is
/// zero-padded when it holds strictly more than half real samples and
/// dropped otherwise, which keeps window counts deterministic.
pub fn segment(rec: &Recording, window: usize, overlap: f64) -> Result<Vec<Window>, SignalError> {
    if window == 0 {
        return Err(SignalError::Parameter("window must be positive".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(SignalError::Parameter(format!(
            "overlap must be in [0, 1), got {overlap}"
        )));
    }
    let stride = ((window as f64) * (1.0 - overlap)).floor().max(1.0) as usize;
    let len = rec.len();
    let mut out = Vec::new();
    let mut start = 0usize;
    while start < len {
        let real = (len - start).min(window);
        // Keep iff full, or strictly more than half of the window is real.
        if real == window || real * 2 > window {
            let data = rec
                .channels
                .iter()
                .map(|ch| {
                    let mut w = ch[start..start + real].to_vec();
                    w.resize(window, 0.0);
                    w
                })
                .collect();
            out.push(Window { offset: start, padded: window - real, data, label: rec.label });
        }
        start += stride;
    }
    Ok(out)
}

/// Segment a whole dataset; window order is recording-major, then offset.
pub fn segment_all(
    recs: &[Recording],
    window: usize,
    overlap: f64,
) -> Result<Vec<Window>, SignalError> {
    let mut out = Vec::new();
    for rec in recs {
        out.extend(segment(rec, window, overlap)?);
    }
    Ok(out)
}

/// Disjoint train/validation/test index lists over a window set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seed-deterministic stratified split: per class, roughly 10% validation,
/// 10% test, remainder train.
pub fn split_windows(windows: &[Window], seed: u64) -> DatasetSplit {
    let num_classes = windows.iter().map(|w| w.label).max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for class in 0..num_classes {
        let mut idx: Vec<usize> =
            (0..windows.len()).filter(|&i| windows[i].label == class).collect();
        if idx.is_empty() {
            continue;
        }
        let mut rng = SplitMix64::new(mix2(seed, class as u64));
        rng.shuffle(&mut idx);
        let n = idx.len();
        let n_val = n / 10;
        let n_test = n / 10;
        val.extend_from_slice(&idx[..n_val]);
        test.extend_from_slice(&idx[n_val..n_val + n_test]);
        train.extend_from_slice(&idx[n_val + n_test..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    DatasetSplit { train, val, test }
}

/// A batch of windows as a `B x C x T` tensor plus integer labels.
#[derive(Clone, Debug)]
pub struct WindowBatch<S> {
    pub data: Tensor<S>,
    pub labels: Vec<usize>,
}

/// Gather the given window indices into one batch tensor.
pub fn make_batch<S: Scalar>(windows: &[Window], indices: &[usize]) -> WindowBatch<S> {
    assert!(!indices.is_empty(), "empty batch");
    let c = windows[indices[0]].data.len();
    let t = windows[indices[0]].data[0].len();
    let mut data = Vec::with_capacity(indices.len() * c * t);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let w = &windows[i];
        debug_assert_eq!(w.data.len(), c);
        for ch in &w.data {
            data.extend(ch.iter().map(|&x| S::from_f64(x)));
        }
        labels.push(w.label);
    }
    WindowBatch { data: Tensor::new(vec![indices.len(), c, t], data).unwrap(), labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(samples: Vec<Vec<f64>>) -> Recording {
        Recording::new(samples, 0).unwrap()
    }

    #[test]
    fn zscore_hand_computed_channel() {
        // (x - 2) / sqrt(2/3) for x in [1,2,3]
        let r = zscore_normalize(&rec(vec![vec![1.0, 2.0, 3.0]])).unwrap();
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, e) in r.channel(0).iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn zscore_zero_variance_channel_maps_to_zeros() {
        let r = zscore_normalize(&rec(vec![vec![5.0, 5.0, 5.0]])).unwrap();
        assert_eq!(r.channel(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zscore_is_idempotent_within_tolerance() {
        let r = rec(vec![vec![0.5, -1.5, 2.5, 3.0, -0.25]]);
        let once = zscore_normalize(&r).unwrap();
        let twice = zscore_normalize(&once).unwrap();
        for (a, b) in once.channel(0).iter().zip(twice.channel(0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zscore_needs_multiple_samples() {
        assert!(matches!(
            zscore_normalize(&rec(vec![vec![1.0]])),
            Err(SignalError::Input(_))
        ));
    }

    #[test]
    fn segment_examples_from_stride_arithmetic() {
        let mk = |len: usize| rec(vec![(0..len).map(|i| i as f64).collect()]);

        // L=400 -> full windows at 0, 100, 200; the offset-300 fragment has
        // exactly half real samples and is dropped.
        let w = segment(&mk(400), 200, 0.5).unwrap();
        assert_eq!(w.iter().map(|w| w.offset).collect::<Vec<_>>(), vec![0, 100, 200]);
        assert!(w.iter().all(|w| w.padded == 0));

        // L=200 -> exactly one window.
        let w = segment(&mk(200), 200, 0.5).unwrap();
        assert_eq!(w.len(), 1);

        // L=250 -> 0 (full) and 100 (150 real, padded); 200 (50 real) dropped.
        let w = segment(&mk(250), 200, 0.5).unwrap();
        assert_eq!(w.iter().map(|w| w.offset).collect::<Vec<_>>(), vec![0, 100]);
        assert_eq!(w[1].padded, 50);
        assert_eq!(&w[1].data[0][..3], &[100.0, 101.0, 102.0]);
        assert!(w[1].data[0][150..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn segment_rejects_bad_parameters() {
        let r = rec(vec![vec![0.0; 10]]);
        assert!(matches!(segment(&r, 0, 0.5), Err(SignalError::Parameter(_))));
        assert!(matches!(segment(&r, 4, 1.0), Err(SignalError::Parameter(_))));
        assert!(matches!(segment(&r, 4, -0.1), Err(SignalError::Parameter(_))));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let windows: Vec<Window> = (0..100)
            .map(|i| Window { offset: 0, padded: 0, data: vec![vec![0.0; 4]], label: i % 5 })
            .collect();
        let a = split_windows(&windows, 9);
        let b = split_windows(&windows, 9);
        assert_eq!(a, b);
        let c = split_windows(&windows, 10);
        assert_ne!(a, c);

        let mut all: Vec<usize> =
            a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        // 20 windows per class -> 2 val + 2 test per class.
        assert_eq!(a.val.len(), 10);
        assert_eq!(a.test.len(), 10);
    }

    #[test]
    fn batch_shapes_and_labels() {
        let windows: Vec<Window> = (0..4)
            .map(|i| Window {
                offset: 0,
                padded: 0,
                data: vec![vec![i as f64; 6], vec![-(i as f64); 6]],
                label: i,
            })
            .collect();
        let b: WindowBatch<f32> = make_batch(&windows, &[2, 0]);
        assert_eq!(b.data.shape(), &[2, 2, 6]);
        assert_eq!(b.labels, vec![2, 0]);
        assert_eq!(b.data.data()[0], 2.0);
    }

    proptest! {
        #[test]
        fn full_window_count_matches_formula(len in 1usize..600, window in 1usize..80, num in 0usize..4) {
            let overlap = num as f64 * 0.25; // 0, 0.25, 0.5, 0.75
            let r = rec(vec![(0..len).map(|i| i as f64).collect()]);
            let ws = segment(&r, window, overlap).unwrap();
            let stride = ((window as f64) * (1.0 - overlap)).floor().max(1.0) as usize;
            if len >= window {
                let expect_full = (len - window) / stride + 1;
                let full = ws.iter().filter(|w| w.padded == 0).count();
                prop_assert_eq!(full, expect_full);
            }
            for w in &ws {
                prop_assert_eq!(w.data[0].len(), window);
            }
        }

        #[test]
        fn zscore_moments(ch in proptest::collection::vec(-100.0f64..100.0, 2..64)) {
            let r = rec(vec![ch]);
            let z = zscore_normalize(&r).unwrap();
            let n = z.len() as f64;
            let mean = z.channel(0).iter().sum::<f64>() / n;
            let var = z.channel(0).iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-6);
            // Either unit variance or the zero-variance clamp fired.
            prop_assert!((var - 1.0).abs() < 1e-6 || var.abs() < 1e-6);
        }
    }
}
