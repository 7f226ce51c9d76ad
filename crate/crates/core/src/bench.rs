//! Latency / throughput / memory benchmark harness.
//!
//! Protocol: a warmup phase (default 10 iterations) followed by a measured
//! phase (default 200 iterations) of single-sample forward passes, wall
//! clock per iteration, single-threaded unless a labeled `--threads`
//! override is requested. Reports mean/median/p95 latency, queries per
//! second, peak resident memory and the host CPU model.

use crate::infer::InferModel;
use crate::tensor::Tensor;
use std::time::Instant;

/// Reference figures published for this architecture on an Intel Core
/// i7-11800H under an ONNX-runtime deployment; printed as context only,
/// never asserted on other hosts.
pub const REFERENCE_CONTEXT: &str =
    "reference (Intel i7-11800H, ONNX runtime): fp32 10.23 ms / 97.8 qps, int8 6.75 ms / 148.1 qps, memory 84.9 -> 65.2 MB";

/// One benchmark result.
#[derive(Clone, Debug)]
pub struct BenchReport {
    pub precision: String,
    pub iters: usize,
    pub warmup: usize,
    pub batch: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub qps: f64,
    pub peak_mb: f64,
    pub cpu: String,
    pub threads: usize,
    /// Set when the timer resolution is coarser than 1% of the mean.
    pub timer_warning: bool,
}

impl BenchReport {
    pub fn csv_header() -> &'static str {
        "precision,iters,warmup,mean_ms,median_ms,p95_ms,qps,peak_mb,cpu,threads"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.2},{:.1},{},{}",
            self.precision,
            self.iters,
            self.warmup,
            self.mean_ms,
            self.median_ms,
            self.p95_ms,
            self.qps,
            self.peak_mb,
            self.cpu.replace(',', ";"),
            self.threads
        )
    }

    pub fn pretty(&self) -> String {
        let mut s = format!(
            "[{}] mean {:.3} ms | median {:.3} ms | p95 {:.3} ms | {:.1} qps | peak {:.1} MB | {} thread(s) | {} iters (+{} warmup) | {}",
            self.precision,
            self.mean_ms,
            self.median_ms,
            self.p95_ms,
            self.qps,
            self.peak_mb,
            self.threads,
            self.iters,
            self.warmup,
            self.cpu
        );
        if self.timer_warning {
            s.push_str("\n  warning: timer resolution exceeds 1% of the mean latency");
        }
        s
    }
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 * p).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Peak resident set size in MB (VmHWM), Linux only; 0.0 elsewhere.
pub fn peak_rss_mb() -> f64 {
    if let Ok(status) = std::fs::read_to_string("/proc/self/status") {
        for line in status.lines() {
            if let Some(rest) = line.strip_prefix("VmHWM:") {
                if let Some(kb) = rest.trim().split_whitespace().next() {
                    if let Ok(kb) = kb.parse::<f64>() {
                        return kb / 1024.0;
                    }
                }
            }
        }
    }
    0.0
}

/// First `model name` from /proc/cpuinfo, or "unknown".
pub fn cpu_model() -> String {
    if let Ok(info) = std::fs::read_to_string("/proc/cpuinfo") {
        for line in info.lines() {
            if line.starts_with("model name") {
                if let Some((_, value)) = line.split_once(':') {
                    return value.trim().to_string();
                }
            }
        }
    }
    "unknown".into()
}

/// Smallest positive delta the monotonic clock resolves, in ms.
fn timer_resolution_ms() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        let d = (b - a).as_secs_f64() * 1e3;
        if d > 0.0 && d < best {
            best = d;
        }
    }
    if best.is_finite() {
        best
    } else {
        0.0
    }
}

fn run_loop(engine: &InferModel, sample: &Tensor<f32>, iters: usize, warmup: usize) -> Vec<f64> {
    for _ in 0..warmup {
        std::hint::black_box(engine.logits(std::hint::black_box(sample)));
    }
    let mut latencies = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        std::hint::black_box(engine.logits(std::hint::black_box(sample)));
        latencies.push(start.elapsed().as_secs_f64() * 1e3);
    }
    latencies
}

/// Benchmark one engine on one sample batch. `threads > 1` runs that many
/// concurrent copies of the measurement loop (labeled in the report);
/// throughput is then the sum over threads.
pub fn benchmark(
    engine: &InferModel,
    sample: &Tensor<f32>,
    iters: usize,
    warmup: usize,
    threads: usize,
) -> BenchReport {
    let threads = threads.max(1);
    let batch = sample.shape()[0];
    let mut latencies = if threads == 1 {
        run_loop(engine, sample, iters, warmup)
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|_| scope.spawn(|| run_loop(engine, sample, iters, warmup)))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("bench thread")).collect()
        })
    };
    latencies.sort_by(|a, b| a.total_cmp(b));
    let mean = latencies.iter().sum::<f64>() / latencies.len() as f64;
    let qps = threads as f64 * batch as f64 * 1000.0 / mean;
    BenchReport {
        precision: engine.precision().label().into(),
        iters,
        warmup,
        batch,
        mean_ms: mean,
        median_ms: median_sorted(&latencies),
        p95_ms: percentile_sorted(&latencies, 0.95),
        qps,
        peak_mb: peak_rss_mb(),
        cpu: cpu_model(),
        threads,
        timer_warning: timer_resolution_ms() > 0.01 * mean,
    }
}
