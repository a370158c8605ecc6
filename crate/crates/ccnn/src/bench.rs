//! Forward-pass latency / FPS benchmark. Timing covers only the forward
//! pass on a fixed random input; ground-truth generation and I/O stay
//! outside the timed region.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub image_size: (usize, usize),
    pub warmup_runs: usize,
    pub timed_runs: usize,
    /// per-run latencies in seconds, monotonic clock
    pub latencies: Vec<f64>,
    /// timed_runs / sum(latencies)
    pub fps: f64,
    pub mean_latency: f64,
    pub median_latency: f64,
    pub p95_latency: f64,
    pub thread_count: usize,
    pub build_profile: &'static str,
}

/// Run `warmup` untimed forwards then `runs` timed forwards on a fixed
/// random input of the given size.
pub fn bench_forward(
    model: &Model,
    image_size: (usize, usize),
    warmup: usize,
    runs: usize,
    thread_count: usize,
) -> Result<BenchReport> {
    if runs < 1 {
        return Err(Error::invalid_argument("bench needs at least 1 timed run"));
    }
    let (h, w) = image_size;
    let f = model.config.downsampling_factor();
    if h % f != 0 || w % f != 0 {
        return Err(Error::invalid_argument(format!(
            "bench size {}x{} not divisible by the downsampling factor {}",
            h, w, f
        )));
    }
    let c = model.config.input_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let data: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let input = Tensor::new((1, c, h, w), data)?;

    for _ in 0..warmup {
        model.forward(&input)?;
    }
    let mut latencies = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        let out = model.forward(&input)?;
        latencies.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let total: f64 = latencies.iter().sum();
    let mut sorted = latencies.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let p95 = sorted[((sorted.len() as f64 * 0.95).ceil() as usize - 1).min(sorted.len() - 1)];
    Ok(BenchReport {
        image_size,
        warmup_runs: warmup,
        timed_runs: runs,
        fps: runs as f64 / total,
        mean_latency: total / runs as f64,
        median_latency: median,
        p95_latency: p95,
        latencies,
        thread_count,
        build_profile: if cfg!(debug_assertions) {
            "debug"
        } else {
            "release"
        },
    })
}
