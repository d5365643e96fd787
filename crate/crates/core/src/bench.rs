//! Wall-clock scaling of the scan kernels.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::ssm::{scan_forward, ScanDims, ScanInputs, ScanSchedule};

pub const BENCH_LENGTHS: [usize; 3] = [256, 1024, 4096];
pub const BENCH_WIDTHS: [usize; 2] = [16, 64];
pub const BENCH_STATE: usize = 16;
pub const CHUNK: usize = 64;
/// Allowed slack over linear growth when the length quadruples.
pub const LINEARITY_SLACK: f64 = 1.3;

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub len: usize,
    pub width: usize,
    pub sequential_ms: f64,
    pub chunked_ms: f64,
    /// Max |sequential − chunked| over the outputs.
    pub chunk_diff: f64,
    /// Sequential time relative to the previous, 4× shorter, row.
    pub growth: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub max_growth: f64,
    pub max_chunk_diff: f64,
    pub linear: bool,
}

fn best_of<F: FnMut()>(reps: usize, mut f: F) -> f64 {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn bench_scan(reps: usize, seed: u64) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &width in &BENCH_WIDTHS {
        let mut prev: Option<f64> = None;
        for &len in &BENCH_LENGTHS {
            let n = BENCH_STATE;
            let mut v = |k: usize, lo: f32, hi: f32| -> Vec<f32> { (0..k).map(|_| rng.random_range(lo..hi)).collect() };
            let (u, delta) = (v(len * width, -1.0, 1.0), v(len * width, 0.01, 0.5));
            let (a, b, c, d) = (v(width * n, -2.0, -0.1), v(len * n, -1.0, 1.0), v(len * n, -1.0, 1.0), v(width, -1.0, 1.0));
            let inp = ScanInputs {
                dims: ScanDims {
                    seqs: 1,
                    len,
                    channels: width,
                    state: n,
                },
                u: &u,
                delta: &delta,
                a: &a,
                b: &b,
                c: &c,
                d: &d,
            };
            let (ys, _) = scan_forward(&inp, ScanSchedule::Sequential, false)?;
            let (yc, _) = scan_forward(&inp, ScanSchedule::Chunked(CHUNK), false)?;
            let chunk_diff = ys.iter().zip(&yc).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
            let sequential_ms = best_of(reps, || {
                std::hint::black_box(scan_forward(&inp, ScanSchedule::Sequential, false).ok());
            });
            let chunked_ms = best_of(reps, || {
                std::hint::black_box(scan_forward(&inp, ScanSchedule::Chunked(CHUNK), false).ok());
            });
            rows.push(BenchRow {
                len,
                width,
                sequential_ms,
                chunked_ms,
                chunk_diff,
                growth: prev.map(|p| sequential_ms / p),
            });
            prev = Some(sequential_ms);
        }
    }
    let max_growth = rows.iter().filter_map(|r| r.growth).fold(0.0, f64::max);
    let max_chunk_diff = rows.iter().map(|r| r.chunk_diff).fold(0.0, f64::max);
    Ok(BenchReport {
        linear: max_growth <= 4.0 * LINEARITY_SLACK,
        max_growth,
        max_chunk_diff,
        rows,
    })
}

impl BenchReport {
    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>6} {:>6} {:>12} {:>12} {:>8} {:>11}\n",
            "L", "D", "seq_ms", "chunk_ms", "growth", "chunk_diff"
        );
        for r in &self.rows {
            let growth = r.growth.map_or("-".to_string(), |g| format!("{g:.2}x"));
            out += &format!(
                "{:>6} {:>6} {:>12.3} {:>12.3} {:>8} {:>11.2e}\n",
                r.len, r.width, r.sequential_ms, r.chunked_ms, growth, r.chunk_diff
            );
        }
        out
    }
}
