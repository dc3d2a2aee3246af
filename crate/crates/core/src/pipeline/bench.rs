use std::alloc::{GlobalAlloc, Layout, System};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::error::{config_err, Result};
use crate::model::{Model, ModelConfig, Task};
use crate::SeriesWindow;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static LARGEST: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// System allocator that tracks live, peak and largest-single allocation
/// bytes. Install it in a binary with `#[global_allocator]` to make
/// [`bench_scaling`] report memory.
pub struct CountingAlloc;

fn record_alloc(size: usize) {
    let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
    PEAK.fetch_max(now, Ordering::Relaxed);
    LARGEST.fetch_max(size, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            ACTIVE.store(true, Ordering::Relaxed);
            record_alloc(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            ACTIVE.store(true, Ordering::Relaxed);
            record_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            record_alloc(new_size);
        }
        p
    }
}

/// Allocation counters since the last [`reset_alloc_peak`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AllocStats {
    pub current: usize,
    pub peak: usize,
    pub largest: usize,
}

/// Whether [`CountingAlloc`] is the global allocator of this process.
pub fn alloc_tracking_enabled() -> bool {
    drop(std::hint::black_box(vec![0u8; 1]));
    ACTIVE.load(Ordering::Relaxed)
}

pub fn reset_alloc_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    LARGEST.store(0, Ordering::Relaxed);
}

pub fn alloc_stats() -> AllocStats {
    AllocStats {
        current: CURRENT.load(Ordering::Relaxed),
        peak: PEAK.load(Ordering::Relaxed),
        largest: LARGEST.load(Ordering::Relaxed),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub n_vars: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_vars: 7,
            d_model: 256,
            n_blocks: 2,
            horizon: 96,
            patch_len: 8,
            stride: 8,
            reps: 5,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            n_vars: cfg.bench_vars,
            d_model: cfg.bench_d_model,
            n_blocks: cfg.bench_blocks,
            horizon: cfg.horizon,
            patch_len: cfg.patch_len,
            stride: cfg.stride,
            reps: cfg.bench_reps,
            seed: cfg.seed,
        }
    }

    pub fn model_config(&self, seq_len: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_blocks: self.n_blocks,
            horizon: self.horizon,
            patch_len: self.patch_len,
            stride: self.stride,
            ..ModelConfig::new(Task::Forecast, self.n_vars, seq_len)
        }
    }
}

/// One benchmark line. `bytes` is the peak allocation above the level at
/// the start of the pass; `largest` is the biggest single allocation.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub seq_len: usize,
    pub ms: f64,
    pub bytes: usize,
    pub largest: usize,
}

fn median<T: Copy + PartialOrd>(mut v: Vec<T>) -> T {
    v.sort_by(|a, b| a.partial_cmp(b).expect("comparable"));
    v[v.len() / 2]
}

/// Median-of-`reps` wall time and peak memory of one inference pass
/// (lag priors plus forward) for each lookback length.
pub fn bench_scaling(lengths: &[usize], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return config_err("benchmark lengths must be ascending");
    }
    if cfg.reps == 0 {
        return config_err("benchmark needs at least one repetition");
    }
    let tracking = alloc_tracking_enabled();
    if !tracking {
        log::warn!("allocation tracking is off; memory columns will read 0");
    }
    let mut rows = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let model = Model::new(cfg.model_config(t), cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ t as u64);
        let window = SeriesWindow::from_fn(cfg.n_vars, t, |i, s| {
            (s as f64 * 0.05 * (i + 1) as f64).sin() + 0.1 * rng.random_range(-1.0..1.0)
        });
        let pass = || -> Result<()> {
            let priors = model.priors(&window)?;
            std::hint::black_box(model.predict(&window, None, &priors)?);
            Ok(())
        };
        pass()?;
        let (mut times, mut peaks, mut largest) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..cfg.reps {
            reset_alloc_peak();
            let base = alloc_stats().current;
            let start = Instant::now();
            pass()?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            let stats = alloc_stats();
            peaks.push(stats.peak.saturating_sub(base));
            largest.push(stats.largest);
        }
        let row = BenchRow {
            seq_len: t,
            ms: median(times),
            bytes: median(peaks),
            largest: median(largest),
        };
        log::info!("T={t}: {:.2} ms, {} bytes", row.ms, row.bytes);
        rows.push(row);
    }
    Ok(rows)
}

/// `(time ratio, memory ratio)` between consecutive rows.
pub fn scaling_ratios(rows: &[BenchRow]) -> Vec<(f64, f64)> {
    rows.windows(2)
        .map(|w| {
            (
                w[1].ms / w[0].ms,
                w[1].bytes as f64 / w[0].bytes.max(1) as f64,
            )
        })
        .collect()
}

/// `T,ms,bytes` lines with a header.
pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "T,ms,bytes")?;
    for r in rows {
        writeln!(f, "{},{:.4},{}", r.seq_len, r.ms, r.bytes)?;
    }
    f.flush()?;
    Ok(())
}
