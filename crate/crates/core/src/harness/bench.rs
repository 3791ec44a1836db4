//! Token-count scaling of the SSM layer against self-attention.

use std::alloc::{GlobalAlloc, Layout, System};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::analytics::loglog_slope;
use super::train::CsvLog;
use super::HarnessError;
use crate::attnbase::{AttnConfig, AttnLayer};
use crate::diffcore::{ParamStore, Tape, Tensor};
use crate::ssm::{ScanBackend, SsmConfig, SsmLayer};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// System allocator that tracks live and peak heap bytes. Install it with
/// `#[global_allocator]` in a binary to get memory columns in benchmarks.
pub struct CountingAlloc;

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            grow(new_size);
        }
        p
    }
}

fn grow(n: usize) {
    ACTIVE.store(true, Ordering::Relaxed);
    let now = CURRENT.fetch_add(n, Ordering::Relaxed) + n;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

/// Whether [`CountingAlloc`] is the global allocator of this process.
pub fn counting_active() -> bool {
    ACTIVE.load(Ordering::Relaxed)
}

/// Restarts peak tracking from the current live size, which is returned.
pub fn reset_peak() -> usize {
    let now = CURRENT.load(Ordering::Relaxed);
    PEAK.store(now, Ordering::Relaxed);
    now
}

pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Visual token counts `N`; sequences hold `1 + N` tokens.
    pub grid: Vec<usize>,
    pub repeats: usize,
    pub width: usize,
    pub state: usize,
    pub heads: usize,
    pub ffn: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            grid: vec![64, 128, 256, 512, 1024],
            repeats: 15,
            width: 128,
            state: 8,
            heads: 2,
            ffn: 256,
            seed: 0,
        }
    }
}

/// Kernels timed on each grid point.
pub const KERNELS: [&str; 4] = ["ssm-seq", "ssm-par", "attn-layer", "attn-mix"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kernel: String,
    pub tokens: usize,
    pub repeats: usize,
    pub mean_ns: f64,
    pub p50_ns: f64,
    pub p95_ns: f64,
    /// Heap high-water mark above the pre-call baseline (0 without the
    /// counting allocator).
    pub peak_bytes: usize,
    /// Bytes of the attention weight tensor (0 for scans).
    pub score_bytes: usize,
}

pub const BENCH_HEADER: [&str; 8] = ["kernel", "tokens", "repeats", "mean_ns", "p50_ns", "p95_ns", "peak_bytes", "score_bytes"];

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn measure(kernel: &str, tokens: usize, repeats: usize, score_bytes: usize, mut f: impl FnMut()) -> BenchRow {
    f();
    let base = reset_peak();
    f();
    let peak = peak_bytes().saturating_sub(base);
    let mut times: Vec<f64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as f64
        })
        .collect();
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    BenchRow {
        kernel: kernel.to_string(),
        tokens,
        repeats,
        mean_ns: mean,
        p50_ns: percentile(&times, 0.5),
        p95_ns: percentile(&times, 0.95),
        peak_bytes: peak,
        score_bytes,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("shape")
}

/// Times the SSM layer (both scan backends), the full attention layer and
/// attention's token-mixing kernel (`softmax(QKᵀ)V`) on `1 + N` tokens.
pub fn bench_scan(cfg: &BenchConfig) -> Result<Vec<BenchRow>, HarnessError> {
    if cfg.grid.is_empty() || cfg.repeats == 0 {
        return Err(HarnessError::Config("benchmark needs a token grid and repeats".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let ssm_cfg = SsmConfig {
        width: cfg.width,
        state: cfg.state,
        ..SsmConfig::default()
    };
    let ssm = SsmLayer::new(&mut store, &ssm_cfg, 0, &mut rng);
    let attn_cfg = AttnConfig {
        width: cfg.width,
        heads: cfg.heads,
        ffn: cfg.ffn,
        ..AttnConfig::default()
    };
    let attn = AttnLayer::new(&mut store, &attn_cfg, 0, &mut rng)?;
    let dh = cfg.width / cfg.heads;
    let mut rows = Vec::new();
    for &n in &cfg.grid {
        let l = 1 + n;
        let x = random(&mut rng, &[1, l, cfg.width]);
        let x0 = Tensor::<f32>::zeros(&[1, cfg.width, cfg.state]);
        for (name, backend) in [("ssm-seq", ScanBackend::Sequential), ("ssm-par", ScanBackend::Parallel)] {
            rows.push(measure(name, l, cfg.repeats, 0, || {
                let tape = Tape::<f32>::no_grad();
                let h = tape.constant(x.clone()).expect("finite");
                let s = tape.constant(x0.clone()).expect("finite");
                ssm.forward(&tape, &store, h, s, backend).expect("ssm forward");
            }));
        }
        let score_bytes = cfg.heads * l * l * std::mem::size_of::<f32>();
        rows.push(measure("attn-layer", l, cfg.repeats, score_bytes, || {
            let tape = Tape::<f32>::no_grad();
            let h = tape.constant(x.clone()).expect("finite");
            attn.forward(&tape, &store, h).expect("attention forward");
        }));
        let (q, k, v) = (
            random(&mut rng, &[cfg.heads, l, dh]),
            random(&mut rng, &[cfg.heads, l, dh]),
            random(&mut rng, &[cfg.heads, l, dh]),
        );
        rows.push(measure("attn-mix", l, cfg.repeats, score_bytes, || {
            let tape = Tape::<f32>::no_grad();
            let (q, k, v) = (
                tape.constant(q.clone()).expect("finite"),
                tape.constant(k.clone()).expect("finite"),
                tape.constant(v.clone()).expect("finite"),
            );
            let kt = tape.permute(k, &[0, 2, 1]).expect("permute");
            let s = tape.scale(tape.bmm(q, kt).expect("bmm"), 1.0 / (dh as f64).sqrt()).expect("scale");
            let w = tape.softmax(s).expect("softmax");
            tape.bmm(w, v).expect("bmm");
        }));
    }
    Ok(rows)
}

/// Log-log slopes of one kernel against the token count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSlopes {
    pub kernel: String,
    pub time: f64,
    /// `None` without the counting allocator.
    pub memory: Option<f64>,
    pub score_memory: Option<f64>,
}

pub fn kernel_slopes(rows: &[BenchRow]) -> Vec<KernelSlopes> {
    KERNELS
        .iter()
        .filter_map(|&k| {
            let rs: Vec<&BenchRow> = rows.iter().filter(|r| r.kernel == k).collect();
            if rs.len() < 2 {
                return None;
            }
            let xs: Vec<f64> = rs.iter().map(|r| r.tokens as f64).collect();
            let col = |f: &dyn Fn(&BenchRow) -> f64| -> Option<f64> {
                let ys: Vec<f64> = rs.iter().map(|r| f(r)).collect();
                ys.iter().all(|&y| y > 0.0).then(|| loglog_slope(&xs, &ys))
            };
            Some(KernelSlopes {
                kernel: k.to_string(),
                time: loglog_slope(&xs, &rs.iter().map(|r| r.p50_ns).collect::<Vec<_>>()),
                memory: col(&|r| r.peak_bytes as f64),
                score_memory: col(&|r| r.score_bytes as f64),
            })
        })
        .collect()
}

pub fn write_bench(dir: &Path, rows: &[BenchRow]) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut w = CsvLog::create(&dir.join("bench.csv"), &BENCH_HEADER)?;
    for r in rows {
        w.row(&[
            r.kernel.clone(),
            r.tokens.to_string(),
            r.repeats.to_string(),
            r.mean_ns.to_string(),
            r.p50_ns.to_string(),
            r.p95_ns.to_string(),
            r.peak_bytes.to_string(),
            r.score_bytes.to_string(),
        ])?;
    }
    let mut w = CsvLog::create(&dir.join("bench_slopes.csv"), &["kernel", "time_slope", "memory_slope", "score_memory_slope"])?;
    for s in kernel_slopes(rows) {
        w.row(&[
            s.kernel,
            s.time.to_string(),
            super::train::fmt_opt(s.memory),
            super::train::fmt_opt(s.score_memory),
        ])?;
    }
    Ok(())
}
