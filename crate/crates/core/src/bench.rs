//! Wall-time and transient-memory benchmark of the samplers.

use std::alloc::{GlobalAlloc, Layout, System};
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::sampling::{sample_dfps, sample_featfps, sample_random, sample_topk_foreground, ForegroundScores};

/// Allocator wrapper tracking live and peak bytes. Register it with `#[global_allocator]`
/// in a binary to get measured memory columns.
pub struct CountingAlloc;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
            ACTIVE.store(true, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

impl CountingAlloc {
    pub fn is_active() -> bool {
        ACTIVE.load(Ordering::Relaxed)
    }

    fn reset_peak() -> usize {
        let live = LIVE.load(Ordering::Relaxed);
        PEAK.store(live, Ordering::Relaxed);
        live
    }

    fn peak() -> usize {
        PEAK.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Random,
    Dfps,
    FeatFps,
    TopK,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Random, Method::Dfps, Method::FeatFps, Method::TopK];

    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Dfps => "dfps",
            Method::FeatFps => "featfps",
            Method::TopK => "topk",
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sampling method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub method: Method,
    pub points: usize,
    pub median_ms: f64,
    pub peak_bytes: usize,
    /// True when `peak_bytes` was measured by [`CountingAlloc`] rather than estimated.
    pub measured: bool,
}

pub const BENCH_HEADER: &str = "method,points,median_ms,peak_bytes,measured";

/// Feature width of the benchmark clouds.
pub const BENCH_FEATS: usize = 16;
pub const MIN_REPEATS: usize = 5;

/// Lower bound on the transient bytes a method needs for `n` points and `k` samples.
pub fn memory_estimate(m: Method, n: usize, k: usize) -> usize {
    let w = std::mem::size_of::<usize>();
    match m {
        Method::Random => k * w,
        Method::Dfps | Method::FeatFps => n * 8 + k * w,
        Method::TopK => n * w + k * w,
    }
}

/// Each sampler keeps a quarter of the points.
pub fn bench_cloud(n: usize, seed: u64) -> (PointCloud, ForegroundScores) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = Array2::from_shape_fn((n, 3), |(_, c)| match c {
        0 => rng.gen_range(0.0..70.4),
        1 => rng.gen_range(-40.0..40.0),
        _ => rng.gen_range(-3.0..1.0),
    });
    let feats = Array2::from_shape_simple_fn((n, BENCH_FEATS), || rng.gen_range(-1.0..1.0));
    let scores = ForegroundScores { scores: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect() };
    (PointCloud::new(coords, feats).expect("matching rows"), scores)
}

fn run_once(m: Method, cloud: &PointCloud, scores: &ForegroundScores, k: usize, seed: u64) -> Result<usize> {
    let r = match m {
        Method::Random => sample_random(cloud.len(), k, seed),
        Method::Dfps => sample_dfps(cloud, k, 0)?,
        Method::FeatFps => sample_featfps(cloud, k, 0)?,
        Method::TopK => sample_topk_foreground(scores, k),
    };
    Ok(r.indices.len())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median wall time over `repeats` (at least five) runs per method and count, single-threaded.
/// Rows are sorted by count, then method.
pub fn sampling_benchmark(counts: &[usize], methods: &[Method], repeats: usize, seed: u64) -> Result<Vec<BenchmarkRow>> {
    if counts.contains(&0) {
        return Err(Error::InvalidArgument("point counts must be positive".into()));
    }
    let repeats = repeats.max(MIN_REPEATS);
    let mut ms: Vec<Method> = methods.to_vec();
    ms.sort();
    ms.dedup();
    let mut counts = counts.to_vec();
    counts.sort_unstable();
    let mut rows = Vec::new();
    for &n in &counts {
        let (cloud, scores) = bench_cloud(n, seed);
        let k = (n / 4).max(1);
        for &m in &ms {
            let mut times = Vec::with_capacity(repeats);
            let mut peak = 0;
            for _ in 0..repeats {
                let base = CountingAlloc::reset_peak();
                let t = Instant::now();
                std::hint::black_box(run_once(m, &cloud, &scores, k, seed)?);
                times.push(t.elapsed().as_secs_f64() * 1e3);
                peak = peak.max(CountingAlloc::peak().saturating_sub(base));
            }
            let measured = CountingAlloc::is_active();
            rows.push(BenchmarkRow {
                method: m,
                points: n,
                median_ms: median(times),
                peak_bytes: if measured { peak } else { memory_estimate(m, n, k) },
                measured,
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchmarkRow], out: &mut W) -> Result<()> {
    writeln!(out, "{BENCH_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{:.6},{},{}", r.method.name(), r.points, r.median_ms, r.peak_bytes, r.measured)?;
    }
    Ok(())
}
