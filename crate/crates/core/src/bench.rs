//! Wall-time scaling of softmax attention, efficient attention and MSLA.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{
    efficient_attention, efficient_attention_macs, softmax_attention, softmax_attention_macs, Msla, MslaConfig,
};
use crate::autodiff::{square_side, Graph, Mode};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub const MIN_REPS: usize = 9;
pub const DEFAULT_CHANNELS: usize = 64;
pub const DEFAULT_SIZES: [usize; 3] = [1024, 2304, 4096];
pub const CSV_HEADER: &str = "mechanism,N,C,median_ms,flops,peak_bytes";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Softmax,
    Efficient,
    Msla,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Softmax, Mechanism::Efficient, Mechanism::Msla];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Softmax => "softmax",
            Mechanism::Efficient => "efficient",
            Mechanism::Msla => "msla",
        }
    }

    /// Analytic multiply-accumulates at `n` tokens of width `c`.
    pub fn flops(self, n: usize, c: usize) -> Result<u64> {
        Ok(match self {
            Mechanism::Softmax => softmax_attention_macs(n, c),
            Mechanism::Efficient => efficient_attention_macs(n, c),
            Mechanism::Msla => {
                let side = square_side(n)?;
                msla_module(c)?.macs(side, side)
            }
        })
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mechanism {s:?} (softmax, efficient, msla)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mechanism: Mechanism,
    pub n: usize,
    pub c: usize,
    /// `None` when the row could not run (see `error`).
    pub median_ms: Option<f64>,
    pub flops: u64,
    pub peak_bytes: usize,
    pub error: Option<String>,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        let t = self.median_ms.map_or_else(|| "nan".to_string(), |t| format!("{t:.4}"));
        format!("{},{},{},{t},{},{}", self.mechanism, self.n, self.c, self.flops, self.peak_bytes)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    pub fn row(&self, m: Mechanism, n: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mechanism == m && r.n == n)
    }

    /// `median(n_hi) / median(n_lo)` for one mechanism.
    pub fn time_ratio(&self, m: Mechanism, n_lo: usize, n_hi: usize) -> Option<f64> {
        Some(self.row(m, n_hi)?.median_ms? / self.row(m, n_lo)?.median_ms?)
    }

    /// Whether measured times never decrease with `N` for every mechanism.
    pub fn monotone(&self) -> bool {
        Mechanism::ALL.iter().all(|&m| {
            let mut rows: Vec<_> =
                self.rows.iter().filter(|r| r.mechanism == m).filter_map(|r| Some((r.n, r.median_ms?))).collect();
            rows.sort_by_key(|r| r.0);
            rows.windows(2).all(|w| w[1].1 >= w[0].1)
        })
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub mechanisms: Vec<Mechanism>,
    pub sizes: Vec<usize>,
    pub channels: usize,
    pub reps: usize,
    pub seed: u64,
    /// Worker threads for the kernels; 1 pins the run to a single thread.
    pub threads: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            mechanisms: Mechanism::ALL.to_vec(),
            sizes: DEFAULT_SIZES.to_vec(),
            channels: DEFAULT_CHANNELS,
            reps: MIN_REPS,
            seed: 0,
            threads: 1,
        }
    }
}

fn msla_module(c: usize) -> Result<Msla> {
    Msla::new("bench.msla".into(), MslaConfig::with_default_kernels(c, (c / 4).max(1))?)
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Stops glibc from returning freed buffers to the OS between repetitions,
/// so timings measure compute rather than page faults on fresh memory.
/// Process-wide and idempotent.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
pub fn retain_heap() {
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
pub fn retain_heap() {}

fn reserve_check(bytes: usize) -> Result<()> {
    let mut probe: Vec<u8> = Vec::new();
    probe.try_reserve_exact(bytes).map_err(|e| Error::Contract(format!("cannot allocate {bytes} bytes: {e}")))
}

fn run_row(m: Mechanism, n: usize, c: usize, reps: usize, seed: u64) -> Result<BenchRow> {
    let flops = m.flops(n, c)?;
    if m == Mechanism::Softmax {
        reserve_check(3 * n * n * std::mem::size_of::<f32>())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64);
    let (q, k, v) = (gaussian(&[1, n, c], &mut rng), gaussian(&[1, n, c], &mut rng), gaussian(&[1, n, c], &mut rng));
    let (module, store) = if m == Mechanism::Msla {
        let module = msla_module(c)?;
        let mut store = ParamStore::new();
        module.init(&mut store, &mut Init::new(seed));
        (Some(module), store)
    } else {
        (None, ParamStore::new())
    };
    let once = || -> Result<usize> {
        let mut g = Graph::inference(Mode::Eval);
        let qv = g.constant(q.clone());
        match m {
            Mechanism::Msla => {
                module.as_ref().expect("msla module").forward(&mut g, &store, qv)?;
            }
            _ => {
                let kv = g.constant(k.clone());
                let vv = g.constant(v.clone());
                if m == Mechanism::Softmax {
                    softmax_attention(&mut g, qv, kv, vv)?;
                } else {
                    efficient_attention(&mut g, qv, kv, vv)?;
                }
            }
        }
        Ok(g.live_bytes())
    };
    let peak_bytes = once()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        once()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchRow { mechanism: m, n, c, median_ms: Some(median(&mut times)), flops, peak_bytes, error: None })
}

/// Runs every `(mechanism, N)` pair: one warm-up, then `reps` timed runs.
/// A row that fails (for example an allocation the softmax baseline cannot
/// make) is reported with its error and the run continues.
pub fn bench_attention(opts: &BenchOptions) -> Result<BenchReport> {
    if opts.reps < MIN_REPS {
        return Err(Error::Config(format!("at least {MIN_REPS} repetitions are required, got {}", opts.reps)));
    }
    if opts.channels == 0 || opts.sizes.is_empty() || opts.sizes.contains(&0) {
        return Err(Error::Config("sizes and channels must be positive".into()));
    }
    if opts.mechanisms.contains(&Mechanism::Msla) {
        for &n in &opts.sizes {
            square_side(n).map_err(|_| Error::Config(format!("msla needs square token counts, got {n}")))?;
        }
    }
    retain_heap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut report = BenchReport::default();
        for &m in &opts.mechanisms {
            for &n in &opts.sizes {
                let row = run_row(m, n, opts.channels, opts.reps, opts.seed).unwrap_or_else(|e| BenchRow {
                    mechanism: m,
                    n,
                    c: opts.channels,
                    median_ms: None,
                    flops: m.flops(n, opts.channels).unwrap_or(0),
                    peak_bytes: 0,
                    error: Some(e.to_string()),
                });
                report.rows.push(row);
            }
        }
        Ok(report)
    })
}
