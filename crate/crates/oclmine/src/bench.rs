//! The benchmark sweep.
//!
//! For every grid tuple and pass one dataset is generated, then every
//! (backend, algorithm) method runs on it once, in an order shuffled per pass.
//! Runs are strictly sequential. Each run yields one [`TimingRecord`]; after
//! all methods of a pass have run, labels are compared with the
//! single-threaded backend's.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use oclmine_core::seed::derive;
use oclmine_core::stats::Summary;
use oclmine_core::{
    dbscan_single, generate, kmeans_single, ClusterError, DataError, Dataset, DatasetSpec,
    DbscanParams, KmeansInit, KmeansParams,
};

use crate::concur::CancellationToken;
use crate::gpubackend::{
    dbscan_gpu, kmeans_gpu, GpuContext, GpuOptions, KernelSourceBundle, Program,
};
use crate::oclloader::OpenCl;
use crate::parbackend::{dbscan_parallel, kmeans_parallel, WorkerPool};
use crate::timing::Intervals;

pub const DEFAULT_FEATURES: &[usize] = &[1, 2, 4];
pub const DEFAULT_CLUSTERS: &[usize] = &[2, 4, 6, 8];
pub const DEFAULT_SIZES: &[usize] = &[128, 256, 512, 1024, 2048];
pub const DEFAULT_PASSES: usize = 70;
pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("cannot generate dataset for tuple {tuple}: {source}")]
    Data { tuple: usize, source: DataError },
    #[error("label arrays differ in length ({reference} vs {candidate})")]
    LengthMismatch { reference: usize, candidate: usize },
    #[error("no records to summarize")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name { $($variant),* }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),*];

            pub const fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),* }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s.trim() {
                    $($text => Ok($name::$variant),)*
                    other => Err(format!(
                        "unknown {} '{other}' (expected one of: {})",
                        stringify!($name).to_lowercase(),
                        [$($text),*].join(", ")
                    )),
                }
            }
        }
    };
}

named_enum!(Backend { Single => "single", Multi => "multi", Gpu => "gpu" });
named_enum!(Algo { Dbscan => "dbscan", Kmeans => "kmeans" });
named_enum!(Status { Completed => "completed", Aborted => "aborted", Error => "error" });

/// One point of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tuple {
    pub id: usize,
    pub features: usize,
    pub clusters: usize,
    pub size: usize,
}

impl Tuple {
    pub fn points(&self) -> usize {
        self.clusters * self.size
    }
}

/// The experiment grid: every combination of feature count, cluster count
/// and cluster size, each run for `passes` passes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    pub features: Vec<usize>,
    pub clusters: Vec<usize>,
    pub sizes: Vec<usize>,
    pub passes: usize,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            features: DEFAULT_FEATURES.to_vec(),
            clusters: DEFAULT_CLUSTERS.to_vec(),
            sizes: DEFAULT_SIZES.to_vec(),
            passes: DEFAULT_PASSES,
            seed: DEFAULT_SEED,
        }
    }
}

impl GridSpec {
    /// Tuples with features varying slowest and sizes fastest.
    pub fn tuples(&self) -> Vec<Tuple> {
        let mut out = Vec::new();
        for &features in &self.features {
            for &clusters in &self.clusters {
                for &size in &self.sizes {
                    out.push(Tuple { id: out.len(), features, clusters, size });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Grid(m.to_owned()));
        if self.features.is_empty() || self.clusters.is_empty() || self.sizes.is_empty() {
            return bad("every dimension needs at least one value");
        }
        if self.passes == 0 {
            return bad("passes must be at least 1");
        }
        if self.features.iter().any(|&d| d == 0 || d > oclmine_core::dataset::MAX_FEATURES) {
            return bad("feature counts must be in 1..=64");
        }
        if self.clusters.contains(&0) || self.sizes.contains(&0) {
            return bad("cluster counts and sizes must be positive");
        }
        if self.clusters.iter().any(|&c| c > usize::from(u16::MAX)) {
            return bad("cluster counts must fit the 16-bit label");
        }
        Ok(())
    }

    pub fn dataset_seed(&self, tuple: usize, pass: usize) -> u64 {
        derive(self.seed, &[tuple as u64, pass as u64, 0])
    }

    pub fn order_seed(&self, tuple: usize, pass: usize) -> u64 {
        derive(self.seed, &[tuple as u64, pass as u64, 1])
    }

    /// Kmeans initialisation seed, shared by all backends of a pass.
    pub fn init_seed(&self, tuple: usize, pass: usize) -> u64 {
        derive(self.seed, &[tuple as u64, pass as u64, 2])
    }
}

/// Parses `1,2,4`.
pub fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|part| part.trim().parse::<usize>().map_err(|e| format!("'{part}': {e}")))
        .collect()
}

/// Parses a list or a doubling range: `128..2048` is 128, 256, ..., 2048.
pub fn parse_sizes(s: &str) -> Result<Vec<usize>, String> {
    let Some((lo, hi)) = s.split_once("..") else {
        return parse_list(s);
    };
    let lo: usize = lo.trim().parse().map_err(|e| format!("'{lo}': {e}"))?;
    let hi: usize = hi.trim().parse().map_err(|e| format!("'{hi}': {e}"))?;
    if lo == 0 || lo > hi {
        return Err(format!("empty range {lo}..{hi}"));
    }
    let mut out = Vec::new();
    let mut v = lo;
    while v <= hi {
        out.push(v);
        v = v.checked_mul(2).ok_or("range overflows")?;
    }
    Ok(out)
}

/// Comma-separated backend names.
pub fn parse_backends(s: &str) -> Result<Vec<Backend>, String> {
    let mut out: Vec<Backend> = Vec::new();
    for part in s.split(',') {
        let b = part.parse()?;
        if !out.contains(&b) {
            out.push(b);
        }
    }
    Ok(out)
}

/// How the sweep runs its methods.
#[derive(Debug, Clone)]
pub struct BenchOptions<'cl> {
    pub backends: Vec<Backend>,
    pub pool: WorkerPool,
    /// Loaded OpenCL library; GPU runs fail with status `error` without one.
    pub opencl: Option<&'cl OpenCl>,
    pub kernels: KernelSourceBundle,
    pub allow_cpu_device: bool,
    /// Cancel every run this long after it starts.
    pub cancel_after: Option<Duration>,
}

impl Default for BenchOptions<'_> {
    fn default() -> Self {
        BenchOptions {
            backends: Backend::ALL.to_vec(),
            pool: WorkerPool::default(),
            opencl: None,
            kernels: KernelSourceBundle::embedded(),
            allow_cpu_device: false,
            cancel_after: None,
        }
    }
}

/// One run of one method.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimingRecord {
    pub tuple: usize,
    pub pass: usize,
    pub backend: Backend,
    pub algo: Algo,
    /// Algorithm time only.
    pub wall_ns: u64,
    pub setup_ns: u64,
    pub teardown_ns: u64,
    /// Whole measured interval, from before setup to after teardown.
    pub span_ns: u64,
    pub status: Status,
    /// Label equality with the single-threaded backend; `None` when there is
    /// nothing to compare.
    pub verify: Option<bool>,
    /// Error text for status `error`.
    pub detail: Option<String>,
}

impl TimingRecord {
    /// Setup plus teardown, the overhead interval reported next to wall time.
    pub fn overhead_ns(&self) -> u64 {
        self.setup_ns + self.teardown_ns
    }

    /// Whether the span splits exactly into setup, algorithm and teardown.
    pub fn accounting_holds(&self) -> bool {
        self.span_ns == self.setup_ns + self.wall_ns + self.teardown_ns
    }

    fn verify_str(&self) -> &'static str {
        match self.verify {
            Some(true) => "true",
            Some(false) => "false",
            None => "na",
        }
    }
}

/// Element-wise label equality.
pub fn verify_labels(reference: &[u16], candidate: &[u16]) -> Result<bool, BenchError> {
    if reference.len() != candidate.len() {
        return Err(BenchError::LengthMismatch {
            reference: reference.len(),
            candidate: candidate.len(),
        });
    }
    Ok(reference == candidate)
}

enum Outcome {
    Done(Vec<u16>),
    Aborted,
    Failed(String),
}

fn outcome<T, E: fmt::Display>(
    r: Result<T, ClusterError<E>>,
    labels: impl FnOnce(T) -> Vec<u16>,
) -> Outcome {
    match r {
        Ok(v) => Outcome::Done(labels(v)),
        Err(ClusterError::Aborted) => Outcome::Aborted,
        Err(e) => Outcome::Failed(e.to_string()),
    }
}

/// Cancels a token after a delay unless stopped first.
struct Watchdog {
    stop: Option<mpsc::Sender<()>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Watchdog {
    fn arm(token: &CancellationToken, after: Option<Duration>) -> Watchdog {
        let Some(after) = after else {
            return Watchdog { stop: None, handle: None };
        };
        let (tx, rx) = mpsc::channel::<()>();
        let token = token.clone();
        let handle = thread::spawn(move || {
            if rx.recv_timeout(after) == Err(mpsc::RecvTimeoutError::Timeout) {
                token.cancel();
            }
        });
        Watchdog { stop: Some(tx), handle: Some(handle) }
    }
}

impl Drop for Watchdog {
    fn drop(&mut self) {
        drop(self.stop.take());
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

struct Runner<'a, 'cl> {
    opts: &'a BenchOptions<'cl>,
    warnings: &'a mut dyn FnMut(String),
}

impl Runner<'_, '_> {
    fn run(
        &mut self,
        backend: Backend,
        algo: Algo,
        ds: &Dataset,
        k: usize,
        init_seed: u64,
        token: &CancellationToken,
    ) -> (Outcome, Intervals) {
        let dp = DbscanParams::derive(ds.features());
        let kp = KmeansParams::new(k);
        let init = KmeansInit::Seed(init_seed);
        match backend {
            Backend::Single => {
                let start = Instant::now();
                let out = match algo {
                    Algo::Dbscan => outcome(dbscan_single(ds, &dp, token), |l| l),
                    Algo::Kmeans => outcome(kmeans_single(ds, &kp, &init, token), |r| r.labels),
                };
                (out, Intervals::bare(start, Instant::now()))
            }
            Backend::Multi => {
                let pool = &self.opts.pool;
                match algo {
                    Algo::Dbscan => {
                        let run = dbscan_parallel(ds, &dp, token, pool);
                        (outcome(run.value, |l| l), run.intervals)
                    }
                    Algo::Kmeans => {
                        let run = kmeans_parallel(ds, &kp, &init, token, pool);
                        (outcome(run.value, |r| r.labels), run.intervals)
                    }
                }
            }
            Backend::Gpu => self.run_gpu(algo, ds, &dp, &kp, &init, token),
        }
    }

    fn run_gpu(
        &mut self,
        algo: Algo,
        ds: &Dataset,
        dp: &DbscanParams,
        kp: &KmeansParams,
        init: &KmeansInit,
        token: &CancellationToken,
    ) -> (Outcome, Intervals) {
        let start = Instant::now();
        let failed_setup = |msg: String| {
            let now = Instant::now();
            (Outcome::Failed(msg), Intervals { start, ready: now, done: now, end: now })
        };
        let Some(cl) = self.opts.opencl else {
            return failed_setup("OpenCL library not loaded".to_owned());
        };
        let programs = match algo {
            Algo::Dbscan => Program::DBSCAN,
            Algo::Kmeans => Program::KMEANS,
        };
        let gpu_opts = GpuOptions {
            allow_cpu_device: self.opts.allow_cpu_device,
            programs: programs.to_vec(),
        };
        let mut ctx = match GpuContext::setup(cl, &self.opts.kernels, &gpu_opts) {
            Ok(ctx) => ctx,
            Err(e) => return failed_setup(e.to_string()),
        };
        let k = match algo {
            Algo::Dbscan => 1,
            Algo::Kmeans => kp.k,
        };
        let bound = ctx.bind(ds, k);
        let ready = Instant::now();
        let out = match bound {
            Err(e) => Outcome::Failed(e.to_string()),
            Ok(()) => match algo {
                Algo::Dbscan => outcome(dbscan_gpu(&mut ctx, ds, dp, token), |l| l),
                Algo::Kmeans => outcome(kmeans_gpu(&mut ctx, ds, kp, init, token), |r| r.labels),
            },
        };
        let done = Instant::now();
        // teardown cannot fail on a live context
        let _ = ctx.teardown();
        let end = Instant::now();
        for (call, code) in ctx.release_failures() {
            (self.warnings)(format!("{call} failed with code {code} during teardown"));
        }
        (out, Intervals { start, ready, done, end })
    }
}

/// Runs the whole sweep, handing each record to `sink` as soon as it is
/// final (after its pass is verified) and warnings to `warn`.
pub fn run_grid(
    spec: &GridSpec,
    opts: &BenchOptions<'_>,
    mut sink: impl FnMut(&TimingRecord),
    mut warn: impl FnMut(String),
) -> Result<Vec<TimingRecord>, BenchError> {
    spec.validate()?;
    if opts.backends.is_empty() {
        return Err(BenchError::Grid("no backends selected".to_owned()));
    }
    let mut runner = Runner { opts, warnings: &mut warn };
    let mut records = Vec::new();
    let methods: Vec<(Backend, Algo)> =
        opts.backends.iter().flat_map(|&b| Algo::ALL.iter().map(move |&a| (b, a))).collect();

    for tuple in spec.tuples() {
        for pass in 0..spec.passes {
            let data_spec = DatasetSpec::uniform(
                tuple.features,
                tuple.clusters,
                tuple.size,
                spec.dataset_seed(tuple.id, pass),
            );
            let ds = generate(&data_spec)
                .map_err(|source| BenchError::Data { tuple: tuple.id, source })?
                .dataset;
            let mut order = methods.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.order_seed(tuple.id, pass)));
            let init_seed = spec.init_seed(tuple.id, pass);

            let mut pass_records = Vec::with_capacity(order.len());
            let mut labels: BTreeMap<(Backend, Algo), Vec<u16>> = BTreeMap::new();
            for (backend, algo) in order {
                let token = CancellationToken::new();
                let (out, iv) = {
                    let _watchdog = Watchdog::arm(&token, opts.cancel_after);
                    runner.run(backend, algo, &ds, tuple.clusters, init_seed, &token)
                };
                let (status, detail) = match out {
                    Outcome::Done(l) => {
                        labels.insert((backend, algo), l);
                        (Status::Completed, None)
                    }
                    Outcome::Aborted => (Status::Aborted, None),
                    Outcome::Failed(msg) => (Status::Error, Some(msg)),
                };
                let (setup_ns, wall_ns, teardown_ns, span_ns) = iv.split_ns();
                pass_records.push(TimingRecord {
                    tuple: tuple.id,
                    pass,
                    backend,
                    algo,
                    wall_ns,
                    setup_ns,
                    teardown_ns,
                    span_ns,
                    status,
                    verify: None,
                    detail,
                });
            }

            for rec in &mut pass_records {
                let (Some(reference), Some(candidate)) = (
                    labels.get(&(Backend::Single, rec.algo)),
                    labels.get(&(rec.backend, rec.algo)),
                ) else {
                    continue;
                };
                match verify_labels(reference, candidate) {
                    Ok(same) => rec.verify = Some(same),
                    Err(e) => {
                        rec.verify = Some(false);
                        rec.status = Status::Error;
                        rec.detail = Some(e.to_string());
                    }
                }
            }
            for rec in pass_records {
                sink(&rec);
                records.push(rec);
            }
        }
    }
    Ok(records)
}

#[derive(Serialize)]
struct RawRow<'a> {
    tuple: usize,
    pass: usize,
    backend: &'a str,
    algo: &'a str,
    wall_ns: u64,
    setup_ns: u64,
    status: &'a str,
    verify: &'a str,
}

/// Writes `raw.csv`: one row per record, `setup_ns` carrying setup plus
/// teardown.
pub fn write_raw<W: io::Write>(out: W, records: &[TimingRecord]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(RawRow {
            tuple: r.tuple,
            pass: r.pass,
            backend: r.backend.as_str(),
            algo: r.algo.as_str(),
            wall_ns: r.wall_ns,
            setup_ns: r.overhead_ns(),
            status: r.status.as_str(),
            verify: r.verify_str(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Which interval a summary row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Wall,
    Setup,
}

impl Metric {
    pub const fn as_str(self) -> &'static str {
        match self {
            Metric::Wall => "wall_ns",
            Metric::Setup => "setup_ns",
        }
    }
}

/// Statistics of one (tuple, backend, algorithm, metric) group over its
/// completed records.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub tuple: Tuple,
    pub backend: Backend,
    pub algo: Algo,
    pub metric: Metric,
    pub stats: Summary,
    /// Records in the group with status `completed` and `verify` false.
    pub verify_failures: usize,
    sorted: Vec<f64>,
}

impl SummaryRow {
    /// Whisker ends: the most extreme values within 1.5 IQR of the quartiles.
    pub fn whiskers(&self) -> (f64, f64) {
        let reach = 1.5 * self.stats.iqr();
        let lo_fence = self.stats.q1 - reach;
        let hi_fence = self.stats.q3 + reach;
        let lo = self.sorted.iter().copied().find(|&v| v >= lo_fence).unwrap_or(self.stats.min);
        let hi =
            self.sorted.iter().rev().copied().find(|&v| v <= hi_fence).unwrap_or(self.stats.max);
        (lo, hi)
    }

    /// Values beyond the whiskers.
    pub fn outliers(&self) -> Vec<f64> {
        let (lo, hi) = self.whiskers();
        self.sorted.iter().copied().filter(|&v| v < lo || v > hi).collect()
    }
}

/// Groups completed records by tuple, backend and algorithm. Groups without
/// a completed record are left out.
pub fn summarize(spec: &GridSpec, records: &[TimingRecord]) -> Result<Vec<SummaryRow>, BenchError> {
    if records.is_empty() {
        return Err(BenchError::Empty);
    }
    let tuples = spec.tuples();
    let mut groups: BTreeMap<(usize, Backend, Algo), Vec<&TimingRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status == Status::Completed) {
        groups.entry((r.tuple, r.backend, r.algo)).or_default().push(r);
    }
    let mut rows = Vec::new();
    for ((tuple, backend, algo), group) in groups {
        let tuple = *tuples
            .get(tuple)
            .ok_or_else(|| BenchError::Grid(format!("record for unknown tuple {tuple}")))?;
        let verify_failures = group.iter().filter(|r| r.verify == Some(false)).count();
        for metric in [Metric::Wall, Metric::Setup] {
            let mut values: Vec<f64> = group
                .iter()
                .map(|r| match metric {
                    Metric::Wall => r.wall_ns as f64,
                    Metric::Setup => r.overhead_ns() as f64,
                })
                .collect();
            values.sort_by(f64::total_cmp);
            let stats = Summary::of(&values).expect("groups are non-empty");
            rows.push(SummaryRow {
                tuple,
                backend,
                algo,
                metric,
                stats,
                verify_failures,
                sorted: values,
            });
        }
    }
    Ok(rows)
}

#[derive(Serialize)]
struct SummaryCsvRow<'a> {
    tuple: usize,
    features: usize,
    clusters: usize,
    size: usize,
    backend: &'a str,
    algo: &'a str,
    metric: &'a str,
    count: usize,
    min: f64,
    q1: f64,
    median: f64,
    q3: f64,
    max: f64,
    verify_failures: usize,
}

pub fn write_summary<W: io::Write>(out: W, rows: &[SummaryRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(SummaryCsvRow {
            tuple: r.tuple.id,
            features: r.tuple.features,
            clusters: r.tuple.clusters,
            size: r.tuple.size,
            backend: r.backend.as_str(),
            algo: r.algo.as_str(),
            metric: r.metric.as_str(),
            count: r.stats.count,
            min: r.stats.min,
            q1: r.stats.q1,
            median: r.stats.median,
            q3: r.stats.q3,
            max: r.stats.max,
            verify_failures: r.verify_failures,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BoxplotRow<'a> {
    tuple: usize,
    backend: &'a str,
    algo: &'a str,
    metric: &'a str,
    whisker_low: f64,
    q1: f64,
    median: f64,
    q3: f64,
    whisker_high: f64,
    outliers: String,
}

/// Box-plot geometry per group; outliers are `;`-separated.
pub fn write_boxplot<W: io::Write>(out: W, rows: &[SummaryRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        let (lo, hi) = r.whiskers();
        let outliers: Vec<String> = r.outliers().iter().map(f64::to_string).collect();
        w.serialize(BoxplotRow {
            tuple: r.tuple.id,
            backend: r.backend.as_str(),
            algo: r.algo.as_str(),
            metric: r.metric.as_str(),
            whisker_low: lo,
            q1: r.stats.q1,
            median: r.stats.median,
            q3: r.stats.q3,
            whisker_high: hi,
            outliers: outliers.join(";"),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `raw.csv`, `summary.csv` and `boxplot.csv` into `dir`.
pub fn write_reports(
    dir: &Path,
    spec: &GridSpec,
    records: &[TimingRecord],
) -> Result<Vec<SummaryRow>, BenchError> {
    fs::create_dir_all(dir)?;
    write_raw(fs::File::create(dir.join("raw.csv"))?, records)?;
    let rows = summarize(spec, records)?;
    write_summary(fs::File::create(dir.join("summary.csv"))?, &rows)?;
    write_boxplot(fs::File::create(dir.join("boxplot.csv"))?, &rows)?;
    Ok(rows)
}
