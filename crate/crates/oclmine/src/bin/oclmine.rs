use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};

use oclmine::bench::{
    self, parse_backends, parse_list, parse_sizes, Backend, BenchOptions, GridSpec, Status,
};
use oclmine::concur::CancellationToken;
use oclmine::gpubackend::{
    dbscan_gpu, kmeans_gpu, GpuContext, GpuOptions, KernelSourceBundle, Program,
};
use oclmine::oclloader::{OpenCl, LIB_PATH_ENV};
use oclmine::parbackend::{dbscan_parallel, default_workers, kmeans_parallel, WorkerPool};
use oclmine_core::{
    dbscan_single, generate, kmeans_single, Dataset, DatasetSpec, DbscanParams, KmeansInit,
    KmeansParams,
};

#[derive(Parser)]
#[command(
    name = "oclmine",
    version,
    about = "DBSCAN and Kmeans on threads and OpenCL, with a timing sweep"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep the experiment grid and write raw.csv, summary.csv, boxplot.csv.
    Bench(BenchArgs),
    /// Write one synthetic Gaussian-blob dataset as CSV.
    Gen(GenArgs),
    /// Cluster a CSV dataset with one backend and write its labels.
    Cluster(ClusterArgs),
}

#[derive(Args)]
struct OpenClArgs {
    /// OpenCL library to load (default: $OPENCL_LIB_PATH, then the usual
    /// system locations).
    #[arg(long, value_name = "PATH")]
    opencl_lib: Option<PathBuf>,
    /// Accept a non-GPU OpenCL device when no GPU is present.
    #[arg(long)]
    allow_cpu_device: bool,
    /// Directory holding kmeans_assign.cl, dbscan_main.cl, dbscan_expand.cl
    /// (default: the sources built into the binary).
    #[arg(long, value_name = "DIR")]
    kernels: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "1,2,4", value_parser = parse_list)]
    features: ::std::vec::Vec<usize>,
    #[arg(long, default_value = "2,4,6,8", value_parser = parse_list)]
    clusters: ::std::vec::Vec<usize>,
    /// Points per cluster: a list, or `a..b` for a, 2a, 4a, ... up to b.
    #[arg(long, default_value = "128..2048", value_parser = parse_sizes)]
    sizes: ::std::vec::Vec<usize>,
    #[arg(long, default_value_t = bench::DEFAULT_PASSES)]
    passes: usize,
    #[arg(long, default_value = "single,multi,gpu", value_parser = parse_backends)]
    backends: ::std::vec::Vec<Backend>,
    /// Worker threads per set (default: hardware threads minus one).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = bench::DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    /// Cancel every run this many milliseconds after it starts.
    #[arg(long, value_name = "MS")]
    cancel_after: Option<u64>,
    #[command(flatten)]
    opencl: OpenClArgs,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 2)]
    features: usize,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    /// Points per cluster.
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = bench::DEFAULT_SEED)]
    seed: u64,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Dbscan,
    Kmeans,
}

#[derive(Args)]
struct ClusterArgs {
    /// CSV with a header; every column except `gen_label` is a feature.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    algo: AlgoArg,
    #[arg(long, default_value = "single")]
    backend: Backend,
    /// Kmeans cluster count.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Kmeans initialisation seed.
    #[arg(long, default_value_t = bench::DEFAULT_SEED)]
    seed: u64,
    /// DBSCAN radius (default: square root of the feature count).
    #[arg(long)]
    eps: Option<f32>,
    /// DBSCAN core threshold (default: 10 per feature).
    #[arg(long)]
    min_pts: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    opencl: OpenClArgs,
}

type AnyError = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench(args) => run_bench(args),
        Command::Gen(args) => run_gen(args).map(|()| ExitCode::SUCCESS),
        Command::Cluster(args) => run_cluster(args).map(|()| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn pool(workers: Option<usize>) -> Result<WorkerPool, AnyError> {
    let n = workers.unwrap_or_else(default_workers);
    WorkerPool::new(n).ok_or_else(|| "--workers must be at least 1".into())
}

fn load_opencl(args: &OpenClArgs) -> Result<PathBuf, AnyError> {
    let cl = OpenCl::global();
    match &args.opencl_lib {
        Some(path) => {
            cl.load(path)?;
            Ok(path.clone())
        }
        None => Ok(cl.load_default()?),
    }
}

fn kernels(args: &OpenClArgs) -> Result<KernelSourceBundle, AnyError> {
    match &args.kernels {
        Some(dir) => KernelSourceBundle::from_dir(dir)
            .map_err(|e| format!("cannot read kernels from {}: {e}", dir.display()).into()),
        None => Ok(KernelSourceBundle::embedded()),
    }
}

fn run_bench(args: BenchArgs) -> Result<ExitCode, AnyError> {
    let spec = GridSpec {
        features: args.features,
        clusters: args.clusters,
        sizes: args.sizes,
        passes: args.passes,
        seed: args.seed,
    };
    spec.validate()?;
    let mut backends = args.backends;
    let mut opencl = None;
    if backends.contains(&Backend::Gpu) {
        match load_opencl(&args.opencl) {
            Ok(path) => {
                eprintln!("OpenCL library: {}", path.display());
                opencl = Some(OpenCl::global());
            }
            Err(e)
                if args.opencl.opencl_lib.is_none() && std::env::var_os(LIB_PATH_ENV).is_none() =>
            {
                eprintln!("warning: {e}; skipping the gpu backend");
                backends.retain(|&b| b != Backend::Gpu);
            }
            Err(e) => return Err(e),
        }
    }
    if backends.is_empty() {
        return Err("no backend left to run".into());
    }
    let opts = BenchOptions {
        backends,
        pool: pool(args.workers)?,
        opencl,
        kernels: kernels(&args.opencl)?,
        allow_cpu_device: args.opencl.allow_cpu_device,
        cancel_after: args.cancel_after.map(Duration::from_millis),
    };

    let tuples = spec.tuples();
    let per_tuple = spec.passes * opts.backends.len() * 2;
    let started = Instant::now();
    let mut done = 0usize;
    let mut errors = 0usize;
    let records = bench::run_grid(
        &spec,
        &opts,
        |r| {
            done += 1;
            if r.status == Status::Error {
                errors += 1;
                if errors <= 5 {
                    let detail = r.detail.as_deref().unwrap_or("unknown failure");
                    eprintln!(
                        "tuple {} pass {} {}/{}: {detail}",
                        r.tuple, r.pass, r.backend, r.algo
                    );
                }
            }
            if done.is_multiple_of(per_tuple) {
                let t = tuples[r.tuple];
                eprintln!(
                    "[{:>3}/{}] d={} c={} s={} done ({:.1} s)",
                    r.tuple + 1,
                    tuples.len(),
                    t.features,
                    t.clusters,
                    t.size,
                    started.elapsed().as_secs_f64()
                );
            }
        },
        |w| eprintln!("warning: {w}"),
    )?;

    let rows = bench::write_reports(&args.out, &spec, &records).or_else(|e| match e {
        bench::BenchError::Empty => Ok(Vec::new()),
        e => Err(e),
    })?;
    let count = |s: Status| records.iter().filter(|r| r.status == s).count();
    let mismatches = records.iter().filter(|r| r.verify == Some(false)).count();
    eprintln!(
        "{} records ({} completed, {} aborted, {} errors), {} summary rows, written to {}",
        records.len(),
        count(Status::Completed),
        count(Status::Aborted),
        count(Status::Error),
        rows.len(),
        args.out.display()
    );
    if mismatches > 0 {
        eprintln!("error: {mismatches} runs disagree with the single-threaded labels");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, AnyError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run_gen(args: GenArgs) -> Result<(), AnyError> {
    let spec = DatasetSpec::uniform(args.features, args.clusters, args.size, args.seed);
    let generated = generate(&spec)?;
    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    let mut header: Vec<String> = (0..args.features).map(|f| format!("x{f}")).collect();
    header.push("gen_label".to_owned());
    w.write_record(&header)?;
    for (row, label) in generated.dataset.rows().zip(&generated.truth.0) {
        let mut fields: Vec<String> = row.iter().map(f32::to_string).collect();
        fields.push(label.to_string());
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

fn read_dataset(path: &Path) -> Result<Dataset, AnyError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let keep: Vec<usize> = (0..headers.len())
        .filter(|&i| !matches!(headers[i].trim(), "gen_label" | "label"))
        .collect();
    let mut data = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        for &i in &keep {
            let field = record.get(i).unwrap_or("").trim();
            let v: f32 = field
                .parse()
                .map_err(|e| format!("row {}, column {}: '{field}': {e}", line + 1, &headers[i]))?;
            data.push(v);
        }
    }
    Ok(Dataset::new(data, keep.len())?)
}

fn run_cluster(args: ClusterArgs) -> Result<(), AnyError> {
    let ds = read_dataset(&args.input)?;
    let token = CancellationToken::new();
    let mut dp = DbscanParams::derive(ds.features());
    if let Some(eps) = args.eps {
        dp.eps = eps;
    }
    if let Some(m) = args.min_pts {
        dp.min_pts = m;
    }
    let kp = KmeansParams::new(args.k);
    let init = KmeansInit::Seed(args.seed);

    let labels: Vec<u16> = match args.backend {
        Backend::Single => match args.algo {
            AlgoArg::Dbscan => dbscan_single(&ds, &dp, &token)?,
            AlgoArg::Kmeans => kmeans_single(&ds, &kp, &init, &token)?.labels,
        },
        Backend::Multi => {
            let pool = pool(args.workers)?;
            match args.algo {
                AlgoArg::Dbscan => dbscan_parallel(&ds, &dp, &token, &pool).value?,
                AlgoArg::Kmeans => kmeans_parallel(&ds, &kp, &init, &token, &pool).value?.labels,
            }
        }
        Backend::Gpu => {
            load_opencl(&args.opencl)?;
            let programs = match args.algo {
                AlgoArg::Dbscan => Program::DBSCAN,
                AlgoArg::Kmeans => Program::KMEANS,
            };
            let opts = GpuOptions {
                allow_cpu_device: args.opencl.allow_cpu_device,
                programs: programs.to_vec(),
            };
            let mut ctx = GpuContext::setup(OpenCl::global(), &kernels(&args.opencl)?, &opts)?;
            let labels = match args.algo {
                AlgoArg::Dbscan => dbscan_gpu(&mut ctx, &ds, &dp, &token)?,
                AlgoArg::Kmeans => kmeans_gpu(&mut ctx, &ds, &kp, &init, &token)?.labels,
            };
            ctx.teardown()?;
            labels
        }
    };

    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    w.write_record(["point_index", "label"])?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
