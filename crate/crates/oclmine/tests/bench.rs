mod common;

use std::time::Duration;

use common::{serial, stub_path, Stub};
use oclmine::bench::{
    run_grid, summarize, write_raw, write_reports, Algo, Backend, BenchOptions, GridSpec, Metric,
    Status, TimingRecord,
};
use oclmine::oclloader::OpenCl;
use oclmine::parbackend::WorkerPool;

fn small_grid(seed: u64) -> GridSpec {
    GridSpec { features: vec![1, 2], clusters: vec![2, 3], sizes: vec![24], passes: 2, seed }
}

fn record(tuple: usize, pass: usize, wall_ns: u64, status: Status) -> TimingRecord {
    TimingRecord {
        tuple,
        pass,
        backend: Backend::Multi,
        algo: Algo::Dbscan,
        wall_ns,
        setup_ns: 10,
        teardown_ns: 5,
        span_ns: wall_ns + 15,
        status,
        verify: Some(true),
        detail: None,
    }
}

fn wall_summary(walls: &[u64]) -> oclmine_core::stats::Summary {
    let spec = small_grid(1);
    let records: Vec<_> =
        walls.iter().enumerate().map(|(i, &w)| record(0, i, w, Status::Completed)).collect();
    let rows = summarize(&spec, &records).unwrap();
    rows.iter().find(|r| r.metric == Metric::Wall).unwrap().stats
}

#[test]
fn medians_of_odd_and_even_samples() {
    assert_eq!(wall_summary(&[5, 1, 3, 2, 4]).median, 3.0);
    assert_eq!(wall_summary(&[4, 1, 3, 2]).median, 2.5);
}

// expected values computed with numpy.percentile (linear interpolation)
#[test]
fn quartiles_match_numpy_percentile() {
    let fixtures: [(&[u64], [f64; 5]); 2] = [
        (&[7, 1, 9, 3, 3, 12, 5], [1.0, 3.0, 5.0, 8.0, 12.0]),
        (
            &[
                94545, 62884, 68733, 89824, 58250, 77792, 83531, 23295, 6497, 30716, 29221, 87481,
                91349,
            ],
            [6497.0, 30716.0, 68733.0, 87481.0, 94545.0],
        ),
    ];
    for (walls, [min, q1, median, q3, max]) in fixtures {
        let s = wall_summary(walls);
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (min, q1, median, q3, max));
        assert_eq!(s.count, walls.len());
    }
    let s = oclmine_core::stats::Summary::of(&[10.5, 2.25, 8.0, 4.75, 6.5, 1.0, 3.3, 9.9]).unwrap();
    assert!((s.q1 - 3.0374999999999996).abs() < 1e-12);
    assert_eq!(s.median, 5.625);
    assert!((s.q3 - 8.475).abs() < 1e-12);
}

#[test]
fn summary_skips_unfinished_runs_and_counts_mismatches() {
    let spec = small_grid(1);
    let mut records = vec![
        record(0, 0, 100, Status::Completed),
        record(0, 1, 200, Status::Completed),
        record(0, 2, 1_000_000, Status::Aborted),
        record(0, 3, 0, Status::Error),
    ];
    records[1].verify = Some(false);
    let rows = summarize(&spec, &records).unwrap();
    assert_eq!(rows.len(), 2);
    let wall = rows.iter().find(|r| r.metric == Metric::Wall).unwrap();
    assert_eq!((wall.stats.count, wall.stats.max), (2, 200.0));
    assert_eq!(wall.verify_failures, 1);
    let setup = rows.iter().find(|r| r.metric == Metric::Setup).unwrap();
    assert_eq!(setup.stats.median, 15.0);
    assert!(summarize(&spec, &[]).is_err());
}

#[test]
fn whiskers_stop_at_one_and_a_half_iqr() {
    let spec = small_grid(1);
    let records: Vec<_> = [1, 2, 3, 4, 100]
        .iter()
        .enumerate()
        .map(|(i, &w)| record(0, i, w, Status::Completed))
        .collect();
    let rows = summarize(&spec, &records).unwrap();
    let wall = rows.iter().find(|r| r.metric == Metric::Wall).unwrap();
    assert_eq!(wall.whiskers(), (1.0, 4.0));
    assert_eq!(wall.outliers(), vec![100.0]);
}

#[test]
fn raw_csv_schema() {
    let mut records = vec![record(0, 0, 7, Status::Completed), record(0, 1, 8, Status::Aborted)];
    records[1].verify = None;
    let mut out = Vec::new();
    write_raw(&mut out, &records).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "tuple,pass,backend,algo,wall_ns,setup_ns,status,verify");
    assert_eq!(lines[1], "0,0,multi,dbscan,7,15,completed,true");
    assert_eq!(lines[2], "0,1,multi,dbscan,8,15,aborted,na");
}

fn without_timing(raw: &str) -> Vec<String> {
    raw.lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            [f[0], f[1], f[2], f[3], f[6], f[7]].join(",")
        })
        .collect()
}

fn opts(cl: Option<&OpenCl>) -> BenchOptions<'_> {
    BenchOptions {
        backends: Backend::ALL.to_vec(),
        pool: WorkerPool::new(3).unwrap(),
        opencl: cl,
        ..BenchOptions::default()
    }
}

#[test]
fn sweep_is_reproducible_and_verified() {
    let _turn = serial();
    let _stub = Stub::open();
    let cl = OpenCl::new();
    cl.load(stub_path()).unwrap();
    let spec = small_grid(42);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut raws = Vec::new();
    for dir in &dirs {
        let mut seen = 0;
        let records = run_grid(&spec, &opts(Some(&cl)), |_| seen += 1, |w| panic!("{w}")).unwrap();
        assert_eq!(seen, records.len());
        assert_eq!(records.len(), 4 * 2 * 3 * 2);
        for r in &records {
            assert_eq!(r.status, Status::Completed, "{r:?}");
            assert_eq!(r.verify, Some(true), "{r:?}");
            assert!(r.accounting_holds(), "{r:?}");
        }
        write_reports(dir.path(), &spec, &records).unwrap();
        raws.push(std::fs::read_to_string(dir.path().join("raw.csv")).unwrap());
        for file in ["summary.csv", "boxplot.csv"] {
            assert!(dir.path().join(file).exists());
        }
    }
    assert_eq!(without_timing(&raws[0]), without_timing(&raws[1]));

    // a different master seed changes the execution order
    let other = run_grid(&small_grid(43), &opts(Some(&cl)), |_| {}, |_| {}).unwrap();
    let order = |recs: &[TimingRecord]| -> Vec<(Backend, Algo)> {
        recs.iter().map(|r| (r.backend, r.algo)).collect()
    };
    let first = run_grid(&spec, &opts(Some(&cl)), |_| {}, |_| {}).unwrap();
    assert_ne!(order(&first), order(&other));
}

#[test]
fn gpu_without_a_library_is_an_error_row() {
    let spec =
        GridSpec { features: vec![1], clusters: vec![2], sizes: vec![16], passes: 1, seed: 3 };
    let records = run_grid(&spec, &opts(None), |_| {}, |_| {}).unwrap();
    for r in records.iter().filter(|r| r.backend == Backend::Gpu) {
        assert_eq!(r.status, Status::Error);
        assert_eq!(r.verify, None);
        assert!(r.detail.is_some());
    }
    for r in records.iter().filter(|r| r.backend != Backend::Gpu) {
        assert_eq!(r.status, Status::Completed);
        assert_eq!(r.verify, Some(true));
    }
}

#[test]
fn cancel_after_marks_runs_aborted() {
    let spec =
        GridSpec { features: vec![4], clusters: vec![8], sizes: vec![256], passes: 1, seed: 5 };
    let opts = BenchOptions {
        backends: vec![Backend::Single, Backend::Multi],
        pool: WorkerPool::new(2).unwrap(),
        cancel_after: Some(Duration::ZERO),
        ..BenchOptions::default()
    };
    let records = run_grid(&spec, &opts, |_| {}, |_| {}).unwrap();
    assert!(records.iter().any(|r| r.status == Status::Aborted));
    for r in &records {
        assert_ne!(r.status, Status::Error, "{r:?}");
        assert!(r.accounting_holds());
        if r.status == Status::Aborted {
            assert_eq!(r.verify, None);
        }
    }
}

#[test]
fn invalid_grids_are_rejected() {
    let mut spec = small_grid(1);
    spec.passes = 0;
    assert!(run_grid(&spec, &BenchOptions::default(), |_| {}, |_| {}).is_err());
    let spec = small_grid(1);
    let none = BenchOptions { backends: Vec::new(), ..BenchOptions::default() };
    assert!(run_grid(&spec, &none, |_| {}, |_| {}).is_err());
}
