mod common;

use std::cell::Cell;

use common::{
    serial, stub_path, Stub, KIND_CONTEXT, KIND_KERNEL, KIND_MEM, KIND_PROGRAM, KIND_QUEUE,
};
use oclmine::concur::CancellationToken;
use oclmine::gpubackend::{
    dbscan_gpu, kmeans_gpu, kmeans_gpu_with, GpuContext, GpuError, GpuOptions, KernelSourceBundle,
    Program,
};
use oclmine::oclloader::sys::{CL_DEVICE_NOT_FOUND, CL_DEVICE_TYPE_CPU, CL_DEVICE_TYPE_GPU};
use oclmine::oclloader::{OpenCl, NOT_LOADED};
use oclmine_core::kmeans::{initial_centers, lloyd, ScanAssigner};
use oclmine_core::{
    dbscan_single, generate, kmeans_single, Cancel, ClusterError, Dataset, DatasetSpec,
    DbscanParams, KmeansInit, KmeansParams, Never,
};

fn loaded() -> OpenCl {
    let cl = OpenCl::new();
    cl.load(stub_path()).expect("stub loads");
    cl
}

fn setup<'cl>(cl: &'cl OpenCl) -> GpuContext<'cl> {
    GpuContext::setup(cl, &KernelSourceBundle::embedded(), &GpuOptions::default()).expect("setup")
}

fn blobs(d: usize, c: usize, size: usize, seed: u64) -> Dataset {
    generate(&DatasetSpec::uniform(d, c, size, seed)).unwrap().dataset
}

#[test]
fn setup_reports_device_and_time() {
    let _turn = serial();
    let stub = Stub::open();
    let cl = loaded();
    let mut ctx = setup(&cl);
    assert!(ctx.setup_ns() > 0);
    assert_eq!(ctx.device_type(), CL_DEVICE_TYPE_GPU);
    assert!(ctx.device_name().contains("clstub"));
    for p in Program::ALL {
        assert!(ctx.has_program(p));
    }
    let s = stub.stats();
    assert_eq!(s.live, [1, 1, 0, 3, 3]);
    ctx.teardown().unwrap();
    assert_eq!(stub.stats().live, [0; 5]);
}

#[test]
fn dbscan_matches_single_threaded() {
    let _turn = serial();
    let _stub = Stub::open();
    let cl = loaded();
    let mut ctx = setup(&cl);
    for (i, d) in [1usize, 2, 4].into_iter().enumerate() {
        for seed in 0..4 {
            let ds = blobs(d, 2 + 2 * i, 40 + 13 * seed as usize, seed * 31 + d as u64);
            let p = DbscanParams::derive(d);
            let want = dbscan_single(&ds, &p, &Never).unwrap();
            let got = dbscan_gpu(&mut ctx, &ds, &p, &Never).unwrap();
            assert_eq!(got, want, "d={d} seed={seed}");
        }
    }
    ctx.teardown().unwrap();
}

#[test]
fn dbscan_all_noise() {
    let _turn = serial();
    let _stub = Stub::open();
    let cl = loaded();
    let mut ctx = setup(&cl);
    let ds = Dataset::new(vec![0.0, 0.5, 1.0, 1.5], 1).unwrap();
    let p = DbscanParams { eps: 1.0, min_pts: 10 };
    assert_eq!(dbscan_gpu(&mut ctx, &ds, &p, &Never).unwrap(), vec![0; 4]);
}

#[test]
fn kmeans_matches_single_threaded_per_iteration() {
    let _turn = serial();
    let _stub = Stub::open();
    let cl = loaded();
    let mut ctx = setup(&cl);
    for (d, c, seed) in [(1, 2, 3u64), (2, 4, 4), (4, 6, 5)] {
        let ds = blobs(d, c, 50, seed);
        let p = KmeansParams::new(c);
        let init = KmeansInit::Seed(seed ^ 0xabc);

        let mut cpu_steps = Vec::new();
        let centers = initial_centers::<std::convert::Infallible>(&ds, c, &init).unwrap();
        let cpu = lloyd(&ds, &p, centers, &mut ScanAssigner { ds: &ds }, &Never, |it| {
            cpu_steps.push((it.labels.to_vec(), it.centers.to_vec()));
        })
        .unwrap();
        let mut gpu_steps = Vec::new();
        let gpu = kmeans_gpu_with(&mut ctx, &ds, &p, &init, &Never, |it| {
            gpu_steps.push((it.labels.to_vec(), it.centers.to_vec()));
        })
        .unwrap();
        assert_eq!(gpu, cpu);
        assert_eq!(gpu_steps, cpu_steps);
        assert_eq!(gpu, kmeans_single(&ds, &p, &init, &Never).unwrap());
    }
}

#[test]
fn kmeans_single_center() {
    let _turn = serial();
    let _stub = Stub::open();
    let cl = loaded();
    let mut ctx = setup(&cl);
    let ds = Dataset::new(vec![1.0, 2.0, 3.0, 6.0], 2).unwrap();
    let p = KmeansParams::new(1);
    let init = KmeansInit::Indices(vec![0]);
    let got = kmeans_gpu(&mut ctx, &ds, &p, &init, &Never).unwrap();
    assert_eq!(got, kmeans_single(&ds, &p, &init, &Never).unwrap());
    assert_eq!(got.centers, vec![2.0, 4.0]);
}

#[test]
fn missing_program_is_reported() {
    let _turn = serial();
    let _stub = Stub::open();
    let cl = loaded();
    let opts = GpuOptions { programs: Program::KMEANS.to_vec(), ..GpuOptions::default() };
    let mut ctx = GpuContext::setup(&cl, &KernelSourceBundle::embedded(), &opts).unwrap();
    let ds = Dataset::new(vec![0.0, 1.0], 1).unwrap();
    let err = dbscan_gpu(&mut ctx, &ds, &DbscanParams::derive(1), &Never).unwrap_err();
    assert_eq!(err, ClusterError::Backend(GpuError::ProgramMissing(Program::DbscanMain)));
}

#[test]
fn syntax_error_yields_build_log() {
    let _turn = serial();
    let stub = Stub::open();
    let cl = loaded();
    let mut bundle = KernelSourceBundle::embedded();
    bundle.dbscan_expand = bundle.dbscan_expand.replacen("if (j >= n) {", "if (j >= n {", 1);
    let err = GpuContext::setup(&cl, &bundle, &GpuOptions::default()).unwrap_err();
    match err {
        GpuError::CompileError { program, log } => {
            assert_eq!(program, Program::DbscanExpand);
            assert!(!log.is_empty());
        }
        other => panic!("unexpected {other:?}"),
    }
    let s = stub.stats();
    assert_eq!(s.live, [0; 5], "failed setup leaked objects");
    assert_eq!(s.invalid_releases, 0);
}

#[test]
fn device_selection() {
    let _turn = serial();
    let stub = Stub::open();
    let cl = loaded();
    let bundle = KernelSourceBundle::embedded();

    stub.set_device_type(CL_DEVICE_TYPE_CPU);
    let err = GpuContext::setup(&cl, &bundle, &GpuOptions::default()).unwrap_err();
    assert_eq!(err, GpuError::DeviceUnavailable { code: CL_DEVICE_NOT_FOUND });
    let opts = GpuOptions { allow_cpu_device: true, ..GpuOptions::default() };
    let ctx = GpuContext::setup(&cl, &bundle, &opts).unwrap();
    assert_eq!(ctx.device_type(), CL_DEVICE_TYPE_CPU);
    drop(ctx);

    stub.set_platform_count(0);
    let err = GpuContext::setup(&cl, &bundle, &opts).unwrap_err();
    assert_eq!(err, GpuError::DeviceUnavailable { code: NOT_LOADED });

    cl.unload().unwrap();
    let err = GpuContext::setup(&cl, &bundle, &opts).unwrap_err();
    assert_eq!(err, GpuError::DeviceUnavailable { code: NOT_LOADED });
    assert_eq!(stub.stats().live, [0; 5]);
}

#[test]
fn teardown_releases_everything_once_in_order() {
    let _turn = serial();
    let stub = Stub::open();
    let cl = loaded();
    let mut ctx = setup(&cl);
    let ds = blobs(2, 2, 30, 9);
    dbscan_gpu(&mut ctx, &ds, &DbscanParams::derive(2), &Never).unwrap();
    let timing = ctx.teardown().unwrap();
    assert!(timing.setup_ns > 0);
    assert!(ctx.release_failures().is_empty());
    assert_eq!(ctx.teardown(), Err(GpuError::UseAfterTeardown));
    assert!(matches!(
        dbscan_gpu(&mut ctx, &ds, &DbscanParams::derive(2), &Never),
        Err(ClusterError::Backend(GpuError::UseAfterTeardown))
    ));

    let s = stub.stats();
    assert_eq!(s.created, s.released);
    assert_eq!(s.created, [1, 1, 4, 3, 3]);
    assert_eq!(s.invalid_releases, 0);

    let log = stub.release_log();
    let kinds: Vec<usize> = log.iter().map(|&(k, _)| k as usize).collect();
    assert_eq!(
        kinds,
        [
            KIND_MEM,
            KIND_MEM,
            KIND_MEM,
            KIND_MEM,
            KIND_KERNEL,
            KIND_KERNEL,
            KIND_KERNEL,
            KIND_PROGRAM,
            KIND_PROGRAM,
            KIND_PROGRAM,
            KIND_QUEUE,
            KIND_CONTEXT
        ]
    );
    // handles grow with creation order
    let mems: Vec<u64> = log[..4].iter().map(|&(_, h)| h).collect();
    assert!(mems.windows(2).all(|w| w[0] > w[1]), "buffers not released in reverse: {mems:?}");
}

#[test]
fn failed_release_does_not_stop_teardown() {
    let _turn = serial();
    let stub = Stub::open();
    let cl = loaded();
    let mut ctx = setup(&cl);
    ctx.bind(&blobs(1, 2, 10, 1), 2).unwrap();
    stub.fail_releases(KIND_MEM as i32);
    ctx.teardown().unwrap();
    assert_eq!(ctx.release_failures().len(), 4);
    let s = stub.stats();
    assert_eq!(s.live, [0, 0, 4, 0, 0]);
}

struct AfterLaunches<'a> {
    stub: &'a Stub,
    limit: u64,
    seen: Cell<Option<u64>>,
}

impl Cancel for AfterLaunches<'_> {
    fn is_cancelled(&self) -> bool {
        let launches = self.stub.stats().kernel_launches;
        if launches >= self.limit && self.seen.get().is_none() {
            self.seen.set(Some(launches));
        }
        self.seen.get().is_some()
    }
}

#[test]
fn cancellation_between_launches() {
    let _turn = serial();
    let stub = Stub::open();
    let cl = loaded();
    let mut ctx = setup(&cl);
    let ds = blobs(2, 4, 64, 12);
    let p = DbscanParams::derive(2);

    let cancel = AfterLaunches { stub: &stub, limit: 25, seen: Cell::new(None) };
    let err = dbscan_gpu(&mut ctx, &ds, &p, &cancel).unwrap_err();
    assert_eq!(err, ClusterError::Aborted);
    let at_cancel = cancel.seen.get().unwrap();
    assert!(stub.stats().kernel_launches <= at_cancel + 1);

    // the context stays usable for the next run
    assert_eq!(
        dbscan_gpu(&mut ctx, &ds, &p, &Never).unwrap(),
        dbscan_single(&ds, &p, &Never).unwrap()
    );

    let token = CancellationToken::new();
    let kp = KmeansParams::new(4);
    let mut iterations = 0;
    let err = kmeans_gpu_with(&mut ctx, &ds, &kp, &KmeansInit::Seed(2), &token, |it| {
        iterations = it.index;
        if it.index == 2 {
            token.cancel();
        }
    })
    .unwrap_err();
    assert_eq!(err, ClusterError::Aborted);
    assert_eq!(iterations, 2);

    ctx.teardown().unwrap();
    let s = stub.stats();
    assert_eq!(s.live, [0; 5]);
    assert_eq!(s.created, s.released);
}

#[test]
fn rebinding_replaces_buffers() {
    let _turn = serial();
    let stub = Stub::open();
    let cl = loaded();
    let mut ctx = setup(&cl);
    let a = blobs(1, 2, 10, 1);
    let b = blobs(2, 2, 10, 2);
    ctx.bind(&a, 2).unwrap();
    ctx.bind(&a, 2).unwrap();
    assert_eq!(stub.stats().created[KIND_MEM], 4);
    ctx.bind(&b, 2).unwrap();
    let s = stub.stats();
    assert_eq!((s.created[KIND_MEM], s.live[KIND_MEM]), (8, 4));
}
