//! Thread-pool backend.
//!
//! Points are split into one fixed contiguous range per worker. Workers are
//! started once per run and then driven phase by phase through a [`Gate`]:
//! the coordinator publishes a command, every worker processes its range and
//! reports back, and the coordinator continues once all have reported.
//!
//! Kmeans workers assign their range and accumulate exact partial centre
//! sums; the coordinator merges them in worker order. DBSCAN keeps two worker
//! sets, one answering main-loop region queries and one answering expansion
//! queries; each worker scans its range and the coordinator concatenates the
//! per-range hits in range order, which is ascending index order. The
//! traversal itself is the shared single-threaded driver, so labels are
//! bitwise identical to the reference for any worker count.

use std::io;
use std::num::NonZeroUsize;
use std::ops::Range;
use std::panic::{self, AssertUnwindSafe};
use std::sync::{Condvar, Mutex, MutexGuard, PoisonError, RwLock};
use std::thread::{self, Scope, ScopedJoinHandle};
use std::time::Instant;

use oclmine_core::exact::{CenterSums, FixedScale};
use oclmine_core::kmeans::{assign_range, initial_centers, lloyd, Assigner, Iteration};
use oclmine_core::{
    dbscan_with, partition, Cancel, ClusterError, Dataset, DbscanParams, KmeansInit, KmeansParams,
    KmeansResult, QueryPhase, RegionQuery,
};

use crate::timing::{Intervals, Timed};

#[derive(Debug, thiserror::Error)]
pub enum ParError {
    #[error("cannot start worker thread: {0}")]
    Spawn(#[source] io::Error),
    #[error("a worker thread panicked")]
    WorkerPanic,
}

pub type ParResult<T> = Timed<Result<T, ClusterError<ParError>>>;

/// Hardware threads minus one for the coordinator, at least one.
pub fn default_workers() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get().saturating_sub(1).max(1))
}

/// Worker count and the resulting partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerPool {
    workers: NonZeroUsize,
}

impl Default for WorkerPool {
    fn default() -> Self {
        WorkerPool::new(default_workers()).expect("default worker count is positive")
    }
}

impl WorkerPool {
    /// `None` for zero workers.
    pub fn new(workers: usize) -> Option<Self> {
        NonZeroUsize::new(workers).map(|workers| WorkerPool { workers })
    }

    pub fn workers(&self) -> usize {
        self.workers.get()
    }

    pub fn partitions(&self, n: usize) -> Vec<Range<usize>> {
        partition(n, self.workers())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fault {
    // a worker saw the token at phase start and skipped its share
    Cancelled,
    Panic,
}

fn settle(e: ClusterError<Fault>) -> ClusterError<ParError> {
    match e {
        ClusterError::Aborted | ClusterError::Backend(Fault::Cancelled) => ClusterError::Aborted,
        ClusterError::Backend(Fault::Panic) => ClusterError::Backend(ParError::WorkerPanic),
        ClusterError::InvalidParams(m) => ClusterError::InvalidParams(m),
        ClusterError::Capacity { max } => ClusterError::Capacity { max },
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

struct GateState<C> {
    epoch: u64,
    command: Option<C>,
    pending: usize,
    started: usize,
    stop: bool,
    skipped: bool,
    panicked: bool,
}

/// Coordinator/worker rendezvous for one worker set.
struct Gate<C> {
    state: Mutex<GateState<C>>,
    wake: Condvar,
    settled: Condvar,
    workers: usize,
}

impl<C: Copy> Gate<C> {
    fn new(workers: usize) -> Self {
        Gate {
            state: Mutex::new(GateState {
                epoch: 0,
                command: None,
                pending: 0,
                started: 0,
                stop: false,
                skipped: false,
                panicked: false,
            }),
            wake: Condvar::new(),
            settled: Condvar::new(),
            workers,
        }
    }

    /// Runs one phase on every worker and waits for all of them.
    fn run(&self, command: C) -> Result<(), Fault> {
        let mut s = lock(&self.state);
        s.command = Some(command);
        s.epoch += 1;
        s.pending = self.workers;
        s.skipped = false;
        self.wake.notify_all();
        while s.pending > 0 {
            s = self.settled.wait(s).unwrap_or_else(PoisonError::into_inner);
        }
        if s.panicked {
            Err(Fault::Panic)
        } else if s.skipped {
            Err(Fault::Cancelled)
        } else {
            Ok(())
        }
    }

    fn wait_started(&self, count: usize) {
        let mut s = lock(&self.state);
        while s.started < count {
            s = self.settled.wait(s).unwrap_or_else(PoisonError::into_inner);
        }
    }

    fn stop(&self) {
        lock(&self.state).stop = true;
        self.wake.notify_all();
    }

    /// Worker loop: waits for each new phase, polls the token, works.
    fn serve<K: Cancel + ?Sized>(&self, cancel: &K, mut work: impl FnMut(C)) {
        let mut seen = 0;
        {
            lock(&self.state).started += 1;
            self.settled.notify_all();
        }
        loop {
            let command = {
                let mut s = lock(&self.state);
                while !s.stop && s.epoch == seen {
                    s = self.wake.wait(s).unwrap_or_else(PoisonError::into_inner);
                }
                if s.stop {
                    return;
                }
                seen = s.epoch;
                s.command.expect("phase published without a command")
            };
            let skipped = cancel.is_cancelled();
            let ok = skipped || panic::catch_unwind(AssertUnwindSafe(|| work(command))).is_ok();
            let mut s = lock(&self.state);
            s.pending -= 1;
            s.skipped |= skipped;
            s.panicked |= !ok;
            if s.pending == 0 {
                self.settled.notify_all();
            }
        }
    }
}

/// Starts one worker per range; on a spawn failure the set is stopped and
/// the error returned together with the workers that did start.
fn spawn_set<'scope, 'env, C, K, F>(
    scope: &'scope Scope<'scope, 'env>,
    name: &str,
    gate: &'env Gate<C>,
    cancel: &'env K,
    count: usize,
    work: &'env F,
    handles: &mut Vec<ScopedJoinHandle<'scope, ()>>,
) -> io::Result<()>
where
    C: Copy + Send,
    K: Cancel + Sync + ?Sized,
    F: Fn(usize, C) + Sync,
{
    for i in 0..count {
        let spawned = thread::Builder::new()
            .name(format!("{name}-{i}"))
            .spawn_scoped(scope, move || gate.serve(cancel, |c| work(i, c)));
        match spawned {
            Ok(h) => handles.push(h),
            Err(e) => {
                gate.stop();
                return Err(e);
            }
        }
    }
    Ok(())
}

fn join_all(handles: Vec<ScopedJoinHandle<'_, ()>>) -> bool {
    // join every handle, even after a failure
    handles.into_iter().map(|h| h.join()).filter(Result::is_err).count() == 0
}

struct KmeansSlot {
    labels: Vec<u16>,
    sums: CenterSums,
}

struct PoolAssigner<'a> {
    gate: &'a Gate<()>,
    centers: &'a RwLock<Vec<f32>>,
    slots: &'a [Mutex<KmeansSlot>],
    ranges: &'a [Range<usize>],
}

impl Assigner for PoolAssigner<'_> {
    type Error = Fault;

    fn assign(
        &mut self,
        centers: &[f32],
        labels: &mut [u16],
        sums: &mut CenterSums,
    ) -> Result<(), Fault> {
        {
            let mut shared = self.centers.write().unwrap_or_else(PoisonError::into_inner);
            shared.clear();
            shared.extend_from_slice(centers);
        }
        self.gate.run(())?;
        for (slot, range) in self.slots.iter().zip(self.ranges) {
            let slot = lock(slot);
            labels[range.clone()].copy_from_slice(&slot.labels);
            sums.merge(&slot.sums);
        }
        Ok(())
    }
}

/// Parallel Kmeans; equal to [`oclmine_core::kmeans_single`] for the same
/// init.
pub fn kmeans_parallel<K: Cancel + Sync + ?Sized>(
    ds: &Dataset,
    params: &KmeansParams,
    init: &KmeansInit,
    cancel: &K,
    pool: &WorkerPool,
) -> ParResult<KmeansResult> {
    kmeans_parallel_with(ds, params, init, cancel, pool, |_| {})
}

/// [`kmeans_parallel`] with a per-iteration observer.
pub fn kmeans_parallel_with<K, O>(
    ds: &Dataset,
    params: &KmeansParams,
    init: &KmeansInit,
    cancel: &K,
    pool: &WorkerPool,
    observe: O,
) -> ParResult<KmeansResult>
where
    K: Cancel + Sync + ?Sized,
    O: FnMut(&Iteration<'_>),
{
    let start = Instant::now();
    if let Err(e) = params.validate::<ParError>(ds.len()) {
        return Timed { value: Err(e), intervals: Intervals::bare(start, Instant::now()) };
    }
    let (k, d) = (params.k, ds.features());
    let ranges = pool.partitions(ds.len());
    let scale = FixedScale::for_dataset(ds);
    let shared = RwLock::new(Vec::with_capacity(k * d));
    let slots: Vec<Mutex<KmeansSlot>> = ranges
        .iter()
        .map(|r| {
            Mutex::new(KmeansSlot { labels: vec![0; r.len()], sums: CenterSums::new(scale, k, d) })
        })
        .collect();
    let gate = Gate::new(ranges.len());
    let work = |i: usize, (): ()| {
        let centers = shared.read().unwrap_or_else(PoisonError::into_inner);
        let slot = &mut *lock(&slots[i]);
        slot.sums.clear();
        assign_range(ds, &centers, ranges[i].clone(), &mut slot.labels, &mut slot.sums);
    };

    thread::scope(|s| {
        let mut handles = Vec::new();
        if let Err(e) = spawn_set(s, "kmeans", &gate, cancel, ranges.len(), &work, &mut handles) {
            join_all(handles);
            let now = Instant::now();
            let intervals = Intervals { start, ready: now, done: now, end: now };
            return Timed { value: Err(ClusterError::Backend(ParError::Spawn(e))), intervals };
        }
        gate.wait_started(ranges.len());
        let ready = Instant::now();

        let mut assigner =
            PoolAssigner { gate: &gate, centers: &shared, slots: &slots, ranges: &ranges };
        let result = initial_centers(ds, k, init)
            .and_then(|c| lloyd(ds, params, c, &mut assigner, cancel, observe));
        let done = Instant::now();

        gate.stop();
        let clean = join_all(handles);
        let end = Instant::now();
        let value = match result {
            Ok(_) if !clean => Err(ClusterError::Backend(ParError::WorkerPanic)),
            r => r.map_err(settle),
        };
        Timed { value, intervals: Intervals { start, ready, done, end } }
    })
}

struct PoolQuery<'a> {
    main: &'a Gate<usize>,
    expand: &'a Gate<usize>,
    main_hits: &'a [Mutex<Vec<u32>>],
    expand_hits: &'a [Mutex<Vec<u32>>],
    last: QueryPhase,
    found: Vec<u32>,
}

impl<'a> PoolQuery<'a> {
    fn hits(&self, phase: QueryPhase) -> &'a [Mutex<Vec<u32>>] {
        match phase {
            QueryPhase::Main => self.main_hits,
            QueryPhase::Expand => self.expand_hits,
        }
    }
}

impl RegionQuery for PoolQuery<'_> {
    type Error = Fault;

    fn query(&mut self, q: usize, phase: QueryPhase) -> Result<usize, Fault> {
        let gate = match phase {
            QueryPhase::Main => self.main,
            QueryPhase::Expand => self.expand,
        };
        gate.run(q)?;
        self.last = phase;
        Ok(self.hits(phase).iter().map(|h| lock(h).len()).sum())
    }

    fn neighbors(&mut self) -> Result<&[u32], Fault> {
        self.found.clear();
        for hits in self.hits(self.last) {
            self.found.extend_from_slice(&lock(hits));
        }
        Ok(&self.found)
    }
}

/// Parallel DBSCAN; labels equal [`oclmine_core::dbscan_single`].
pub fn dbscan_parallel<K: Cancel + Sync + ?Sized>(
    ds: &Dataset,
    params: &DbscanParams,
    cancel: &K,
    pool: &WorkerPool,
) -> ParResult<Vec<u16>> {
    let start = Instant::now();
    if let Err(e) = params.validate::<ParError>() {
        return Timed { value: Err(e), intervals: Intervals::bare(start, Instant::now()) };
    }
    let eps2 = params.eps2();
    let ranges = pool.partitions(ds.len());
    let w = ranges.len();
    let main_hits: Vec<Mutex<Vec<u32>>> = (0..w).map(|_| Mutex::default()).collect();
    let expand_hits: Vec<Mutex<Vec<u32>>> = (0..w).map(|_| Mutex::default()).collect();
    let (main, expand) = (Gate::new(w), Gate::new(w));
    let scan = |hits: &[Mutex<Vec<u32>>], i: usize, q: usize| {
        let mut out = lock(&hits[i]);
        out.clear();
        oclmine_core::dbscan::scan_range(ds, q, eps2, ranges[i].clone(), &mut out);
    };
    let main_work = |i: usize, q: usize| scan(&main_hits, i, q);
    let expand_work = |i: usize, q: usize| scan(&expand_hits, i, q);

    thread::scope(|s| {
        let mut handles = Vec::new();
        let spawned = spawn_set(s, "dbscan-main", &main, cancel, w, &main_work, &mut handles)
            .and_then(|()| {
                spawn_set(s, "dbscan-expand", &expand, cancel, w, &expand_work, &mut handles)
            });
        if let Err(e) = spawned {
            main.stop();
            expand.stop();
            join_all(handles);
            let now = Instant::now();
            let intervals = Intervals { start, ready: now, done: now, end: now };
            return Timed { value: Err(ClusterError::Backend(ParError::Spawn(e))), intervals };
        }
        main.wait_started(w);
        expand.wait_started(w);
        let ready = Instant::now();

        let mut source = PoolQuery {
            main: &main,
            expand: &expand,
            main_hits: &main_hits,
            expand_hits: &expand_hits,
            last: QueryPhase::Main,
            found: Vec::new(),
        };
        let result = dbscan_with(ds.len(), params, &mut source, cancel);
        let done = Instant::now();

        main.stop();
        expand.stop();
        let clean = join_all(handles);
        let end = Instant::now();
        let value = match result {
            Ok(_) if !clean => Err(ClusterError::Backend(ParError::WorkerPanic)),
            r => r.map_err(settle),
        };
        Timed { value, intervals: Intervals { start, ready, done, end } }
    })
}
