use std::sync::atomic::{AtomicUsize, Ordering};

use oclmine::concur::CancellationToken;
use oclmine::parbackend::{dbscan_parallel, kmeans_parallel, kmeans_parallel_with, WorkerPool};
use oclmine_core::kmeans::{initial_centers, lloyd, ScanAssigner};
use oclmine_core::{
    dbscan_single, generate, kmeans_single, oracle, Cancel, ClusterError, Dataset, DatasetSpec,
    DbscanParams, KmeansInit, KmeansParams, Never,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORKERS: [usize; 3] = [2, 3, 7];

fn pool(w: usize) -> WorkerPool {
    WorkerPool::new(w).unwrap()
}

fn random_points(seed: u64, n: usize, d: usize, spread: f32) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| rng.random_range(-spread..spread)).collect();
    Dataset::new(data, d).unwrap()
}

#[test]
fn dbscan_matches_single_on_generated_blobs() {
    for (features, clusters, size, seed) in
        [(1, 2, 128, 1), (2, 4, 128, 2), (4, 6, 64, 3), (2, 8, 32, 4)]
    {
        let g = generate(&DatasetSpec::uniform(features, clusters, size, seed)).unwrap();
        let p = DbscanParams::derive(features);
        let expected = dbscan_single(&g.dataset, &p, &Never).unwrap();
        for w in WORKERS {
            let got = dbscan_parallel(&g.dataset, &p, &Never, &pool(w));
            assert_eq!(got.value.unwrap(), expected, "d={features} c={clusters} w={w}");
        }
    }
}

#[test]
fn kmeans_matches_single_iteration_by_iteration() {
    for (features, clusters, seed) in [(1, 2, 10), (2, 4, 11), (4, 8, 12)] {
        let g = generate(&DatasetSpec::uniform(features, clusters, 96, seed)).unwrap();
        let ds = &g.dataset;
        let params = KmeansParams::new(clusters);
        let init = KmeansInit::Seed(seed);

        let mut reference = Vec::new();
        let centers = initial_centers::<()>(ds, clusters, &init).unwrap();
        let expected = lloyd(ds, &params, centers, &mut ScanAssigner { ds }, &Never, |it| {
            reference.push((it.centers.to_vec(), it.labels.to_vec()));
        })
        .unwrap();

        for w in WORKERS {
            let mut step = 0;
            let got = kmeans_parallel_with(ds, &params, &init, &Never, &pool(w), |it| {
                let (centers, labels) = &reference[step];
                assert_eq!(it.centers, &centers[..], "w={w} iteration {}", it.index);
                assert_eq!(it.labels, &labels[..], "w={w} iteration {}", it.index);
                step += 1;
            });
            assert_eq!(got.value.unwrap(), expected, "w={w}");
            assert_eq!(step, reference.len());
        }
    }
}

#[test]
fn timing_intervals_are_ordered() {
    let g = generate(&DatasetSpec::uniform(2, 2, 64, 9)).unwrap();
    let p = DbscanParams::derive(2);
    let run = dbscan_parallel(&g.dataset, &p, &Never, &pool(3));
    let t = run.intervals;
    assert!(t.start <= t.ready && t.ready <= t.done && t.done <= t.end);
    let (setup, wall, teardown, span) = t.split_ns();
    assert_eq!(setup + wall + teardown, span);
    assert!(wall > 0);
}

/// Trips after a fixed number of polls.
struct AfterPolls {
    polls: AtomicUsize,
    limit: usize,
}

impl Cancel for AfterPolls {
    fn is_cancelled(&self) -> bool {
        self.polls.fetch_add(1, Ordering::SeqCst) >= self.limit
    }
}

#[test]
fn cancellation_aborts_and_the_pool_stays_usable() {
    let g = generate(&DatasetSpec::uniform(2, 4, 128, 21)).unwrap();
    let ds = &g.dataset;
    let p = DbscanParams::derive(2);
    let pool = pool(3);
    for limit in [0, 1, 5, 40] {
        let cancel = AfterPolls { polls: AtomicUsize::new(0), limit };
        let run = dbscan_parallel(ds, &p, &cancel, &pool);
        assert!(matches!(run.value, Err(ClusterError::Aborted)), "limit {limit}");

        let cancel = AfterPolls { polls: AtomicUsize::new(0), limit };
        let run = kmeans_parallel(ds, &KmeansParams::new(4), &KmeansInit::Seed(1), &cancel, &pool);
        assert!(matches!(run.value, Err(ClusterError::Aborted)), "limit {limit}");
    }
    let token = CancellationToken::new();
    token.cancel();
    assert!(matches!(dbscan_parallel(ds, &p, &token, &pool).value, Err(ClusterError::Aborted)));
    token.reset();
    let expected = dbscan_single(ds, &p, &Never).unwrap();
    assert_eq!(dbscan_parallel(ds, &p, &token, &pool).value.unwrap(), expected);
}

#[test]
fn invalid_parameters_are_rejected() {
    let ds = random_points(1, 10, 2, 1.0);
    let bad = DbscanParams { eps: -1.0, min_pts: 3 };
    assert!(matches!(
        dbscan_parallel(&ds, &bad, &Never, &pool(2)).value,
        Err(ClusterError::InvalidParams(_))
    ));
    assert!(matches!(
        kmeans_parallel(&ds, &KmeansParams::new(11), &KmeansInit::Seed(0), &Never, &pool(2)).value,
        Err(ClusterError::InvalidParams(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dbscan_parity_on_random_points(
        seed: u64,
        n in 1usize..200,
        d in 1usize..4,
        eps in 0.1f32..1.5,
        min_pts in 1usize..8,
        w in 1usize..9,
    ) {
        let ds = random_points(seed, n, d, 3.0);
        let p = DbscanParams { eps, min_pts };
        let expected = dbscan_single(&ds, &p, &Never).unwrap();
        prop_assert_eq!(&expected, &oracle::dbscan_components(ds.as_slice(), d, eps, min_pts));
        prop_assert_eq!(dbscan_parallel(&ds, &p, &Never, &pool(w)).value.unwrap(), expected);
    }

    #[test]
    fn kmeans_parity_on_random_points(
        seed: u64,
        n in 1usize..200,
        d in 1usize..5,
        k in 1usize..9,
        w in 1usize..9,
    ) {
        let k = k.min(n);
        let ds = random_points(seed, n, d, 10.0);
        let params = KmeansParams::new(k);
        let init = KmeansInit::Seed(seed);
        let expected = kmeans_single(&ds, &params, &init, &Never).unwrap();
        let got = kmeans_parallel(&ds, &params, &init, &Never, &pool(w)).value.unwrap();
        prop_assert_eq!(got, expected);
    }
}
