use oclmine_core::datagen::{generate, DatasetSpec};
use oclmine_core::kmeans::{initial_centers, lloyd, ScanAssigner};
use oclmine_core::oracle;
use oclmine_core::{
    dbscan_single, kmeans_single, region_query, Dataset, DbscanParams, KmeansInit, KmeansParams,
    Never,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_points(seed: u64, n: usize, d: usize, spread: f32) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| rng.random_range(0.0..spread)).collect();
    Dataset::new(data, d).unwrap()
}

#[test]
fn region_query_agrees_with_double_precision_scan() {
    for seed in 0..20 {
        let ds = random_points(seed, 64, 2, 4.0);
        let eps = 1.0f32;
        for q in 0..ds.len() {
            let got = region_query(&ds, q, eps);
            let (inside, borderline) = oracle::region_query_f64(ds.as_slice(), 2, q, 1.0, 1e-6);
            let strict: Vec<u32> =
                got.iter().copied().filter(|j| !borderline.contains(j)).collect();
            assert_eq!(strict, inside, "seed {seed} q {q}");
            assert!(got.windows(2).all(|w| w[0] < w[1]));
        }
    }
}

#[test]
fn two_separated_blobs_form_two_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut data = Vec::new();
    for i in 0..60 {
        let center = if i % 2 == 0 { 0.0 } else { 100.0 };
        data.push(center + rng.random_range(-0.1f32..0.1));
    }
    let ds = Dataset::new(data, 1).unwrap();
    let p = DbscanParams::derive(1);
    let labels = dbscan_single(&ds, &p, &Never).unwrap();
    assert_eq!(labels, oracle::dbscan_components(ds.as_slice(), 1, p.eps, p.min_pts));
    assert!(labels.iter().all(|&l| l != 0));
    // the point at index 0 belongs to the first blob and opens cluster 1
    for (i, &l) in labels.iter().enumerate() {
        assert_eq!(l, if i % 2 == 0 { 1 } else { 2 });
    }
}

#[test]
fn merged_blobs_are_a_legal_outcome() {
    // six generated blobs in two features; with eps = √2 overlapping blobs
    // merge, so DBSCAN may report fewer clusters than were generated
    for seed in 0..8 {
        let g = generate(&DatasetSpec::uniform(2, 6, 256, seed)).unwrap();
        let p = DbscanParams::derive(2);
        let labels = dbscan_single(&g.dataset, &p, &Never).unwrap();
        let found = *labels.iter().max().unwrap();
        assert!((1..=6).contains(&found), "seed {seed}: {found} clusters");
        assert_eq!(labels, oracle::dbscan_components(g.dataset.as_slice(), 2, p.eps, p.min_pts));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dbscan_matches_component_oracle(
        seed in any::<u64>(),
        n in 1usize..160,
        d in 1usize..4,
        eps in 0.2f32..1.5,
        min_pts in 1usize..8,
    ) {
        let ds = random_points(seed, n, d, 5.0);
        let p = DbscanParams { eps, min_pts };
        let labels = dbscan_single(&ds, &p, &Never).unwrap();
        prop_assert_eq!(&labels, &oracle::dbscan_components(ds.as_slice(), d, eps, min_pts));
        prop_assert_eq!(labels, dbscan_single(&ds, &p, &Never).unwrap());
    }

    #[test]
    fn kmeans_labels_and_centers_are_valid(seed in any::<u64>(), n in 1usize..200, k in 1usize..7) {
        let k = k.min(n);
        let ds = random_points(seed, n, 2, 10.0);
        let r = kmeans_single(&ds, &KmeansParams::new(k), &KmeansInit::Seed(seed), &Never).unwrap();
        prop_assert!(r.labels.iter().all(|&l| usize::from(l) < k));
        prop_assert!(r.centers.iter().all(|c| c.is_finite()));
        prop_assert!(r.iterations <= 100_000);
    }
}

#[test]
fn lloyd_sum_of_squares_never_rises() {
    for seed in 0..30 {
        let g = generate(&DatasetSpec::uniform(2, 4, 128, seed)).unwrap();
        let ds = &g.dataset;
        let params = KmeansParams::new(4);
        let centers = initial_centers::<()>(ds, 4, &KmeansInit::Seed(seed)).unwrap();
        let mut trace = Vec::new();
        lloyd(ds, &params, centers, &mut ScanAssigner { ds }, &Never, |it| {
            trace.push(oracle::sum_of_squares(ds.as_slice(), 2, it.labels, it.centers));
        })
        .unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-6) + 1e-9, "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn generated_blob_means_track_their_centres() {
    let spec = DatasetSpec { features: 4, cluster_sizes: vec![1024, 2048, 1500], seed: 77 };
    let g = generate(&spec).unwrap();
    let d = 4;
    for (c, blob) in g.blobs.iter().enumerate() {
        let members: Vec<&[f32]> = g
            .dataset
            .rows()
            .zip(&g.truth.0)
            .filter(|(_, &l)| l as usize == c)
            .map(|(p, _)| p)
            .collect();
        assert_eq!(members.len(), spec.cluster_sizes[c]);
        for f in 0..d {
            let mean = members.iter().map(|p| f64::from(p[f])).sum::<f64>() / members.len() as f64;
            let bound = 5.0 * blob.sd[f] / (members.len() as f64).sqrt();
            assert!((mean - blob.center[f]).abs() < bound, "cluster {c} feature {f}");
            assert!((0.0..=10.0).contains(&blob.center[f]));
            assert!((0.25..=1.25).contains(&blob.sd[f]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shuffle_preserves_cluster_sizes(
        sizes in proptest::collection::vec(1usize..40, 1..6),
        seed in any::<u64>(),
    ) {
        let g = generate(&DatasetSpec { features: 2, cluster_sizes: sizes.clone(), seed }).unwrap();
        let mut hist = vec![0usize; sizes.len()];
        for &l in &g.truth.0 {
            hist[l as usize] += 1;
        }
        prop_assert_eq!(hist, sizes);
    }
}
