//! Brute-force references for tests. None of this shares code with the
//! algorithms it checks.
//!
//! The DBSCAN reference does not traverse anything. It relies on the
//! structure of the index-order traversal with first-claim borders:
//!
//! * core points connected through eps-adjacency form one cluster;
//! * clusters are numbered by the smallest core index they contain;
//! * a non-core point takes the smallest id among its adjacent core points'
//!   clusters, or 0 if it has no core neighbour.

#![allow(clippy::needless_range_loop)]

use alloc::vec;
use alloc::vec::Vec;

fn dist2_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for f in 0..a.len() {
        let t = a[f] - b[f];
        s += t * t;
    }
    s
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// DBSCAN labels (0 = noise) from connected components of the core graph.
pub fn dbscan_components(points: &[f32], d: usize, eps: f32, min_pts: usize) -> Vec<u16> {
    let n = points.len() / d;
    let eps2 = eps * eps;
    let row = |i: usize| &points[i * d..(i + 1) * d];
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && dist2_f32(row(i), row(j)) <= eps2 {
                adj[i].push(j);
            }
        }
    }
    let core: Vec<bool> = adj.iter().map(|a| a.len() >= min_pts).collect();

    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        if !core[i] {
            continue;
        }
        for &j in &adj[i] {
            if core[j] {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }

    // ids by smallest core index in the component
    let mut root_id = vec![0u16; n];
    let mut next = 0u16;
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            if root_id[r] == 0 {
                next += 1;
                root_id[r] = next;
            }
        }
    }

    (0..n)
        .map(|i| {
            if core[i] {
                root_id[find(&mut parent, i)]
            } else {
                adj[i]
                    .iter()
                    .filter(|&&j| core[j])
                    .map(|&j| root_id[find(&mut parent, j)])
                    .min()
                    .unwrap_or(0)
            }
        })
        .collect()
}

/// Indices `j != q` with double-precision distance `<= eps`, plus the
/// indices whose double-precision distance lies within `slack` of `eps`
/// (those may legitimately fall either side in single precision).
pub fn region_query_f64(
    points: &[f32],
    d: usize,
    q: usize,
    eps: f64,
    slack: f64,
) -> (Vec<u32>, Vec<u32>) {
    let n = points.len() / d;
    let mut inside = Vec::new();
    let mut borderline = Vec::new();
    for j in 0..n {
        if j == q {
            continue;
        }
        let mut s = 0.0f64;
        for f in 0..d {
            let t = f64::from(points[q * d + f]) - f64::from(points[j * d + f]);
            s += t * t;
        }
        let dist = libm::sqrt(s);
        if (dist - eps).abs() <= slack {
            borderline.push(j as u32);
        } else if dist <= eps {
            inside.push(j as u32);
        }
    }
    (inside, borderline)
}

/// Number of points `j != q` with `f32` squared distance `<= eps2`.
pub fn neighbor_count(points: &[f32], d: usize, q: usize, eps2: f32) -> usize {
    let n = points.len() / d;
    (0..n)
        .filter(|&j| {
            j != q && dist2_f32(&points[q * d..(q + 1) * d], &points[j * d..(j + 1) * d]) <= eps2
        })
        .count()
}

/// Sum of squared distances to assigned centres, in `f64`.
pub fn sum_of_squares(points: &[f32], d: usize, labels: &[u16], centers: &[f32]) -> f64 {
    let mut total = 0.0f64;
    for (i, &l) in labels.iter().enumerate() {
        let l = usize::from(l);
        for f in 0..d {
            let t = f64::from(points[i * d + f]) - f64::from(centers[l * d + f]);
            total += t * t;
        }
    }
    total
}
