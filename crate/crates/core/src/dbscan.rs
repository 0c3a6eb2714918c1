//! Non-recursive DBSCAN.
//!
//! The traversal visits points in index order. An unvisited point whose
//! region query finds fewer than `min_pts` neighbours (the point itself is
//! not counted) is provisionally noise. Otherwise it opens the next cluster
//! id (1, 2, 3, ... in discovery order) and the cluster grows through an
//! explicit FIFO seed queue: every unclaimed neighbour is claimed and
//! queued, queued points that turn out to be core points contribute their own
//! unclaimed neighbours. A border point keeps the first cluster that claims
//! it, and a former noise point reached from a cluster becomes a border
//! point of that cluster.
//!
//! The traversal is shared by every backend. Backends only supply the region
//! query through [`RegionQuery`], so label arrays are identical as long as
//! their neighbour sets are.

use alloc::vec;
use alloc::vec::Vec;

use crate::cancel::Cancel;
use crate::dataset::{squared_distance, Dataset};
use crate::error::ClusterError;
use crate::params::DbscanParams;
use crate::state::{PointState, MAX_CLUSTER_ID, REACH_EXPAND, REACH_MAIN};

/// Which part of the traversal issued a region query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryPhase {
    /// Deciding whether an unvisited point starts a cluster.
    Main,
    /// Growing a cluster from a queued point.
    Expand,
}

impl QueryPhase {
    /// State flag a backend may use to mark points reached by this phase.
    pub const fn flag(self) -> u16 {
        match self {
            QueryPhase::Main => REACH_MAIN,
            QueryPhase::Expand => REACH_EXPAND,
        }
    }
}

/// Source of eps-neighbourhoods.
pub trait RegionQuery {
    type Error;

    /// Runs the region query of point `q` and returns the neighbour count
    /// (excluding `q`).
    fn query(&mut self, q: usize, phase: QueryPhase) -> Result<usize, Self::Error>;

    /// Ascending neighbour indices found by the most recent [`query`].
    ///
    /// The traversal only asks for them when the count reached `min_pts`.
    ///
    /// [`query`]: RegionQuery::query
    fn neighbors(&mut self) -> Result<&[u32], Self::Error>;
}

/// Appends to `out`, in ascending order, every `j` in `range` other than `q`
/// with `squared_distance(q, j) <= eps2`.
pub fn scan_range(
    ds: &Dataset,
    q: usize,
    eps2: f32,
    range: core::ops::Range<usize>,
    out: &mut Vec<u32>,
) {
    let p = ds.point(q);
    for j in range {
        if j != q && squared_distance(p, ds.point(j)) <= eps2 {
            out.push(j as u32);
        }
    }
}

/// Ascending indices `j != q` within `eps` of point `q`.
pub fn region_query(ds: &Dataset, q: usize, eps: f32) -> Vec<u32> {
    let mut out = Vec::new();
    scan_range(ds, q, eps * eps, 0..ds.len(), &mut out);
    out
}

/// Single-threaded full scan.
#[derive(Debug)]
pub struct ScanQuery<'a> {
    ds: &'a Dataset,
    eps2: f32,
    found: Vec<u32>,
}

impl<'a> ScanQuery<'a> {
    pub fn new(ds: &'a Dataset, params: &DbscanParams) -> Self {
        ScanQuery { ds, eps2: params.eps2(), found: Vec::new() }
    }
}

impl RegionQuery for ScanQuery<'_> {
    type Error = core::convert::Infallible;

    fn query(&mut self, q: usize, _phase: QueryPhase) -> Result<usize, Self::Error> {
        self.found.clear();
        scan_range(self.ds, q, self.eps2, 0..self.ds.len(), &mut self.found);
        Ok(self.found.len())
    }

    fn neighbors(&mut self) -> Result<&[u32], Self::Error> {
        Ok(&self.found)
    }
}

/// Runs the traversal over `n` points with neighbourhoods from `source`.
///
/// Returns one label per point: the cluster id, 0 for noise. The token is
/// polled before every outer-loop point and before every queued seed.
pub fn dbscan_with<Q, C>(
    n: usize,
    params: &DbscanParams,
    source: &mut Q,
    cancel: &C,
) -> Result<Vec<u16>, ClusterError<Q::Error>>
where
    Q: RegionQuery + ?Sized,
    C: Cancel + ?Sized,
{
    params.validate()?;
    let mut state = vec![PointState::UNVISITED; n];
    let mut queue: Vec<u32> = Vec::new();
    let mut cluster: u16 = 0;

    for p in 0..n {
        if cancel.is_cancelled() {
            return Err(ClusterError::Aborted);
        }
        if state[p].is_visited() {
            continue;
        }
        state[p].mark_visited();
        let count = source.query(p, QueryPhase::Main).map_err(ClusterError::Backend)?;
        if count < params.min_pts {
            continue;
        }
        if cluster == MAX_CLUSTER_ID {
            return Err(ClusterError::Capacity { max: MAX_CLUSTER_ID });
        }
        cluster += 1;
        state[p].set_cluster(cluster);

        queue.clear();
        claim(&mut state, &mut queue, source.neighbors().map_err(ClusterError::Backend)?, cluster);
        let mut head = 0;
        while head < queue.len() {
            if cancel.is_cancelled() {
                return Err(ClusterError::Aborted);
            }
            let q = queue[head] as usize;
            head += 1;
            if state[q].is_visited() {
                // noise promoted to border
                continue;
            }
            state[q].mark_visited();
            let count = source.query(q, QueryPhase::Expand).map_err(ClusterError::Backend)?;
            if count >= params.min_pts {
                let found = source.neighbors().map_err(ClusterError::Backend)?;
                claim(&mut state, &mut queue, found, cluster);
            }
        }
    }

    Ok(state.into_iter().map(PointState::label).collect())
}

fn claim(state: &mut [PointState], queue: &mut Vec<u32>, found: &[u32], cluster: u16) {
    for &j in found {
        let s = &mut state[j as usize];
        if s.cluster() == 0 {
            s.set_cluster(cluster);
            queue.push(j);
        }
    }
}

/// Reference single-threaded DBSCAN.
pub fn dbscan_single<C: Cancel + ?Sized>(
    ds: &Dataset,
    params: &DbscanParams,
    cancel: &C,
) -> Result<Vec<u16>, ClusterError> {
    let mut source = ScanQuery::new(ds, params);
    dbscan_with(ds.len(), params, &mut source, cancel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cancel::Never;
    use core::sync::atomic::AtomicBool;

    fn ds1(values: &[f32]) -> Dataset {
        Dataset::new(values.to_vec(), 1).unwrap()
    }

    #[test]
    fn region_query_examples() {
        let ds = ds1(&[0.0, 0.5, 3.0]);
        assert_eq!(region_query(&ds, 0, 1.0), vec![1]);
        assert_eq!(region_query(&ds, 1, 1.0), vec![0]);
        assert_eq!(region_query(&ds1(&[4.0]), 0, 1.0), Vec::<u32>::new());
    }

    #[test]
    fn too_few_points_is_all_noise() {
        let ds = ds1(&[0.0, 0.1, 0.2, 0.3, 0.4]);
        let labels = dbscan_single(&ds, &DbscanParams::derive(1), &Never).unwrap();
        assert_eq!(labels, vec![0; 5]);
    }

    #[test]
    fn chain_merges_and_isolated_point_is_noise() {
        let ds = ds1(&[0.0, 0.9, 1.8, 2.7, 3.6, -0.9, 4.5]);
        let p = DbscanParams { eps: 1.0, min_pts: 2 };
        assert_eq!(dbscan_single(&ds, &p, &Never).unwrap(), vec![1; 7]);

        // 1.4 has no neighbour within 0.6; 2.3 is first seen as noise and
        // later becomes a border point of the cluster opened at 2.8
        let ds = ds1(&[0.0, 0.5, -0.5, 1.4, 2.3, 2.8, 3.3]);
        let p = DbscanParams { eps: 0.6, min_pts: 2 };
        assert_eq!(dbscan_single(&ds, &p, &Never).unwrap(), vec![1, 1, 1, 0, 2, 2, 2]);
    }

    #[test]
    fn border_point_keeps_first_cluster() {
        // 0.5 is a non-core point adjacent to both blobs; the blob listed
        // first in index order is discovered first and claims it
        let ds = ds1(&[0.5, 1.0, 1.1, 1.2, 1.3, -0.3, -0.2, -0.1, 0.0]);
        let p = DbscanParams { eps: 0.55, min_pts: 3 };
        let labels = dbscan_single(&ds, &p, &Never).unwrap();
        assert_eq!(labels, vec![1, 1, 1, 1, 1, 2, 2, 2, 2]);
    }

    #[test]
    fn noise_becomes_border() {
        // point 0 is visited first, has a single neighbour (1) and is marked
        // noise, then cluster growth from point 1 reaches it
        let ds = ds1(&[-0.8, 0.0, 0.3, 0.6]);
        let p = DbscanParams { eps: 0.8, min_pts: 2 };
        let labels = dbscan_single(&ds, &p, &Never).unwrap();
        assert_eq!(labels, vec![1, 1, 1, 1]);
    }

    #[test]
    fn cancelled_token_aborts() {
        let ds = ds1(&[0.0; 20]);
        let token = AtomicBool::new(true);
        let err = dbscan_single(&ds, &DbscanParams::derive(1), &token).unwrap_err();
        assert_eq!(err, ClusterError::Aborted);
    }

    #[test]
    fn capacity_error_past_8191_clusters() {
        // 8192 isolated pairs: each pair is its own cluster with min_pts = 1
        let mut values = Vec::new();
        for i in 0..8192 {
            values.push(i as f32 * 10.0);
            values.push(i as f32 * 10.0 + 0.5);
        }
        let ds = ds1(&values);
        let p = DbscanParams { eps: 1.0, min_pts: 1 };
        let err = dbscan_single(&ds, &p, &Never).unwrap_err();
        assert_eq!(err, ClusterError::Capacity { max: 8191 });

        let ds = ds1(&values[..2 * 8191]);
        let labels = dbscan_single(&ds, &p, &Never).unwrap();
        assert_eq!(*labels.iter().max().unwrap(), 8191);
    }
}
