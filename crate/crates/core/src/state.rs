//! The 16-bit per-point DBSCAN state word.
//!
//! Bits 0-2 are transient flags, bits 3-15 hold the cluster id while the
//! traversal runs. Id 0 means noise (or not yet assigned). Labels handed back
//! to callers are the bare cluster id with the flags stripped and the field
//! shifted down, so a returned label word equals its cluster id.

/// The point has been taken out of the work set and its neighbourhood decided.
pub const VISITED: u16 = 1 << 0;
/// Marked as directly reachable by a main-loop region query.
pub const REACH_MAIN: u16 = 1 << 1;
/// Marked as directly reachable by a cluster-expansion region query.
pub const REACH_EXPAND: u16 = 1 << 2;
pub const FLAG_MASK: u16 = VISITED | REACH_MAIN | REACH_EXPAND;
pub const CLUSTER_SHIFT: u32 = 3;
/// Largest cluster id that fits the 13-bit field.
pub const MAX_CLUSTER_ID: u16 = u16::MAX >> CLUSTER_SHIFT;

/// Packed flags plus cluster id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(transparent)]
pub struct PointState(u16);

impl PointState {
    pub const UNVISITED: PointState = PointState(0);

    #[inline]
    pub const fn from_raw(word: u16) -> Self {
        PointState(word)
    }

    #[inline]
    pub const fn raw(self) -> u16 {
        self.0
    }

    #[inline]
    pub const fn cluster(self) -> u16 {
        self.0 >> CLUSTER_SHIFT
    }

    #[inline]
    pub const fn flags(self) -> u16 {
        self.0 & FLAG_MASK
    }

    #[inline]
    pub const fn is_visited(self) -> bool {
        self.0 & VISITED != 0
    }

    #[inline]
    pub fn mark_visited(&mut self) {
        self.0 |= VISITED;
    }

    /// # Panics
    /// If `id` exceeds [`MAX_CLUSTER_ID`].
    #[inline]
    pub fn set_cluster(&mut self, id: u16) {
        assert!(id <= MAX_CLUSTER_ID, "cluster id {id} out of range");
        self.0 = (id << CLUSTER_SHIFT) | self.flags();
    }

    #[inline]
    pub fn set_flags(&mut self, mask: u16) {
        self.0 |= mask & FLAG_MASK;
    }

    #[inline]
    pub fn clear_flags(&mut self, mask: u16) {
        self.0 &= !(mask & FLAG_MASK);
    }

    /// Final label: flags dropped, cluster field shifted down.
    #[inline]
    pub const fn label(self) -> u16 {
        self.cluster()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_field_round_trips() {
        let mut s = PointState::UNVISITED;
        s.mark_visited();
        s.set_flags(REACH_EXPAND);
        s.set_cluster(MAX_CLUSTER_ID);
        assert_eq!(s.cluster(), 8191);
        assert_eq!(s.flags(), VISITED | REACH_EXPAND);
        assert_eq!(s.label(), 8191);
        s.clear_flags(FLAG_MASK);
        assert_eq!(s.raw(), 8191 << 3);
    }

    #[test]
    #[should_panic]
    fn oversized_cluster_id_panics() {
        let mut s = PointState::UNVISITED;
        s.set_cluster(MAX_CLUSTER_ID + 1);
    }
}
