use alloc::vec::Vec;
use core::ops::Range;

/// Splits `0..n` into `workers` contiguous ranges. The first `n % workers`
/// ranges hold one extra item.
///
/// # Panics
/// If `workers` is zero.
pub fn partition(n: usize, workers: usize) -> Vec<Range<usize>> {
    assert!(workers >= 1, "at least one worker is required");
    let base = n / workers;
    let extra = n % workers;
    let mut start = 0;
    (0..workers)
        .map(|w| {
            let len = base + usize::from(w < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn sizes(n: usize, w: usize) -> Vec<usize> {
        partition(n, w).iter().map(|r| r.len()).collect()
    }

    #[test]
    fn examples() {
        assert_eq!(partition(8, 4), vec![0..2, 2..4, 4..6, 6..8]);
        assert_eq!(sizes(10, 4), vec![3, 3, 2, 2]);
        // 6144 = 7·877 + 5
        assert_eq!(sizes(6144, 7), vec![878, 878, 878, 878, 878, 877, 877]);
        assert_eq!(sizes(6144, 7).iter().sum::<usize>(), 6144);
        assert_eq!(sizes(0, 3), vec![0, 0, 0]);
    }

    proptest! {
        #[test]
        fn ranges_tile_the_index_space(n in 0usize..5000, w in 1usize..17) {
            let parts = partition(n, w);
            prop_assert_eq!(parts.len(), w);
            let mut next = 0;
            for r in &parts {
                prop_assert_eq!(r.start, next);
                next = r.end;
            }
            prop_assert_eq!(next, n);
            let max = parts.iter().map(|r| r.len()).max().unwrap();
            let min = parts.iter().map(|r| r.len()).min().unwrap();
            prop_assert!(max - min <= 1);
        }
    }
}
