//! Fork-join over independent tasks with results returned in task order.
//!
//! Callers reduce the returned vector sequentially, so the reduction order
//! depends only on the task count, never on scheduling. Without the `std`
//! feature tasks run serially.

use alloc::vec::Vec;

/// Evaluates `f(0..n)` on up to `workers` threads.
pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "std")]
    if workers > 1 && n > 1 {
        let workers = workers.min(n);
        let f = &f;
        let mut chunks: Vec<Vec<T>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let lo = w * n / workers;
                    let hi = (w + 1) * n / workers;
                    s.spawn(move || (lo..hi).map(f).collect::<Vec<T>>())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        return chunks.drain(..).flatten().collect();
    }
    let _ = workers;
    (0..n).map(f).collect()
}

/// Splits `0..n` into `parts` contiguous ranges of near-equal length.
pub fn split(n: usize, parts: usize) -> Vec<core::ops::Range<usize>> {
    let parts = parts.clamp(1, n.max(1));
    (0..parts).map(|p| p * n / parts..(p + 1) * n / parts).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let serial = map_indexed(37, 1, |i| i * i);
        let par = map_indexed(37, 4, |i| i * i);
        assert_eq!(serial, par);
        assert_eq!(split(10, 3), [0..3, 3..6, 6..10]);
        assert_eq!(split(2, 8).len(), 2);
    }
}
