//! Parallel execution layer. With the `parallel` feature (default), indexed
//! loops fan out over rayon; without it they run sequentially. Both paths
//! produce results in input order, and all reductions downstream are
//! fixed-order sums, so outputs are identical regardless of mode or thread
//! count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to `0..n` and collects results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Applies `f` to each slice element, preserving order.
#[cfg(feature = "parallel")]
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Fixed-order sum of `f(i)` for `i` in `0..n`; the parallel path collects
/// per-index terms first so the reduction order never depends on scheduling.
pub fn sum_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    map_indexed(n, f).into_iter().sum()
}

/// Caps the global rayon pool at `n` workers. Must be called before any
/// parallel work; later calls are ignored (rayon pools are build-once).
/// A no-op without the `parallel` feature.
#[cfg(feature = "parallel")]
pub fn configure_threads(n: Option<usize>) {
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_n: Option<usize>) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
        let s = map_slice(&[1.0, 2.0, 3.0], |x| x * 2.0);
        assert_eq!(s, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn sum_is_fixed_order() {
        // catches any scheduling-dependent reduction: repeated runs must agree bitwise
        let f = |i: usize| ((i as f64) * 0.1).sin() * 1e-3 + 1.0;
        let a = sum_indexed(10_000, f);
        let b = sum_indexed(10_000, f);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
