// SPDX-License-Identifier: MIT OR Apache-2.0

//! Order-preserving parallel map.
//!
//! With the `parallel` feature the map runs on the current rayon pool;
//! without it, sequentially. Results always come back in input order, and
//! every reduction over them is done by the caller in that order, so output
//! bits never depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// `map` over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map(&idx, |&i| f(i))
}

/// Collects a vector of results, failing on the first error in input order.
pub fn try_map<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

/// Runs `f` on a single-threaded pool when the feature is on; otherwise
/// just runs it.
pub fn sequential<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    with_threads(1, f)
}

/// Runs `f` on a dedicated pool of `n` threads (sequentially without the
/// feature).
pub fn with_threads<R: Send>(n: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool");
        pool.install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..1000).collect();
        let ys = map(&xs, |x| x * x);
        assert_eq!(ys, xs.iter().map(|x| x * x).collect::<Vec<_>>());
        assert_eq!(sequential(|| map_range(5, |i| i + 1)), vec![1, 2, 3, 4, 5]);
        assert_eq!(with_threads(4, || map(&xs, |x| x + 1)), xs.iter().map(|x| x + 1).collect::<Vec<_>>());
    }

    #[test]
    fn first_error_in_order_wins() {
        let xs = [1, 2, 3, 4];
        let r: Result<Vec<i32>, i32> = try_map(&xs, |&x| if x >= 2 { Err(x) } else { Ok(x) });
        assert_eq!(r, Err(2));
    }
}
