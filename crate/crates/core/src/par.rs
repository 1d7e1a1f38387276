//! Execution strategy for data-parallel loops.
//!
//! Every parallel loop in the crate goes through these helpers. Work is split
//! into fixed-size chunks whose results are collected in chunk order, so a
//! sequential and a parallel run of the same computation produce bitwise
//! identical output.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Where data-parallel loops run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Execution {
    Sequential,
    /// Rayon thread pool. Without the `parallel` feature this behaves like
    /// `Sequential`.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Maps `f` over consecutive chunks of `chunk_len` items. `f` receives the
/// chunk and the index of its first element. Results come back in chunk order.
pub fn map_chunks<T, R, F>(exec: Execution, items: &[T], chunk_len: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T], usize) -> R + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items
            .par_chunks(chunk_len)
            .enumerate()
            .map(|(i, c)| f(c, i * chunk_len))
            .collect();
    }
    let _ = exec;
    items
        .chunks(chunk_len)
        .enumerate()
        .map(|(i, c)| f(c, i * chunk_len))
        .collect()
}

/// Maps `f` over row ranges `[start, end)` of length `chunk_rows` covering
/// `0..n_rows`, in order.
pub fn map_row_chunks<R, F>(exec: Execution, n_rows: usize, chunk_rows: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize, usize) -> R + Sync + Send,
{
    let chunk_rows = chunk_rows.max(1);
    let starts: Vec<usize> = (0..n_rows).step_by(chunk_rows).collect();
    map(exec, &starts, |&s| f(s, (s + chunk_rows).min(n_rows)))
}

/// Runs fallible, IO-bound jobs on at most `max_workers` OS threads.
///
/// Jobs are handed out in input order. After the first error no new jobs are
/// started; jobs already running finish. Returns the per-job results in input
/// order (`None` for jobs that never started).
pub fn bounded_try_map<T, R, E, F>(items: &[T], max_workers: usize, f: F) -> Vec<Option<Result<R, E>>>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync,
{
    let workers = max_workers.max(1).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<R, E>>>> = Mutex::new((0..items.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                if out.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                slots.lock().expect("result slots poisoned")[i] = Some(out);
            });
        }
    });
    slots.into_inner().expect("result slots poisoned")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_map_matches_sequential() {
        let v: Vec<u64> = (0..10_001).collect();
        let seq = map_chunks(Execution::Sequential, &v, 97, |c, s| (s, c.iter().sum::<u64>()));
        let par = map_chunks(Execution::Parallel, &v, 97, |c, s| (s, c.iter().sum::<u64>()));
        assert_eq!(seq, par);
        assert_eq!(seq.iter().map(|x| x.1).sum::<u64>(), v.iter().sum::<u64>());
    }

    #[test]
    fn row_chunks_cover_range() {
        let r = map_row_chunks(Execution::Parallel, 10, 4, |a, b| (a, b));
        assert_eq!(r, vec![(0, 4), (4, 8), (8, 10)]);
        assert!(map_row_chunks(Execution::Sequential, 0, 4, |a, b| (a, b)).is_empty());
    }

    #[test]
    fn bounded_map_stops_after_error() {
        let items: Vec<usize> = (0..50).collect();
        let out = bounded_try_map(&items, 1, |&i| if i == 3 { Err(i) } else { Ok(i) });
        assert!(matches!(out[2], Some(Ok(2))));
        assert!(matches!(out[3], Some(Err(3))));
        assert!(out[10].is_none());
    }
}
