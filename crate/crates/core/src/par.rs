//! Worker-count control and an order-preserving parallel map.

/// Worker count: `SGEN_THREADS` when set to a positive integer, otherwise
/// the machine's available parallelism.
pub fn worker_count() -> usize {
    let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("SGEN_THREADS").ok().and_then(|s| s.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => hw,
    }
}

/// `f(0..len)` computed by up to `workers` threads; the result is in index
/// order and does not depend on the worker count.
pub fn par_map<R: Send>(len: usize, workers: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, len.max(1));
    if workers == 1 {
        return (0..len).map(f).collect();
    }
    let chunk = len.div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| s.spawn(move || (w * chunk..((w + 1) * chunk).min(len)).map(f).collect::<Vec<R>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn result_is_independent_of_workers() {
        let one = par_map(37, 1, |i| i * i);
        for w in [2, 3, 8, 64] {
            assert_eq!(par_map(37, w, |i| i * i), one);
        }
        assert!(par_map(0, 4, |i| i).is_empty());
    }
}
