//! Deterministic parallel Monte Carlo.
//!
//! Work is cut into fixed-size chunks, each with its own ChaCha stream
//! derived from the seed and the chunk index, so results depend on the seed
//! only and not on the number of workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::Result;

pub type McRng = ChaCha8Rng;

/// Draws per chunk; part of the reproducibility contract.
pub const CHUNK: usize = 4096;

/// Generator for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> McRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Available hardware threads, at least 1.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Runs `n` draws of `draw` across `workers` threads and returns them in
/// chunk order. `init` builds per-worker scratch state (for example a
/// memoized series table) that is reused across that worker's chunks.
pub fn par_draws<T, S, I, F>(n: usize, seed: u64, workers: usize, init: I, draw: F) -> Result<Vec<T>>
where
    T: Send,
    I: Fn() -> Result<S> + Sync,
    F: Fn(&mut S, &mut McRng) -> Result<T> + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Vec<T>>>>> = Mutex::new((0..n_chunks).map(|_| None).collect());
    let workers = workers.clamp(1, n_chunks.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let mut state = match init() {
                    Ok(s) => s,
                    Err(e) => {
                        let c = next.fetch_add(1, Ordering::SeqCst);
                        if c < n_chunks {
                            slots.lock().expect("slot lock")[c] = Some(Err(e));
                        }
                        return;
                    }
                };
                loop {
                    let c = next.fetch_add(1, Ordering::SeqCst);
                    if c >= n_chunks {
                        break;
                    }
                    let len = CHUNK.min(n - c * CHUNK);
                    let mut rng = stream_rng(seed, c as u64);
                    let out: Result<Vec<T>> = (0..len).map(|_| draw(&mut state, &mut rng)).collect();
                    let failed = out.is_err();
                    slots.lock().expect("slot lock")[c] = Some(out);
                    if failed {
                        break;
                    }
                }
            });
        }
    });
    let mut all = Vec::with_capacity(n);
    for slot in slots.into_inner().expect("slot lock") {
        match slot {
            Some(Ok(v)) => all.extend(v),
            Some(Err(e)) => return Err(e),
            // an earlier failure stopped the worker that owned this chunk
            None => continue,
        }
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn independent_of_worker_count() {
        let f = |_: &mut (), r: &mut McRng| Ok(r.random::<u64>());
        let a = par_draws(10_000, 7, 1, || Ok(()), f).unwrap();
        let b = par_draws(10_000, 7, 5, || Ok(()), f).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10_000);
        let c = par_draws(10_000, 8, 5, || Ok(()), f).unwrap();
        assert_ne!(a, c);
    }
}
