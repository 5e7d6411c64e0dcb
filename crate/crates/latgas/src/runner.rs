//! Deterministic replica fan-out.
//!
//! Each replica owns two independent ChaCha8 streams (initial sampling and
//! dynamics) derived from `(master_seed, replica_index)`, so an ensemble of
//! `k` replicas equals `k` single-replica runs at offsets `0..k`, and
//! results are collected in replica order regardless of scheduling.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::engine::replica_rng;

/// Worker-count override honored by [`ensemble`].
pub const WORKER_ENV: &str = "LATGAS_WORKERS";

/// Runs `job(replica, init_rng, dyn_rng)` for `offset..offset+replicas`,
/// in parallel, returning results in replica order.
pub fn ensemble<T: Send>(
    master_seed: u64,
    replicas: u64,
    offset: u64,
    job: impl Fn(u64, ChaCha8Rng, ChaCha8Rng) -> T + Sync,
) -> Vec<T> {
    let run = || {
        (0..replicas)
            .into_par_iter()
            .map(|r| {
                let rep = offset + r;
                let init = replica_rng(master_seed, 2 * rep);
                let dynamics = replica_rng(master_seed, 2 * rep + 1);
                job(rep, init, dynamics)
            })
            .collect()
    };
    match std::env::var(WORKER_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(workers) if workers >= 1 => rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool")
            .install(run),
        _ => run(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    #[test]
    fn split_equals_batch() {
        let batch = ensemble(99, 8, 0, |rep, mut init, mut dynamics| {
            (rep, init.random::<u64>(), dynamics.random::<u64>())
        });
        for r in 0..8u64 {
            let single = ensemble(99, 1, r, |rep, mut init, mut dynamics| {
                (rep, init.random::<u64>(), dynamics.random::<u64>())
            });
            assert_eq!(single[0], batch[r as usize]);
        }
    }
}
