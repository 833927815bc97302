//! Seed schedule and the deterministic parallel replica runner.
//!
//! Replica `i` of a task with key `k` draws from `ChaCha8Rng::seed_from_u64(k)`
//! on stream `i`. Replicas are grouped into fixed-size chunks, each chunk is
//! folded in index order and chunk results are merged in index order, so the
//! outcome does not depend on the number of worker threads.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

/// Identifier of the seed-splitting function, recorded in every estimate.
pub const SEED_SCHEDULE: &str = "chacha8-stream-v1";
/// Replicas per chunk. Changing it changes floating-point merge order.
pub const CHUNK: u64 = 256;

pub type ReplicaRng = ChaCha8Rng;

/// RNG of replica `index` under task key `key`.
pub fn replica_rng(key: u64, index: u64) -> ReplicaRng {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Master seed plus a task label, and the worker pool that runs replicas.
#[derive(Clone)]
pub struct Plan {
    seed: u64,
    key: u64,
    label: String,
    workers: usize,
    pool: Arc<rayon::ThreadPool>,
}

impl std::fmt::Debug for Plan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Plan")
            .field("seed", &self.seed)
            .field("label", &self.label)
            .field("workers", &self.workers)
            .finish()
    }
}

fn derive_key(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl Plan {
    pub fn new(seed: u64, workers: usize) -> Self {
        let workers = workers.max(1);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().expect("thread pool");
        Self { seed, key: derive_key(seed, ""), label: String::new(), workers, pool: Arc::new(pool) }
    }

    /// Single-threaded plan; handy in tests.
    pub fn serial(seed: u64) -> Self {
        Self::new(seed, 1)
    }

    /// Independent sub-task: same pool, key derived from the path of labels.
    pub fn sub(&self, label: &str) -> Self {
        let label = if self.label.is_empty() { label.to_string() } else { format!("{}/{}", self.label, label) };
        Self {
            seed: self.seed,
            key: derive_key(self.seed, &label),
            label,
            workers: self.workers,
            pool: Arc::clone(&self.pool),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn rng(&self, index: u64) -> ReplicaRng {
        replica_rng(self.key, index)
    }

    /// Folds `n` replicas. `scratch` builds per-chunk working memory, `init`
    /// the empty accumulator, `step` consumes one replica and `merge` joins
    /// chunk accumulators in index order.
    pub fn fold<A, S, FS, FI, FStep, FM>(&self, n: u64, scratch: FS, init: FI, step: FStep, merge: FM) -> A
    where
        A: Send,
        FS: Fn() -> S + Sync,
        FI: Fn() -> A + Sync,
        FStep: Fn(&mut A, &mut S, u64, &mut ReplicaRng) + Sync,
        FM: Fn(&mut A, A),
    {
        let chunks = n.div_ceil(CHUNK);
        let key = self.key;
        let parts: Vec<A> = self.pool.install(|| {
            (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let mut acc = init();
                    let mut s = scratch();
                    for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                        let mut rng = replica_rng(key, i);
                        step(&mut acc, &mut s, i, &mut rng);
                    }
                    acc
                })
                .collect()
        });
        let mut total = init();
        for p in parts {
            merge(&mut total, p);
        }
        total
    }

    /// Runs `n` replicas and returns their outputs in index order.
    pub fn map<T, FStep>(&self, n: u64, f: FStep) -> Vec<T>
    where
        T: Send,
        FStep: Fn(u64, &mut ReplicaRng) -> T + Sync,
    {
        self.fold(n, || (), Vec::new, |acc: &mut Vec<T>, _, i, rng| acc.push(f(i, rng)), |acc, part| acc.extend(part))
    }
}
