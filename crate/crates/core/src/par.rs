//! Data-parallel map with a sequential fallback.
//!
//! Every parallel call site in the crate goes through [`map_indexed`], which
//! always returns results in index order. Callers reduce the returned vector
//! sequentially, so floating-point sums are identical in both modes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    #[default]
    Sequential,
    /// Falls back to sequential when the `parallel` feature is disabled.
    Parallel,
}

impl Execution {
    pub fn from_workers(workers: usize) -> Self {
        if workers > 1 {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Same as [`map_indexed`] but short-circuits on the first error (in index
/// order for the sequential path).
pub fn try_map_indexed<T, E, F>(exec: Execution, n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(exec, n, f).into_iter().collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG stream for one unit of work, derived from the run seed
/// and a coordinate such as `(purpose, step, index)`. Streams do not depend
/// on scheduling, so parallel and sequential runs draw the same numbers.
pub fn stream_rng(seed: u64, coords: &[u64]) -> ChaCha8Rng {
    let key = coords.iter().fold(splitmix64(seed), |h, &c| splitmix64(h ^ c));
    ChaCha8Rng::seed_from_u64(key)
}

/// Configures the global worker pool. Only the first call has an effect.
pub fn init_workers(workers: usize) {
    #[cfg(feature = "parallel")]
    if workers > 1 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    let _ = workers;
}
