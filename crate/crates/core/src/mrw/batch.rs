use rayon::prelude::*;

use crate::rng::{path_rng, PathRng};

/// Runs `f` for path indices `0..n`, each on its own stream, and returns the
/// results in index order regardless of how the work was scheduled.
pub fn map_paths<T, F>(n: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut PathRng) -> T + Sync + Send,
{
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            f(i, &mut rng)
        })
        .collect()
}
