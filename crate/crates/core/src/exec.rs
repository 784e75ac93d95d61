//! Execution policy and compute profile.
//!
//! Every data-parallel loop in the crate goes through [`ExecPolicy`]. With the
//! `parallel` feature disabled, `Parallel` silently degrades to sequential
//! iteration. Results are collected in index order either way, so outputs
//! never depend on scheduling.

use std::path::PathBuf;

/// Environment variable selecting the compute profile (`deterministic` or `fast`).
pub const PROFILE_ENV: &str = "RADMARK_PROFILE";
/// Environment variable pointing at the artifact cache directory.
pub const CACHE_DIR_ENV: &str = "RADMARK_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecPolicy {
    Sequential,
    #[default]
    Parallel,
}

impl ExecPolicy {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecPolicy::Parallel
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps `f` over the items of a slice, returning results in order.
    pub fn map_slice<'a, S, T, F>(self, items: &'a [S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(&'a S) -> T + Sync + Send,
    {
        self.map(items.len(), |i| f(&items[i]))
    }
}

/// Compute profile. `Deterministic` reduces per-chunk partial results in a
/// fixed order; `Fast` lets the thread pool pick the reduction tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputeProfile {
    #[default]
    Deterministic,
    Fast,
}

impl ComputeProfile {
    pub fn from_env() -> Self {
        match std::env::var(PROFILE_ENV).as_deref() {
            Ok("fast") => ComputeProfile::Fast,
            _ => ComputeProfile::Deterministic,
        }
    }
}

pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from)
}

/// Sums equally sized vectors produced by `f(chunk_index)` over `chunks` chunks.
pub(crate) fn sum_chunks<F>(
    policy: ExecPolicy,
    profile: ComputeProfile,
    chunks: usize,
    len: usize,
    f: F,
) -> Vec<f32>
where
    F: Fn(usize) -> Vec<f32> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if profile == ComputeProfile::Fast && policy.is_parallel() {
        use rayon::prelude::*;
        return (0..chunks).into_par_iter().map(f).reduce(
            || vec![0.0; len],
            |mut a, b| {
                add_assign(&mut a, &b);
                a
            },
        );
    }
    let _ = profile;
    let parts = policy.map(chunks, f);
    let mut acc = vec![0.0f32; len];
    for p in &parts {
        add_assign(&mut acc, p);
    }
    acc
}

#[inline]
pub(crate) fn add_assign(acc: &mut [f32], x: &[f32]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += *b;
    }
}
