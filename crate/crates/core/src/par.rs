//! Data-parallel map with a deterministic contract.
//!
//! All parallel work in this crate flows through [`map_ordered`]: independent
//! items are computed (possibly on a rayon pool) and collected in index
//! order, and every reduction over the results happens sequentially on the
//! collected vector. Outputs are therefore bitwise identical for any worker
//! count, with the `parallel` feature disabled, and with
//! [`force_sequential`] toggled — which is what the benches compare.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Runtime switch to the sequential path even when the `parallel` feature is
/// compiled in. Used by benches and determinism tests.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn sequential_forced() -> bool {
    FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_ordered<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if !sequential_forced() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, returning results in item order.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    map_ordered(items.len(), |i| f(&items[i]))
}
