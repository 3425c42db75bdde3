use rayon::prelude::*;

/// Maps `f` over `items`, returning results in input order. With `threads <= 1`
/// this is a plain serial loop; otherwise the work runs on a dedicated pool.
/// Either way the output order, and hence any later reduction, is fixed.
pub(crate) fn ordered_map<T, R, F>(threads: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}
