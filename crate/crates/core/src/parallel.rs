//! Deterministic block-parallel map.
//!
//! Work is split into fixed-size blocks and results come back in block
//! order, so any reduction over them is independent of the thread count.

use std::num::NonZeroUsize;
use std::thread;

pub fn map_blocks<T, R, F>(items: &[T], block: usize, f: F) -> crate::Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> crate::Result<R> + Sync,
{
    let blocks: Vec<&[T]> = items.chunks(block.max(1)).collect();
    let threads = thread::available_parallelism()
        .map(NonZeroUsize::get)
        .unwrap_or(1)
        .min(blocks.len());
    if threads <= 1 {
        return blocks.into_iter().map(&f).collect();
    }
    let per_thread = blocks.len().div_ceil(threads);
    thread::scope(|scope| {
        let handles: Vec<_> = blocks
            .chunks(per_thread)
            .map(|group| scope.spawn(|| group.iter().map(|b| f(b)).collect::<Vec<_>>()))
            .collect();
        let mut out = Vec::with_capacity(blocks.len());
        for h in handles {
            for r in h.join().expect("worker thread panicked") {
                out.push(r?);
            }
        }
        Ok(out)
    })
}
