//! Thread-local recycling of large `f32` buffers between batches.
//!
//! Freshly mapped multi-megabyte allocations page-fault on every training
//! step; handing them back here keeps the pages warm.

use std::cell::RefCell;

/// Buffers shorter than this go straight to the allocator.
const MIN_LEN: usize = 1 << 14;
const MAX_POOLED: usize = 24;

thread_local! {
    static POOL: RefCell<Vec<Vec<f32>>> = const { RefCell::new(Vec::new()) };
}

fn smallest<'a>(bufs: impl Iterator<Item = (usize, &'a Vec<f32>)>) -> Option<usize> {
    bufs.min_by_key(|(_, v)| v.capacity()).map(|(i, _)| i)
}

/// Zero-filled buffer of length `len`.
pub(crate) fn zeroed(len: usize) -> Vec<f32> {
    if len < MIN_LEN {
        return vec![0.0; len];
    }
    let reused = POOL
        .try_with(|pool| {
            let mut pool = pool.borrow_mut();
            smallest(pool.iter().enumerate().filter(|(_, v)| v.capacity() >= len)).map(|i| pool.swap_remove(i))
        })
        .ok()
        .flatten();
    match reused {
        Some(mut v) => {
            v.clear();
            v.resize(len, 0.0);
            v
        }
        None => vec![0.0; len],
    }
}

pub(crate) fn copied(src: &[f32]) -> Vec<f32> {
    let mut v = zeroed(src.len());
    v.copy_from_slice(src);
    v
}

pub(crate) fn recycle(v: Vec<f32>) {
    if v.capacity() < MIN_LEN {
        return;
    }
    let _ = POOL.try_with(|pool| {
        let mut pool = pool.borrow_mut();
        pool.push(v);
        if pool.len() > MAX_POOLED {
            if let Some(i) = smallest(pool.iter().enumerate()) {
                pool.swap_remove(i);
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reused_buffers_come_back_zeroed() {
        let mut v = zeroed(MIN_LEN * 2);
        v.iter_mut().for_each(|x| *x = 7.0);
        recycle(v);
        let w = zeroed(MIN_LEN + 3);
        assert_eq!(w.len(), MIN_LEN + 3);
        assert!(w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn copied_matches_source() {
        let src: Vec<f32> = (0..MIN_LEN + 10).map(|i| i as f32).collect();
        assert_eq!(copied(&src), src);
    }
}
