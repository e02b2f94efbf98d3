//! Order-preserving fan-out over scoped threads.

use crate::error::Result;

/// `f(i, &items[i])` for every item, with at most `threads` workers each
/// taking one contiguous block. Output order matches input order, so the
/// result does not depend on the thread count.
pub fn map_indexed<I, O, F>(items: &[I], threads: usize, f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> Result<O> + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let block = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<O>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(block)
            .enumerate()
            .map(|(c, chunk)| s.spawn(move || chunk.iter().enumerate().map(|(j, x)| f(c * block + j, x)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_kept_for_any_thread_count() {
        let xs: Vec<usize> = (0..17).collect();
        let one = map_indexed(&xs, 1, |i, x| Ok(i * 100 + x)).unwrap();
        for t in [2, 3, 8, 40] {
            assert_eq!(map_indexed(&xs, t, |i, x| Ok(i * 100 + x)).unwrap(), one);
        }
        assert!(map_indexed::<usize, usize, _>(&[], 4, |_, x| Ok(*x))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn first_error_is_returned() {
        let xs = [1, 2, 3];
        let r = map_indexed(&xs, 2, |_, &x| {
            if x == 2 {
                Err(crate::CoreError::Config("two".into()))
            } else {
                Ok(x)
            }
        });
        assert!(r.is_err());
    }
}
