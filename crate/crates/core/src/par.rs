//! Data-parallel helpers with a sequential fallback.
//!
//! Every parallel site in the crate goes through this module so that the
//! `parallel` feature is the single switch between rayon and plain loops.
//! All helpers preserve output order, so results are identical in both
//! modes and independent of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential twin of [`map_indexed`], kept callable in parallel builds so
/// benches can compare both paths in one binary.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Apply `f` to each equal-length chunk of `data`, passing the chunk index.
/// Chunks are disjoint, so writes never race.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Sequential twin of [`for_each_chunk_mut`].
pub fn for_each_chunk_mut_seq<T, F>(data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    debug_assert!(chunk > 0);
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(100, |i| i * i);
        let s = map_indexed_seq(100, |i| i * i);
        assert_eq!(v, s);
    }

    #[test]
    fn chunked_writes_cover_all_elements() {
        let mut a = vec![0u32; 64];
        let mut b = vec![0u32; 64];
        for_each_chunk_mut(&mut a, 8, |i, c| c.iter_mut().for_each(|x| *x = i as u32));
        for_each_chunk_mut_seq(&mut b, 8, |i, c| c.iter_mut().for_each(|x| *x = i as u32));
        assert_eq!(a, b);
    }
}
