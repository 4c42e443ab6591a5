//! Execution-mode helpers for the data-parallel loops (dataset emission,
//! Monte-Carlo estimates, batch decoding, probe sweeps).
//!
//! Every helper produces results in index order, so the output of a
//! parallel run is bit-identical to the sequential one. Without the
//! `parallel` feature, [`Exec::Parallel`] silently runs sequentially.

/// How a data-parallel loop should be executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// True when work will actually fan out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Maps `f` over `0..n`, preserving order.
    pub fn map_range<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps `f` over a slice, preserving order.
    pub fn map_slice<'a, S, T, F>(self, items: &'a [S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(&'a S) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Maps `f` over consecutive chunks of `items`; `f` receives the
    /// chunk's starting offset.
    pub fn map_chunks<'a, S, T, F>(self, items: &'a [S], chunk: usize, f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(usize, &'a [S]) -> T + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return items
                .par_chunks(chunk)
                .enumerate()
                .map(|(k, c)| f(k * chunk, c))
                .collect();
        }
        items
            .chunks(chunk)
            .enumerate()
            .map(|(k, c)| f(k * chunk, c))
            .collect()
    }

    /// Runs two closures, concurrently when parallel.
    pub fn join<A, B, RA, RB>(self, a: A, b: B) -> (RA, RB)
    where
        A: FnOnce() -> RA + Send,
        B: FnOnce() -> RB + Send,
        RA: Send,
        RB: Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return rayon::join(a, b);
        }
        (a(), b())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let seq = Exec::Sequential.map_range(1000, |i| (i as f64).sqrt());
        let par = Exec::Parallel.map_range(1000, |i| (i as f64).sqrt());
        assert_eq!(seq, par);
        let data: Vec<u32> = (0..103).collect();
        let a = Exec::Sequential.map_chunks(&data, 10, |off, c| (off, c.iter().sum::<u32>()));
        let b = Exec::Parallel.map_chunks(&data, 10, |off, c| (off, c.iter().sum::<u32>()));
        assert_eq!(a, b);
        assert_eq!(a.len(), 11);
        assert_eq!(a[10].0, 100);
    }
}
