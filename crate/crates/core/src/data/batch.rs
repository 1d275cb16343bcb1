use crate::error::{Error, Result};
use crate::numerics::Rng;

/// One epoch of shuffled index batches over `n` rows. A trailing batch of
/// size 1 is dropped because batch norm cannot normalize a single row.
pub fn batches(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size must be at least 2, got {batch_size}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    Ok(idx
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Endless batch sequence over one domain, reshuffled on every pass.
#[derive(Debug, Clone)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    rng: Rng,
    queue: Vec<Vec<usize>>,
    pos: usize,
    passes: usize,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, rng: Rng) -> Result<Self> {
        if n < 2 {
            return Err(Error::DegenerateBatch { rows: n });
        }
        if batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {batch_size}")));
        }
        Ok(Self {
            n,
            batch_size,
            rng,
            queue: Vec::new(),
            pos: 0,
            passes: 0,
        })
    }

    /// Batches in one full pass over the domain.
    pub fn batches_per_pass(&self) -> usize {
        let full = self.n / self.batch_size;
        full + usize::from(self.n % self.batch_size >= 2)
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos == self.queue.len() {
            self.queue = batches(self.n, self.batch_size, &mut self.rng).expect("validated in new");
            self.pos = 0;
            self.passes += 1;
        }
        self.pos += 1;
        self.queue[self.pos - 1].clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(n: usize, b: usize, seed: u64) -> Vec<usize> {
        batches(n, b, &mut Rng::new(seed)).unwrap().iter().map(Vec::len).collect()
    }

    #[test]
    fn sizes_and_drop_rule() {
        assert_eq!(sizes(10, 4, 0), vec![4, 4, 2]);
        assert_eq!(sizes(9, 4, 0), vec![4, 4]);
        assert!(batches(9, 1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn seeded_order() {
        let a = batches(50, 8, &mut Rng::new(4)).unwrap();
        let b = batches(50, 8, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn stream_reshuffles_each_pass() {
        let mut s = BatchStream::new(9, 4, Rng::new(1)).unwrap();
        assert_eq!(s.batches_per_pass(), 2);
        let first: Vec<Vec<usize>> = (0..2).map(|_| s.next_batch()).collect();
        let second: Vec<Vec<usize>> = (0..2).map(|_| s.next_batch()).collect();
        assert_eq!(s.passes(), 2);
        assert_ne!(first, second);
        assert!(BatchStream::new(1, 4, Rng::new(0)).is_err());
    }
}
