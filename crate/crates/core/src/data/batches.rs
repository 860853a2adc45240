use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Epoch-shuffled minibatch indices. Each epoch's order depends only on
/// `(seed, epoch)`; the trailing partial batch is dropped.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    len: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl BatchIterator {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || batch > len {
            return Err(Error::Config(format!("batch size {batch} must be in 1..={len}")));
        }
        Ok(BatchIterator { len, batch, seed, epoch: 0, cursor: 0, order: Self::permutation(len, seed, 0) })
    }

    pub fn permutation(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Indices of the next minibatch, moving to a fresh epoch when needed.
    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch > self.len {
            self.epoch += 1;
            self.cursor = 0;
            self.order = Self::permutation(self.len, self.seed, self.epoch);
        }
        let start = self.cursor;
        self.cursor += self.batch;
        &self.order[start..start + self.batch]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_covers_each_index_once() {
        let mut it = BatchIterator::new(10, 3, 1).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| it.next_batch().to_vec()).collect();
        assert_eq!(it.epoch(), 0);
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        it.next_batch();
        assert_eq!(it.epoch(), 1);
    }

    #[test]
    fn order_depends_on_seed_and_epoch_only() {
        assert_eq!(BatchIterator::permutation(50, 3, 2), BatchIterator::permutation(50, 3, 2));
        assert_ne!(BatchIterator::permutation(50, 3, 2), BatchIterator::permutation(50, 3, 1));
        assert_ne!(BatchIterator::permutation(50, 4, 2), BatchIterator::permutation(50, 3, 2));
    }

    #[test]
    fn oversized_batch_rejected() {
        assert!(BatchIterator::new(4, 5, 0).is_err());
        assert!(BatchIterator::new(4, 0, 0).is_err());
    }
}
