use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A seeded shuffle of the active indices for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub order: Vec<usize>,
    pub epoch_seed: u64,
}

impl BatchPlan {
    /// Consecutive batches of `batch_size`; the final one may be short.
    pub fn batches(&self) -> std::slice::Chunks<'_, usize> {
        self.order.chunks(self.batch_size)
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

pub fn make_batches(active: &[usize], batch_size: usize, epoch_seed: u64) -> Result<BatchPlan> {
    if active.is_empty() {
        return Err(Error::InvalidArgument("no active indices to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order = active.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(BatchPlan {
        batch_size,
        order,
        epoch_seed,
    })
}
