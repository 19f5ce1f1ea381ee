use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded permutation of `0..n` cut into consecutive batches of `batch_size`;
/// the final short batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::param("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Iterate `data` in seed-determined batches of references.
pub fn batch_iterator<T>(data: &[T], batch_size: usize, seed: u64) -> Result<impl Iterator<Item = Vec<&T>> + '_> {
    let batches = batch_indices(data.len(), batch_size, seed)?;
    Ok(batches
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &data[i]).collect()))
}
