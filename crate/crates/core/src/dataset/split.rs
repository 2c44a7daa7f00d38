use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Disjoint train/validation partition of record indices, each sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shuffles `0..count` with `seed` and holds out `floor(count * val_fraction)`
/// indices for validation.
pub fn split(count: usize, val_fraction: f64, seed: u64) -> Result<Split> {
    if count == 0 {
        return Err(Error::Tub("cannot split an empty tub".into()));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Domain(format!(
            "validation fraction {val_fraction} outside (0, 1)"
        )));
    }
    let mut indices: Vec<usize> = (0..count).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (count as f64 * val_fraction).floor() as usize;
    let mut val = indices[..n_val].to_vec();
    let mut train = indices[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, val })
}
