use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{G2pError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then `⌊n·r/Σr⌋` items each for validation and test; the
/// remainder goes to training.
pub fn split_corpus<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<Split<T>> {
    let n = items.len();
    if n < 3 {
        return Err(G2pError::Data(format!("cannot split {n} samples into three parts")));
    }
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || !(a + b + c).is_finite() {
        return Err(G2pError::Config(format!("split ratios must be positive, got {a}:{b}:{c}")));
    }
    let total = a + b + c;
    let n_val = (n as f64 * b / total).floor() as usize;
    let n_test = (n as f64 * c / total).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    let n_train = n - n_val - n_test;
    Ok(Split {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}
