use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::event_data::StayRecord;

/// Indices into the input slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretrainSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stay-level random split. Stays with more than `cap` events always go to
/// train (they are segmented later); the test set holds
/// `round(test_fraction · n)` short stays, or all of them if fewer exist.
pub fn split_pretrain(
    stays: &[StayRecord],
    cap: usize,
    test_fraction: f64,
    seed: u64,
) -> PretrainSplit {
    assert!(
        test_fraction > 0.0 && test_fraction < 1.0,
        "test_fraction must be in (0, 1)"
    );
    let (mut short, long): (Vec<usize>, Vec<usize>) =
        (0..stays.len()).partition(|&i| stays[i].events.len() <= cap);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    short.shuffle(&mut rng);
    let n_test = ((test_fraction * stays.len() as f64).round() as usize).min(short.len());
    let mut test = short[..n_test].to_vec();
    let mut train: Vec<usize> = short[n_test..].iter().copied().chain(long).collect();
    test.sort_unstable();
    train.sort_unstable();
    PretrainSplit { train, test }
}
