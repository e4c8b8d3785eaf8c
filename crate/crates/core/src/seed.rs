//! Derived seeds so every random draw is a pure function of (run seed, tags).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPOCH_TAG: u64 = 0xE0;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// `(epoch, index)` of every example in 0-based batch `step` when each
/// epoch visits a fresh permutation of `0..n`.
pub fn epoch_batch(seed: u64, n: usize, batch_size: usize, step: u64) -> Vec<(u64, usize)> {
    assert!(n > 0, "epoch_batch over an empty set");
    let (b, n64) = (batch_size as u64, n as u64);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..b)
        .map(|i| {
            let g = step * b + i;
            let epoch = g / n64;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng_for(seed, &[EPOCH_TAG, epoch]));
                cached = Some((epoch, idx));
            }
            (epoch, cached.as_ref().expect("cached epoch").1[(g % n64) as usize])
        })
        .collect()
}
