//! Small numeric helpers shared by the variational and sampling E-steps.

use rand::seq::SliceRandom;
use rand::Rng;

/// Overwrites `logits` with softmax(logits), guarding against overflow.
pub(crate) fn softmax_inplace(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// All `(t, chain)` pairs in a uniformly shuffled order.
pub(crate) fn shuffled_pairs<R: Rng>(t_len: usize, d: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> =
        (0..t_len).flat_map(|t| (0..d).map(move |i| (t, i))).collect();
    pairs.shuffle(rng);
    pairs
}
