//! Mismatched-segment sampling from the matched segment's own stimulus.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::series::SegmentRef;

/// Draws `n` segments of the stimulus other than `matched`: without
/// replacement when at least `n` others exist, with replacement otherwise.
pub fn sample_negatives<R: Rng + ?Sized>(
    stimulus_segments: &[SegmentRef],
    matched: SegmentRef,
    n: usize,
    rng: &mut R,
) -> Result<Vec<SegmentRef>> {
    let others: Vec<SegmentRef> = stimulus_segments.iter().copied().filter(|s| *s != matched).collect();
    if others.is_empty() {
        return Err(Error::NoNegativesAvailable);
    }
    if others.len() >= n {
        Ok(index::sample(rng, others.len(), n).into_iter().map(|i| others[i]).collect())
    } else {
        Ok((0..n).map(|_| others[rng.random_range(0..others.len())]).collect())
    }
}

/// Index-level variant used on the training hot path: draws `n` segment
/// indices in `0..count` excluding `matched`.
pub(crate) fn sample_negative_indices<R: Rng + ?Sized>(count: usize, matched: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if count < 2 {
        return Err(Error::NoNegativesAvailable);
    }
    let skip = |i: usize| if i >= matched { i + 1 } else { i };
    if count - 1 >= n {
        Ok(index::sample(rng, count - 1, n).into_iter().map(skip).collect())
    } else {
        Ok((0..n).map(|_| skip(rng.random_range(0..count - 1))).collect())
    }
}
