//! Benign-class rebalancing by duplication.

use rand::seq::SliceRandom;

use crate::annotations::Label;
use crate::rng::substream;

/// Anything carrying a case label.
pub trait Labeled {
    fn label(&self) -> Label;
}

impl Labeled for Label {
    fn label(&self) -> Label {
        *self
    }
}

impl<T> Labeled for (T, Label) {
    fn label(&self) -> Label {
        self.1
    }
}

/// Repeat every benign sample `factor` times in total, keep malignant
/// samples once, and shuffle the result under `seed`.
///
/// # Panics
///
/// If `factor` is zero.
pub fn oversample_benign<S: Labeled + Clone>(samples: &[S], factor: usize, seed: u64) -> Vec<S> {
    assert!(factor >= 1, "oversampling factor must be at least 1");
    let mut out = Vec::with_capacity(samples.len() * factor);
    for s in samples {
        let copies = if s.label() == Label::Benign { factor } else { 1 };
        out.extend(std::iter::repeat(s).take(copies).cloned());
    }
    out.shuffle(&mut substream(seed, "oversample", 0));
    out
}
