//! Seeded train/validation/test partitions over whole scans or cases.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::substream;

/// What a split unit is. Slices are never split units: every slice of a
/// scan lands on the same side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    Scan,
    Case,
}

impl fmt::Display for SplitUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitUnit::Scan => "scan",
            SplitUnit::Case => "case",
        })
    }
}

impl FromStr for SplitUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scan" => Ok(SplitUnit::Scan),
            "case" => Ok(SplitUnit::Case),
            other => Err(Error::InvalidArgument(format!("unknown split unit `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// `(train, val, test)`.
    pub fractions: [f64; 3],
    pub seed: u64,
    pub unit: SplitUnit,
}

impl SplitConfig {
    /// 80/5/15 by scan, the segmentation split.
    pub fn segmentation(seed: u64) -> Self {
        SplitConfig {
            fractions: [0.80, 0.05, 0.15],
            seed,
            unit: SplitUnit::Scan,
        }
    }

    /// 60/15/25 by case, the classification split.
    pub fn classification(seed: u64) -> Self {
        SplitConfig {
            fractions: [0.60, 0.15, 0.25],
            seed,
            unit: SplitUnit::Case,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be non-negative, got {:?}",
                self.fractions
            )));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Partition sizes for `n` units: train and validation are
    /// `round(fraction * n)`, test takes what is left.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let round = |f: f64| ((f * n as f64).round() as usize).min(n);
        let train = round(self.fractions[0]);
        let val = round(self.fractions[1]).min(n - train);
        [train, val, n - train - val]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Split<T> {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: AsRef<str>> Split<T> {
    /// Hex digest identifying the partition, for checking that two runs
    /// used the same split.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (tag, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            h.update(tag.as_bytes());
            for id in part {
                h.update(b"\n");
                h.update(id.as_ref().as_bytes());
            }
            h.update(b"\0");
        }
        hex::encode(h.finalize())
    }
}

/// Shuffle `units` under `cfg.seed` and cut into train, validation and test.
pub fn split_dataset<T: Clone>(units: &[T], cfg: &SplitConfig) -> Result<Split<T>> {
    cfg.validate()?;
    if units.is_empty() {
        return Err(Error::Empty("no units to split".into()));
    }
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(&mut substream(cfg.seed, "split", 0));
    let [ntr, nva, _] = cfg.sizes(units.len());
    let pick = |ids: &[usize]| ids.iter().map(|&i| units[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: pick(&order[..ntr]),
        val: pick(&order[ntr..ntr + nva]),
        test: pick(&order[ntr + nva..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn example_sizes() {
        assert_eq!(SplitConfig::segmentation(0).sizes(888), [710, 44, 134]);
        assert_eq!(SplitConfig::classification(0).sizes(204), [122, 31, 51]);
        let all_train = SplitConfig {
            fractions: [1.0, 0.0, 0.0],
            seed: 3,
            unit: SplitUnit::Case,
        };
        let s = split_dataset(&(0..17).collect::<Vec<_>>(), &all_train).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (17, 0, 0));
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = SplitConfig::segmentation(0);
        assert!(matches!(split_dataset::<u8>(&[], &cfg), Err(Error::Empty(_))));
        let bad = SplitConfig {
            fractions: [0.5, 0.5, 0.5],
            ..cfg
        };
        assert!(split_dataset(&[1], &bad).is_err());
        let neg = SplitConfig {
            fractions: [1.2, -0.2, 0.0],
            ..cfg
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let ids: Vec<String> = (0..50).map(|i| format!("s{i}")).collect();
        let a = split_dataset(&ids, &SplitConfig::segmentation(4)).unwrap();
        let b = split_dataset(&ids, &SplitConfig::segmentation(4)).unwrap();
        let c = split_dataset(&ids, &SplitConfig::segmentation(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    proptest! {
        #[test]
        fn disjoint_and_exhaustive(n in 1usize..300, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let cfg = SplitConfig { fractions: [lo, hi - lo, 1.0 - hi], seed, unit: SplitUnit::Scan };
            let units: Vec<usize> = (0..n).collect();
            let s = split_dataset(&units, &cfg).unwrap();
            let mut seen = BTreeSet::new();
            for u in s.train.iter().chain(&s.val).chain(&s.test) {
                prop_assert!(seen.insert(*u));
            }
            prop_assert_eq!(seen.len(), n);
            prop_assert_eq!(s.train.len(), (lo * n as f64).round() as usize);
        }
    }
}
