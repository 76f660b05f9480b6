use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AnnotationStore, DatasetError, ImageId, Split};

#[derive(Debug, Clone, PartialEq)]
pub enum SplitMode {
    Random,
    /// Keep the source's own split assignment.
    Predefined(BTreeMap<ImageId, Split>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPolicy {
    /// (train, val, test) fractions.
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    pub mode: SplitMode,
}

impl SplitPolicy {
    pub fn random(ratios: (f64, f64, f64), seed: u64) -> Self {
        Self { ratios, seed, mode: SplitMode::Random }
    }

    /// Parse `"7:2:1"`-style ratio strings into normalized fractions.
    pub fn parse_ratios(text: &str) -> Option<(f64, f64, f64)> {
        let parts: Vec<f64> = text.split(':').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
        if parts.len() != 3 || parts.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return None;
        }
        let total: f64 = parts.iter().sum();
        Some((parts[0] / total, parts[1] / total, parts[2] / total))
    }

    fn check(&self) -> Result<(), DatasetError> {
        let (a, b, c) = self.ratios;
        let in_range = [a, b, c].iter().all(|r| *r > 0.0 && *r < 1.0);
        if !in_range || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(DatasetError::BadRatios(self.ratios));
        }
        Ok(())
    }
}

/// `(train, val, test)` sizes for `n` images: test and val are floored, the
/// remainder goes to train.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    // small epsilon so that e.g. 0.1 * 70 = 7.000000000000001 and 0.7 * 10 don't drift
    let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let n_test = floor(ratios.2);
    let n_val = floor(ratios.1);
    (n - n_val - n_test, n_val, n_test)
}

/// Assign every image to exactly one split.
///
/// Random mode shuffles the id-sorted image list with a seeded ChaCha8 stream, so
/// identical `(store, seed, ratios)` always produce the same assignment.
pub fn split_dataset(store: &AnnotationStore, policy: &SplitPolicy) -> Result<AnnotationStore, DatasetError> {
    policy.check()?;
    let mut ids: Vec<ImageId> = store.images.iter().map(|im| im.id).collect();
    ids.sort_unstable();

    let splits = match &policy.mode {
        SplitMode::Predefined(map) => {
            let mut out = BTreeMap::new();
            for id in &ids {
                let s = map.get(id).ok_or(DatasetError::IncompleteSplitMap(*id))?;
                out.insert(*id, *s);
            }
            out
        }
        SplitMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
            ids.shuffle(&mut rng);
            let (_, n_val, n_test) = split_sizes(ids.len(), policy.ratios);
            ids.iter()
                .enumerate()
                .map(|(i, id)| {
                    let s = if i < n_test {
                        Split::Test
                    } else if i < n_test + n_val {
                        Split::Val
                    } else {
                        Split::Train
                    };
                    (*id, s)
                })
                .collect()
        }
    };
    Ok(AnnotationStore { splits, ..store.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageRecord;
    use proptest::prelude::*;

    fn store_of(n: usize) -> AnnotationStore {
        AnnotationStore {
            images: (1..=n as u64)
                .map(|id| ImageRecord { id, file_name: format!("{id}.jpg"), width: 32, height: 32 })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn sizes_follow_floor_rule() {
        let r = SplitPolicy::parse_ratios("7:2:1").unwrap();
        // floor(0.1 * 1001) = 100, floor(0.2 * 1001) = 200, remainder 701
        assert_eq!(split_sizes(1001, r), (701, 200, 100));
        assert_eq!(split_sizes(10, r), (7, 2, 1));
        let s = split_dataset(&store_of(1001), &SplitPolicy::random(r, 42)).unwrap();
        assert_eq!(s.split_counts(), (701, 200, 100));
    }

    #[test]
    fn predefined_bruising_counts() {
        let n = 1001;
        let map: BTreeMap<_, _> = (1..=n as u64)
            .map(|id| {
                let s = if id <= 799 {
                    Split::Train
                } else if id <= 900 {
                    Split::Val
                } else {
                    Split::Test
                };
                (id, s)
            })
            .collect();
        let policy = SplitPolicy { ratios: (0.7, 0.2, 0.1), seed: 0, mode: SplitMode::Predefined(map.clone()) };
        let s = split_dataset(&store_of(n), &policy).unwrap();
        assert_eq!(s.split_counts(), (799, 101, 101));

        let mut partial = map;
        partial.remove(&500);
        let policy = SplitPolicy { mode: SplitMode::Predefined(partial), ..policy };
        assert!(matches!(split_dataset(&store_of(n), &policy), Err(DatasetError::IncompleteSplitMap(500))));
    }

    #[test]
    fn bad_ratios_rejected() {
        let p = SplitPolicy::random((0.7, 0.2, 0.2), 1);
        assert!(matches!(split_dataset(&store_of(5), &p), Err(DatasetError::BadRatios(_))));
        let p = SplitPolicy::random((1.0, 0.0, 0.0), 1);
        assert!(split_dataset(&store_of(5), &p).is_err());
        assert!(SplitPolicy::parse_ratios("7:2").is_none());
    }

    proptest! {
        #[test]
        fn deterministic_partition(n in 1usize..300, seed in any::<u64>()) {
            let store = store_of(n);
            let p = SplitPolicy::random((0.7, 0.2, 0.1), seed);
            let a = split_dataset(&store, &p).unwrap();
            let b = split_dataset(&store, &p).unwrap();
            prop_assert_eq!(&a.splits, &b.splits);
            prop_assert_eq!(a.splits.len(), n);
            let (tr, va, te) = a.split_counts();
            prop_assert_eq!(tr + va + te, n);
            prop_assert_eq!((tr, va, te), split_sizes(n, p.ratios));
            prop_assert!(crate::dataset::validate(&a).is_empty());
        }
    }
}
