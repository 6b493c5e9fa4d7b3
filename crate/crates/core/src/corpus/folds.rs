use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::{Error, Result};

/// Speaker-level k-fold split. Returns one `(train, validation)` pair per fold.
///
/// Speakers are shuffled with a seeded RNG and dealt round-robin into folds, so
/// fold sizes differ by at most one.
pub fn split_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    let n = dataset.n_speakers();
    if k < 2 {
        return Err(Error::Argument(format!(
            "k-fold split needs k >= 2, got {k} (k = 1 leaves an empty training side)"
        )));
    }
    if k > n {
        return Err(Error::Argument(format!(
            "k = {k} folds exceeds the {n} available speakers"
        )));
    }
    let mut ids = dataset.speaker_ids();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (0..k)
        .map(|f| {
            let (val, train): (Vec<_>, Vec<_>) =
                ids.iter().enumerate().partition(|(i, _)| i % k == f);
            let val: Vec<&String> = val.into_iter().map(|(_, id)| id).collect();
            let train: Vec<&String> = train.into_iter().map(|(_, id)| id).collect();
            Ok((dataset.subset(&train)?, dataset.subset(&val)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Speaker, Utterance};
    use nalgebra::DMatrix;
    use std::collections::BTreeSet;

    fn dataset(n: usize) -> Dataset {
        let speakers = (0..n)
            .map(|i| {
                let u = Utterance::new("u", DMatrix::zeros(1, 1), vec![0]).unwrap();
                Speaker::new(format!("s{i:03}"), vec![u]).unwrap()
            })
            .collect();
        Dataset::new(speakers, 1, 1).unwrap()
    }

    #[test]
    fn ten_speakers_five_folds() {
        let folds = split_folds(&dataset(10), 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        for (train, val) in &folds {
            assert_eq!(val.n_speakers(), 2);
            assert_eq!(train.n_speakers(), 8);
        }
    }

    #[test]
    fn sizes_for_277_speakers() {
        // 277 = 5 * 55 + 2, so two folds get 56 and three get 55.
        let folds = split_folds(&dataset(277), 5, 11).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|(_, v)| v.n_speakers()).collect();
        assert!(sizes.iter().all(|s| *s == 55 || *s == 56));
        assert_eq!(sizes.iter().sum::<usize>(), 277);
        assert_eq!(sizes.iter().filter(|&&s| s == 56).count(), 2);
    }

    #[test]
    fn degenerate_k_rejected() {
        assert!(matches!(split_folds(&dataset(4), 1, 0), Err(Error::Argument(_))));
        assert!(matches!(split_folds(&dataset(4), 5, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn partition_property_and_determinism() {
        let ds = dataset(23);
        let folds = split_folds(&ds, 4, 99).unwrap();
        let mut seen = BTreeSet::new();
        for (train, val) in &folds {
            for id in val.speaker_ids() {
                assert!(seen.insert(id.clone()), "{id} in two validation folds");
                assert!(train.speaker(&id).is_none());
            }
            assert_eq!(train.n_speakers() + val.n_speakers(), 23);
        }
        assert_eq!(seen.len(), 23);
        assert_eq!(folds, split_folds(&ds, 4, 99).unwrap());
    }
}
