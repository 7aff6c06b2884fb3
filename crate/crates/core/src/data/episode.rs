use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{Corpus, Domain};
use crate::error::{Error, Result};

/// Default bound on transductive unlabeled nodes per episode.
pub const DEFAULT_UNLABELED_CAP: usize = 200;
/// Default bound on source-domain labeled texts used for cross-domain training.
pub const DEFAULT_SOURCE_CAP: usize = 100;

/// One few-shot task instance: indices into a [`Corpus`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    /// Class-balanced labeled target texts, grouped by class.
    pub labeled: Vec<usize>,
    /// Target texts whose labels are hidden during training.
    pub unlabeled: Vec<usize>,
    /// Held-out target texts with known labels, used only for metrics.
    pub test: Vec<usize>,
    /// Labeled source-domain texts, when the corpus has any.
    pub source_labeled: Option<Vec<usize>>,
}

/// Controls how episodes are drawn from a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSampler {
    pub shots: usize,
    pub test_fraction: f64,
    pub unlabeled_cap: usize,
    pub source_cap: usize,
}

impl Default for EpisodeSampler {
    fn default() -> Self {
        EpisodeSampler {
            shots: 15,
            test_fraction: 0.2,
            unlabeled_cap: DEFAULT_UNLABELED_CAP,
            source_cap: DEFAULT_SOURCE_CAP,
        }
    }
}

impl EpisodeSampler {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }

    /// Draws an episode from the target-domain records of `corpus`.
    ///
    /// `shots` labeled texts are taken per class; of everything else, a
    /// `test_fraction` share (rounded down) with known labels becomes the test
    /// set and the rest forms the unlabeled pool, truncated to
    /// `unlabeled_cap`.
    pub fn sample(&self, corpus: &Corpus, seed: u64) -> Result<Episode> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k2 = corpus.labels().len();
        let records = corpus.records();
        let target = corpus.domain_indices(Domain::Target);

        let mut by_class = vec![Vec::new(); k2];
        for &i in &target {
            if let Some(c) = records[i].label {
                by_class[c].push(i);
            }
        }
        let mut labeled = Vec::with_capacity(k2 * self.shots);
        for (c, pool) in by_class.iter_mut().enumerate() {
            if pool.len() < self.shots {
                return Err(Error::Data(format!(
                    "class {:?} has {} labeled target texts, {} shots requested",
                    corpus.labels().name(c),
                    pool.len(),
                    self.shots
                )));
            }
            pool.shuffle(&mut rng);
            labeled.extend_from_slice(&pool[..self.shots]);
        }

        let mut chosen = vec![false; records.len()];
        for &i in &labeled {
            chosen[i] = true;
        }
        let mut remainder: Vec<usize> = target.into_iter().filter(|&i| !chosen[i]).collect();
        remainder.shuffle(&mut rng);
        // The small epsilon keeps e.g. 0.29 * 100 from flooring to 28.
        let test_len = (self.test_fraction * remainder.len() as f64 + 1e-9).floor() as usize;

        let mut test = Vec::with_capacity(test_len);
        let mut unlabeled = Vec::new();
        for i in remainder {
            if test.len() < test_len && records[i].label.is_some() {
                test.push(i);
            } else {
                unlabeled.push(i);
            }
        }
        unlabeled.truncate(self.unlabeled_cap);

        let mut source: Vec<usize> = corpus
            .domain_indices(Domain::Source)
            .into_iter()
            .filter(|&i| records[i].label.is_some())
            .collect();
        let source_labeled = if source.is_empty() {
            None
        } else {
            source.shuffle(&mut rng);
            source.truncate(self.source_cap);
            Some(source)
        };

        Ok(Episode {
            labeled,
            unlabeled,
            test,
            source_labeled,
        })
    }
}

/// Samples with the default caps.
pub fn sample_episode(corpus: &Corpus, shots: usize, test_fraction: f64, seed: u64) -> Result<Episode> {
    EpisodeSampler {
        shots,
        test_fraction,
        ..EpisodeSampler::default()
    }
    .sample(corpus, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::generate_synthetic;
    use std::collections::HashSet;

    #[test]
    fn default_shot_count() {
        let c = generate_synthetic(2, 100, 4, 1.0, 3).unwrap();
        let e = sample_episode(&c, 15, 0.2, 0).unwrap();
        assert_eq!(e.labeled.len(), 30);
    }

    #[test]
    fn one_shot_split_sizes() {
        let c = generate_synthetic(2, 50, 4, 1.0, 3).unwrap();
        let e = sample_episode(&c, 1, 0.2, 9).unwrap();
        assert_eq!(e.labeled.len(), 2);
        assert_eq!(e.test.len(), 19);
        assert_eq!(e.unlabeled.len(), 79);
        assert!(e.source_labeled.is_none());
    }

    #[test]
    fn labeled_is_class_balanced() {
        let c = generate_synthetic(3, 20, 4, 1.0, 3).unwrap();
        let e = sample_episode(&c, 4, 0.3, 1).unwrap();
        let mut counts = [0; 3];
        for &i in &e.labeled {
            counts[c.records()[i].label.unwrap()] += 1;
        }
        assert_eq!(counts, [4, 4, 4]);
    }

    #[test]
    fn same_seed_same_episode() {
        let c = generate_synthetic(2, 40, 4, 1.0, 3).unwrap();
        assert_eq!(
            sample_episode(&c, 3, 0.2, 5).unwrap(),
            sample_episode(&c, 3, 0.2, 5).unwrap()
        );
        assert_ne!(
            sample_episode(&c, 3, 0.2, 5).unwrap(),
            sample_episode(&c, 3, 0.2, 6).unwrap()
        );
    }

    #[test]
    fn insufficient_class_is_an_error() {
        let c = generate_synthetic(2, 3, 4, 1.0, 3).unwrap();
        assert!(matches!(sample_episode(&c, 4, 0.2, 0), Err(Error::Data(_))));
    }

    #[test]
    fn invalid_sampler_settings() {
        let c = generate_synthetic(2, 10, 4, 1.0, 3).unwrap();
        assert!(sample_episode(&c, 0, 0.2, 0).is_err());
        assert!(sample_episode(&c, 1, 0.0, 0).is_err());
        assert!(sample_episode(&c, 1, 1.0, 0).is_err());
    }

    #[test]
    fn unlabeled_cap_and_source_pool() {
        let mut c = generate_synthetic(2, 200, 4, 1.0, 3).unwrap();
        let s = crate::data::synth::SyntheticSpec {
            domain: Domain::Source,
            ..crate::data::synth::SyntheticSpec::new(2, 80, 4, 1.0, 4)
        }
        .generate()
        .unwrap();
        c.merge(s).unwrap();
        let e = EpisodeSampler {
            shots: 2,
            test_fraction: 0.2,
            unlabeled_cap: 50,
            source_cap: 30,
        }
        .sample(&c, 0)
        .unwrap();
        assert_eq!(e.unlabeled.len(), 50);
        assert_eq!(e.test.len(), 79);
        let src = e.source_labeled.unwrap();
        assert_eq!(src.len(), 30);
        assert!(src.iter().all(|&i| c.records()[i].domain == Domain::Source));
        assert!(e.labeled.iter().chain(&e.test).chain(&e.unlabeled)
            .all(|&i| c.records()[i].domain == Domain::Target));
    }

    #[test]
    fn unknown_labels_never_enter_test() {
        let mut c = generate_synthetic(2, 10, 2, 1.0, 3).unwrap();
        let mut recs = c.records().to_vec();
        for r in recs.iter_mut().skip(4) {
            r.label = None;
        }
        // keep one labeled per class
        recs[0].label = Some(0);
        recs[1].label = Some(1);
        c = Corpus::new(2, c.labels().clone(), recs).unwrap();
        let e = sample_episode(&c, 1, 0.5, 2).unwrap();
        assert!(e.test.iter().all(|&i| c.records()[i].label.is_some()));
        assert_eq!(e.labeled.len() + e.test.len() + e.unlabeled.len(), 20);
    }

    proptest::proptest! {
        #[test]
        fn episodes_partition(seed in 0u64..1000, shots in 1usize..6, frac in 0.05f64..0.95) {
            let c = generate_synthetic(3, 12, 4, 1.0, seed).unwrap();
            let e = sample_episode(&c, shots, frac, seed).unwrap();
            let all: Vec<usize> = e.labeled.iter().chain(&e.unlabeled).chain(&e.test).copied().collect();
            let set: HashSet<usize> = all.iter().copied().collect();
            proptest::prop_assert_eq!(set.len(), all.len());
            proptest::prop_assert!(all.iter().all(|&i| i < c.len()));
            let rest = c.len() - 3 * shots;
            proptest::prop_assert_eq!(e.test.len(), (frac * rest as f64 + 1e-9).floor() as usize);
        }
    }
}
