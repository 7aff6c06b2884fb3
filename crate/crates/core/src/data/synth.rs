//! Gaussian-cluster corpora for desk-scale experiments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::corpus::{Corpus, Domain, LabelSpace, TextRecord};
use crate::error::{Error, Result};

/// Parameters of a synthetic corpus. Class `c` is drawn from
/// `N(separation * e_c, I)`, so distinct class means lie on orthogonal axes.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
    pub domain: Domain,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Self {
        SyntheticSpec {
            classes,
            per_class,
            dim,
            separation,
            seed,
            domain: Domain::Target,
        }
    }

    pub fn generate(&self) -> Result<Corpus> {
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::Parameter(format!(
                "separation must be finite and non-negative, got {}",
                self.separation
            )));
        }
        if self.dim < self.classes {
            return Err(Error::Parameter(format!(
                "{} orthogonal class means do not fit in {} dimensions",
                self.classes, self.dim
            )));
        }
        let labels = LabelSpace::new((0..self.classes).map(|c| format!("c{c}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let prefix = match self.domain {
            Domain::Source => "s",
            Domain::Target => "t",
        };
        let mut records = Vec::with_capacity(self.classes * self.per_class);
        for c in 0..self.classes {
            for _ in 0..self.per_class {
                let mut embedding: Vec<f64> =
                    (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                embedding[c] += self.separation;
                records.push(TextRecord {
                    id: format!("{prefix}{:05}", records.len()),
                    embedding,
                    label: Some(c),
                    domain: self.domain,
                });
            }
        }
        Corpus::new(self.dim, labels, records)
    }
}

/// Target-domain synthetic corpus.
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Corpus> {
    SyntheticSpec::new(classes, per_class, dim, separation, seed).generate()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Points on the wrong side of the midpoint hyperplane between the two
    /// class means.
    fn margin_violations(c: &Corpus) -> usize {
        c.records()
            .iter()
            .filter(|r| {
                let score = r.embedding[1] - r.embedding[0];
                (score > 0.0) != (r.label == Some(1))
            })
            .count()
    }

    #[test]
    fn wide_separation_is_linearly_separable() {
        let c = generate_synthetic(2, 500, 16, 8.0, 11).unwrap();
        assert_eq!(margin_violations(&c), 0);
    }

    #[test]
    fn zero_separation_is_chance() {
        let c = generate_synthetic(2, 2000, 16, 0.0, 11).unwrap();
        let err = margin_violations(&c) as f64 / c.len() as f64;
        assert!((err - 0.5).abs() < 0.05, "{err}");
    }

    #[test]
    fn deterministic_bytes() {
        let a = generate_synthetic(3, 10, 5, 2.0, 42).unwrap().to_text();
        let b = generate_synthetic(3, 10, 5, 2.0, 42).unwrap().to_text();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(3, 10, 5, 2.0, 43).unwrap().to_text());
    }

    #[test]
    fn parameter_errors() {
        assert!(matches!(
            generate_synthetic(4, 10, 3, 1.0, 0),
            Err(Error::Parameter(_))
        ));
        assert!(generate_synthetic(2, 10, 3, -1.0, 0).is_err());
        assert!(generate_synthetic(2, 10, 3, f64::NAN, 0).is_err());
    }

    #[test]
    fn class_means_sit_on_axes() {
        let c = generate_synthetic(2, 4000, 4, 5.0, 1).unwrap();
        let mean = |cls: usize, axis: usize| {
            let pts: Vec<f64> = c
                .records()
                .iter()
                .filter(|r| r.label == Some(cls))
                .map(|r| r.embedding[axis])
                .collect();
            pts.iter().sum::<f64>() / pts.len() as f64
        };
        assert!((mean(0, 0) - 5.0).abs() < 0.1);
        assert!(mean(0, 1).abs() < 0.1);
        assert!((mean(1, 1) - 5.0).abs() < 0.1);
    }
}
