//! Corpus ingestion, representation assembly, episode sampling and synthetic
//! corpora.

mod corpus;
mod episode;
pub mod synth;

pub use corpus::{Corpus, Domain, LabelSpace, TextRecord};
pub use episode::{sample_episode, Episode, EpisodeSampler, DEFAULT_SOURCE_CAP, DEFAULT_UNLABELED_CAP};
pub use synth::{generate_synthetic, SyntheticSpec};

use crate::numcore::Matrix;

/// `[embedding ; label channel]`: one-hot when `label` is revealed, otherwise
/// the uniform point `1/k2` of the simplex.
pub fn assemble_representation(embedding: &[f64], label: Option<usize>, classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(embedding.len() + classes);
    out.extend_from_slice(embedding);
    match label {
        Some(c) => out.extend((0..classes).map(|j| if j == c { 1.0 } else { 0.0 })),
        None => out.extend(std::iter::repeat_n(1.0 / classes as f64, classes)),
    }
    out
}

/// Representation of a record using its own label, if it has one.
pub fn record_representation(record: &TextRecord, labels: &LabelSpace) -> Vec<f64> {
    assemble_representation(&record.embedding, record.label, labels.len())
}

/// Stacks representations for `revealed` records (label channel one-hot)
/// followed by `masked` records (label channel uniform, labels ignored).
pub fn representation_matrix(corpus: &Corpus, revealed: &[usize], masked: &[usize]) -> Matrix {
    let k2 = corpus.labels().len();
    let width = corpus.dim() + k2;
    let mut data = Vec::with_capacity((revealed.len() + masked.len()) * width);
    for &i in revealed {
        let r = &corpus.records()[i];
        data.extend(assemble_representation(&r.embedding, r.label, k2));
    }
    for &i in masked {
        data.extend(assemble_representation(&corpus.records()[i].embedding, None, k2));
    }
    Matrix::from_vec(revealed.len() + masked.len(), width, data).expect("width is uniform")
}

/// Embedding rows only, without any label channel.
pub fn embedding_matrix(corpus: &Corpus, indices: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(indices.len() * corpus.dim());
    for &i in indices {
        data.extend_from_slice(&corpus.records()[i].embedding);
    }
    Matrix::from_vec(indices.len(), corpus.dim(), data).expect("width is uniform")
}

/// Ground-truth labels of `indices`; panics on unlabeled records.
pub fn labels_of(corpus: &Corpus, indices: &[usize]) -> Vec<usize> {
    indices
        .iter()
        .map(|&i| corpus.records()[i].label.expect("record has a label"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_channel() {
        assert_eq!(
            assemble_representation(&[0.2, 0.8], Some(1), 2),
            vec![0.2, 0.8, 0.0, 1.0]
        );
    }

    #[test]
    fn uniform_channel_for_unlabeled() {
        assert_eq!(
            assemble_representation(&[0.2, 0.8], None, 2),
            vec![0.2, 0.8, 0.5, 0.5]
        );
        let r = assemble_representation(&[1.0], None, 4);
        assert_eq!(&r[1..], &[0.25; 4]);
    }

    #[test]
    fn matrix_masks_labels() {
        let c = generate_synthetic(2, 2, 3, 1.0, 0).unwrap();
        let m = representation_matrix(&c, &[0, 3], &[1]);
        assert_eq!(m.shape(), (3, 5));
        assert_eq!(&m.row(0)[3..], &[1.0, 0.0]);
        assert_eq!(&m.row(1)[3..], &[0.0, 1.0]);
        assert_eq!(&m.row(2)[3..], &[0.5, 0.5]);
        assert_eq!(&m.row(2)[..3], c.records()[1].embedding.as_slice());
    }

    proptest::proptest! {
        #[test]
        fn representation_length_and_channel_mass(
            emb in proptest::collection::vec(-10.0f64..10.0, 1..20),
            k2 in 2usize..12,
            label in proptest::option::of(0usize..12),
        ) {
            let label = label.map(|l| l % k2);
            let r = assemble_representation(&emb, label, k2);
            proptest::prop_assert_eq!(r.len(), emb.len() + k2);
            let mass: f64 = r[emb.len()..].iter().sum();
            match label {
                Some(_) => proptest::prop_assert_eq!(mass, 1.0),
                None => proptest::prop_assert!((mass - 1.0).abs() < 1e-12),
            }
        }
    }
}
