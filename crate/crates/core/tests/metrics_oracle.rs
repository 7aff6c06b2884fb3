use fewgraph::metrics::{evaluate, Summary, Table};
use proptest::prelude::*;

/// Macro-F1 counted directly from the label pairs, with 0/0 taken as 0.
fn brute_macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..classes {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        let actual = truth.iter().filter(|&&t| t == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        total += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    total / classes as f64
}

fn labels(classes: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..60).prop_flat_map(move |n| {
        (
            prop::collection::vec(0..classes, n),
            prop::collection::vec(0..classes, n),
        )
    })
}

proptest! {
    #[test]
    fn agrees_with_brute_force((pred, truth) in labels(4)) {
        let e = evaluate(&pred, &truth, 4).unwrap();
        let hits = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
        prop_assert!((e.accuracy - hits as f64 / pred.len() as f64).abs() < 1e-15);
        prop_assert!((e.macro_f1 - brute_macro_f1(&pred, &truth, 4)).abs() < 1e-12);
        prop_assert_eq!(e.total(), pred.len());
        let trace: usize = (0..4).map(|c| e.confusion[c][c]).sum();
        prop_assert_eq!(trace, hits);
        prop_assert!((0.0..=1.0).contains(&e.macro_f1));
    }
}

#[test]
fn constant_prediction_on_balanced_binary() {
    let truth = [0, 0, 1, 1];
    let e = evaluate(&[0, 0, 0, 0], &truth, 2).unwrap();
    assert_eq!(e.accuracy, 0.5);
    // Class 0: precision 1/2, recall 1, F1 2/3. Class 1 is never predicted.
    assert!((e.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn sample_and_pooled_deviation() {
    let row = |label: &str, acc: &[f64]| Summary {
        label: label.into(),
        accuracies: acc.to_vec(),
        macro_f1s: acc.to_vec(),
    };
    let t = Table {
        key: "shots".into(),
        rows: vec![row("1", &[0.5, 0.7]), row("5", &[0.8, 0.8, 0.8])],
    };
    // Sample variance of {0.5, 0.7} is 0.02; the second row has none.
    assert!((t.rows[0].std_accuracy() - 0.02f64.sqrt()).abs() < 1e-15);
    assert!(t.rows[1].std_accuracy() < 1e-15);
    assert!((t.pooled_std() - 0.01f64.sqrt()).abs() < 1e-12);
    assert_eq!(row("x", &[0.9]).std_accuracy(), 0.0);
}
