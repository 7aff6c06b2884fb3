//! Evaluation metrics and the experiment harness (parameter sweeps and
//! component ablation).

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::pipeline::{run, run_variants, PipelineConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// `confusion[t][p]` counts texts of class `t` predicted as `p`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalResult {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn to_text(&self, class_names: &[String]) -> String {
        let mut out = format!(
            "accuracy {:.4}\nmacro_f1 {:.4}\nclass precision recall f1\n",
            self.accuracy, self.macro_f1
        );
        for c in 0..self.f1.len() {
            let name = class_names.get(c).map_or_else(|| c.to_string(), Clone::clone);
            let _ = writeln!(out, "{name} {:.4} {:.4} {:.4}", self.precision[c], self.recall[c], self.f1[c]);
        }
        out.push_str("confusion (rows = truth)\n");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }
}

/// Accuracy, per-class precision/recall/F1 and macro-F1 over `classes`
/// classes. Undefined ratios (0/0) count as 0.
pub fn evaluate(pred: &[usize], truth: &[usize], classes: usize) -> Result<EvalResult> {
    if pred.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty prediction set".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= classes) {
        return Err(Error::Usage(format!("class {c} outside {classes} classes")));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut precision = Vec::with_capacity(classes);
    let mut recall = Vec::with_capacity(classes);
    let mut f1 = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = confusion[c][c];
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        precision.push(p);
        recall.push(r);
        f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(EvalResult {
        accuracy: correct as f64 / pred.len() as f64,
        macro_f1: f1.iter().sum::<f64>() / classes as f64,
        precision,
        recall,
        f1,
        confusion,
    })
}

/// Scores of one table row across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub label: String,
    pub accuracies: Vec<f64>,
    pub macro_f1s: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Sample standard deviation; 0 for fewer than two values.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl Summary {
    pub fn mean_accuracy(&self) -> f64 {
        mean(&self.accuracies)
    }

    pub fn std_accuracy(&self) -> f64 {
        std_dev(&self.accuracies)
    }

    pub fn mean_macro_f1(&self) -> f64 {
        mean(&self.macro_f1s)
    }

    pub fn std_macro_f1(&self) -> f64 {
        std_dev(&self.macro_f1s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    /// Header of the label column, e.g. `shots` or `variant`.
    pub key: String,
    pub rows: Vec<Summary>,
}

impl Table {
    pub fn row(&self, label: &str) -> Option<&Summary> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Square root of the mean per-row accuracy variance.
    pub fn pooled_std(&self) -> f64 {
        let vars: Vec<f64> = self.rows.iter().map(|r| r.std_accuracy().powi(2)).collect();
        mean(&vars).sqrt()
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain([self.key.len()])
            .max()
            .unwrap_or(0);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>5}\n",
            self.key, "acc", "acc_std", "f1", "f1_std", "runs"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>5}",
                r.label,
                r.mean_accuracy(),
                r.std_accuracy(),
                r.mean_macro_f1(),
                r.std_macro_f1(),
                r.accuracies.len()
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std,runs\n", self.key);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{}",
                r.label,
                r.mean_accuracy(),
                r.std_accuracy(),
                r.mean_macro_f1(),
                r.std_macro_f1(),
                r.accuracies.len()
            );
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Shots,
    Temperature,
    Balance,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Shots => "shots",
            SweepParam::Temperature => "tau",
            SweepParam::Balance => "lambda",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shots" => Some(SweepParam::Shots),
            "tau" | "temperature" => Some(SweepParam::Temperature),
            "lambda" | "balance" => Some(SweepParam::Balance),
            _ => None,
        }
    }

    /// `config` with this parameter set to `value`.
    pub fn apply(self, config: &PipelineConfig, value: f64) -> Result<PipelineConfig> {
        let mut c = config.clone();
        match self {
            SweepParam::Shots => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("shots must be a positive integer, got {value}")));
                }
                c.distill.shots = value as usize;
            }
            SweepParam::Temperature => c.distill.temperature = value,
            SweepParam::Balance => c.distill.balance = value,
        }
        c.validate()?;
        Ok(c)
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))
}

/// Runs the pipeline for every `value` of `param` and every seed, using at
/// most `jobs` threads. Rows follow the order of `values`.
pub fn sweep(
    corpus: &Corpus,
    config: &PipelineConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    jobs: usize,
) -> Result<Table> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one value and one seed".into()));
    }
    let configs = values
        .iter()
        .map(|&v| param.apply(config, v))
        .collect::<Result<Vec<_>>>()?;
    let jobs_list: Vec<(usize, u64)> = (0..values.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results = thread_pool(jobs)?.install(|| {
        jobs_list
            .par_iter()
            .map(|&(i, s)| run(corpus, &configs[i], s).map(|o| o.eval))
            .collect::<Result<Vec<_>>>()
    })?;
    let rows = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let evals: Vec<_> = results[i * seeds.len()..(i + 1) * seeds.len()].iter().collect();
            Summary {
                label: format!("{v}"),
                accuracies: evals.iter().map(|e| e.accuracy).collect(),
                macro_f1s: evals.iter().map(|e| e.macro_f1).collect(),
            }
        })
        .collect();
    Ok(Table {
        key: param.name().to_string(),
        rows,
    })
}

/// Runs each variant on each seed. Within a seed, variants share the same
/// episode and any shared training stage, so every cell equals a direct
/// [`run`] of that variant with that seed.
pub fn ablate(corpus: &Corpus, config: &PipelineConfig, variants: &[Variant], seeds: &[u64], jobs: usize) -> Result<Table> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one variant and one seed".into()));
    }
    config.validate()?;
    let per_seed = thread_pool(jobs)?.install(|| {
        seeds
            .par_iter()
            .map(|&s| run_variants(corpus, config, variants, s))
            .collect::<Result<Vec<_>>>()
    })?;
    let rows = variants
        .iter()
        .enumerate()
        .map(|(i, v)| Summary {
            label: v.name().to_string(),
            accuracies: per_seed.iter().map(|outs| outs[i].eval.accuracy).collect(),
            macro_f1s: per_seed.iter().map(|outs| outs[i].eval.macro_f1).collect(),
        })
        .collect();
    Ok(Table {
        key: "variant".to_string(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let e = evaluate(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.macro_f1, 1.0);
        assert_eq!(e.total(), 4);
    }

    #[test]
    fn all_one_class_on_balanced_binary() {
        let e = evaluate(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(e.accuracy, 0.5);
        assert!((e.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(e.confusion, vec![vec![2, 0], vec![2, 0]]);
    }

    #[test]
    fn absent_class_contributes_zero() {
        let e = evaluate(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(e.f1[2], 0.0);
        assert!((e.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn order_does_not_matter() {
        let p = [0, 1, 1, 2, 0, 2, 1];
        let t = [0, 1, 0, 2, 2, 2, 1];
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let pp: Vec<usize> = perm.iter().map(|&i| p[i]).collect();
        let tt: Vec<usize> = perm.iter().map(|&i| t[i]).collect();
        assert_eq!(evaluate(&p, &t, 3).unwrap(), evaluate(&pp, &tt, 3).unwrap());
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(evaluate(&[], &[], 2), Err(Error::Usage(_))));
        assert!(evaluate(&[0], &[0, 1], 2).is_err());
        assert!(evaluate(&[2], &[0], 2).is_err());
    }

    #[test]
    fn summary_statistics() {
        let s = Summary {
            label: "x".into(),
            accuracies: vec![0.5, 0.5, 0.5],
            macro_f1s: vec![0.2, 0.4, 0.6],
        };
        assert_eq!(s.mean_accuracy(), 0.5);
        assert_eq!(s.std_accuracy(), 0.0);
        assert!((s.std_macro_f1() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn table_formats() {
        let t = Table {
            key: "variant".into(),
            rows: vec![
                Summary { label: "repr-only".into(), accuracies: vec![0.5], macro_f1s: vec![0.4] },
                Summary { label: "full".into(), accuracies: vec![0.75], macro_f1s: vec![0.7] },
            ],
        };
        assert_eq!(t.to_text().lines().count(), 3);
        let csv = t.to_csv();
        assert_eq!(csv.lines().nth(2).unwrap(), "full,0.75,0.0,0.7,0.0,1");
        assert!(t.row("full").is_some());
    }

    #[test]
    fn sweep_param_names() {
        for p in [SweepParam::Shots, SweepParam::Temperature, SweepParam::Balance] {
            assert_eq!(SweepParam::parse(p.name()), Some(p));
        }
        let c = PipelineConfig::default();
        assert!(SweepParam::Shots.apply(&c, 2.5).is_err());
        assert_eq!(SweepParam::Shots.apply(&c, 5.0).unwrap().distill.shots, 5);
        assert!(SweepParam::Balance.apply(&c, 2.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn scores_stay_in_unit_interval(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let (p, t): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let e = evaluate(&p, &t, 4).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&e.accuracy));
            proptest::prop_assert!((0.0..=1.0).contains(&e.macro_f1));
            proptest::prop_assert_eq!(e.total(), p.len());
            let trace: usize = (0..4).map(|c| e.confusion[c][c]).sum();
            proptest::prop_assert_eq!(e.accuracy, trace as f64 / p.len() as f64);
        }
    }
}
