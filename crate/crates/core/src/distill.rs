//! Hierarchical knowledge distillation.
//!
//! Training runs in up to three stages, each full-batch over one transductive
//! graph:
//!
//! * **teacher** – a fresh model fit to the few labeled target texts;
//! * **base** (cross-domain) – a fresh student fit jointly to labeled source
//!   texts (hard labels) and unlabeled target texts (the teacher's
//!   temperature-softened predictions), minimising `L_C = L_CS + L_CT`;
//! * **final** (target-domain) – the base model with everything but the
//!   linear head frozen, minimising `L = (1 - λ) L_S + λ L_T`, where `L_S` is
//!   the hard-label loss on labeled texts and `L_T` matches the base model's
//!   softened predictions on unlabeled texts.
//!
//! Hard-label terms use the plain softmax; distillation terms compare student
//! and teacher at the same temperature.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{argmax_rows, AttributeModel, ModelConfig};
use crate::numcore::{cross_entropy, Adam, Matrix, Tape, Var};

/// How the target-domain distillation assigns teacher and student texts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKdMode {
    /// Teacher soft labels on the unlabeled pool; hard labels on all labeled texts.
    UnlabeledSoft,
    /// Labeled texts split per class into teacher and student halves; the
    /// teacher head is fit on its half and soft-labels the other half.
    LabeledSplit,
}

impl TargetKdMode {
    pub fn name(self) -> &'static str {
        match self {
            TargetKdMode::UnlabeledSoft => "unlabeled_soft",
            TargetKdMode::LabeledSplit => "labeled_split",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unlabeled_soft" => Some(TargetKdMode::UnlabeledSoft),
            "labeled_split" => Some(TargetKdMode::LabeledSplit),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    /// Distillation temperature `τ`.
    pub temperature: f64,
    /// Balance `λ` between hard-label and distillation loss.
    pub balance: f64,
    /// Epochs `T` per stage.
    pub epochs: usize,
    pub learning_rate: f64,
    /// Labeled texts per class.
    pub shots: usize,
    pub kd_mode: TargetKdMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 3.0,
            balance: 0.3,
            epochs: 200,
            learning_rate: 1e-3,
            shots: 15,
            kd_mode: TargetKdMode::UnlabeledSoft,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.balance) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.balance)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Teacher,
    Base,
    Final,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Teacher => "teacher",
            Stage::Base => "base",
            Stage::Final => "final",
        })
    }
}

/// Losses of one epoch, measured before that epoch's update. Terms that do
/// not belong to the stage are 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub stage: Stage,
    pub epoch: usize,
    pub l_cs: f64,
    pub l_ct: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub l: f64,
    /// Accuracy on the stage's hard-labeled nodes.
    pub train_acc: f64,
}

impl LossReport {
    pub fn to_line(&self) -> String {
        format!(
            "stage={} epoch={} L_CS={:?} L_CT={:?} L_C={:?} L_S={:?} L_T={:?} L={:?} train_acc={:?}",
            self.stage,
            self.epoch,
            self.l_cs,
            self.l_ct,
            self.l_c,
            self.l_s,
            self.l_t,
            self.l,
            self.train_acc
        )
    }
}

/// Node representations of one transductive graph and the roles of its rows.
/// Rows in neither list still take part in message passing.
#[derive(Clone, Debug, PartialEq)]
pub struct TransductiveBatch {
    pub x0: Matrix,
    pub labeled: Vec<usize>,
    pub labels: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl TransductiveBatch {
    fn check(&self, classes: usize) -> Result<()> {
        if self.labeled.len() != self.labels.len() {
            return Err(Error::dim(
                "batch",
                format!("{} labeled rows, {} labels", self.labeled.len(), self.labels.len()),
            ));
        }
        let n = self.x0.rows();
        if self.labeled.iter().chain(&self.unlabeled).any(|&i| i >= n) {
            return Err(Error::dim("batch", format!("node index beyond {n} rows")));
        }
        if let Some(&c) = self.labels.iter().find(|&&c| c >= classes) {
            return Err(Error::Config(format!("label {c} outside {classes} classes")));
        }
        Ok(())
    }
}

/// One-hot rows for `labels`.
pub fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &c) in labels.iter().enumerate() {
        m.set(i, c, 1.0);
    }
    m
}

/// Mean cross-entropy of predicted distributions against hard labels.
pub fn supervised_loss(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::dim(
            "supervised_loss",
            format!("{} rows, {} labels", probs.rows(), labels.len()),
        ));
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= probs.cols()) {
        return Err(Error::dim("supervised_loss", format!("label {c} beyond {} classes", probs.cols())));
    }
    cross_entropy(probs, &one_hot(labels, probs.cols()))
}

/// Mean cross-entropy of student distributions against teacher distributions.
pub fn distillation_loss(student: &Matrix, teacher: &Matrix) -> Result<f64> {
    cross_entropy(student, teacher)
}

/// Temperature-softened teacher predictions for `nodes`, computed over the
/// teacher's whole graph `x0`.
pub fn pseudo_labels(teacher: &AttributeModel, x0: &Matrix, nodes: &[usize], temperature: f64) -> Result<Matrix> {
    if !teacher.is_trained() {
        return Err(Error::Usage("pseudo labels need a trained teacher".into()));
    }
    if let Some(&bad) = nodes.iter().find(|&&i| i >= x0.rows()) {
        return Err(Error::dim("pseudo_labels", format!("node {bad} beyond {} rows", x0.rows())));
    }
    Ok(teacher.soft_predict(x0, temperature)?.select_rows(nodes))
}

fn accuracy_on(logits: &Matrix, rows: &[usize], labels: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let pred = argmax_rows(&logits.select_rows(rows));
    pred.iter().zip(labels).filter(|(p, t)| p == t).count() as f64 / rows.len() as f64
}

/// `mean CE(softmax(logits[rows] / temperature), target)` on the tape.
fn ce_term(tape: &mut Tape, logits: Var, rows: &[usize], target: &Matrix, temperature: f64) -> Result<Var> {
    let sel = tape.select_rows(logits, rows)?;
    let p = tape.row_softmax(sel, temperature)?;
    tape.cross_entropy(p, target)
}

/// Runs `epochs` full-batch Adam steps. `step` builds the loss from the
/// logits and fills in a report.
fn optimise<F>(model: &mut AttributeModel, input: &Matrix, refine: bool, config: &DistillConfig, mut step: F) -> Result<Vec<LossReport>>
where
    F: FnMut(&mut Tape, Var, usize) -> Result<(Var, LossReport)>,
{
    let mut optimizer = Adam::new(config.learning_rate);
    let mut reports = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.constant(input.clone());
        let logits = if refine {
            model.forward_on(&mut tape, &bound, x)?
        } else {
            model.head_on(&mut tape, &bound, x)?
        };
        let (loss, report) = step(&mut tape, logits, epoch)?;
        if !report.l.is_finite() {
            return Err(Error::Usage(format!("{} loss diverged at epoch {epoch}", report.stage)));
        }
        log::trace!("{}", report.to_line());
        let grads = tape.backward(loss)?;
        model.apply_gradients(&mut optimizer, &bound, &grads);
        reports.push(report);
    }
    if let Some(last) = reports.last() {
        log::debug!("{}", last.to_line());
    }
    model.mark_trained();
    Ok(reports)
}

/// Fits every trainable parameter to the hard labels of `batch.labeled`.
pub fn train_supervised(model: &mut AttributeModel, batch: &TransductiveBatch, config: &DistillConfig) -> Result<Vec<LossReport>> {
    config.validate()?;
    batch.check(model.classes())?;
    let target = one_hot(&batch.labels, model.classes());
    let x0 = batch.x0.clone();
    optimise(model, &x0, true, config, |tape, logits, epoch| {
        let loss = ce_term(tape, logits, &batch.labeled, &target, 1.0)?;
        let l_s = tape.value(loss).data()[0];
        let acc = accuracy_on(tape.value(logits), &batch.labeled, &batch.labels);
        Ok((
            loss,
            LossReport {
                stage: Stage::Teacher,
                epoch,
                l_cs: 0.0,
                l_ct: 0.0,
                l_c: 0.0,
                l_s,
                l_t: 0.0,
                l: l_s,
                train_acc: acc,
            },
        ))
    })
}

/// Labeled source-domain texts for cross-domain training.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSet {
    pub x0: Matrix,
    pub labels: Vec<usize>,
}

/// Result of cross-domain distillation.
#[derive(Clone, Debug)]
pub struct BaseOutcome {
    pub teacher: AttributeModel,
    pub student: AttributeModel,
    pub teacher_reports: Vec<LossReport>,
    pub reports: Vec<LossReport>,
}

/// Trains a teacher on the labeled target texts, then the cross-domain
/// student. `seed` initialises the teacher; `seed + 1` the student.
pub fn train_base(
    source: &SourceSet,
    target: &TransductiveBatch,
    classes: usize,
    model_config: &ModelConfig,
    config: &DistillConfig,
    seed: u64,
) -> Result<BaseOutcome> {
    check_source(source, target, classes)?;
    let mut teacher = AttributeModel::new(target.x0.cols(), classes, model_config, seed)?;
    let teacher_reports = train_supervised(&mut teacher, target, config)?;
    let (student, reports) =
        train_base_with_teacher(&teacher, source, target, model_config, config, seed.wrapping_add(1))?;
    Ok(BaseOutcome {
        teacher,
        student,
        teacher_reports,
        reports,
    })
}

fn check_source(source: &SourceSet, target: &TransductiveBatch, classes: usize) -> Result<()> {
    if source.x0.cols() != target.x0.cols() {
        return Err(Error::Config(format!(
            "source representations are {} wide, target {}; label spaces must match",
            source.x0.cols(),
            target.x0.cols()
        )));
    }
    if source.x0.rows() != source.labels.len() {
        return Err(Error::dim("train_base", "one label per source text".to_string()));
    }
    if let Some(&c) = source.labels.iter().find(|&&c| c >= classes) {
        return Err(Error::Config(format!("source label {c} outside {classes} classes")));
    }
    Ok(())
}

/// Cross-domain student given an already trained teacher.
///
/// The student's graph holds the labeled source texts followed by the
/// target's unlabeled texts; `L_CT` is 0 when there are none.
pub fn train_base_with_teacher(
    teacher: &AttributeModel,
    source: &SourceSet,
    target: &TransductiveBatch,
    model_config: &ModelConfig,
    config: &DistillConfig,
    seed: u64,
) -> Result<(AttributeModel, Vec<LossReport>)> {
    config.validate()?;
    let classes = teacher.classes();
    check_source(source, target, classes)?;
    target.check(classes)?;
    if teacher.input_dim() != target.x0.cols() {
        return Err(Error::Config("teacher and target widths differ".into()));
    }
    let soft = pseudo_labels(teacher, &target.x0, &target.unlabeled, config.temperature)?;
    let joint = source.x0.vstack(&target.x0.select_rows(&target.unlabeled))?;
    let n_src = source.x0.rows();
    let src_rows: Vec<usize> = (0..n_src).collect();
    let tgt_rows: Vec<usize> = (n_src..joint.rows()).collect();
    let hard = one_hot(&source.labels, classes);

    let mut student = AttributeModel::new(joint.cols(), classes, model_config, seed)?;
    let tau = config.temperature;
    let reports = optimise(&mut student, &joint, true, config, |tape, logits, epoch| {
        let l_cs = ce_term(tape, logits, &src_rows, &hard, 1.0)?;
        let l_ct = ce_term(tape, logits, &tgt_rows, &soft, tau)?;
        let l_c = tape.add(l_cs, l_ct)?;
        let (cs, ct) = (tape.value(l_cs).data()[0], tape.value(l_ct).data()[0]);
        let acc = accuracy_on(tape.value(logits), &src_rows, &source.labels);
        Ok((
            l_c,
            LossReport {
                stage: Stage::Base,
                epoch,
                l_cs: cs,
                l_ct: ct,
                l_c: tape.value(l_c).data()[0],
                l_s: 0.0,
                l_t: 0.0,
                l: tape.value(l_c).data()[0],
                train_acc: acc,
            },
        ))
    })?;
    Ok((student, reports))
}

/// Replaces the label channel (last `classes` columns) of `rows` with the
/// uniform distribution.
pub fn mask_label_channel(x0: &Matrix, rows: &[usize], classes: usize) -> Matrix {
    let mut out = x0.clone();
    let start = x0.cols() - classes;
    for &i in rows {
        out.row_mut(i)[start..].fill(1.0 / classes as f64);
    }
    out
}

/// Target-domain distillation on top of a trained base model. Only the head
/// of the returned model differs from `base`.
pub fn train_final(base: &AttributeModel, target: &TransductiveBatch, config: &DistillConfig) -> Result<(AttributeModel, Vec<LossReport>)> {
    config.validate()?;
    target.check(base.classes())?;
    if !base.is_trained() {
        return Err(Error::Usage("final training needs a trained base model".into()));
    }
    let classes = base.classes();
    let (student_rows, student_labels, soft_rows, soft) = match config.kd_mode {
        TargetKdMode::UnlabeledSoft => {
            let soft = pseudo_labels(base, &target.x0, &target.unlabeled, config.temperature)?;
            (target.labeled.clone(), target.labels.clone(), target.unlabeled.clone(), soft)
        }
        TargetKdMode::LabeledSplit => {
            let split = split_labeled(target, classes)?;
            let masked = mask_label_channel(&target.x0, &split.student_rows, classes);
            let teacher_batch = TransductiveBatch {
                x0: masked.clone(),
                labeled: split.teacher_rows,
                labels: split.teacher_labels,
                unlabeled: Vec::new(),
            };
            let (teacher, _) = fine_tune_head(base, &teacher_batch, config)?;
            let soft = pseudo_labels(&teacher, &masked, &split.student_rows, config.temperature)?;
            (split.student_rows.clone(), split.student_labels, split.student_rows, soft)
        }
    };
    head_stage(base, &target.x0, &student_rows, &student_labels, Some((&soft_rows, &soft)), config)
}

/// Head-only supervised training on the labeled texts, with no distillation
/// term at all.
pub fn fine_tune_head(base: &AttributeModel, target: &TransductiveBatch, config: &DistillConfig) -> Result<(AttributeModel, Vec<LossReport>)> {
    config.validate()?;
    target.check(base.classes())?;
    head_stage(base, &target.x0, &target.labeled, &target.labels, None, config)
}

fn head_stage(
    base: &AttributeModel,
    x0: &Matrix,
    hard_rows: &[usize],
    hard_labels: &[usize],
    soft: Option<(&[usize], &Matrix)>,
    config: &DistillConfig,
) -> Result<(AttributeModel, Vec<LossReport>)> {
    let mut model = base.clone();
    model.freeze_all_except_head();
    // Frozen refinement: the graph is built and refined once.
    let refined = model.refined(x0)?;
    let hard = one_hot(hard_labels, model.classes());
    let lambda = config.balance;
    let tau = config.temperature;
    let reports = optimise(&mut model, &refined, false, config, |tape, logits, epoch| {
        let l_s = ce_term(tape, logits, hard_rows, &hard, 1.0)?;
        let acc = accuracy_on(tape.value(logits), hard_rows, hard_labels);
        let s = tape.value(l_s).data()[0];
        let (loss, t) = match soft {
            Some((rows, target)) => {
                let l_t = ce_term(tape, logits, rows, target, tau)?;
                let a = tape.scale(l_s, 1.0 - lambda);
                let b = tape.scale(l_t, lambda);
                (tape.add(a, b)?, tape.value(l_t).data()[0])
            }
            None => (l_s, 0.0),
        };
        Ok((
            loss,
            LossReport {
                stage: Stage::Final,
                epoch,
                l_cs: 0.0,
                l_ct: 0.0,
                l_c: 0.0,
                l_s: s,
                l_t: t,
                l: tape.value(loss).data()[0],
                train_acc: acc,
            },
        ))
    })?;
    Ok((model, reports))
}

struct LabeledSplit {
    teacher_rows: Vec<usize>,
    teacher_labels: Vec<usize>,
    student_rows: Vec<usize>,
    student_labels: Vec<usize>,
}

/// Alternates each class's labeled texts between teacher and student.
fn split_labeled(target: &TransductiveBatch, classes: usize) -> Result<LabeledSplit> {
    let mut seen = vec![0usize; classes];
    let mut split = LabeledSplit {
        teacher_rows: Vec::new(),
        teacher_labels: Vec::new(),
        student_rows: Vec::new(),
        student_labels: Vec::new(),
    };
    for (&row, &c) in target.labeled.iter().zip(&target.labels) {
        if seen[c].is_multiple_of(2) {
            split.teacher_rows.push(row);
            split.teacher_labels.push(c);
        } else {
            split.student_rows.push(row);
            split.student_labels.push(c);
        }
        seen[c] += 1;
    }
    if seen.iter().any(|&n| n < 2) {
        return Err(Error::Config(
            "labeled_split needs at least 2 labeled texts per class".into(),
        ));
    }
    Ok(split)
}
