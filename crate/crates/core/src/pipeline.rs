//! End-to-end few-shot attribute inference on one sampled episode.
//!
//! The training graph holds the labeled texts followed by the unlabeled pool.
//! Test texts join the graph only at evaluation, in chunks, as extra
//! unlabeled nodes whose label channel is uniform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{embedding_matrix, labels_of, representation_matrix, Corpus, Episode, EpisodeSampler};
use crate::data::{DEFAULT_SOURCE_CAP, DEFAULT_UNLABELED_CAP};
use crate::distill::{
    fine_tune_head, train_base_with_teacher, train_final, train_supervised, DistillConfig, LossReport, SourceSet,
    TransductiveBatch,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{AttributeModel, ModelConfig};
use crate::numcore::Matrix;

/// Which components a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    /// Learned text graph and refinement; without it the head reads raw
    /// embeddings.
    pub graph: bool,
    /// Cross-domain distillation (needs labeled source texts).
    pub kd1: bool,
    /// Target-domain distillation.
    pub kd2: bool,
}

impl Variant {
    pub const REPR_ONLY: Variant = Variant { graph: false, kd1: false, kd2: false };
    pub const GRAPH: Variant = Variant { graph: true, kd1: false, kd2: false };
    pub const GRAPH_KD1: Variant = Variant { graph: true, kd1: true, kd2: false };
    pub const GRAPH_KD2: Variant = Variant { graph: true, kd1: false, kd2: true };
    pub const FULL: Variant = Variant { graph: true, kd1: true, kd2: true };

    pub const ALL: [Variant; 5] = [
        Variant::REPR_ONLY,
        Variant::GRAPH,
        Variant::GRAPH_KD1,
        Variant::GRAPH_KD2,
        Variant::FULL,
    ];

    pub fn name(self) -> &'static str {
        match (self.graph, self.kd1, self.kd2) {
            (false, false, false) => "repr-only",
            (true, false, false) => "+graph",
            (true, true, false) => "+graph+KD1",
            (true, false, true) => "+graph+KD2",
            (true, true, true) => "full",
            _ => "invalid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .map(|name| {
                Variant::parse(name).ok_or_else(|| Error::Config(format!("unknown variant {name:?}")))
            })
            .collect()
    }

    pub fn validate(self) -> Result<()> {
        if !self.graph && (self.kd1 || self.kd2) {
            return Err(Error::Config("distillation variants need the graph module".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub distill: DistillConfig,
    pub model: ModelConfig,
    pub test_fraction: f64,
    pub unlabeled_cap: usize,
    pub source_cap: usize,
    pub variant: Variant,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            distill: DistillConfig::default(),
            model: ModelConfig::default(),
            test_fraction: 0.2,
            unlabeled_cap: DEFAULT_UNLABELED_CAP,
            source_cap: DEFAULT_SOURCE_CAP,
            variant: Variant::FULL,
        }
    }
}

impl PipelineConfig {
    pub fn sampler(&self) -> EpisodeSampler {
        EpisodeSampler {
            shots: self.distill.shots,
            test_fraction: self.test_fraction,
            unlabeled_cap: self.unlabeled_cap,
            source_cap: self.source_cap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        self.sampler().validate()?;
        self.variant.validate()?;
        if self.unlabeled_cap == 0 {
            return Err(Error::Config("unlabeled_cap must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub variant: Variant,
    pub model: AttributeModel,
    pub episode: Episode,
    /// Predictions for `episode.test`, in order.
    pub predictions: Vec<usize>,
    pub eval: EvalResult,
    /// Every training epoch of every stage, in execution order.
    pub reports: Vec<LossReport>,
}

/// Initialisation seeds for the teacher and the cross-domain student.
fn stage_seeds(seed: u64) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rng.gen(), rng.gen())
}

/// Trains `config.variant` on an episode drawn with `seed` and evaluates it
/// on the episode's test texts.
pub fn run(corpus: &Corpus, config: &PipelineConfig, seed: u64) -> Result<RunOutcome> {
    let mut out = run_variants(corpus, config, &[config.variant], seed)?;
    Ok(out.remove(0))
}

/// Same as calling [`run`] once per variant, but the episode and the shared
/// teacher and base stages are computed once.
pub fn run_variants(corpus: &Corpus, config: &PipelineConfig, variants: &[Variant], seed: u64) -> Result<Vec<RunOutcome>> {
    config.validate()?;
    for v in variants {
        v.validate()?;
    }
    let episode = config.sampler().sample(corpus, seed)?;
    if episode.test.is_empty() {
        return Err(Error::Data("the episode has no test texts; the corpus is too small".into()));
    }
    let mut stages = Stages::new(corpus, config, &episode, seed);
    variants.iter().map(|&v| stages.run(v)).collect()
}

/// Lazily trained stages shared between variants of one episode.
struct Stages<'a> {
    corpus: &'a Corpus,
    config: &'a PipelineConfig,
    episode: &'a Episode,
    batch: TransductiveBatch,
    teacher_seed: u64,
    student_seed: u64,
    teacher: Option<(AttributeModel, Vec<LossReport>)>,
    base: Option<(AttributeModel, Vec<LossReport>)>,
}

impl<'a> Stages<'a> {
    fn new(corpus: &'a Corpus, config: &'a PipelineConfig, episode: &'a Episode, seed: u64) -> Self {
        let (teacher_seed, student_seed) = stage_seeds(seed);
        let n_lab = episode.labeled.len();
        let batch = TransductiveBatch {
            x0: representation_matrix(corpus, &episode.labeled, &episode.unlabeled),
            labeled: (0..n_lab).collect(),
            labels: labels_of(corpus, &episode.labeled),
            unlabeled: (n_lab..n_lab + episode.unlabeled.len()).collect(),
        };
        Stages {
            corpus,
            config,
            episode,
            batch,
            teacher_seed,
            student_seed,
            teacher: None,
            base: None,
        }
    }

    fn classes(&self) -> usize {
        self.corpus.labels().len()
    }

    fn teacher(&mut self) -> Result<&(AttributeModel, Vec<LossReport>)> {
        if self.teacher.is_none() {
            let mut m = AttributeModel::new(self.batch.x0.cols(), self.classes(), &self.config.model, self.teacher_seed)?;
            let reports = train_supervised(&mut m, &self.batch, &self.config.distill)?;
            self.teacher = Some((m, reports));
        }
        Ok(self.teacher.as_ref().expect("just trained"))
    }

    /// Cross-domain student, or `None` when the corpus has no labeled source texts.
    fn base(&mut self) -> Result<Option<&(AttributeModel, Vec<LossReport>)>> {
        let Some(source_idx) = self.episode.source_labeled.as_ref() else {
            return Ok(None);
        };
        if self.base.is_none() {
            let source = SourceSet {
                x0: representation_matrix(self.corpus, source_idx, &[]),
                labels: labels_of(self.corpus, source_idx),
            };
            let teacher = self.teacher()?.0.clone();
            let out = train_base_with_teacher(
                &teacher,
                &source,
                &self.batch,
                &self.config.model,
                &self.config.distill,
                self.student_seed,
            )?;
            self.base = Some(out);
        }
        Ok(self.base.as_ref())
    }

    fn run(&mut self, variant: Variant) -> Result<RunOutcome> {
        if !variant.graph {
            return self.run_repr_only();
        }
        let (teacher, teacher_reports) = self.teacher()?.clone();
        let mut reports = teacher_reports;
        let mut base = teacher;
        if variant.kd1 {
            match self.base()? {
                Some((student, base_reports)) => {
                    reports.extend(base_reports.iter().cloned());
                    base = student.clone();
                }
                None => log::info!("no labeled source texts; cross-domain distillation skipped"),
            }
        }
        let model = if variant.kd2 {
            let (m, r) = train_final(&base, &self.batch, &self.config.distill)?;
            reports.extend(r);
            m
        } else if variant.kd1 {
            let (m, r) = fine_tune_head(&base, &self.batch, &self.config.distill)?;
            reports.extend(r);
            m
        } else {
            base
        };
        let predictions = predict_transductive(&model, self.corpus, self.episode, self.config.unlabeled_cap)?;
        self.finish(variant, model, predictions, reports)
    }

    fn run_repr_only(&mut self) -> Result<RunOutcome> {
        let labeled = &self.episode.labeled;
        let batch = TransductiveBatch {
            x0: embedding_matrix(self.corpus, labeled),
            labeled: (0..labeled.len()).collect(),
            labels: self.batch.labels.clone(),
            unlabeled: Vec::new(),
        };
        let mut model =
            AttributeModel::new(self.corpus.dim(), self.classes(), &ModelConfig::linear(), self.teacher_seed)?;
        let reports = train_supervised(&mut model, &batch, &self.config.distill)?;
        let predictions = model.predict(&embedding_matrix(self.corpus, &self.episode.test))?;
        self.finish(Variant::REPR_ONLY, model, predictions, reports)
    }

    fn finish(&self, variant: Variant, model: AttributeModel, predictions: Vec<usize>, reports: Vec<LossReport>) -> Result<RunOutcome> {
        let truth = labels_of(self.corpus, &self.episode.test);
        let eval = evaluate(&predictions, &truth, self.classes())?;
        Ok(RunOutcome {
            variant,
            model,
            episode: self.episode.clone(),
            predictions,
            eval,
            reports,
        })
    }
}

/// Predicts `episode.test` by adding test texts, `chunk` at a time, to the
/// labeled-plus-unlabeled graph.
pub fn predict_transductive(model: &AttributeModel, corpus: &Corpus, episode: &Episode, chunk: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(episode.test.len());
    for part in episode.test.chunks(chunk.max(1)) {
        let masked: Vec<usize> = episode.unlabeled.iter().chain(part).copied().collect();
        let x0 = representation_matrix(corpus, &episode.labeled, &masked);
        let pred = model.predict(&x0)?;
        out.extend_from_slice(&pred[pred.len() - part.len()..]);
    }
    Ok(out)
}

/// Representation matrix of the training graph of `episode`.
pub fn training_representations(corpus: &Corpus, episode: &Episode) -> Matrix {
    representation_matrix(corpus, &episode.labeled, &episode.unlabeled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn quick() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.distill.epochs = 5;
        c.distill.shots = 2;
        c.model = ModelConfig { edge_hidden: vec![8], gcn_widths: vec![6] };
        c
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
        assert_eq!(Variant::parse_list("repr-only,full").unwrap(), vec![Variant::REPR_ONLY, Variant::FULL]);
        assert!(Variant::parse_list("repr-only,bogus").is_err());
        assert!(Variant { graph: false, kd1: true, kd2: false }.validate().is_err());
    }

    #[test]
    fn run_is_deterministic() {
        let c = generate_synthetic(2, 15, 4, 3.0, 1).unwrap();
        let a = run(&c, &quick(), 3).unwrap();
        let b = run(&c, &quick(), 3).unwrap();
        assert_eq!(a.model.to_text(), b.model.to_text());
        assert_eq!(a.eval, b.eval);
        assert_eq!(a.predictions.len(), a.episode.test.len());
    }

    #[test]
    fn shared_stages_match_direct_runs() {
        let c = generate_synthetic(2, 15, 4, 3.0, 1).unwrap();
        let cfg = quick();
        let all = run_variants(&c, &cfg, &Variant::ALL, 4).unwrap();
        for out in all {
            let direct = run(&c, &PipelineConfig { variant: out.variant, ..cfg.clone() }, 4).unwrap();
            assert_eq!(direct.model.to_text(), out.model.to_text(), "{}", out.variant.name());
            assert_eq!(direct.eval, out.eval);
        }
    }

    #[test]
    fn chunked_prediction_matches_chunk_size_choice_shape() {
        let c = generate_synthetic(2, 20, 4, 3.0, 1).unwrap();
        let out = run(&c, &quick(), 0).unwrap();
        let p = predict_transductive(&out.model, &c, &out.episode, 3).unwrap();
        assert_eq!(p.len(), out.episode.test.len());
    }

    #[test]
    fn repr_only_uses_a_linear_model() {
        let c = generate_synthetic(2, 15, 4, 3.0, 1).unwrap();
        let out = run(&c, &PipelineConfig { variant: Variant::REPR_ONLY, ..quick() }, 0).unwrap();
        assert_eq!(out.model.depth(), 0);
        assert_eq!(out.model.input_dim(), 4);
    }
}
