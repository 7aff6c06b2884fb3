//! Finite-difference check of every trainable parameter on a tiny episode.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use fewgraph::data::{generate_synthetic, representation_matrix};
use fewgraph::distill::one_hot;
use fewgraph::model::{AttributeModel, BoundModel};
use fewgraph::numcore::gradcheck::{central_difference, relative_error, DEFAULT_STEP};
use fewgraph::numcore::{row_softmax, Matrix, Tape, Var};
use fewgraph::pipeline::PipelineConfig;
use fewgraph::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest accepted per-block relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

const EMBED_DIM: usize = 8;
const CLASSES: usize = 2;
const NODES_PER_CLASS: usize = 3;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// `(parameter name, relative error)` per block.
    pub blocks: Vec<(String, f64)>,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.blocks.is_empty() && self.blocks.iter().all(|b| b.1 < GRADCHECK_TOLERANCE)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, err) in &self.blocks {
            let verdict = if *err < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
            let _ = writeln!(out, "{name:<12} rel_err {err:.3e} {verdict}");
        }
        let _ = writeln!(
            out,
            "max rel_err {:.3e} over {} blocks in {:.2}s",
            self.max_error(),
            self.blocks.len(),
            self.elapsed.as_secs_f64()
        );
        out
    }
}

struct Episode {
    x0: Matrix,
    labeled: Vec<usize>,
    hard: Matrix,
    unlabeled: Vec<usize>,
    soft: Matrix,
}

/// Mixed hard-label and distillation loss, exercising every op used in training.
fn loss(model: &AttributeModel, ep: &Episode, tape: &mut Tape, tau: f64, lambda: f64) -> Result<(Var, BoundModel)> {
    let bound = model.bind(tape);
    let x = tape.constant(ep.x0.clone());
    let logits = model.forward_on(tape, &bound, x)?;
    let lab = tape.select_rows(logits, &ep.labeled)?;
    let p = tape.row_softmax(lab, 1.0)?;
    let l_s = tape.cross_entropy(p, &ep.hard)?;
    let unl = tape.select_rows(logits, &ep.unlabeled)?;
    let q = tape.row_softmax(unl, tau)?;
    let l_t = tape.cross_entropy(q, &ep.soft)?;
    let a = tape.scale(l_s, 1.0 - lambda);
    let b = tape.scale(l_t, lambda);
    Ok((tape.add(a, b)?, bound))
}

/// Checks every parameter of a freshly initialised model (architecture from
/// `config.model`) on a 6-node episode with 8-dimensional embeddings and two
/// classes.
pub fn gradcheck(config: &PipelineConfig, seed: u64) -> Result<GradcheckReport> {
    let start = Instant::now();
    let corpus = generate_synthetic(CLASSES, NODES_PER_CLASS, EMBED_DIM, 1.0, seed)?;
    let labeled = vec![0, NODES_PER_CLASS];
    let masked: Vec<usize> = (0..corpus.len()).filter(|i| !labeled.contains(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Matrix::from_vec(
        masked.len(),
        CLASSES,
        (0..masked.len() * CLASSES).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )?;
    let ep = Episode {
        x0: representation_matrix(&corpus, &labeled, &masked),
        labeled: vec![0, 1],
        hard: one_hot(&[0, 1], CLASSES),
        unlabeled: (2..corpus.len()).collect(),
        soft: row_softmax(&raw, 1.0)?,
    };
    let model = AttributeModel::new(EMBED_DIM + CLASSES, CLASSES, &config.model, seed)?;
    let (tau, lambda) = (config.distill.temperature, config.distill.balance);

    let mut tape = Tape::new();
    let (root, bound) = loss(&model, &ep, &mut tape, tau, lambda)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Matrix> = model
        .params()
        .iter()
        .zip(&bound.all)
        .map(|(p, &var)| {
            grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
        })
        .collect();

    let params: Vec<Matrix> = model.params().into_iter().cloned().collect();
    let numeric = central_difference(
        |ps| {
            let mut m = model.clone();
            for (dst, src) in m.params_mut().into_iter().zip(ps) {
                *dst = src.clone();
            }
            let mut t = Tape::new();
            let (l, _) = loss(&m, &ep, &mut t, tau, lambda)?;
            Ok(t.value(l).data()[0])
        },
        &params,
        DEFAULT_STEP,
    )?;

    let blocks: Vec<(String, f64)> = model
        .param_names()
        .into_iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|(name, (a, n))| (name, relative_error(a, n)))
        .collect();
    if blocks.iter().any(|b| !b.1.is_finite()) {
        return Err(Error::Usage("non-finite gradient during gradient check".into()));
    }
    Ok(GradcheckReport {
        blocks,
        elapsed: start.elapsed(),
    })
}
