use fewgraph::data::{labels_of, representation_matrix, Corpus, Domain, SyntheticSpec};
use fewgraph::distill::{
    fine_tune_head, pseudo_labels, train_base, train_final, train_supervised, DistillConfig, Stage, SourceSet,
    TargetKdMode, TransductiveBatch,
};
use fewgraph::model::{AttributeModel, ModelConfig};
use fewgraph::pipeline::{run, PipelineConfig, Variant};
use fewgraph::Error;

fn quick() -> DistillConfig {
    DistillConfig {
        epochs: 25,
        shots: 4,
        ..DistillConfig::default()
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        edge_hidden: vec![16],
        gcn_widths: vec![8, 8],
    }
}

fn corpus(with_source: bool) -> Corpus {
    let mut c = SyntheticSpec::new(2, 20, 6, 2.0, 1).generate().unwrap();
    if with_source {
        let src = SyntheticSpec {
            domain: Domain::Source,
            ..SyntheticSpec::new(2, 15, 6, 2.0, 2)
        };
        c.merge(src.generate().unwrap()).unwrap();
    }
    c
}

fn batch(c: &Corpus, shots: usize, seed: u64) -> (TransductiveBatch, Option<SourceSet>) {
    let sampler = fewgraph::data::EpisodeSampler {
        shots,
        ..Default::default()
    };
    let ep = sampler.sample(c, seed).unwrap();
    let n = ep.labeled.len();
    let b = TransductiveBatch {
        x0: representation_matrix(c, &ep.labeled, &ep.unlabeled),
        labeled: (0..n).collect(),
        labels: labels_of(c, &ep.labeled),
        unlabeled: (n..n + ep.unlabeled.len()).collect(),
    };
    let s = ep.source_labeled.map(|idx| SourceSet {
        x0: representation_matrix(c, &idx, &[]),
        labels: labels_of(c, &idx),
    });
    (b, s)
}

fn teacher(b: &TransductiveBatch) -> AttributeModel {
    let mut m = AttributeModel::new(b.x0.cols(), 2, &small_model(), 3).unwrap();
    train_supervised(&mut m, b, &quick()).unwrap();
    m
}

#[test]
fn zero_balance_final_matches_plain_fine_tuning() {
    let (b, _) = batch(&corpus(false), 4, 0);
    let t = teacher(&b);
    let cfg = DistillConfig {
        balance: 0.0,
        ..quick()
    };
    let (kd, kd_reports) = train_final(&t, &b, &cfg).unwrap();
    let (plain, plain_reports) = fine_tune_head(&t, &b, &cfg).unwrap();
    for (a, p) in kd_reports.iter().zip(&plain_reports) {
        assert!((a.l - p.l).abs() <= 1e-12, "epoch {}: {} vs {}", a.epoch, a.l, p.l);
    }
    let (kw, kb) = kd.head();
    let (pw, pb) = plain.head();
    assert!(kw.max_abs_diff(pw) <= 1e-12 && kb.max_abs_diff(pb) <= 1e-12);
}

#[test]
fn base_reports_add_up() {
    let c = corpus(true);
    let (b, s) = batch(&c, 4, 1);
    let out = train_base(&s.unwrap(), &b, 2, &small_model(), &quick(), 9).unwrap();
    assert_eq!(out.reports.len(), quick().epochs);
    for r in &out.reports {
        assert_eq!(r.stage, Stage::Base);
        assert!(r.l_ct > 0.0);
        assert!((r.l_c - (r.l_cs + r.l_ct)).abs() <= 1e-12);
    }
    for r in &out.teacher_reports {
        assert_eq!(r.stage, Stage::Teacher);
        assert_eq!(r.l, r.l_s);
    }
}

#[test]
fn teacher_soft_labels_flatten_with_temperature() {
    let (b, _) = batch(&corpus(false), 4, 2);
    let t = teacher(&b);
    let mean_entropy = |tau: f64| {
        let p = pseudo_labels(&t, &b.x0, &b.unlabeled, tau).unwrap();
        (0..p.rows())
            .map(|i| -p.row(i).iter().map(|v| v * v.ln()).sum::<f64>())
            .sum::<f64>()
            / p.rows() as f64
    };
    let h: Vec<f64> = [1.0, 3.0, 10.0].iter().map(|&t| mean_entropy(t)).collect();
    assert!(h[0] < h[1] && h[1] < h[2], "{h:?}");
}

#[test]
fn final_stage_needs_a_trained_base() {
    let (b, _) = batch(&corpus(false), 4, 3);
    let untrained = AttributeModel::new(b.x0.cols(), 2, &small_model(), 0).unwrap();
    assert!(matches!(train_final(&untrained, &b, &quick()), Err(Error::Usage(_))));
}

#[test]
fn labeled_split_needs_two_shots_per_class() {
    let c = corpus(false);
    let (one, _) = batch(&c, 1, 4);
    let t = teacher(&one);
    let cfg = DistillConfig {
        kd_mode: TargetKdMode::LabeledSplit,
        ..quick()
    };
    assert!(train_final(&t, &one, &cfg).is_err());
    let (two, _) = batch(&c, 2, 4);
    let t = teacher(&two);
    let (_, reports) = train_final(&t, &two, &cfg).unwrap();
    assert!(reports.iter().all(|r| r.l_t > 0.0));
}

#[test]
fn full_without_source_is_graph_plus_target_distillation() {
    let c = corpus(false);
    let mut cfg = PipelineConfig {
        distill: quick(),
        model: small_model(),
        ..PipelineConfig::default()
    };
    let full = run(&c, &cfg, 5).unwrap();
    cfg.variant = Variant::GRAPH_KD2;
    let kd2 = run(&c, &cfg, 5).unwrap();
    assert_eq!(full.predictions, kd2.predictions);
    assert_eq!(full.model, kd2.model);
    assert!(full.reports.iter().all(|r| r.stage != Stage::Base));
}

#[test]
fn same_seed_same_run() {
    let c = corpus(true);
    let cfg = PipelineConfig {
        distill: quick(),
        model: small_model(),
        ..PipelineConfig::default()
    };
    let a = run(&c, &cfg, 6).unwrap();
    let b = run(&c, &cfg, 6).unwrap();
    assert_eq!(a.model.to_text(), b.model.to_text());
    assert_eq!(a.reports, b.reports);
}
