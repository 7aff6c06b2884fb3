//! Command implementations behind the `fewgraph` binary.

mod config;
pub mod gradcheck;

use std::fs;
use std::path::Path;

use clap::{Args, Parser, Subcommand};
use fewgraph::data::{labels_of, Corpus, Domain, SyntheticSpec};
use fewgraph::graph::build_text_graph;
use fewgraph::metrics::{ablate, evaluate, sweep, EvalResult, Table};
use fewgraph::model::AttributeModel;
use fewgraph::pipeline::{predict_transductive, run, training_representations, RunOutcome};
use fewgraph::{Error, Result};

pub use config::RunConfig;
pub use gradcheck::{gradcheck, GradcheckReport, GRADCHECK_TOLERANCE};

#[derive(Parser, Debug)]
#[command(name = "fewgraph", version, about = "Few-shot attribute inference over learned text graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic Gaussian corpus to --out.
    Synth(Flags),
    /// Train on one episode; writes model.ckpt and loss.log under --out.
    Train(Flags),
    /// Evaluate a checkpoint on the test texts of an episode.
    Eval(Flags),
    /// Accuracy across values of one parameter (shots, tau or lambda).
    Sweep(Flags),
    /// Accuracy of each model variant.
    Ablate(Flags),
    /// Compare backward gradients against finite differences.
    Gradcheck(Flags),
}

/// Flags shared by every command. Each overrides the same key from --config.
#[derive(Args, Debug, Default)]
pub struct Flags {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub shots: Option<String>,
    #[arg(long)]
    pub tau: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    /// Labeled source-domain corpus for cross-domain distillation.
    #[arg(long)]
    pub source: Option<String>,
    /// Target-domain corpus.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    /// Worker threads for sweeps and ablations.
    #[arg(long)]
    pub jobs: Option<String>,
    /// Comma-separated variants: repr-only, +graph, +graph+KD1, +graph+KD2, full.
    #[arg(long)]
    pub variants: Option<String>,
    /// Write the first learned graph of the training episode to this file.
    #[arg(long)]
    pub export_graph: Option<String>,
    /// Any other configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Flags {
    pub fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects key=value, got {s:?}")))?;
            out.push((k.trim().to_string(), v.to_string()));
        }
        let named = [
            ("seed", &self.seed),
            ("shots", &self.shots),
            ("tau", &self.tau),
            ("lambda", &self.lambda),
            ("epochs", &self.epochs),
            ("source", &self.source),
            ("target", &self.target),
            ("out", &self.out),
            ("jobs", &self.jobs),
            ("variants", &self.variants),
            ("export_graph", &self.export_graph),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        Ok(out)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let cfg = RunConfig::resolve(self.config.as_deref(), &self.overrides()?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs a parsed command line and returns its standard output.
pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Synth(f) => cmd_synth(&f.resolve()?),
        Command::Train(f) => cmd_train(&f.resolve()?).map(|t| t.summary),
        Command::Eval(f) => cmd_eval(&f.resolve()?).map(|(_, text)| text),
        Command::Sweep(f) => cmd_sweep(&f.resolve()?).map(|t| t.to_text()),
        Command::Ablate(f) => cmd_ablate(&f.resolve()?).map(|t| t.to_text()),
        Command::Gradcheck(f) => {
            let report = cmd_gradcheck(&f.resolve()?)?;
            if report.passed() {
                Ok(report.to_text())
            } else {
                Err(Error::Usage(format!(
                    "gradient check failed: max relative error {:e}\n{}",
                    report.max_error(),
                    report.to_text()
                )))
            }
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Target corpus plus, if configured, the source corpus with every record
/// assigned to the source domain.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let target = cfg
        .target
        .as_ref()
        .ok_or_else(|| Error::Usage("`target` corpus is required".into()))?;
    let mut corpus = Corpus::load(target)?;
    if let Some(path) = &cfg.source {
        let src = Corpus::load(path)?;
        let records = src
            .records()
            .iter()
            .cloned()
            .map(|mut r| {
                r.domain = Domain::Source;
                r
            })
            .collect();
        corpus.merge(Corpus::new(src.dim(), src.labels().clone(), records)?)?;
    }
    Ok(corpus)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let spec = SyntheticSpec {
        domain: cfg.synth_domain,
        ..SyntheticSpec::new(
            cfg.synth_classes,
            cfg.synth_per_class,
            cfg.synth_dim,
            cfg.synth_separation,
            cfg.seed,
        )
    };
    let corpus = spec.generate()?;
    write(&cfg.out, &corpus.to_text())?;
    Ok(format!("wrote {} records to {}\n", corpus.len(), cfg.out.display()))
}

pub struct TrainOutput {
    pub outcome: RunOutcome,
    pub summary: String,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    let corpus = load_corpus(cfg)?;
    let outcome = run(&corpus, &cfg.pipeline, cfg.seed)?;
    let ckpt = cfg.out.join("model.ckpt");
    write(&ckpt, &outcome.model.to_text())?;
    let log: String = outcome.reports.iter().map(|r| r.to_line() + "\n").collect();
    let loss_log = cfg.out.join("loss.log");
    write(&loss_log, &log)?;
    if let Some(path) = &cfg.export_graph {
        let Some(net) = outcome.model.edge_networks().first() else {
            return Err(Error::Usage("this variant learns no graph to export".into()));
        };
        let graph = build_text_graph(net, &training_representations(&corpus, &outcome.episode))?;
        write(path, &graph.export_text())?;
    }
    let summary = format!(
        "variant {}\n{}checkpoint {}\nloss log {}\n",
        outcome.variant.name(),
        outcome.eval.to_text(corpus.labels().names()),
        ckpt.display(),
        loss_log.display()
    );
    Ok(TrainOutput { outcome, summary })
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(EvalResult, String)> {
    let corpus = load_corpus(cfg)?;
    let model = AttributeModel::load(cfg.checkpoint_path())?;
    if model.classes() != corpus.labels().len() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes, corpus has {}",
            model.classes(),
            corpus.labels().len()
        )));
    }
    let episode = cfg.pipeline.sampler().sample(&corpus, cfg.seed)?;
    let predictions = if model.depth() == 0 && model.input_dim() == corpus.dim() {
        model.predict(&fewgraph::data::embedding_matrix(&corpus, &episode.test))?
    } else {
        predict_transductive(&model, &corpus, &episode, cfg.pipeline.unlabeled_cap)?
    };
    let eval = evaluate(&predictions, &labels_of(&corpus, &episode.test), corpus.labels().len())?;
    let text = eval.to_text(corpus.labels().names());
    Ok((eval, text))
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Table> {
    let corpus = load_corpus(cfg)?;
    let table = sweep(
        &corpus,
        &cfg.pipeline,
        cfg.sweep_param,
        &cfg.sweep_values,
        &cfg.seed_list(),
        cfg.jobs,
    )?;
    write(&cfg.out.join(format!("sweep_{}.csv", cfg.sweep_param.name())), &table.to_csv())?;
    Ok(table)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Table> {
    let corpus = load_corpus(cfg)?;
    let table = ablate(&corpus, &cfg.pipeline, &cfg.variants, &cfg.seed_list(), cfg.jobs)?;
    write(&cfg.out.join("ablation.csv"), &table.to_csv())?;
    Ok(table)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    gradcheck(&cfg.pipeline, cfg.seed)
}
