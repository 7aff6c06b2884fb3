//! Run configuration: defaults, `key = value` files and flag overrides.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fewgraph::data::Domain;
use fewgraph::distill::TargetKdMode;
use fewgraph::metrics::SweepParam;
use fewgraph::pipeline::{PipelineConfig, Variant};
use fewgraph::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub target: Option<PathBuf>,
    pub source: Option<PathBuf>,
    /// Output directory (`synth`: output corpus file).
    pub out: PathBuf,
    /// Checkpoint read by `eval`; defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub export_graph: Option<PathBuf>,
    pub seed: u64,
    /// Seeds per sweep point or ablation variant, counting up from `seed`.
    pub seeds: usize,
    pub jobs: usize,
    pub pipeline: PipelineConfig,
    pub variants: Vec<Variant>,
    pub sweep_param: SweepParam,
    pub sweep_values: Vec<f64>,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_dim: usize,
    pub synth_separation: f64,
    pub synth_domain: Domain,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            target: None,
            source: None,
            out: PathBuf::from("out"),
            checkpoint: None,
            export_graph: None,
            seed: 0,
            seeds: 10,
            jobs: 1,
            pipeline: PipelineConfig::default(),
            variants: Variant::ALL.to_vec(),
            sweep_param: SweepParam::Shots,
            sweep_values: vec![1.0, 5.0, 10.0, 15.0, 20.0],
            synth_classes: 2,
            synth_per_class: 100,
            synth_dim: 16,
            synth_separation: 4.0,
            synth_domain: Domain::Target,
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Usage(format!("invalid value {value:?} for `{key}`: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num(key, s.trim()))
        .collect()
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "expected on/off")),
    }
}

impl RunConfig {
    /// Sets one configuration key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let p = &mut self.pipeline;
        match key {
            "target" => self.target = Some(PathBuf::from(value)),
            "source" => self.source = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "export_graph" => self.export_graph = Some(PathBuf::from(value)),
            "seed" => self.seed = num(key, value)?,
            "seeds" => self.seeds = num(key, value)?,
            "jobs" => self.jobs = num(key, value)?,
            "shots" => p.distill.shots = num(key, value)?,
            "tau" => p.distill.temperature = num(key, value)?,
            "lambda" => p.distill.balance = num(key, value)?,
            "epochs" => p.distill.epochs = num(key, value)?,
            "learning_rate" => p.distill.learning_rate = num(key, value)?,
            "kd_mode" | "target_kd_mode" => {
                p.distill.kd_mode =
                    TargetKdMode::parse(value).ok_or_else(|| bad(key, value, "expected unlabeled_soft or labeled_split"))?
            }
            "test_fraction" => p.test_fraction = num(key, value)?,
            "unlabeled_cap" => p.unlabeled_cap = num(key, value)?,
            "source_cap" => p.source_cap = num(key, value)?,
            "edge_hidden" => p.model.edge_hidden = list(key, value)?,
            "gcn_widths" => p.model.gcn_widths = list(key, value)?,
            "variant" => p.variant = Variant::parse(value).ok_or_else(|| bad(key, value, "unknown variant"))?,
            "graph" => p.variant.graph = flag(key, value)?,
            "kd1" => p.variant.kd1 = flag(key, value)?,
            "kd2" => p.variant.kd2 = flag(key, value)?,
            "variants" => self.variants = Variant::parse_list(value).map_err(|e| bad(key, value, e))?,
            "param" => {
                self.sweep_param = SweepParam::parse(value).ok_or_else(|| bad(key, value, "expected shots, tau or lambda"))?
            }
            "values" => self.sweep_values = list(key, value)?,
            "classes" => self.synth_classes = num(key, value)?,
            "per_class" => self.synth_per_class = num(key, value)?,
            "dim" => self.synth_dim = num(key, value)?,
            "separation" => self.synth_separation = num(key, value)?,
            "domain" => {
                self.synth_domain = Domain::from_tag(value).ok_or_else(|| bad(key, value, "expected S or T"))?
            }
            _ => return Err(Error::Usage(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Format {
                    path: origin.to_path_buf(),
                    line: n + 1,
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        for (key, path) in [("target", &self.target), ("source", &self.source)] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::Usage(format!("`{key}`: no such file {}", p.display())));
                }
            }
        }
        if self.seeds == 0 {
            return Err(Error::Usage("`seeds` must be at least 1".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Usage("`jobs` must be at least 1".into()));
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }
}
