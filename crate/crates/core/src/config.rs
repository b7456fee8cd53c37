//! Experiment configuration: a flat key-value text format with dotted
//! section names, one `key = value` pair per line, `#` comments.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::model::CapsNetConfig;
use crate::routing::RoutingBackprop;

/// Quantization level choice for analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KChoice {
    /// Sweep ascending and keep the smallest K whose quantized accuracy
    /// stays within 0.1 points of the unquantized accuracy.
    Auto,
    Fixed(usize),
}

impl FromStr for KChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            Ok(KChoice::Auto)
        } else {
            let k: usize = s
                .parse()
                .map_err(|_| Error::Config(format!("analysis K must be 'auto' or an integer, got '{s}'")))?;
            if k < 2 {
                return Err(Error::Config(format!("analysis K must be >= 2, got {k}")));
            }
            Ok(KChoice::Fixed(k))
        }
    }
}

impl std::fmt::Display for KChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KChoice::Auto => write!(f, "auto"),
            KChoice::Fixed(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub lambda: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    pub enabled: bool,
    pub threshold: f64,
    /// Allowed validation-accuracy drop (fraction) when masking commits.
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    /// Track validation entropy during training.
    pub enabled: bool,
    pub k: KChoice,
    pub top_n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Use only the first N training samples (0 = all).
    pub train_limit: usize,
    pub augment_shift: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: CapsNetConfig,
    pub optimizer: OptimizerConfig,
    pub prune: PruneConfig,
    pub analysis: AnalysisConfig,
    pub data: DataConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: CapsNetConfig::toy(),
            optimizer: OptimizerConfig {
                eta: 0.05,
                lambda: 1e-4,
                momentum: 0.9,
                batch: 16,
                epochs: 15,
                seed: 1,
            },
            prune: PruneConfig {
                enabled: false,
                threshold: 1e-3,
                tolerance: 0.002,
            },
            analysis: AnalysisConfig {
                enabled: false,
                k: KChoice::Auto,
                top_n: 5,
            },
            data: DataConfig {
                source: DataSource::IdxDir(PathBuf::from("data/mnist")),
                train_limit: 0,
                augment_shift: 2,
            },
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("bad value '{value}' for {key}, want true/false"))),
            }
        }
        match key {
            "model.input_channels" => self.model.input_shape.0 = num(key, value)?,
            "model.input_height" => self.model.input_shape.1 = num(key, value)?,
            "model.input_width" => self.model.input_shape.2 = num(key, value)?,
            "model.conv1_channels" => self.model.conv1_channels = num(key, value)?,
            "model.conv1_kernel" => self.model.conv1_kernel = num(key, value)?,
            "model.conv1_stride" => self.model.conv1_stride = num(key, value)?,
            "model.primary_types" => self.model.primary_types = num(key, value)?,
            "model.primary_dim" => self.model.primary_dim = num(key, value)?,
            "model.primary_kernel" => self.model.primary_kernel = num(key, value)?,
            "model.primary_stride" => self.model.primary_stride = num(key, value)?,
            "model.num_classes" => self.model.num_classes = num(key, value)?,
            "model.out_dim" => self.model.out_dim = num(key, value)?,
            "model.routing_iters" => self.model.routing_iters = num(key, value)?,
            "model.routing_backprop" => {
                self.model.routing_backprop = match value {
                    "last" => RoutingBackprop::LastIteration,
                    "full" => RoutingBackprop::FullUnroll,
                    _ => {
                        return Err(Error::Config(format!(
                            "bad value '{value}' for {key}, want last/full"
                        )))
                    }
                }
            }
            "optimizer.eta" => self.optimizer.eta = num(key, value)?,
            "optimizer.lambda" => self.optimizer.lambda = num(key, value)?,
            "optimizer.momentum" => self.optimizer.momentum = num(key, value)?,
            "optimizer.batch" => self.optimizer.batch = num(key, value)?,
            "optimizer.epochs" => self.optimizer.epochs = num(key, value)?,
            "optimizer.seed" => self.optimizer.seed = num(key, value)?,
            "prune.enabled" => self.prune.enabled = flag(key, value)?,
            "prune.threshold" => self.prune.threshold = num(key, value)?,
            "prune.tolerance" => self.prune.tolerance = num(key, value)?,
            "analysis.enabled" => self.analysis.enabled = flag(key, value)?,
            "analysis.k" => self.analysis.k = value.parse()?,
            "analysis.top_n" => self.analysis.top_n = num(key, value)?,
            "paths.data" => self.data.source = value.parse()?,
            "paths.out" => self.out_dir = Some(PathBuf::from(value)),
            "data.train_limit" => self.data.train_limit = num(key, value)?,
            "data.augment_shift" => self.data.augment_shift = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.derived()?;
        if self.optimizer.eta <= 0.0 {
            return Err(Error::Config("optimizer.eta must be positive".into()));
        }
        if self.optimizer.lambda < 0.0 || self.optimizer.lambda >= 1.0 {
            return Err(Error::Config("optimizer.lambda must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(Error::Config("optimizer.momentum must be in [0, 1)".into()));
        }
        if self.optimizer.batch == 0 {
            return Err(Error::Config("optimizer.batch must be >= 1".into()));
        }
        if self.prune.threshold < 0.0 || self.prune.tolerance < 0.0 {
            return Err(Error::Config("prune.threshold and prune.tolerance must be nonnegative".into()));
        }
        if self.analysis.top_n == 0 {
            return Err(Error::Config("analysis.top_n must be >= 1".into()));
        }
        Ok(())
    }

    /// Deterministic rendering in template order; `parse(render())` is
    /// the identity.
    pub fn render(&self) -> String {
        let m = &self.model;
        let o = &self.optimizer;
        let p = &self.prune;
        let a = &self.analysis;
        let d = &self.data;
        let backprop = match m.routing_backprop {
            RoutingBackprop::LastIteration => "last",
            RoutingBackprop::FullUnroll => "full",
        };
        let mut s = String::new();
        s.push_str(&format!("model.input_channels = {}\n", m.input_shape.0));
        s.push_str(&format!("model.input_height = {}\n", m.input_shape.1));
        s.push_str(&format!("model.input_width = {}\n", m.input_shape.2));
        s.push_str(&format!("model.conv1_channels = {}\n", m.conv1_channels));
        s.push_str(&format!("model.conv1_kernel = {}\n", m.conv1_kernel));
        s.push_str(&format!("model.conv1_stride = {}\n", m.conv1_stride));
        s.push_str(&format!("model.primary_types = {}\n", m.primary_types));
        s.push_str(&format!("model.primary_dim = {}\n", m.primary_dim));
        s.push_str(&format!("model.primary_kernel = {}\n", m.primary_kernel));
        s.push_str(&format!("model.primary_stride = {}\n", m.primary_stride));
        s.push_str(&format!("model.num_classes = {}\n", m.num_classes));
        s.push_str(&format!("model.out_dim = {}\n", m.out_dim));
        s.push_str(&format!("model.routing_iters = {}\n", m.routing_iters));
        s.push_str(&format!("model.routing_backprop = {backprop}\n"));
        s.push_str(&format!("optimizer.eta = {}\n", o.eta));
        s.push_str(&format!("optimizer.lambda = {}\n", o.lambda));
        s.push_str(&format!("optimizer.momentum = {}\n", o.momentum));
        s.push_str(&format!("optimizer.batch = {}\n", o.batch));
        s.push_str(&format!("optimizer.epochs = {}\n", o.epochs));
        s.push_str(&format!("optimizer.seed = {}\n", o.seed));
        s.push_str(&format!("prune.enabled = {}\n", p.enabled));
        s.push_str(&format!("prune.threshold = {}\n", p.threshold));
        s.push_str(&format!("prune.tolerance = {}\n", p.tolerance));
        s.push_str(&format!("analysis.enabled = {}\n", a.enabled));
        s.push_str(&format!("analysis.k = {}\n", a.k));
        s.push_str(&format!("analysis.top_n = {}\n", a.top_n));
        s.push_str(&format!("paths.data = {}\n", d.source));
        if let Some(out) = &self.out_dir {
            s.push_str(&format!("paths.out = {}\n", out.display()));
        }
        s.push_str(&format!("data.train_limit = {}\n", d.train_limit));
        s.push_str(&format!("data.augment_shift = {}\n", d.augment_shift));
        s
    }
}
