//! Run configuration: flat `key = value` lines, `[a, b]` lists, `#`
//! comments. Later assignments win, so command-line overrides are applied
//! as extra lines after the file.

use std::path::PathBuf;

use protonesy_core::episodic::EpisodeConfig;
use protonesy_core::tasks::{SplitSizes, SyntheticSpec, DIGITS, FULL_SPLIT_SIZES};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SEEDS: [u64; 3] = [0, 128, 256];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{key}{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
pub struct ConfigError {
    pub key: String,
    pub line: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MnistEvenOdd,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SlPnet,
    SlBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskKind,
    pub model: ModelKind,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub mnist_dir: Option<PathBuf>,
    /// A directory written by `gen-synth`; generated in memory when absent.
    pub synth_dir: Option<PathBuf>,
    /// A `g1 g2` pair file; the bundled even/odd pairs when absent.
    pub combinations: Option<PathBuf>,
    /// Seed of dataset construction, shared by every training seed.
    pub data_seed: u64,
    /// Split sizes; task defaults when absent.
    pub sizes: Option<SplitSizes>,
    pub synth_classes: usize,
    pub synth_dim: usize,
    pub synth_separation: f64,
    pub labels_per_class: usize,
    /// Classes with concept labels; every class when absent.
    pub labelled_classes: Option<Vec<usize>>,
    /// One extractor for both digits, or one per digit position.
    pub shared_head: bool,
    pub episode: EpisodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticSpec::default();
        Self {
            task: TaskKind::Synthetic,
            model: ModelKind::SlPnet,
            seeds: DEFAULT_SEEDS.to_vec(),
            out: PathBuf::from("runs/latest"),
            mnist_dir: None,
            synth_dir: None,
            combinations: None,
            data_seed: 0,
            sizes: None,
            synth_classes: synth.classes,
            synth_dim: synth.dim,
            synth_separation: synth.separation,
            labels_per_class: 1,
            labelled_classes: None,
            shared_head: true,
            episode: EpisodeConfig::default(),
        }
    }
}

/// A parsed right-hand side.
#[derive(Debug, Clone, PartialEq)]
enum Value {
    Scalar(String),
    List(Vec<String>),
}

fn parse_value(raw: &str) -> Result<Value, String> {
    let raw = raw.trim();
    if let Some(inner) = raw.strip_prefix('[') {
        let inner = inner.strip_suffix(']').ok_or("unterminated list")?;
        let items: Vec<String> = inner
            .split(',')
            .map(|s| unquote(s.trim()))
            .filter(|s| !s.is_empty())
            .collect();
        return Ok(Value::List(items));
    }
    Ok(Value::Scalar(unquote(raw)))
}

fn unquote(s: &str) -> String {
    s.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(s)
        .to_string()
}

impl Value {
    fn scalar(&self) -> Result<&str, String> {
        match self {
            Value::Scalar(s) => Ok(s),
            Value::List(_) => Err("expected a single value, found a list".into()),
        }
    }

    /// A list, also accepting a bare comma-separated scalar.
    fn items(&self) -> Vec<String> {
        match self {
            Value::List(v) => v.clone(),
            Value::Scalar(s) => s
                .split(',')
                .map(|x| x.trim().to_string())
                .filter(|x| !x.is_empty())
                .collect(),
        }
    }
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("{s:?} is not a valid number"))
}

fn nums<T: std::str::FromStr>(v: &Value) -> Result<Vec<T>, String> {
    v.items().iter().map(|s| num(s)).collect()
}

fn boolean(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{s:?} is not a boolean")),
    }
}

fn optional_path(s: &str) -> Option<PathBuf> {
    (!s.is_empty() && s != "none").then(|| PathBuf::from(s))
}

impl RunConfig {
    /// Parses a configuration file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError {
                key: line.to_string(),
                line: Some(i + 1),
                message: "expected key = value".into(),
            })?;
            self.set_at(key.trim(), value, Some(i + 1))?;
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_at(key, value, None)
    }

    fn set_at(&mut self, key: &str, raw: &str, line: Option<usize>) -> Result<(), ConfigError> {
        let fail = |message: String| ConfigError {
            key: key.to_string(),
            line,
            message,
        };
        let v = parse_value(raw).map_err(|m| fail(m.to_string()))?;
        self.assign(key, &v).map_err(fail)
    }

    fn assign(&mut self, key: &str, v: &Value) -> Result<(), String> {
        let e = &mut self.episode;
        match key {
            "task" => {
                self.task = match v.scalar()? {
                    "mnist_even_odd" => TaskKind::MnistEvenOdd,
                    "synthetic" => TaskKind::Synthetic,
                    other => return Err(format!("unknown task {other:?} (mnist_even_odd, synthetic)")),
                }
            }
            "model" => {
                self.model = match v.scalar()? {
                    "sl_pnet" => ModelKind::SlPnet,
                    "sl_baseline" => ModelKind::SlBaseline,
                    other => return Err(format!("unknown model {other:?} (sl_pnet, sl_baseline)")),
                }
            }
            "seeds" | "seed" => self.seeds = nums(v)?,
            "out" => self.out = PathBuf::from(v.scalar()?),
            "mnist_dir" => self.mnist_dir = optional_path(v.scalar()?),
            "synth_dir" => self.synth_dir = optional_path(v.scalar()?),
            "combinations" => self.combinations = optional_path(v.scalar()?),
            "data_seed" => self.data_seed = num(v.scalar()?)?,
            "sizes" => {
                let s: Vec<usize> = nums(v)?;
                let [train, val, test] = s[..] else {
                    return Err("expected [train, val, test]".into());
                };
                self.sizes = Some(SplitSizes { train, val, test });
            }
            "synth_classes" => self.synth_classes = num(v.scalar()?)?,
            "synth_dim" => self.synth_dim = num(v.scalar()?)?,
            "synth_separation" => self.synth_separation = num(v.scalar()?)?,
            "labels_per_class" => self.labels_per_class = num(v.scalar()?)?,
            "labelled_classes" => {
                let s = v.scalar().unwrap_or("");
                self.labelled_classes = if s == "all" { None } else { Some(nums(v)?) };
            }
            "shared_head" => self.shared_head = boolean(v.scalar()?)?,
            "classes_per_episode" => {
                let s = v.scalar()?;
                e.classes_per_episode = if s == "all" { None } else { Some(num(s)?) };
            }
            "support_per_class" => e.support_per_class = num(v.scalar()?)?,
            "query_per_class" => e.query_per_class = num(v.scalar()?)?,
            "episodes_per_epoch" => e.episodes_per_epoch = num(v.scalar()?)?,
            "epochs" => e.epochs = num(v.scalar()?)?,
            "nesy_weight" => e.nesy_weight = num(v.scalar()?)?,
            "batch_size" => e.batch_size = num(v.scalar()?)?,
            "hidden" => e.hidden = nums(v)?,
            "embedding_dim" => e.embedding_dim = num(v.scalar()?)?,
            "lr" => e.adam.lr = num(v.scalar()?)?,
            "beta1" => e.adam.beta1 = num(v.scalar()?)?,
            "beta2" => e.adam.beta2 = num(v.scalar()?)?,
            "adam_eps" => e.adam.eps = num(v.scalar()?)?,
            "weight_decay" => e.adam.weight_decay = num(v.scalar()?)?,
            "zero_shot_p" => e.zero_shot_p = num(v.scalar()?)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Checks cross-field constraints, naming the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |key: &str, message: &str| ConfigError {
            key: key.to_string(),
            line: None,
            message: message.to_string(),
        };
        if self.seeds.is_empty() {
            return Err(fail("seeds", "at least one seed is required"));
        }
        if self.task == TaskKind::MnistEvenOdd {
            match &self.mnist_dir {
                None => return Err(fail("mnist_dir", "required for task mnist_even_odd")),
                Some(d) if !d.is_dir() => {
                    return Err(fail("mnist_dir", &format!("{} does not exist", d.display())))
                }
                _ => {}
            }
        }
        for (key, path) in [
            ("synth_dir", &self.synth_dir),
            ("combinations", &self.combinations),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(fail(key, &format!("{} does not exist", p.display())));
                }
            }
        }
        if self.labels_per_class == 0 {
            return Err(fail("labels_per_class", "must be at least 1"));
        }
        let classes = self.classes();
        if let Some(c) = &self.labelled_classes {
            if c.len() < 2 {
                return Err(fail("labelled_classes", "at least two classes need labels"));
            }
            if let Some(bad) = c.iter().find(|&&x| x >= classes) {
                return Err(fail(
                    "labelled_classes",
                    &format!("class {bad} outside 0..{classes}"),
                ));
            }
        }
        if self.task == TaskKind::Synthetic {
            if !(self.synth_separation > 0.0 && self.synth_separation.is_finite()) {
                return Err(fail("synth_separation", "must be positive and finite"));
            }
            if self.synth_dim < self.synth_classes {
                return Err(fail("synth_dim", "must be at least synth_classes"));
            }
            if self.synth_classes < 2 {
                return Err(fail("synth_classes", "must be at least 2"));
            }
        }
        let e = &self.episode;
        let positive = [
            ("support_per_class", e.support_per_class),
            ("query_per_class", e.query_per_class),
            ("episodes_per_epoch", e.episodes_per_epoch),
            ("batch_size", e.batch_size),
            ("embedding_dim", e.embedding_dim),
            ("classes_per_episode", e.classes_per_episode.unwrap_or(1)),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(fail(key, "must be at least 1"));
        }
        if e.hidden.contains(&0) {
            return Err(fail("hidden", "layer widths must be positive"));
        }
        if !(e.nesy_weight >= 0.0 && e.nesy_weight.is_finite()) {
            return Err(fail("nesy_weight", "must be finite and non-negative"));
        }
        if !(e.adam.lr > 0.0 && e.adam.lr.is_finite()) {
            return Err(fail("lr", "must be positive and finite"));
        }
        for (key, b) in [("beta1", e.adam.beta1), ("beta2", e.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(fail(key, "must lie in [0, 1)"));
            }
        }
        if e.adam.eps.is_nan() || e.adam.eps <= 0.0 {
            return Err(fail("adam_eps", "must be positive"));
        }
        if !(e.adam.weight_decay >= 0.0 && e.adam.weight_decay.is_finite()) {
            return Err(fail("weight_decay", "must be finite and non-negative"));
        }
        if !(e.zero_shot_p > 0.0 && e.zero_shot_p < 1.0) {
            return Err(fail("zero_shot_p", "must lie in (0, 1)"));
        }
        self.episode
            .validate()
            .map_err(|err| fail("episode", &err.to_string()))
    }

    pub fn classes(&self) -> usize {
        match self.task {
            TaskKind::MnistEvenOdd => DIGITS,
            TaskKind::Synthetic => self.synth_classes,
        }
    }

    pub fn split_sizes(&self) -> SplitSizes {
        self.sizes.unwrap_or(match self.task {
            TaskKind::MnistEvenOdd => FULL_SPLIT_SIZES,
            TaskKind::Synthetic => SyntheticSpec::default().sizes,
        })
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.synth_classes,
            dim: self.synth_dim,
            separation: self.synth_separation,
            sizes: self.split_sizes(),
            seed: self.data_seed,
        }
    }
}

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("")
}
