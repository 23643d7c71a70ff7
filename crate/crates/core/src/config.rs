//! Run configuration: flat `key = value` files with `--key value` overrides.
//!
//! Precedence is command line, then file, then the task's defaults. Every
//! key is validated before training starts and unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::optim::EmbeddingPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Lm,
    Sentiment,
    Nli,
    Copy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Lstm,
    Lstmn,
    LstmnStack,
    Seq2SeqShallow,
    Seq2SeqDeep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

macro_rules! named_enum {
    ($ty:ident, $field:literal, { $($name:literal => $variant:ident),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::config($field, format!("unknown value `{other}`"))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name,)+ })
            }
        }
    };
}

named_enum!(Task, "task", { "lm" => Lm, "sentiment" => Sentiment, "nli" => Nli, "copy" => Copy });
named_enum!(ModelKind, "model", {
    "lstm" => Lstm,
    "lstmn" => Lstmn,
    "lstmn-stack" => LstmnStack,
    "seq2seq-shallow" => Seq2SeqShallow,
    "seq2seq-deep" => Seq2SeqDeep,
});
named_enum!(OptimizerKind, "optimizer", { "sgd" => Sgd, "adam" => Adam });

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub model: ModelKind,
    pub hidden: usize,
    pub embed: usize,
    /// Attention-space size; 0 means "same as hidden".
    pub attention: usize,
    pub layers: usize,
    pub skip: bool,
    /// Memory span; 0 means unbounded.
    pub capacity: usize,
    pub attention_bias: bool,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_threshold: f64,
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2: f64,
    pub dropout: f64,
    pub embed_policy: EmbeddingPolicy,
    pub embed_scale: f64,
    /// Classifier hidden width; 0 means "same as hidden".
    pub head_hidden: usize,
    pub tie_encoders: bool,
    pub seed: u64,
    pub precision: String,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub min_freq: usize,
    /// 0 means no limit.
    pub max_vocab: usize,
    pub classes: usize,
    pub bucketing: bool,
    pub eval_split: String,
    pub copy_vocab: usize,
    pub copy_min_len: usize,
    pub copy_max_len: usize,
    pub copy_eval_size: usize,
    pub steps_per_epoch: usize,
}

const KEYS: &[&str] = &[
    "task",
    "model",
    "hidden",
    "embed",
    "attention",
    "layers",
    "skip",
    "capacity",
    "attention_bias",
    "optimizer",
    "lr",
    "lr_decay",
    "decay_threshold",
    "max_grad_norm",
    "batch_size",
    "epochs",
    "l2",
    "dropout",
    "embed_policy",
    "embed_scale",
    "head_hidden",
    "tie_encoders",
    "seed",
    "precision",
    "train",
    "valid",
    "test",
    "pretrained",
    "min_freq",
    "max_vocab",
    "classes",
    "bucketing",
    "eval_split",
    "copy_vocab",
    "copy_min_len",
    "copy_max_len",
    "copy_eval_size",
    "steps_per_epoch",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(
            key,
            format!("expected a boolean, got `{value}`"),
        )),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Defaults for a task, mirroring the published training setups.
    pub fn defaults(task: Task) -> Self {
        let base = RunConfig {
            task,
            model: ModelKind::Lstmn,
            hidden: 300,
            embed: 150,
            attention: 0,
            layers: 1,
            skip: false,
            capacity: 0,
            attention_bias: true,
            optimizer: OptimizerKind::Sgd,
            lr: 0.65,
            lr_decay: 0.85,
            decay_threshold: 0.001,
            max_grad_norm: 5.0,
            batch_size: 40,
            epochs: 10,
            l2: 0.0,
            dropout: 0.0,
            embed_policy: EmbeddingPolicy::Normal,
            embed_scale: 0.35,
            head_hidden: 0,
            tie_encoders: false,
            seed: 1,
            precision: "f64".into(),
            train: None,
            valid: None,
            test: None,
            pretrained: None,
            min_freq: 1,
            max_vocab: 0,
            classes: 5,
            bucketing: false,
            eval_split: "valid".into(),
            copy_vocab: 8,
            copy_min_len: 5,
            copy_max_len: 10,
            copy_eval_size: 500,
            steps_per_epoch: 100,
        };
        match task {
            Task::Lm => base,
            Task::Sentiment => RunConfig {
                hidden: 168,
                embed: 300,
                optimizer: OptimizerKind::Adam,
                lr: 2e-3,
                batch_size: 5,
                l2: 1e-4,
                dropout: 0.5,
                embed_policy: EmbeddingPolicy::ScaleFirstEpoch(0.35),
                ..base
            },
            Task::Nli => RunConfig {
                hidden: 300,
                embed: 300,
                optimizer: OptimizerKind::Adam,
                lr: 1e-3,
                batch_size: 32,
                dropout: 0.2,
                embed_policy: EmbeddingPolicy::FreezePretrainedFirstEpoch,
                ..base
            },
            Task::Copy => RunConfig {
                model: ModelKind::Seq2SeqDeep,
                hidden: 32,
                embed: 64,
                attention: 64,
                optimizer: OptimizerKind::Adam,
                lr: 1e-3,
                batch_size: 16,
                epochs: 20,
                ..base
            },
        }
    }

    pub fn attention_size(&self) -> usize {
        if self.attention == 0 {
            self.hidden
        } else {
            self.attention
        }
    }

    pub fn head_width(&self) -> usize {
        if self.head_hidden == 0 {
            self.hidden
        } else {
            self.head_hidden
        }
    }

    pub fn capacity(&self) -> Option<usize> {
        (self.capacity > 0).then_some(self.capacity)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => self.task = value.parse()?,
            "model" => self.model = value.parse()?,
            "hidden" => self.hidden = parse(key, value)?,
            "embed" => self.embed = parse(key, value)?,
            "attention" => self.attention = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "skip" => self.skip = parse_bool(key, value)?,
            "capacity" => self.capacity = parse(key, value)?,
            "attention_bias" => self.attention_bias = parse_bool(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "lr" => self.lr = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "decay_threshold" => self.decay_threshold = parse(key, value)?,
            "max_grad_norm" => self.max_grad_norm = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "embed_policy" => self.embed_policy = value.parse()?,
            "embed_scale" => self.embed_scale = parse(key, value)?,
            "head_hidden" => self.head_hidden = parse(key, value)?,
            "tie_encoders" => self.tie_encoders = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "precision" => self.precision = value.to_string(),
            "train" => self.train = parse_path(value),
            "valid" => self.valid = parse_path(value),
            "test" => self.test = parse_path(value),
            "pretrained" => self.pretrained = parse_path(value),
            "min_freq" => self.min_freq = parse(key, value)?,
            "max_vocab" => self.max_vocab = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "bucketing" => self.bucketing = parse_bool(key, value)?,
            "eval_split" => self.eval_split = value.to_string(),
            "copy_vocab" => self.copy_vocab = parse(key, value)?,
            "copy_min_len" => self.copy_min_len = parse(key, value)?,
            "copy_max_len" => self.copy_max_len = parse(key, value)?,
            "copy_eval_size" => self.copy_eval_size = parse(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Builds a config from `key -> value` pairs on top of the defaults of
    /// the task they name (`lm` when absent).
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let task = match pairs.get("task") {
            Some(t) => t.parse()?,
            None => Task::Lm,
        };
        let mut cfg = RunConfig::defaults(task);
        for (k, v) in pairs {
            if k != "task" {
                cfg.set(k, v)?;
            }
        }
        if let EmbeddingPolicy::ScaleFirstEpoch(_) = cfg.embed_policy {
            cfg.embed_policy = EmbeddingPolicy::ScaleFirstEpoch(cfg.embed_scale);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_text(text: &str) -> Result<BTreeMap<String, String>> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(
                    format!("line {}", n + 1),
                    "expected `key = value`",
                ));
            };
            let key = k.trim();
            if !KEYS.contains(&key) {
                return Err(Error::config(key, "unknown key"));
            }
            pairs.insert(key.to_string(), v.trim().to_string());
        }
        Ok(pairs)
    }

    /// Reads `path` (if any) and applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                RunConfig::parse_text(&text)?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in overrides {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::config(k.as_str(), "unknown key"));
            }
            pairs.insert(k.clone(), v.clone());
        }
        RunConfig::from_pairs(&pairs)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("layers", self.layers),
            ("batch_size", self.batch_size),
            ("min_freq", self.min_freq),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::config("lr_decay", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.decay_threshold) {
            return Err(Error::config("decay_threshold", "must lie in [0, 1)"));
        }
        if self.max_grad_norm <= 0.0 {
            return Err(Error::config("max_grad_norm", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if self.l2 < 0.0 {
            return Err(Error::config("l2", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.embed_scale) {
            return Err(Error::config("embed_scale", "must lie in [0, 1]"));
        }
        if self.precision != "f64" {
            return Err(Error::config(
                "precision",
                "only f64 is supported by this build",
            ));
        }
        if self.eval_split != "valid" && self.eval_split != "test" {
            return Err(Error::config("eval_split", "must be `valid` or `test`"));
        }
        if self.model == ModelKind::Lstmn && self.layers != 1 {
            return Err(Error::config(
                "layers",
                "model `lstmn` has one layer; use `lstmn-stack`",
            ));
        }
        let seq2seq = matches!(
            self.model,
            ModelKind::Seq2SeqShallow | ModelKind::Seq2SeqDeep
        );
        match self.task {
            Task::Lm | Task::Sentiment if seq2seq => {
                return Err(Error::config(
                    "model",
                    format!("`{}` needs a two-sequence task", self.model),
                ))
            }
            Task::Copy if !seq2seq => {
                return Err(Error::config(
                    "model",
                    "the copy task needs a seq2seq model",
                ))
            }
            _ => {}
        }
        if seq2seq && self.layers != 1 {
            return Err(Error::config("layers", "seq2seq models use one layer"));
        }
        if self.task == Task::Sentiment && self.classes != 5 && self.classes != 2 {
            return Err(Error::config(
                "classes",
                "must be 5 (fine-grained) or 2 (binary)",
            ));
        }
        if self.task == Task::Copy {
            if self.copy_vocab < 2 {
                return Err(Error::config("copy_vocab", "must be at least 2"));
            }
            if self.copy_min_len < 1 || self.copy_min_len > self.copy_max_len {
                return Err(Error::config(
                    "copy_min_len",
                    "need 1 <= copy_min_len <= copy_max_len",
                ));
            }
            if self.copy_eval_size == 0 || self.steps_per_epoch == 0 {
                return Err(Error::config("steps_per_epoch", "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Every key with its effective value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string())
        };
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("task", self.task.to_string());
        put("model", self.model.to_string());
        put("hidden", self.hidden.to_string());
        put("embed", self.embed.to_string());
        put("attention", self.attention.to_string());
        put("layers", self.layers.to_string());
        put("skip", self.skip.to_string());
        put("capacity", self.capacity.to_string());
        put("attention_bias", self.attention_bias.to_string());
        put("optimizer", self.optimizer.to_string());
        put("lr", format!("{:?}", self.lr));
        put("lr_decay", format!("{:?}", self.lr_decay));
        put("decay_threshold", format!("{:?}", self.decay_threshold));
        put("max_grad_norm", format!("{:?}", self.max_grad_norm));
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put("l2", format!("{:?}", self.l2));
        put("dropout", format!("{:?}", self.dropout));
        put("embed_policy", self.embed_policy.name().to_string());
        put("embed_scale", format!("{:?}", self.embed_scale));
        put("head_hidden", self.head_hidden.to_string());
        put("tie_encoders", self.tie_encoders.to_string());
        put("seed", self.seed.to_string());
        put("precision", self.precision.clone());
        put("train", path(&self.train));
        put("valid", path(&self.valid));
        put("test", path(&self.test));
        put("pretrained", path(&self.pretrained));
        put("min_freq", self.min_freq.to_string());
        put("max_vocab", self.max_vocab.to_string());
        put("classes", self.classes.to_string());
        put("bucketing", self.bucketing.to_string());
        put("eval_split", self.eval_split.clone());
        put("copy_vocab", self.copy_vocab.to_string());
        put("copy_min_len", self.copy_min_len.to_string());
        put("copy_max_len", self.copy_max_len.to_string());
        put("copy_eval_size", self.copy_eval_size.to_string());
        put("steps_per_epoch", self.steps_per_epoch.to_string());
        s
    }
}
