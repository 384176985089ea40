//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be known; the
//! same keys can be overridden from the command line.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Splits config text into `(line, key, value)` triples.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format(origin, format!("line {}: expected key = value", n + 1))
        })?;
        out.push((n + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid flag {value:?} for {key}"))),
    }
}

impl ModelConfig {
    /// Sets one field by key; `Ok(false)` when the key is not a model key.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "dim_in" => self.dim_in = parse(key, value)?,
            "dim_view" => self.dim_view = parse(key, value)?,
            "num_blocks" => self.num_blocks = parse(key, value)?,
            "num_heads" => self.num_heads = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "use_position_encoding" => self.use_position_encoding = parse_flag(key, value)?,
            "use_class_token" => self.use_class_token = parse_flag(key, value)?,
            "max_views" => self.max_views = parse(key, value)?,
            "decoder_depth" => self.decoder_depth = parse(key, value)?,
            "decoder_hidden" => self.decoder_hidden = parse(key, value)?,
            "norm_eps" => self.norm_eps = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dim_in", self.dim_in.to_string()),
            ("dim_view", self.dim_view.to_string()),
            ("num_blocks", self.num_blocks.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("num_classes", self.num_classes.to_string()),
            (
                "use_position_encoding",
                self.use_position_encoding.to_string(),
            ),
            ("use_class_token", self.use_class_token.to_string()),
            ("max_views", self.max_views.to_string()),
            ("decoder_depth", self.decoder_depth.to_string()),
            ("decoder_hidden", self.decoder_hidden.to_string()),
            ("norm_eps", self.norm_eps.to_string()),
        ]
    }
}

impl TrainConfig {
    /// Sets one field by key; `Ok(false)` when the key is not a training key.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "peak_lr" => self.peak_lr = parse(key, value)?,
            "restart_interval" => self.restart_interval = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "peak_decay" => self.peak_decay = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "views" => {
                self.views_per_shape = match value {
                    "all" => None,
                    _ => Some(parse(key, value)?),
                }
            }
            "freeze_adapter" => self.freeze_adapter = parse_flag(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("restart_interval", self.restart_interval.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("peak_decay", self.peak_decay.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            (
                "views",
                self.views_per_shape
                    .map_or_else(|| "all".to_string(), |m| m.to_string()),
            ),
            ("freeze_adapter", self.freeze_adapter.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
        ]
    }
}

/// Model and training settings for one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    explicit: BTreeSet<String>,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !(self.model.set_key(key, value)? || self.train.set_key(key, value)?) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Whether `key` was set from a file or override rather than defaulted.
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Parses config text; every failure is a [`Error::Config`] naming the
    /// file and line.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let pairs = parse_pairs(text, origin).map_err(|e| Error::Config(e.to_string()))?;
        for (line, k, v) in pairs {
            cfg.set(&k, &v).map_err(|e| {
                let msg = match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                };
                Error::Config(format!("{}: line {line}: {msg}", origin.display()))
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Effective configuration as `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self
            .model
            .to_pairs()
            .into_iter()
            .chain(self.train.to_pairs())
        {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}
