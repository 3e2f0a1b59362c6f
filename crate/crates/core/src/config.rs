//! Flat `key=value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown or repeated keys are errors. Every key has a default, and
//! [`RunConfig::to_text`] writes all keys in sorted order, which is the
//! canonical form stored in checkpoints.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{HvedError, Result};
use crate::latent::KlReduction;
use crate::network::{FusionMode, NetworkConfig};
use crate::synth::PhantomConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub kl_reduction: KlReduction,
    pub lr: f64,
    pub max_iters: u64,
    pub lr_decay_every: u64,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub patience: u64,
    pub val_every: u64,
    pub min_delta: f64,
    pub val_samples: usize,
    pub infer_samples: usize,
    pub save_every: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub data_seed: u64,
    pub phantom: PhantomConfig,
    pub normalize_foreground: bool,
    pub l2_weight: f64,
    pub kl_weight: f64,
    pub dice_exclude_background: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            kl_reduction: KlReduction::Mean,
            lr: 1e-3,
            max_iters: 2000,
            lr_decay_every: 10_000,
            lr_decay_factor: 4.0,
            weight_decay: 1e-5,
            seed: 42,
            patience: 5,
            val_every: 200,
            min_delta: 0.2,
            val_samples: 3,
            infer_samples: 10,
            save_every: 500,
            train_count: 200,
            val_count: 40,
            test_count: 40,
            data_seed: 1000,
            phantom: PhantomConfig::default(),
            normalize_foreground: false,
            l2_weight: 0.1,
            kl_weight: 0.1,
            dice_exclude_background: false,
        }
    }
}

/// Every accepted key, sorted.
pub const KEYS: &[&str] = &[
    "channels",
    "data-seed",
    "dice-exclude-background",
    "fusion",
    "infer-samples",
    "kl-reduction",
    "kl-weight",
    "l2-weight",
    "latent-channels",
    "levels",
    "lr",
    "lr-decay-every",
    "lr-decay-factor",
    "max-iters",
    "min-delta",
    "noise-sigma",
    "normalize-foreground",
    "patch-size",
    "patience",
    "radius-max",
    "radius-min",
    "save-every",
    "seed",
    "test-count",
    "train-count",
    "val-count",
    "val-every",
    "val-samples",
    "volume-edge",
    "weight-decay",
];

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V>
where
    V::Err: Display,
{
    raw.parse::<V>().map_err(|e| HvedError::Config { key: key.into(), msg: format!("cannot parse `{raw}`: {e}") })
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',').map(|p| parse_value::<usize>(key, p.trim())).collect()
}

fn list_text(v: &[usize]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

fn finite(key: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(HvedError::Config { key: key.into(), msg: format!("must be finite, got {v}") })
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut seen: BTreeMap<String, String> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| HvedError::Config {
                key: line.to_string(),
                msg: format!("line {} is not key=value", n + 1),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(HvedError::Config { key: key.into(), msg: "unknown key".into() });
            }
            if seen.insert(key.to_string(), value.to_string()).is_some() {
                return Err(HvedError::Config { key: key.into(), msg: "duplicate key".into() });
            }
        }
        let mut cfg = RunConfig::default();
        for (key, raw) in &seen {
            cfg.set(key, raw)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one setting without cross-field validation.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let k = key;
        match key {
            "channels" => self.network.channels = parse_list(k, raw)?,
            "data-seed" => self.data_seed = parse_value(k, raw)?,
            "dice-exclude-background" => self.dice_exclude_background = parse_value(k, raw)?,
            "fusion" => self.network.fusion = parse_value::<FusionMode>(k, raw)?,
            "infer-samples" => self.infer_samples = parse_value(k, raw)?,
            "kl-reduction" => self.kl_reduction = parse_value::<KlReduction>(k, raw)?,
            "kl-weight" => self.kl_weight = finite(k, parse_value(k, raw)?)?,
            "l2-weight" => self.l2_weight = finite(k, parse_value(k, raw)?)?,
            "latent-channels" => self.network.latent_channels = parse_list(k, raw)?,
            "levels" => self.network.levels = parse_value(k, raw)?,
            "lr" => self.lr = finite(k, parse_value(k, raw)?)?,
            "lr-decay-every" => self.lr_decay_every = parse_value(k, raw)?,
            "lr-decay-factor" => self.lr_decay_factor = finite(k, parse_value(k, raw)?)?,
            "max-iters" => self.max_iters = parse_value(k, raw)?,
            "min-delta" => self.min_delta = finite(k, parse_value(k, raw)?)?,
            "noise-sigma" => self.phantom.noise_sigma = finite(k, parse_value(k, raw)?)?,
            "normalize-foreground" => self.normalize_foreground = parse_value(k, raw)?,
            "patch-size" => self.network.patch_size = parse_value(k, raw)?,
            "patience" => self.patience = parse_value(k, raw)?,
            "radius-max" => self.phantom.radius_max = finite(k, parse_value(k, raw)?)?,
            "radius-min" => self.phantom.radius_min = finite(k, parse_value(k, raw)?)?,
            "save-every" => self.save_every = parse_value(k, raw)?,
            "seed" => self.seed = parse_value(k, raw)?,
            "test-count" => self.test_count = parse_value(k, raw)?,
            "train-count" => self.train_count = parse_value(k, raw)?,
            "val-count" => self.val_count = parse_value(k, raw)?,
            "val-every" => self.val_every = parse_value(k, raw)?,
            "val-samples" => self.val_samples = parse_value(k, raw)?,
            "volume-edge" => self.phantom.volume_edge = parse_value(k, raw)?,
            "weight-decay" => self.weight_decay = finite(k, parse_value(k, raw)?)?,
            _ => return Err(HvedError::Config { key: key.into(), msg: "unknown key".into() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(HvedError::Config { key: key.into(), msg: msg.into() });
        self.network.validate()?;
        self.phantom.validate()?;
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("lr", "must be positive");
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor < 1.0 {
            return bad("lr-decay-factor", "must be at least 1");
        }
        if self.lr_decay_every == 0 {
            return bad("lr-decay-every", "must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight-decay", "must be non-negative");
        }
        if self.val_every == 0 {
            return bad("val-every", "must be positive");
        }
        if self.save_every == 0 {
            return bad("save-every", "must be positive");
        }
        if self.val_samples == 0 {
            return bad("val-samples", "must be positive");
        }
        if self.infer_samples == 0 {
            return bad("infer-samples", "must be positive");
        }
        if self.min_delta < 0.0 {
            return bad("min-delta", "must be non-negative");
        }
        if self.network.patch_size > self.phantom.volume_edge {
            return bad("patch-size", "must not exceed volume-edge");
        }
        Ok(())
    }

    /// All keys and their canonical values.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let f = |v: f64| format!("{v:?}");
        let n = &self.network;
        BTreeMap::from([
            ("channels", list_text(&n.channels)),
            ("data-seed", self.data_seed.to_string()),
            ("dice-exclude-background", self.dice_exclude_background.to_string()),
            ("fusion", n.fusion.to_string()),
            ("infer-samples", self.infer_samples.to_string()),
            ("kl-reduction", self.kl_reduction.to_string()),
            ("kl-weight", f(self.kl_weight)),
            ("l2-weight", f(self.l2_weight)),
            ("latent-channels", list_text(&n.latent_channels)),
            ("levels", n.levels.to_string()),
            ("lr", f(self.lr)),
            ("lr-decay-every", self.lr_decay_every.to_string()),
            ("lr-decay-factor", f(self.lr_decay_factor)),
            ("max-iters", self.max_iters.to_string()),
            ("min-delta", f(self.min_delta)),
            ("noise-sigma", f(self.phantom.noise_sigma)),
            ("normalize-foreground", self.normalize_foreground.to_string()),
            ("patch-size", n.patch_size.to_string()),
            ("patience", self.patience.to_string()),
            ("radius-max", f(self.phantom.radius_max)),
            ("radius-min", f(self.phantom.radius_min)),
            ("save-every", self.save_every.to_string()),
            ("seed", self.seed.to_string()),
            ("test-count", self.test_count.to_string()),
            ("train-count", self.train_count.to_string()),
            ("val-count", self.val_count.to_string()),
            ("val-every", self.val_every.to_string()),
            ("val-samples", self.val_samples.to_string()),
            ("volume-edge", self.phantom.volume_edge.to_string()),
            ("weight-decay", f(self.weight_decay)),
        ])
    }

    /// Canonical serialisation: every key, sorted, one per line.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HvedError::io(path, e))?;
        Self::parse(&text)
    }
}
