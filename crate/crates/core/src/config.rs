//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are applied in
//! file order, so later entries (and CLI overrides appended after them) win.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{io_err, Error, Result};
use crate::network::{Mode, NetConfig};
use crate::trainer::{NoiseSampling, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    pub entries: Vec<(String, String)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                what: "config",
                detail: format!("line {}: expected key=value, got `{line}`", lineno + 1),
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Invalid(format!("invalid value `{value}` for `{key}`"))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Invalid(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

pub const NET_KEYS: &[&str] = &[
    "mode",
    "tau",
    "kernel_h",
    "kernel_w",
    "kernel_t",
    "width_scale",
    "levels",
    "max_disp",
    "blind",
    "fixed_grid",
    "dynamic_weights",
    "groups",
];

pub const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "patch",
    "lr_init",
    "lr_decay",
    "lr_floor",
    "max_iters",
    "seed",
    "eta",
    "gamma_decay",
    "anneal",
    "noise",
    "checkpoint_every",
    "log_every",
];

impl NetConfig {
    /// Sets one key; returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "mode" => self.mode = Mode::from_str(value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "kernel_h" => self.kernel_h = parse_value(key, value)?,
            "kernel_w" => self.kernel_w = parse_value(key, value)?,
            "kernel_t" => self.kernel_t = parse_value(key, value)?,
            "width_scale" => self.width_scale = parse_value(key, value)?,
            "levels" => self.levels = parse_value(key, value)?,
            "max_disp" => self.max_disp = parse_value(key, value)?,
            "blind" => self.blind = parse_bool(key, value)?,
            "fixed_grid" => self.fixed_grid = parse_bool(key, value)?,
            "dynamic_weights" => self.dynamic_weights = parse_bool(key, value)?,
            "groups" => self.groups = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.push("mode", self.mode);
        kv.push("tau", self.tau);
        kv.push("kernel_h", self.kernel_h);
        kv.push("kernel_w", self.kernel_w);
        kv.push("kernel_t", self.kernel_t);
        kv.push("width_scale", format!("{:?}", self.width_scale));
        kv.push("levels", self.levels);
        kv.push("max_disp", format!("{:?}", self.max_disp));
        kv.push("blind", self.blind);
        kv.push("fixed_grid", self.fixed_grid);
        kv.push("dynamic_weights", self.dynamic_weights);
        kv.push("groups", self.groups);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in &kv.entries {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "patch" => self.patch = parse_value(key, value)?,
            "lr_init" => self.lr_init = parse_value(key, value)?,
            "lr_decay" => self.lr_decay = parse_value(key, value)?,
            "lr_floor" => self.lr_floor = parse_value(key, value)?,
            "max_iters" => self.max_iters = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "eta" => self.anneal.eta = parse_value(key, value)?,
            "gamma_decay" => self.anneal.gamma_decay = parse_value(key, value)?,
            "anneal" => self.anneal.enabled = parse_bool(key, value)?,
            "noise" => self.noise = NoiseSampling::from_str(value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "log_every" => self.log_every = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.push("batch_size", self.batch_size);
        kv.push("patch", self.patch);
        kv.push("lr_init", format!("{:?}", self.lr_init));
        kv.push("lr_decay", format!("{:?}", self.lr_decay));
        kv.push("lr_floor", format!("{:?}", self.lr_floor));
        kv.push("max_iters", self.max_iters);
        kv.push("seed", self.seed);
        kv.push("eta", format!("{:?}", self.anneal.eta));
        kv.push("gamma_decay", format!("{:?}", self.anneal.gamma_decay));
        kv.push("anneal", self.anneal.enabled);
        kv.push("noise", &self.noise);
        kv.push("checkpoint_every", self.checkpoint_every);
        kv.push("log_every", self.log_every);
        kv
    }
}

/// Applies every entry to the network or training config.
pub fn apply(kv: &KvConfig, net: &mut NetConfig, train: &mut TrainConfig) -> Result<()> {
    for (k, v) in &kv.entries {
        if !net.set(k, v)? && !train.set(k, v)? {
            return Err(Error::Invalid(format!("unknown config key `{k}`")));
        }
    }
    Ok(())
}
