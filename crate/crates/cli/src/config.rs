//! `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be one
//! of [`KEYS`]; command-line flags are applied afterwards through
//! [`RunConfig::set`], so they take precedence.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gifnet::trainer::TrainConfig;
use gifnet::{ArchConfig, Error, Result};

pub const KEYS: &[&str] = &[
    "base_channels",
    "enc_layers",
    "branch_layers",
    "embed_dim",
    "heads",
    "window",
    "mlp_ratio",
    "steps",
    "batch",
    "crop",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "alternation",
    "checkpoint_every",
    "grad_clip",
    "tasks",
    "use_rec",
    "use_cfgm",
    "saliency",
    "temperature",
    "data",
    "out",
    "log",
    "checkpoint_dir",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (a, t) = (&mut self.arch, &mut self.train);
        match key {
            "base_channels" => a.base_channels = value(key, v)?,
            "enc_layers" => a.enc_layers = value(key, v)?,
            "branch_layers" => a.branch_layers = value(key, v)?,
            "embed_dim" => a.embed_dim = value(key, v)?,
            "heads" => a.heads = value(key, v)?,
            "window" => a.window = value(key, v)?,
            "mlp_ratio" => a.mlp_ratio = value(key, v)?,
            "steps" => t.steps = value(key, v)?,
            "batch" => t.batch = value(key, v)?,
            "crop" => t.crop = value(key, v)?,
            "lr" => t.lr = value(key, v)?,
            "beta1" => t.beta1 = value(key, v)?,
            "beta2" => t.beta2 = value(key, v)?,
            "eps" => t.eps = value(key, v)?,
            "seed" => t.seed = value(key, v)?,
            "alternation" => t.alternation = value(key, v)?,
            "checkpoint_every" => t.checkpoint_every = value(key, v)?,
            "grad_clip" => {
                t.grad_clip = if v == "none" {
                    None
                } else {
                    Some(value(key, v)?)
                }
            }
            "tasks" => t.tasks = value(key, v)?,
            "use_rec" => t.use_rec = flag(key, v)?,
            "use_cfgm" => t.use_cfgm = flag(key, v)?,
            "saliency" => t.saliency = value(key, v)?,
            "temperature" => t.temperature = value(key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            "log" => self.log = Some(PathBuf::from(v)),
            "checkpoint_dir" => self.checkpoint_dir = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate(&self.arch)
    }
}
