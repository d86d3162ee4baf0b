//! Flat `key = value` training configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Unknown
//! keys are rejected so typos do not silently fall back to defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adversarial::{GanLabels, DEFAULT_PATCH_SIZE};
use crate::error::{Error, Result};
use crate::histogram::{DEFAULT_ALPHA, DEFAULT_EROSION_RADIUS};
use crate::nets::EnhancerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReconLoss {
    #[default]
    L1,
    Mse,
}

impl ReconLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            ReconLoss::L1 => "l1",
            ReconLoss::Mse => "mse",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub data_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,

    pub provider: String,
    pub prior_dir: Option<PathBuf>,
    pub provider_seed: u64,
    pub semantic_widths: [usize; 3],

    pub widths: [usize; 3],
    pub disc_width: usize,
    pub patch_size: usize,

    pub use_se: bool,
    pub use_sch: bool,
    pub use_sa: bool,
    pub lambda_sch: f64,
    pub lambda_sa: f64,
    pub alpha: f64,
    pub erosion_radius: usize,
    pub recon_loss: ReconLoss,
    pub gan_labels: GanLabels,

    pub optimizer: String,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub master_seed: u64,

    pub val_every: usize,
    /// Validation pairs used per evaluation; 0 means the whole split.
    pub val_limit: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = EnhancerConfig::default();
        Self {
            data_root: None,
            out_dir: None,
            resume: None,
            provider: "oracle".into(),
            prior_dir: None,
            provider_seed: 0,
            semantic_widths: net.semantic_widths,
            widths: net.widths,
            disc_width: 16,
            patch_size: DEFAULT_PATCH_SIZE,
            use_se: true,
            use_sch: true,
            use_sa: true,
            lambda_sch: 2e-6,
            lambda_sa: 0.01,
            alpha: DEFAULT_ALPHA,
            erosion_radius: DEFAULT_EROSION_RADIUS,
            recon_loss: ReconLoss::L1,
            gan_labels: GanLabels::Standard,
            optimizer: "adam".into(),
            lr_g: 2e-4,
            lr_d: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            steps: 2000,
            master_seed: 0,
            val_every: 250,
            val_limit: 0,
            checkpoint_every: 500,
        }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "data_root",
    "out_dir",
    "resume",
    "provider",
    "prior_dir",
    "provider_seed",
    "semantic_widths",
    "widths",
    "disc_width",
    "patch_size",
    "use_se",
    "use_sch",
    "use_sa",
    "lambda_sch",
    "lambda_sa",
    "alpha",
    "erosion_radius",
    "recon_loss",
    "gan_labels",
    "optimizer",
    "lr_g",
    "lr_d",
    "beta1",
    "beta2",
    "batch_size",
    "steps",
    "master_seed",
    "val_every",
    "val_limit",
    "checkpoint_every",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v.split(',').map(|p| num(key, p.trim())).collect::<Result<_>>()?;
    parts.try_into().map_err(|_| Error::Config(format!("{key}: expected three comma-separated integers")))
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data_root" => self.data_root = path(v),
            "out_dir" => self.out_dir = path(v),
            "resume" => self.resume = path(v),
            "provider" => self.provider = v.to_string(),
            "prior_dir" => self.prior_dir = path(v),
            "provider_seed" => self.provider_seed = num(key, v)?,
            "semantic_widths" => self.semantic_widths = triple(key, v)?,
            "widths" => self.widths = triple(key, v)?,
            "disc_width" => self.disc_width = num(key, v)?,
            "patch_size" => self.patch_size = num(key, v)?,
            "use_se" => self.use_se = boolean(key, v)?,
            "use_sch" => self.use_sch = boolean(key, v)?,
            "use_sa" => self.use_sa = boolean(key, v)?,
            "lambda_sch" => self.lambda_sch = num(key, v)?,
            "lambda_sa" => self.lambda_sa = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "erosion_radius" => self.erosion_radius = num(key, v)?,
            "recon_loss" => {
                self.recon_loss = match v {
                    "l1" => ReconLoss::L1,
                    "mse" => ReconLoss::Mse,
                    _ => return Err(Error::Config(format!("recon_loss: expected l1 or mse, got {v:?}"))),
                }
            }
            "gan_labels" => self.gan_labels = GanLabels::parse(v)?,
            "optimizer" => self.optimizer = v.to_string(),
            "lr_g" => self.lr_g = num(key, v)?,
            "lr_d" => self.lr_d = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "master_seed" => self.master_seed = num(key, v)?,
            "val_every" => self.val_every = num(key, v)?,
            "val_limit" => self.val_limit = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (k, v) in [("lambda_sch", self.lambda_sch), ("lambda_sa", self.lambda_sa)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be finite and >= 0, got {v}"));
            }
        }
        for (k, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("alpha", self.alpha)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must be in [0, 1), got {v}"));
            }
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be >= 1".into());
        }
        if self.widths.contains(&0) || self.semantic_widths.contains(&0) || self.disc_width == 0 {
            return bad("widths must be positive".into());
        }
        if self.patch_size < 8 {
            return bad(format!("patch_size must be >= 8, got {}", self.patch_size));
        }
        if self.optimizer != "adam" {
            return bad(format!("optimizer {:?} is not supported (adam)", self.optimizer));
        }
        if !matches!(self.provider.as_str(), "oracle" | "file") {
            return bad(format!("unknown semantic provider {:?} (expected oracle or file)", self.provider));
        }
        Ok(())
    }

    pub fn enhancer(&self) -> EnhancerConfig {
        EnhancerConfig { widths: self.widths, semantic_widths: self.semantic_widths, use_se: self.use_se }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let t = |v: [usize; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        Some(match key {
            "data_root" => p(&self.data_root),
            "out_dir" => p(&self.out_dir),
            "resume" => p(&self.resume),
            "provider" => self.provider.clone(),
            "prior_dir" => p(&self.prior_dir),
            "provider_seed" => self.provider_seed.to_string(),
            "semantic_widths" => t(self.semantic_widths),
            "widths" => t(self.widths),
            "disc_width" => self.disc_width.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "use_se" => self.use_se.to_string(),
            "use_sch" => self.use_sch.to_string(),
            "use_sa" => self.use_sa.to_string(),
            "lambda_sch" => self.lambda_sch.to_string(),
            "lambda_sa" => self.lambda_sa.to_string(),
            "alpha" => self.alpha.to_string(),
            "erosion_radius" => self.erosion_radius.to_string(),
            "recon_loss" => self.recon_loss.as_str().into(),
            "gan_labels" => self.gan_labels.as_str().into(),
            "optimizer" => self.optimizer.clone(),
            "lr_g" => self.lr_g.to_string(),
            "lr_d" => self.lr_d.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "master_seed" => self.master_seed.to_string(),
            "val_every" => self.val_every.to_string(),
            "val_limit" => self.val_limit.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => return None,
        })
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "{k} = {}", self.get(k).expect("known key")).expect("string write");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = TrainConfig { lambda_sch: 0.125, widths: [4, 8, 12], use_sa: false, gan_labels: GanLabels::Paper, ..Default::default() };
        cfg.out_dir = Some("/tmp/x".into());
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = TrainConfig::parse("# header\nsteps = 7 # trailing\n\nuse_se=false\n").unwrap();
        assert_eq!((cfg.steps, cfg.use_se), (7, false));
        assert!(matches!(TrainConfig::parse("stepz = 3"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("lambda_sch = -1"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("steps = 0"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("provider = hrnet"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("widths = 1,2"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("no equals sign"), Err(Error::Config(_))));
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = TrainConfig::default();
        for k in KEYS {
            let mut c = cfg.clone();
            c.set(k, &cfg.get(k).unwrap()).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }
}
