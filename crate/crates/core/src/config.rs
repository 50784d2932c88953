//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. [`RunConfig::to_text`] writes every key in a fixed order, so a
//! written config parses back to an identical value.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::beta::BetaConfig;
use crate::data::{NegativeSampling, SyntheticConfig};
use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::policy::Variant;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    /// Synthetic parameters are kept even when `data` points at a CSV so the
    /// text form round-trips.
    pub synthetic: SyntheticConfig,
    pub history_len: usize,
    pub dim: usize,
    pub sft_epochs: usize,
    pub po_epochs: usize,
    pub k: usize,
    pub objective: Objective,
    pub variant: Variant,
    pub beta: BetaConfig,
    pub sft_lr: f64,
    pub po_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub fixed_negatives: bool,
    pub negative_sampling: NegativeSampling,
    pub sb_threshold: f64,
    /// Number of equal intervals for S/B checkpoints over the PO stage.
    pub sb_intervals: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synthetic = SyntheticConfig::default();
        Self {
            data: DataSource::Synthetic(synthetic.clone()),
            synthetic,
            history_len: 10,
            dim: 8,
            sft_epochs: 5,
            po_epochs: 3,
            k: 15,
            objective: Objective::Dmpo,
            variant: Variant::Naive,
            beta: BetaConfig::default(),
            sft_lr: 5e-3,
            po_lr: 1e-3,
            batch_size: 64,
            seed: 42,
            fixed_negatives: false,
            negative_sampling: NegativeSampling::Uniform,
            sb_threshold: 0.0,
            sb_intervals: 5,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "data",
        "synthetic.users",
        "synthetic.items",
        "synthetic.latent_dim",
        "synthetic.interactions_per_user",
        "synthetic.noise",
        "synthetic.temperature",
        "history_len",
        "dim",
        "sft_epochs",
        "po_epochs",
        "k",
        "objective",
        "variant",
        "beta0",
        "alpha",
        "gamma",
        "sft_lr",
        "po_lr",
        "batch_size",
        "seed",
        "fixed_negatives",
        "negative_sampling",
        "sb_threshold",
        "sb_intervals",
        "output_dir",
    ];

    /// Set one key. `data = synthetic` selects the generator.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let syn = &mut self.synthetic;
        match key.trim() {
            "data" => {
                self.data = if v == "synthetic" {
                    DataSource::Synthetic(syn.clone())
                } else {
                    DataSource::Csv(PathBuf::from(v))
                };
            }
            "synthetic.users" => syn.users = parse_num(key, v)?,
            "synthetic.items" => syn.items = parse_num(key, v)?,
            "synthetic.latent_dim" => syn.dim = parse_num(key, v)?,
            "synthetic.interactions_per_user" => syn.interactions_per_user = parse_num(key, v)?,
            "synthetic.noise" => syn.noise = parse_num(key, v)?,
            "synthetic.temperature" => syn.temperature = parse_num(key, v)?,
            "history_len" => self.history_len = parse_num(key, v)?,
            "dim" => self.dim = parse_num(key, v)?,
            "sft_epochs" => self.sft_epochs = parse_num(key, v)?,
            "po_epochs" => self.po_epochs = parse_num(key, v)?,
            "k" => self.k = parse_num(key, v)?,
            "objective" => self.objective = v.parse()?,
            "variant" => self.variant = Variant::parse(v)?,
            "beta0" => self.beta.beta0 = parse_num(key, v)?,
            "alpha" => self.beta.alpha = parse_num(key, v)?,
            "gamma" => self.beta.gamma = parse_num(key, v)?,
            "sft_lr" => self.sft_lr = parse_num(key, v)?,
            "po_lr" => self.po_lr = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "fixed_negatives" => self.fixed_negatives = parse_bool(key, v)?,
            "negative_sampling" => self.negative_sampling = NegativeSampling::parse(v)?,
            "sb_threshold" => self.sb_threshold = parse_num(key, v)?,
            "sb_intervals" => self.sb_intervals = parse_num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            other => return Err(Error::invalid(format!("unknown config key `{other}`"))),
        }
        if let DataSource::Synthetic(s) = &mut self.data {
            *s = self.synthetic.clone();
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply the assignments in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n as u64 + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k, v).map_err(|e| match e {
                Error::InvalidParameter(m) => Error::Parse {
                    line: n as u64 + 1,
                    message: m,
                },
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let data = match &self.data {
            DataSource::Synthetic(_) => "synthetic".to_string(),
            DataSource::Csv(p) => p.display().to_string(),
        };
        let syn = &self.synthetic;
        let pairs: Vec<(&str, String)> = vec![
            ("data", data),
            ("synthetic.users", syn.users.to_string()),
            ("synthetic.items", syn.items.to_string()),
            ("synthetic.latent_dim", syn.dim.to_string()),
            ("synthetic.interactions_per_user", syn.interactions_per_user.to_string()),
            ("synthetic.noise", syn.noise.to_string()),
            ("synthetic.temperature", syn.temperature.to_string()),
            ("history_len", self.history_len.to_string()),
            ("dim", self.dim.to_string()),
            ("sft_epochs", self.sft_epochs.to_string()),
            ("po_epochs", self.po_epochs.to_string()),
            ("k", self.k.to_string()),
            ("objective", self.objective.name().to_string()),
            ("variant", self.variant.name()),
            ("beta0", self.beta.beta0.to_string()),
            ("alpha", self.beta.alpha.to_string()),
            ("gamma", self.beta.gamma.to_string()),
            ("sft_lr", self.sft_lr.to_string()),
            ("po_lr", self.po_lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("fixed_negatives", self.fixed_negatives.to_string()),
            ("negative_sampling", self.negative_sampling.name().to_string()),
            ("sb_threshold", self.sb_threshold.to_string()),
            ("sb_intervals", self.sb_intervals.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ];
        debug_assert_eq!(pairs.len(), Self::KEYS.len());
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.beta.validate()?;
        let positive = [
            ("history_len", self.history_len),
            ("dim", self.dim),
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("sb_intervals", self.sb_intervals),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("`{name}` must be positive")));
            }
        }
        for (name, v) in [("sft_lr", self.sft_lr), ("po_lr", self.po_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("`{name}` must be > 0")));
            }
        }
        if !self.sb_threshold.is_finite() {
            return Err(Error::invalid("`sb_threshold` must be finite"));
        }
        if let Variant::TopK(top) = self.variant {
            if top == 0 || top > self.k {
                return Err(Error::invalid(format!(
                    "top-K needs 1 <= K <= k, got K={top}, k={}",
                    self.k
                )));
            }
        }
        if self.objective == Objective::Dpo && self.k != 1 {
            return Err(Error::invalid("objective `dpo` requires k = 1"));
        }
        Ok(())
    }
}
