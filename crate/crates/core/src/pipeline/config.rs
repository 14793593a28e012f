use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention_core::TransformerConfig;
use crate::error::{FieldDiff, Result, TgqnError};
use crate::objective_metrics::SigmaSchedule;
use crate::repr_encoder::EncoderConfig;
use crate::seq_decoder::DecoderConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tgqn,
    Gqn,
    Seqgqn,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Tgqn => "tgqn",
            Variant::Gqn => "gqn",
            Variant::Seqgqn => "seqgqn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = TgqnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tgqn" => Ok(Variant::Tgqn),
            "gqn" => Ok(Variant::Gqn),
            "seqgqn" => Ok(Variant::Seqgqn),
            other => Err(TgqnError::config(format!(
                "unknown variant {other:?} (expected tgqn, gqn or seqgqn)"
            ))),
        }
    }
}

/// Everything that defines a run. Loaded from TOML; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: Variant,
    /// Attention mask while training.
    pub masked: bool,
    /// Attention mask while evaluating.
    pub eval_masked: bool,
    /// Context views per example.
    pub num_views: usize,
    pub max_views: usize,
    pub cores: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_multiplier: usize,
    pub z_channels: usize,
    pub core_channels: usize,
    pub canvas_channels: usize,
    pub down_channels: usize,
    pub kernel: usize,
    pub image_size: usize,
    /// One decoder reused at every rendering step. Only `true` is implemented.
    pub share_decoder: bool,
    pub beta: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub sigma_anneal_fraction: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Seed for initialisation, batch sampling and latent noise.
    pub seed: u64,
    pub eval_seed: u64,
    /// Sort training contexts by distance to the query.
    pub order_train: bool,
    /// Sort evaluation contexts; off means random order.
    pub order_eval: bool,
    pub holdout_fraction: f64,
    /// Scenes scored by the periodic held-out evaluation (0 disables it).
    pub eval_scenes: usize,
    pub eval_repeats: usize,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub train_dataset: PathBuf,
    pub eval_dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Tgqn,
            masked: true,
            eval_masked: true,
            num_views: 3,
            max_views: 8,
            cores: 4,
            d: 256,
            layers: 2,
            heads: 4,
            ff_multiplier: 4,
            z_channels: 3,
            core_channels: 64,
            canvas_channels: 64,
            down_channels: 32,
            kernel: 3,
            image_size: 32,
            share_decoder: true,
            beta: 250.0,
            lr_start: 5e-4,
            lr_end: 5e-5,
            sigma_start: 2.0,
            sigma_end: 0.7,
            sigma_anneal_fraction: 0.8,
            batch_size: 16,
            max_steps: 20_000,
            seed: 0,
            eval_seed: 1,
            order_train: true,
            order_eval: false,
            holdout_fraction: 0.1,
            eval_scenes: 8,
            eval_repeats: 5,
            eval_every: 1000,
            checkpoint_every: 5000,
            log_every: 10,
            train_dataset: PathBuf::from("data/train.tgqn"),
            eval_dataset: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Fields that determine parameter shapes and the forward computation; a
/// checkpoint only loads under a config that agrees on all of them.
pub const ARCHITECTURE_FIELDS: &[&str] = &[
    "variant",
    "num_views",
    "cores",
    "d",
    "layers",
    "heads",
    "ff_multiplier",
    "z_channels",
    "core_channels",
    "canvas_channels",
    "down_channels",
    "kernel",
    "image_size",
    "share_decoder",
];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TgqnError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TgqnError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            TgqnError::Config(msg) => TgqnError::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TgqnError::config(m));
        if self.num_views == 0 || self.num_views > self.max_views {
            return err(format!(
                "num_views {} must lie in 1..={}",
                self.num_views, self.max_views
            ));
        }
        if !self.share_decoder {
            return err(
                "per-step decoder parameters are not implemented; set share_decoder = true".into(),
            );
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.beta >= 0.0) || !(self.lr_start > 0.0) || !(self.lr_end > 0.0) {
            return err("beta must be non-negative and learning rates positive".into());
        }
        if !(self.sigma_start > 0.0)
            || !(self.sigma_end > 0.0)
            || !(0.0..=1.0).contains(&self.sigma_anneal_fraction)
        {
            return err("sigma schedule needs positive endpoints and a fraction in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return err(format!(
                "holdout_fraction {} must lie in [0, 1)",
                self.holdout_fraction
            ));
        }
        if self.eval_repeats == 0 {
            return err("eval_repeats must be positive".into());
        }
        self.encoder().validate()?;
        self.decoder().validate()?;
        if self.variant == Variant::Tgqn {
            self.transformer().validate()?;
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            d: self.d,
        }
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            ff: self.ff_multiplier * self.d,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            image_size: self.image_size,
            d: self.d,
            cores: self.cores,
            z_channels: self.z_channels,
            core_channels: self.core_channels,
            canvas_channels: self.canvas_channels,
            down_channels: self.down_channels,
            kernel: self.kernel,
        }
    }

    pub fn sigma(&self) -> SigmaSchedule {
        SigmaSchedule {
            start: self.sigma_start,
            end: self.sigma_end,
            fraction: self.sigma_anneal_fraction,
            max_steps: self.max_steps,
        }
    }

    /// Linear anneal from `lr_start` at step 0 to `lr_end` at `max_steps`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let t = if self.max_steps == 0 {
            1.0
        } else {
            (step as f64 / self.max_steps as f64).min(1.0)
        };
        self.lr_start + (self.lr_end - self.lr_start) * t
    }

    /// KL weight actually used by the variant's objective.
    pub fn effective_beta(&self) -> f64 {
        match self.variant {
            Variant::Gqn => 1.0,
            _ => self.beta,
        }
    }

    /// Differences in [`ARCHITECTURE_FIELDS`] between `self` (stored) and `active`.
    pub fn architecture_diff(&self, active: &RunConfig) -> Vec<FieldDiff> {
        let a = toml::Table::try_from(self).expect("config to table");
        let b = toml::Table::try_from(active).expect("config to table");
        ARCHITECTURE_FIELDS
            .iter()
            .filter(|f| a.get(**f) != b.get(**f))
            .map(|f| FieldDiff {
                field: f.to_string(),
                stored: a.get(*f).map(|v| v.to_string()).unwrap_or_default(),
                active: b.get(*f).map(|v| v.to_string()).unwrap_or_default(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(matches!(
            RunConfig::from_toml("bogus = 1"),
            Err(TgqnError::Config(_))
        ));
        let partial = RunConfig::from_toml("variant = \"gqn\"\nbeta = 1.0").unwrap();
        assert_eq!(partial.variant, Variant::Gqn);
        assert_eq!(partial.d, 256);
    }

    #[test]
    fn architecture_diff_lists_fields() {
        let a = RunConfig::default();
        let b = RunConfig {
            image_size: 64,
            beta: 1.0,
            ..a.clone()
        };
        let diff = a.architecture_diff(&b);
        assert_eq!(diff.len(), 1);
        assert_eq!(diff[0].field, "image_size");
        assert_eq!(
            (diff[0].stored.as_str(), diff[0].active.as_str()),
            ("32", "64")
        );
    }

    #[test]
    fn lr_is_linear() {
        let cfg = RunConfig {
            max_steps: 100,
            ..RunConfig::default()
        };
        assert_eq!(cfg.learning_rate(0), 5e-4);
        assert!((cfg.learning_rate(100) - 5e-5).abs() < 1e-18);
        assert!((cfg.learning_rate(50) - 2.75e-4).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig {
            heads: 3,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            heads: 3,
            variant: Variant::Gqn,
            ..RunConfig::default()
        }
        .validate()
        .is_ok());
        assert!(RunConfig {
            num_views: 9,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            share_decoder: false,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
    }
}
