//! Model variants and run configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    Mf,
    Vmf,
    Mfd,
    Vmfd,
    Fm,
    Rfm,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::Mf, Variant::Vmf, Variant::Mfd, Variant::Vmfd, Variant::Fm, Variant::Rfm];

    /// Has the encoder and KL term.
    pub fn variational(self) -> bool {
        matches!(self, Variant::Vmf | Variant::Vmfd | Variant::Rfm)
    }

    /// Adds the dispersive regulariser.
    pub fn dispersive(self) -> bool {
        matches!(self, Variant::Mfd | Variant::Vmfd)
    }

    /// Trains only on instantaneous velocities (`r = t`).
    pub fn instantaneous(self) -> bool {
        matches!(self, Variant::Fm | Variant::Rfm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mf => "MF",
            Variant::Vmf => "VMF",
            Variant::Mfd => "MFD",
            Variant::Vmfd => "VMFD",
            Variant::Fm => "FM",
            Variant::Rfm => "RFM",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeSampling {
    #[default]
    Uniform,
    /// Sigmoid of a normal draw.
    LogNormal { mean: f32, std: f32 },
}

impl TimeSampling {
    pub fn lognormal() -> Self {
        TimeSampling::LogNormal { mean: -0.4, std: 1.0 }
    }
}

pub const DEFAULT_ALPHA: f32 = 1e-4;
pub const DEFAULT_BETA: f32 = 0.5;
pub const DEFAULT_P_EQUAL: f64 = 0.5;

/// Fully resolved settings of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub alpha: f32,
    pub beta: f32,
    pub tau: f32,
    pub p_equal: f64,
    pub time_sampling: TimeSampling,
    pub adaptive_l2: bool,
    /// Exponent and offset of the adaptive weight `1 / (e + c)^p`.
    pub adaptive_power: f32,
    pub adaptive_offset: f32,
    pub cond_dropout: f64,
    /// Chance per batch of training on the inference layout with a prior latent.
    pub inference_layout_prob: f64,
    pub split_decay: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        TrainConfig {
            variant,
            alpha: if variant.variational() { DEFAULT_ALPHA } else { 0.0 },
            beta: if variant.dispersive() { DEFAULT_BETA } else { 0.0 },
            tau: 1.0,
            p_equal: if variant.instantaneous() { 1.0 } else { DEFAULT_P_EQUAL },
            time_sampling: TimeSampling::Uniform,
            adaptive_l2: false,
            adaptive_power: 1.0,
            adaptive_offset: 1e-3,
            cond_dropout: 0.1,
            inference_layout_prob: 0.1,
            split_decay: 0.9,
            adam: AdamConfig::default(),
            batch_size: 64,
            seed: 0,
        }
    }

    /// Reject settings that contradict the variant or are out of range.
    pub fn validate(&self) -> Result<()> {
        let v = self.variant;
        if !v.variational() && self.alpha != 0.0 {
            return Err(Error::Config(format!("{v} has no encoder, so alpha must be 0 (got {})", self.alpha)));
        }
        if !v.dispersive() && self.beta != 0.0 {
            return Err(Error::Config(format!("{v} has no dispersive term, so beta must be 0 (got {})", self.beta)));
        }
        if v.instantaneous() && self.p_equal != 1.0 {
            return Err(Error::Config(format!("{v} requires p_equal = 1 (got {})", self.p_equal)));
        }
        for (name, p) in [
            ("p_equal", self.p_equal),
            ("cond_dropout", self.cond_dropout),
            ("inference_layout_prob", self.inference_layout_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.split_decay > 0.0 && self.split_decay <= 1.0) {
            return Err(Error::Config(format!("split_decay = {} outside (0, 1]", self.split_decay)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || !(self.tau > 0.0) {
            return Err(Error::Config("alpha and beta must be >= 0 and tau > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let TimeSampling::LogNormal { std, .. } = self.time_sampling {
            if !(std > 0.0) {
                return Err(Error::Config(format!("log-normal std must be positive, got {std}")));
            }
        }
        Ok(())
    }
}

/// A run as written in a config file; unset loss settings follow the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: String,
    pub model: ModelConfig,
    pub alpha: Option<f32>,
    pub beta: Option<f32>,
    pub tau: f32,
    pub p_equal: Option<f64>,
    pub guidance_w: f32,
    pub nfe: usize,
    pub lr: f32,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub time_sampling: TimeSampling,
    pub adaptive_l2: bool,
    pub cond_dropout: f64,
    pub inference_layout_prob: f64,
    pub split_decay: f64,
    pub seed: u64,
    pub sample_seed: u64,
    pub n_samples: usize,
    pub checkpoint_every: usize,
    /// Rows held out from training and used as evaluation references.
    pub holdout: usize,
    /// Training data is divided by this and samples multiplied back.
    pub data_scale: f32,
    pub data: DataSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: "VMF".into(),
            model: ModelConfig::default(),
            alpha: None,
            beta: None,
            tau: 1.0,
            p_equal: None,
            guidance_w: 1.5,
            nfe: 1,
            lr: 1e-3,
            epochs: 10,
            max_steps: None,
            batch_size: 64,
            time_sampling: TimeSampling::Uniform,
            adaptive_l2: false,
            cond_dropout: 0.1,
            inference_layout_prob: 0.1,
            split_decay: 0.9,
            seed: 0,
            sample_seed: 1,
            n_samples: 100,
            checkpoint_every: 5,
            holdout: 100,
            data_scale: 1.0,
            data: DataSource::default(),
        }
    }
}

impl RunConfig {
    pub fn variant(&self) -> Result<Variant> {
        self.variant.parse()
    }

    /// Training settings with variant defaults filled in and constraints checked.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let variant = self.variant()?;
        let mut cfg = TrainConfig::for_variant(variant);
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(b) = self.beta {
            cfg.beta = b;
        }
        if let Some(p) = self.p_equal {
            cfg.p_equal = p;
        }
        cfg.tau = self.tau;
        cfg.time_sampling = self.time_sampling;
        cfg.adaptive_l2 = self.adaptive_l2;
        cfg.cond_dropout = self.cond_dropout;
        cfg.inference_layout_prob = self.inference_layout_prob;
        cfg.split_decay = self.split_decay;
        cfg.adam.lr = self.lr;
        cfg.batch_size = self.batch_size;
        cfg.seed = self.seed;
        cfg.validate()?;
        if !(self.data_scale.is_finite() && self.data_scale > 0.0) {
            return Err(Error::Config(format!("data_scale must be positive, got {}", self.data_scale)));
        }
        if self.nfe == 0 {
            return Err(Error::Config("nfe must be at least 1".into()));
        }
        Ok(cfg)
    }

    /// Copy with every defaulted loss setting written out.
    pub fn resolved(&self) -> Result<RunConfig> {
        let t = self.train_config()?;
        Ok(RunConfig {
            variant: t.variant.name().into(),
            alpha: Some(t.alpha),
            beta: Some(t.beta),
            p_equal: Some(t.p_equal),
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parsing() {
        assert_eq!("vmfd".parse::<Variant>().unwrap(), Variant::Vmfd);
        assert!(matches!("VAE".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn variant_defaults() {
        let mf = TrainConfig::for_variant(Variant::Mf);
        assert_eq!((mf.alpha, mf.beta, mf.p_equal), (0.0, 0.0, 0.5));
        let vmfd = TrainConfig::for_variant(Variant::Vmfd);
        assert_eq!((vmfd.alpha, vmfd.beta), (DEFAULT_ALPHA, DEFAULT_BETA));
        assert_eq!(TrainConfig::for_variant(Variant::Fm).p_equal, 1.0);
        for v in Variant::ALL {
            TrainConfig::for_variant(v).validate().unwrap();
        }
    }

    #[test]
    fn conflicting_settings_are_rejected() {
        let run = RunConfig {
            variant: "FM".into(),
            p_equal: Some(0.3),
            ..Default::default()
        };
        assert!(matches!(run.train_config(), Err(Error::Config(_))));
        let run = RunConfig {
            variant: "MF".into(),
            alpha: Some(0.1),
            ..Default::default()
        };
        assert!(run.train_config().is_err());
        let run = RunConfig {
            variant: "VMF".into(),
            beta: Some(0.1),
            ..Default::default()
        };
        assert!(run.train_config().is_err());
        let run = RunConfig {
            variant: "MF".into(),
            alpha: Some(0.0),
            ..Default::default()
        };
        assert!(run.train_config().is_ok());
    }

    #[test]
    fn run_config_json_round_trip() {
        let run = RunConfig::default().resolved().unwrap();
        let text = serde_json::to_string_pretty(&run).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, run);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
