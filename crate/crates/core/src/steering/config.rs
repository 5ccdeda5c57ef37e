use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MhsaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Yes/no answering with the answer-quality loss available.
    Discriminative,
    /// Pre-extracted per-token attention, no answer head in the loop.
    CaptionOffline,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Discriminative => "discriminative",
            TrainMode::CaptionOffline => "caption_offline",
        })
    }
}

impl FromStr for TrainMode {
    type Err = MhsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discriminative" | "disc" | "pope" => Ok(TrainMode::Discriminative),
            "caption_offline" | "caption" => Ok(TrainMode::CaptionOffline),
            other => Err(MhsaError::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Everything that controls joint generator/detector training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_dg: f64,
    pub lambda_reg: f64,
    pub lambda_lvlm: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_g: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Apply the detector-guided loss to every sample instead of only labeled
    /// hallucinations.
    pub dg_on_all: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pope_qwen()
    }
}

impl TrainConfig {
    fn base() -> Self {
        TrainConfig {
            lambda_dg: 0.01,
            lambda_reg: 1e-4,
            lambda_lvlm: 1.0,
            lr_g: 1e-4,
            lr_d: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 1,
            batch_size: 16,
            hidden_g: 512,
            seed: 42,
            mode: TrainMode::Discriminative,
            dg_on_all: false,
        }
    }

    /// POPE, Qwen2.5-VL row.
    pub fn pope_qwen() -> Self {
        Self::base()
    }

    /// POPE, LLaVA-v1.5 row.
    pub fn pope_llava() -> Self {
        TrainConfig {
            lambda_reg: 5e-4,
            batch_size: 8,
            ..Self::base()
        }
    }

    /// POPE, InternVL2 row.
    pub fn pope_internvl() -> Self {
        TrainConfig {
            lr_g: 1e-3,
            lr_d: 1e-4,
            batch_size: 8,
            ..Self::base()
        }
    }

    /// Captioning (offline per-token attention), Qwen2.5-VL row.
    pub fn caption_qwen() -> Self {
        TrainConfig {
            lr_g: 1e-3,
            lr_d: 1e-7,
            lambda_lvlm: 0.0,
            lambda_dg: 0.5,
            lambda_reg: 0.01,
            batch_size: 32,
            mode: TrainMode::CaptionOffline,
            ..Self::base()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "pope-qwen" | "qwen" => Ok(Self::pope_qwen()),
            "pope-llava" | "llava" => Ok(Self::pope_llava()),
            "pope-internvl" | "internvl" => Ok(Self::pope_internvl()),
            "caption-qwen" | "caption" => Ok(Self::caption_qwen()),
            other => Err(MhsaError::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_dg", self.lambda_dg),
            ("lambda_reg", self.lambda_reg),
            ("lambda_lvlm", self.lambda_lvlm),
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("weight_decay", self.weight_decay),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(MhsaError::Config(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if self.batch_size == 0 || self.hidden_g == 0 {
            return Err(MhsaError::Config(
                "batch_size and hidden_g must be positive".into(),
            ));
        }
        if self.mode == TrainMode::CaptionOffline && self.lambda_lvlm != 0.0 {
            return Err(MhsaError::Config(
                "caption_offline mode trains without the answer head; lambda_lvlm must be 0".into(),
            ));
        }
        Ok(())
    }

    /// Sets one field from its `key = value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| MhsaError::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "lambda_dg" => self.lambda_dg = num(key, value)?,
            "lambda_reg" => self.lambda_reg = num(key, value)?,
            "lambda_lvlm" => self.lambda_lvlm = num(key, value)?,
            "lr_g" => self.lr_g = num(key, value)?,
            "lr_d" => self.lr_d = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "hidden_g" => self.hidden_g = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "dg_on_all" => self.dg_on_all = num(key, value)?,
            other => return Err(MhsaError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// `key = value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> String {
        format!(
            "lambda_dg = {}\nlambda_reg = {}\nlambda_lvlm = {}\nlr_g = {}\nlr_d = {}\n\
             weight_decay = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nepochs = {}\n\
             batch_size = {}\nhidden_g = {}\nseed = {}\nmode = {}\ndg_on_all = {}\n",
            self.lambda_dg,
            self.lambda_reg,
            self.lambda_lvlm,
            self.lr_g,
            self.lr_d,
            self.weight_decay,
            self.beta1,
            self.beta2,
            self.eps,
            self.epochs,
            self.batch_size,
            self.hidden_g,
            self.seed,
            self.mode,
            self.dg_on_all
        )
    }

    /// Applies `key = value` lines (`#` starts a comment) on top of `self`.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                MhsaError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_table() {
        let q = TrainConfig::pope_qwen();
        assert_eq!(
            (
                q.lr_g,
                q.lr_d,
                q.lambda_lvlm,
                q.lambda_dg,
                q.lambda_reg,
                q.epochs,
                q.batch_size
            ),
            (1e-4, 1e-5, 1.0, 0.01, 1e-4, 1, 16)
        );
        let l = TrainConfig::pope_llava();
        assert_eq!((l.lambda_reg, l.batch_size), (5e-4, 8));
        let i = TrainConfig::pope_internvl();
        assert_eq!((i.lr_g, i.lr_d, i.batch_size), (1e-3, 1e-4, 8));
        let c = TrainConfig::caption_qwen();
        assert_eq!(
            (
                c.lr_g,
                c.lr_d,
                c.lambda_lvlm,
                c.lambda_dg,
                c.lambda_reg,
                c.batch_size
            ),
            (1e-3, 1e-7, 0.0, 0.5, 0.01, 32)
        );
        for cfg in [q, l, i, c] {
            assert_eq!(cfg.weight_decay, 1e-4);
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn caption_mode_forbids_answer_loss() {
        let mut c = TrainConfig::caption_qwen();
        c.lambda_lvlm = 0.5;
        assert!(matches!(c.validate(), Err(MhsaError::Config(_))));
    }

    #[test]
    fn negative_weights_rejected() {
        let c = TrainConfig {
            lambda_reg: -1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let c = TrainConfig::caption_qwen();
        let mut d = TrainConfig::default();
        d.apply_kv(&c.to_kv()).unwrap();
        assert_eq!(c, d);
        let mut e = TrainConfig::default();
        e.apply_kv("# comment\nlr_g = 0.5  # trailing\n\nbatch_size=3\n")
            .unwrap();
        assert_eq!((e.lr_g, e.batch_size), (0.5, 3));
        assert!(e.apply_kv("nonsense = 1").is_err());
        assert!(e.apply_kv("lr_g").is_err());
    }
}
