//! Plain-text `key=value` configuration and the shipped presets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::e4mer::E4merConfig;
use crate::error::{Error, Result};

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; surrounding whitespace is trimmed.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    PretrainMasked,
    PretrainTransform,
    Supervised,
    LinearReadout,
    FineTune,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::PretrainMasked => "pretrain-masked",
            TrainMode::PretrainTransform => "pretrain-transform",
            TrainMode::Supervised => "supervised",
            TrainMode::LinearReadout => "linear-readout",
            TrainMode::FineTune => "fine-tune",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            TrainMode::PretrainMasked,
            TrainMode::PretrainTransform,
            TrainMode::Supervised,
            TrainMode::LinearReadout,
            TrainMode::FineTune,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }

    pub fn is_pretraining(self) -> bool {
        matches!(self, TrainMode::PretrainMasked | TrainMode::PretrainTransform)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr_decay_factor: f64,
    pub patience_epochs: usize,
    pub max_reductions: usize,
    /// Smallest change of the validation criterion that counts as progress.
    pub min_delta: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, lr: f64, weight_decay: f64) -> Self {
        TrainConfig {
            lr,
            weight_decay,
            max_epochs: 300,
            batch_size: 256,
            lr_decay_factor: 0.3,
            patience_epochs: 10,
            max_reductions: 2,
            min_delta: 1e-6,
            seed: 0,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("lr {} / weight_decay {} invalid", self.lr, self.weight_decay)));
        }
        if self.patience_epochs == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience, batch_size and max_epochs must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::Config(format!("lr_decay_factor {} outside (0, 1)", self.lr_decay_factor)));
        }
        Ok(())
    }

    /// Learning rate after `k` reductions.
    pub fn lr_after(&self, k: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi(k as i32)
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode={}", self.mode.as_str());
        let _ = writeln!(s, "learning_rate={}", self.lr);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "max_epochs={}", self.max_epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "lr_decay_factor={}", self.lr_decay_factor);
        let _ = writeln!(s, "patience_epochs={}", self.patience_epochs);
        let _ = writeln!(s, "max_reductions={}", self.max_reductions);
        let _ = writeln!(s, "min_delta={}", self.min_delta);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    /// Applies any training keys present in `kv`.
    pub fn apply_key_values(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn set<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str, slot: &mut T) -> Result<()> {
            if let Some(v) = kv.get(key) {
                *slot = v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))?;
            }
            Ok(())
        }
        if let Some(m) = kv.get("mode") {
            self.mode = TrainMode::parse(m)?;
        }
        set(kv, "learning_rate", &mut self.lr)?;
        set(kv, "weight_decay", &mut self.weight_decay)?;
        set(kv, "max_epochs", &mut self.max_epochs)?;
        set(kv, "batch_size", &mut self.batch_size)?;
        set(kv, "lr_decay_factor", &mut self.lr_decay_factor)?;
        set(kv, "patience_epochs", &mut self.patience_epochs)?;
        set(kv, "max_reductions", &mut self.max_reductions)?;
        set(kv, "min_delta", &mut self.min_delta)?;
        set(kv, "seed", &mut self.seed)?;
        self.validate()
    }
}

/// Dropout overrides applied when fine-tuning a pretrained encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularization {
    pub attention_dropout: f64,
    pub drop_path: f64,
    pub mlp_dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Masked-prediction pretraining.
    Mp,
    /// Transformation-prediction pretraining.
    Tp,
    MpReadout,
    TpReadout,
    MpFt,
    TpFt,
    /// Supervised training from scratch.
    Sl,
}

impl Preset {
    pub const ALL: [Preset; 7] =
        [Preset::Mp, Preset::Tp, Preset::MpReadout, Preset::TpReadout, Preset::MpFt, Preset::TpFt, Preset::Sl];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Mp => "mp",
            Preset::Tp => "tp",
            Preset::MpReadout => "mp-readout",
            Preset::TpReadout => "tp-readout",
            Preset::MpFt => "mp-ft",
            Preset::TpFt => "tp-ft",
            Preset::Sl => "sl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }

    pub fn train_config(self) -> TrainConfig {
        match self {
            Preset::Mp => TrainConfig::new(TrainMode::PretrainMasked, 0.009, 0.0572),
            Preset::Tp => TrainConfig::new(TrainMode::PretrainTransform, 0.009, 0.101),
            Preset::MpReadout => TrainConfig::new(TrainMode::LinearReadout, 0.0058, 0.8189),
            Preset::TpReadout => TrainConfig::new(TrainMode::LinearReadout, 0.0058, 0.7952),
            Preset::MpFt => TrainConfig::new(TrainMode::FineTune, 0.0010, 0.0232),
            Preset::TpFt => TrainConfig::new(TrainMode::FineTune, 0.0011, 0.7052),
            Preset::Sl => TrainConfig::new(TrainMode::Supervised, 0.00516, 0.0016),
        }
    }

    /// Architecture for presets that build a model from scratch.
    pub fn model_config(self) -> Option<E4merConfig> {
        match self {
            Preset::Mp => Some(E4merConfig::masked_prediction()),
            Preset::Tp => Some(E4merConfig::transform_prediction()),
            Preset::Sl => Some(E4merConfig::supervised()),
            _ => None,
        }
    }

    pub fn regularization(self) -> Option<Regularization> {
        match self {
            Preset::MpFt => Some(Regularization { attention_dropout: 0.4732, drop_path: 0.01032, mlp_dropout: 0.1209 }),
            Preset::TpFt => Some(Regularization { attention_dropout: 0.0754, drop_path: 0.2065, mlp_dropout: 0.2782 }),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_key_values() {
        let kv = parse_key_values("# comment\n learning_rate = 0.01\n\nd_model=32\n").unwrap();
        assert_eq!(kv["learning_rate"], "0.01");
        assert_eq!(kv["d_model"], "32");
        assert!(parse_key_values("oops").is_err());
    }

    #[test]
    fn lr_schedule() {
        let c = Preset::Mp.train_config();
        assert!((c.lr_after(1) - 0.0027).abs() < 1e-15);
        assert!((c.lr_after(2) - 0.009 * 0.09).abs() < 1e-15);
    }

    #[test]
    fn train_config_round_trip() {
        let mut c = Preset::TpFt.train_config();
        c.seed = 42;
        let mut back = Preset::Sl.train_config();
        back.apply_key_values(&parse_key_values(&c.to_key_values()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(Preset::parse(p.name()).unwrap(), p);
            p.train_config().validate().unwrap();
        }
    }
}
