//! Architecture hyperparameters and input geometry of an E4mer.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ingest::ChannelKind;

/// Which head sits on top of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Classifier,
    Reconstruction,
    Transform,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Classifier => "classifier",
            HeadKind::Reconstruction => "reconstruction",
            HeadKind::Transform => "transform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classifier" => Ok(HeadKind::Classifier),
            "reconstruction" => Ok(HeadKind::Reconstruction),
            "transform" => Ok(HeadKind::Transform),
            other => Err(Error::Config(format!("unknown head `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct E4merConfig {
    pub num_filters: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub attention_dropout: f64,
    pub drop_path: f64,
    pub mlp_dim: usize,
    pub mlp_dropout: f64,
    pub disable_bias: bool,
    /// Segment length in seconds, which is also the token count N.
    pub omega_s: usize,
    /// Samples per second for ACC_X, ACC_Y, ACC_Z, BVP, EDA, TEMP.
    pub rates: [usize; 6],
}

impl E4merConfig {
    /// Masked-prediction architecture.
    pub fn masked_prediction() -> Self {
        E4merConfig {
            num_filters: 16,
            d_model: 256,
            num_heads: 2,
            num_blocks: 4,
            attention_dropout: 0.2699,
            drop_path: 0.0034,
            mlp_dim: 72,
            mlp_dropout: 0.0824,
            disable_bias: true,
            omega_s: 512,
            rates: [32, 32, 32, 64, 4, 1],
        }
    }

    /// Transformation-prediction architecture.
    pub fn transform_prediction() -> Self {
        E4merConfig {
            d_model: 512,
            num_blocks: 1,
            attention_dropout: 0.3883,
            drop_path: 0.1783,
            mlp_dim: 176,
            mlp_dropout: 0.0310,
            ..Self::masked_prediction()
        }
    }

    /// Supervised-from-scratch architecture.
    pub fn supervised() -> Self {
        E4merConfig {
            num_filters: 4,
            d_model: 32,
            num_heads: 2,
            num_blocks: 4,
            attention_dropout: 0.1702,
            drop_path: 0.4676,
            mlp_dim: 120,
            mlp_dropout: 0.1037,
            disable_bias: false,
            ..Self::masked_prediction()
        }
    }

    pub fn with_input(mut self, omega_s: usize, rates: [usize; 6]) -> Self {
        self.omega_s = omega_s;
        self.rates = rates;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_filters == 0 || self.d_model == 0 || self.num_heads == 0 || self.mlp_dim == 0 {
            return fail("num_filters, d_model, num_heads and mlp_dim must be positive".into());
        }
        if self.d_model % self.num_heads != 0 {
            return fail(format!("d_model {} is not divisible by num_heads {}", self.d_model, self.num_heads));
        }
        for (name, p) in [
            ("attention_dropout", self.attention_dropout),
            ("drop_path", self.drop_path),
            ("mlp_dropout", self.mlp_dropout),
        ] {
            if !(0.0..=0.5).contains(&p) {
                return fail(format!("{name} {p} outside [0, 0.5]"));
            }
        }
        if self.omega_s == 0 || self.rates.contains(&0) {
            return fail("omega_s and every channel rate must be positive".into());
        }
        Ok(())
    }

    pub fn channel_len(&self, c: usize) -> usize {
        self.omega_s * self.rates[c]
    }

    /// Trainable encoder parameters:
    ///
    /// ```text
    /// channels  sum_c (F * r_c + F) + 6 * 2F         conv + batch-norm affine
    /// proj      6F * D + b * D
    /// pos       N * D
    /// blocks    L * (4D^2 + 2 D M + 2D + b * (4D + M + D + 2D))
    /// norm      D + b * D
    /// ```
    ///
    /// with `b = 0` when biases are disabled and `M = mlp_dim`.
    pub fn encoder_param_count(&self) -> usize {
        let (f, d, m, n) = (self.num_filters, self.d_model, self.mlp_dim, self.omega_s);
        let b = usize::from(!self.disable_bias);
        let channels: usize = self.rates.iter().map(|r| f * r + f + 2 * f).sum();
        let proj = 6 * f * d + b * d;
        let block = 4 * d * d + 2 * d * m + 2 * d + b * (7 * d + m);
        channels + proj + n * d + self.num_blocks * block + d + b * d
    }

    /// Trainable head parameters.
    pub fn head_param_count(&self, head: HeadKind) -> usize {
        let (d, m) = (self.d_model, self.mlp_dim);
        match head {
            HeadKind::Classifier => d * m + m + m * 2 + 2,
            HeadKind::Reconstruction => self.rates.iter().map(|r| d * r + r).sum(),
            HeadKind::Transform => d * 36 + 36,
        }
    }

    /// Batch-norm running statistics, stored but not trained.
    pub fn buffer_count(&self) -> usize {
        6 * 2 * self.num_filters
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "num_filters={}", self.num_filters);
        let _ = writeln!(s, "d_model={}", self.d_model);
        let _ = writeln!(s, "num_heads={}", self.num_heads);
        let _ = writeln!(s, "num_blocks={}", self.num_blocks);
        let _ = writeln!(s, "attention_dropout={}", self.attention_dropout);
        let _ = writeln!(s, "drop_path={}", self.drop_path);
        let _ = writeln!(s, "mlp_dim={}", self.mlp_dim);
        let _ = writeln!(s, "mlp_dropout={}", self.mlp_dropout);
        let _ = writeln!(s, "disable_bias={}", u8::from(self.disable_bias));
        let _ = writeln!(s, "omega_s={}", self.omega_s);
        for (k, r) in ChannelKind::MODEL.iter().zip(self.rates) {
            let _ = writeln!(s, "rate_{}={}", k.name().to_ascii_lowercase(), r);
        }
        s
    }

    /// Reads the keys written by [`to_key_values`](Self::to_key_values).
    /// Missing keys keep the values of `base`.
    pub fn from_key_values(kv: &BTreeMap<String, String>, base: &E4merConfig) -> Result<Self> {
        let mut c = base.clone();
        fn num<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str, slot: &mut T) -> Result<()> {
            if let Some(v) = kv.get(key) {
                *slot = v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))?;
            }
            Ok(())
        }
        num(kv, "num_filters", &mut c.num_filters)?;
        num(kv, "d_model", &mut c.d_model)?;
        num(kv, "num_heads", &mut c.num_heads)?;
        num(kv, "num_blocks", &mut c.num_blocks)?;
        num(kv, "attention_dropout", &mut c.attention_dropout)?;
        num(kv, "drop_path", &mut c.drop_path)?;
        num(kv, "mlp_dim", &mut c.mlp_dim)?;
        num(kv, "mlp_dropout", &mut c.mlp_dropout)?;
        num(kv, "omega_s", &mut c.omega_s)?;
        let mut disable = u8::from(c.disable_bias);
        num(kv, "disable_bias", &mut disable)?;
        c.disable_bias = disable != 0;
        for (i, k) in ChannelKind::MODEL.iter().enumerate() {
            num(kv, &format!("rate_{}", k.name().to_ascii_lowercase()), &mut c.rates[i])?;
        }
        c.validate()?;
        Ok(c)
    }

    /// True when two configs describe the same encoder tensors.
    pub fn same_encoder_shape(&self, other: &E4merConfig) -> bool {
        self.num_filters == other.num_filters
            && self.d_model == other.d_model
            && self.num_heads == other.num_heads
            && self.num_blocks == other.num_blocks
            && self.mlp_dim == other.mlp_dim
            && self.disable_bias == other.disable_bias
            && self.omega_s == other.omega_s
            && self.rates == other.rates
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [E4merConfig::masked_prediction(), E4merConfig::transform_prediction(), E4merConfig::supervised()] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = E4merConfig::supervised();
        c.d_model = 33;
        assert!(c.validate().is_err());
        let mut c = E4merConfig::supervised();
        c.drop_path = 0.6;
        assert!(c.validate().is_err());
    }

    #[test]
    fn key_value_round_trip() {
        let c = E4merConfig::transform_prediction().with_input(16, [4, 4, 4, 8, 2, 1]);
        let kv: BTreeMap<String, String> = c
            .to_key_values()
            .lines()
            .map(|l| {
                let (k, v) = l.split_once('=').unwrap();
                (k.to_string(), v.to_string())
            })
            .collect();
        assert_eq!(E4merConfig::from_key_values(&kv, &E4merConfig::supervised()).unwrap(), c);
    }
}
