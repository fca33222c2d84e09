use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub light_dim: usize,
    pub num_classes: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout_pos_enc: f64,
    pub dropout_cls: f64,
    pub dropout_attn: f64,
    /// Weight of the non-salient representation loss.
    pub gamma: f64,
    /// Positional embedding capacity.
    pub max_frames: usize,
}

impl ModelConfig {
    pub fn new(light_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            light_dim,
            num_classes,
            encoder_layers: 2,
            heads: 8,
            ffn_dim: light_dim,
            dropout_pos_enc: 0.2,
            dropout_cls: 0.9,
            dropout_attn: 0.2,
            gamma: 0.2,
            max_frames: 128,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.light_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.light_dim < 2 || self.num_classes == 0 || self.max_frames == 0 {
            return Err(Error::contract(
                "light_dim >= 2, num_classes >= 1 and max_frames >= 1 required",
            ));
        }
        if self.heads == 0 || !self.light_dim.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "light_dim {} is not divisible by heads {}",
                self.light_dim, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::contract("ffn_dim must be positive"));
        }
        for (name, rate) in [
            ("dropout_pos_enc", self.dropout_pos_enc),
            ("dropout_cls", self.dropout_cls),
            ("dropout_attn", self.dropout_attn),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::contract(format!("{name}={rate} not in [0, 1)")));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::contract(format!("gamma={} must be >= 0", self.gamma)));
        }
        Ok(())
    }

    pub fn has_dropout(&self) -> bool {
        self.dropout_pos_enc > 0.0 || self.dropout_cls > 0.0 || self.dropout_attn > 0.0
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "light_dim={}", self.light_dim);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "encoder_layers={}", self.encoder_layers);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "ffn_dim={}", self.ffn_dim);
        let _ = writeln!(s, "dropout_pos_enc={}", self.dropout_pos_enc);
        let _ = writeln!(s, "dropout_cls={}", self.dropout_cls);
        let _ = writeln!(s, "dropout_attn={}", self.dropout_attn);
        let _ = writeln!(s, "gamma={}", self.gamma);
        let _ = writeln!(s, "max_frames={}", self.max_frames);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::new(0, 0);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::contract(format!("bad config line `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field by name; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::contract(format!("bad value `{v}` for {key}")))
        }
        match key {
            "light_dim" => self.light_dim = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = parse(key, value)?,
            "dropout_pos_enc" => self.dropout_pos_enc = parse(key, value)?,
            "dropout_cls" => self.dropout_cls = parse(key, value)?,
            "dropout_attn" => self.dropout_attn = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "max_frames" => self.max_frames = parse(key, value)?,
            _ => return Err(Error::contract(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::new(16, 4);
        c.gamma = 0.35;
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::new(12, 4);
        assert!(c.validate().is_err()); // 12 % 8 != 0
        c.heads = 4;
        assert!(c.validate().is_ok());
        c.dropout_cls = 1.0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::new(16, 4).set("bogus", "1").is_err());
    }
}
