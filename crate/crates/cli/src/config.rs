//! `key=value` run configuration for the `train` command.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nsnet::data::PresampleConfig;
use nsnet::fusion::FusionMode;
use nsnet::model::ModelConfig;
use nsnet::training::{scale_decay_epochs, Supervision, TrainConfig};

pub const MODEL_KEYS: [&str; 8] = [
    "encoder_layers",
    "heads",
    "ffn_dim",
    "dropout_pos_enc",
    "dropout_cls",
    "dropout_attn",
    "gamma",
    "max_frames",
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub prototypes: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub model_overrides: Vec<(String, String)>,
    explicit_decays: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_manifest: None,
            val_manifest: None,
            prototypes: None,
            out_dir: None,
            train: TrainConfig::default(),
            model_overrides: Vec::new(),
            explicit_decays: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    match value.parse() {
        Ok(v) => Ok(v),
        Err(_) => bail!("bad value `{value}` for {key}"),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("bad value `{value}` for {key} (expected true or false)"),
    }
}

impl RunConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("{}:{}: expected key=value", path.display(), n + 1);
            };
            cfg.set(k.trim(), v.trim(), base)
                .with_context(|| format!("{}:{}", path.display(), n + 1))?;
        }
        Ok(cfg)
    }

    /// Applies one setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || base.join(value);
        let t = &mut self.train;
        match key {
            "train_manifest" => self.train_manifest = Some(path()),
            "val_manifest" => self.val_manifest = Some(path()),
            "prototypes" => self.prototypes = Some(path()),
            "out_dir" => self.out_dir = Some(path()),
            "seed" => t.seed = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "base_lr" => t.base_lr = parse(key, value)?,
            "lr_decay_epochs" => {
                t.lr_decay_epochs = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?;
                self.explicit_decays = true;
            }
            "decay_factor" => t.decay_factor = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "frames" => t.presample.frames = parse(key, value)?,
            "shift_augment" => t.presample.shift_augment = parse_bool(key, value)?,
            "supervision" => t.supervision = value.parse::<Supervision>()?,
            "fusion" => t.eval_fusion.mode = value.parse::<FusionMode>()?,
            "ratio" => t.eval_fusion.ratio = parse(key, value)?,
            "k" => t.eval_fusion.k = parse(key, value)?,
            k if MODEL_KEYS.contains(&k) => {
                ModelConfig::new(8, 1).set(k, value)?;
                self.model_overrides.retain(|(name, _)| name != k);
                self.model_overrides.push((k.to_string(), value.to_string()));
            }
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Training settings with the decay points following `epochs` unless
    /// they were given explicitly.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = self.train.clone();
        if !self.explicit_decays {
            let base = TrainConfig::default();
            t.lr_decay_epochs = scale_decay_epochs(&base.lr_decay_epochs, base.epochs, t.epochs);
        }
        t.presample = PresampleConfig::new(t.presample.frames, t.presample.shift_augment)?;
        t.validate()?;
        Ok(t)
    }

    pub fn model_config(&self, light_dim: usize, num_classes: usize) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(light_dim, num_classes);
        for (k, v) in &self.model_overrides {
            m.set(k, v)?;
        }
        m.validate()?;
        Ok(m)
    }

    /// Settings as `key=value` lines, stored next to the training outputs.
    pub fn render(&self) -> Result<String> {
        let t = self.train_config()?;
        let p = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| std::path::absolute(p).unwrap_or_else(|_| p.clone()).display().to_string())
                .unwrap_or_default()
        };
        let decays: Vec<String> = t.lr_decay_epochs.iter().map(|e| e.to_string()).collect();
        let mut lines = vec![
            format!("train_manifest={}", p(&self.train_manifest)),
            format!("val_manifest={}", p(&self.val_manifest)),
            format!("prototypes={}", p(&self.prototypes)),
            format!("out_dir={}", p(&self.out_dir)),
            format!("seed={}", t.seed),
            format!("epochs={}", t.epochs),
            format!("batch_size={}", t.batch_size),
            format!("base_lr={}", t.base_lr),
            format!("lr_decay_epochs={}", decays.join(",")),
            format!("decay_factor={}", t.decay_factor),
            format!("momentum={}", t.momentum),
            format!("frames={}", t.presample.frames),
            format!("shift_augment={}", t.presample.shift_augment),
            format!("supervision={}", t.supervision),
            format!("fusion={}", t.eval_fusion.mode),
            format!("ratio={}", t.eval_fusion.ratio),
            format!("k={}", t.eval_fusion.k),
        ];
        lines.extend(self.model_overrides.iter().map(|(k, v)| format!("{k}={v}")));
        Ok(lines.join("\n") + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("learning_rate", "0.1", Path::new("")).is_err());
        assert!(c.set("light_dim", "16", Path::new("")).is_err());
        assert!(c.set("gamma", "abc", Path::new("")).is_err());
        assert!(c.set("shift_augment", "maybe", Path::new("")).is_err());
    }

    #[test]
    fn decays_follow_epochs_unless_explicit() {
        let mut c = RunConfig::default();
        c.set("epochs", "30", Path::new("")).unwrap();
        assert_eq!(c.train_config().unwrap().lr_decay_epochs, vec![13, 19]);
        c.set("lr_decay_epochs", "5,10", Path::new("")).unwrap();
        assert_eq!(c.train_config().unwrap().lr_decay_epochs, vec![5, 10]);
        c.set("lr_decay_epochs", "", Path::new("")).unwrap();
        assert!(c.train_config().unwrap().lr_decay_epochs.is_empty());
    }

    #[test]
    fn later_settings_win() {
        let mut c = RunConfig::default();
        c.set("gamma", "0.5", Path::new("")).unwrap();
        c.set("gamma", "0", Path::new("")).unwrap();
        assert_eq!(c.model_config(16, 3).unwrap().gamma, 0.0);
        c.set("supervision", "hard", Path::new("")).unwrap();
        assert_eq!(c.train.supervision, Supervision::HardVideoLabel);
    }

    #[test]
    fn rendered_config_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.set("epochs", "7", dir.path()).unwrap();
        c.set("heads", "4", dir.path()).unwrap();
        c.set("train_manifest", "data/train.nsm", dir.path()).unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, c.render().unwrap()).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.train_config().unwrap(), c.train_config().unwrap());
        assert_eq!(back.train_manifest, c.train_manifest);
        assert_eq!(back.model_config(16, 2).unwrap(), c.model_config(16, 2).unwrap());
    }
}
