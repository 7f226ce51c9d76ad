//! Flat key-value run configuration: architecture, training recipe,
//! ablation switches and synthetic-data controls in one text file.
//!
//! Format: one `key = value` per line, `#` comments, blank lines ignored.
//! Unknown keys are errors. Defaults mirror the reference recipe, so an
//! empty file is a valid configuration.

use crate::model::ModelConfig;
use crate::train::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown configuration key {key:?}")]
    UnknownKey { key: String },
    #[error("bad value for {key}: {value:?} ({hint})")]
    BadValue { key: String, value: String, hint: &'static str },
    #[error("malformed line {line}: expected `key = value`")]
    Malformed { line: usize },
}

/// Everything a run needs. CLI flags override file values, which override
/// these defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Synthetic generator: windows per class.
    pub per_class: usize,
    /// Segmentation overlap fraction.
    pub overlap: f64,
    /// Synthetic generator SNR in dB.
    pub snr_db: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            per_class: 200,
            overlap: 0.5,
            snr_db: 10.0,
        }
    }
}

macro_rules! parse_as {
    ($key:expr, $value:expr, $t:ty, $hint:expr) => {
        $value.parse::<$t>().map_err(|_| ConfigError::BadValue {
            key: $key.to_string(),
            value: $value.to_string(),
            hint: $hint,
        })?
    };
}

impl RunConfig {
    /// Apply one override.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "channels" => self.model.channels = parse_as!(key, v, usize, "positive integer"),
            "window" => self.model.window = parse_as!(key, v, usize, "positive integer"),
            "patch_width" => self.model.patch_width = parse_as!(key, v, usize, "positive integer"),
            "embed_dim" => self.model.embed_dim = parse_as!(key, v, usize, "positive integer"),
            "levels" => self.model.levels = parse_as!(key, v, usize, "positive integer"),
            "hf_dropout" => self.model.hf_dropout = parse_as!(key, v, f64, "float in [0,1)"),
            "layers" => self.model.layers = parse_as!(key, v, usize, "positive integer"),
            "heads" => self.model.heads = parse_as!(key, v, usize, "positive integer"),
            "ffn_dim" => self.model.ffn_dim = parse_as!(key, v, usize, "positive integer"),
            "rope_base" => self.model.rope_base = parse_as!(key, v, f64, "positive float"),
            "stochastic_depth" => {
                self.model.stochastic_depth = parse_as!(key, v, f64, "float in [0,1)")
            }
            "num_classes" => self.model.num_classes = parse_as!(key, v, usize, "integer >= 2"),
            "use_waveletconv" => {
                self.model.use_waveletconv = parse_as!(key, v, bool, "true or false")
            }
            "use_rope" => self.model.use_rope = parse_as!(key, v, bool, "true or false"),
            "lr" => self.train.lr = parse_as!(key, v, f64, "positive float"),
            "weight_decay" => self.train.weight_decay = parse_as!(key, v, f64, "float >= 0"),
            "batch" => self.train.batch = parse_as!(key, v, usize, "positive integer"),
            "epochs" => self.train.epochs = parse_as!(key, v, usize, "positive integer"),
            "warmup_epochs" => {
                self.train.warmup_epochs = parse_as!(key, v, usize, "integer <= epochs")
            }
            "clip_norm" => self.train.clip_norm = parse_as!(key, v, f64, "positive float"),
            "early_stop_patience" => {
                self.train.early_stop_patience = parse_as!(key, v, usize, "positive integer")
            }
            "early_stop_min_delta" => {
                self.train.early_stop_min_delta = parse_as!(key, v, f64, "accuracy fraction")
            }
            "seed" => self.train.seed = parse_as!(key, v, u64, "unsigned integer"),
            "per_class" => self.per_class = parse_as!(key, v, usize, "positive integer"),
            "overlap" => self.overlap = parse_as!(key, v, f64, "float in [0,1)"),
            "snr_db" => self.snr_db = parse_as!(key, v, f64, "float"),
            _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
        }
        Ok(())
    }

    /// Parse file text over the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or(ConfigError::Malformed { line: i + 1 })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Deterministic full dump; `from_text(to_text(x)) == x`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        format!(
            "channels = {}\nwindow = {}\npatch_width = {}\nembed_dim = {}\nlevels = {}\n\
             hf_dropout = {}\nlayers = {}\nheads = {}\nffn_dim = {}\nrope_base = {}\n\
             stochastic_depth = {}\nnum_classes = {}\nuse_waveletconv = {}\nuse_rope = {}\n\
             lr = {}\nweight_decay = {}\nbatch = {}\nepochs = {}\nwarmup_epochs = {}\n\
             clip_norm = {}\nearly_stop_patience = {}\nearly_stop_min_delta = {}\nseed = {}\n\
             per_class = {}\noverlap = {}\nsnr_db = {}\n",
            m.channels,
            m.window,
            m.patch_width,
            m.embed_dim,
            m.levels,
            m.hf_dropout,
            m.layers,
            m.heads,
            m.ffn_dim,
            m.rope_base,
            m.stochastic_depth,
            m.num_classes,
            m.use_waveletconv,
            m.use_rope,
            t.lr,
            t.weight_decay,
            t.batch,
            t.epochs,
            t.warmup_epochs,
            t.clip_norm,
            t.early_stop_patience,
            t.early_stop_min_delta,
            t.seed,
            self.per_class,
            self.overlap,
            self.snr_db,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.embed_dim, 256);
        assert_eq!(cfg.model.layers, 6);
        assert_eq!(cfg.model.heads, 8);
        assert_eq!(cfg.model.ffn_dim, 1024);
        assert_eq!(cfg.model.patch_width, 40);
        assert_eq!(cfg.model.window, 200);
        assert_eq!(cfg.model.levels, 3);
        assert_eq!(cfg.model.hf_dropout, 0.1);
        assert_eq!(cfg.model.stochastic_depth, 0.1);
        assert_eq!(cfg.train.lr, 4e-5);
        assert_eq!(cfg.train.weight_decay, 1e-4);
        assert_eq!(cfg.train.batch, 64);
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.train.warmup_epochs, 5);
        assert_eq!(cfg.train.clip_norm, 1.0);
        assert_eq!(cfg.train.early_stop_patience, 5);
        assert_eq!(cfg.train.early_stop_min_delta, 0.01);
    }

    #[test]
    fn text_roundtrip_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.apply_kv("embed_dim", "64").unwrap();
        cfg.apply_kv("lr", "0.001").unwrap();
        cfg.apply_kv("use_rope", "false").unwrap();
        cfg.apply_kv("snr_db", "7.5").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_overrides_defaults() {
        let cfg = RunConfig::from_text("# comment\n\nlayers = 2\nseed = 9\n").unwrap();
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.model.heads, 8); // untouched default
    }

    #[test]
    fn errors_are_specific() {
        assert!(matches!(
            RunConfig::from_text("bogus_key = 3\n"),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(matches!(
            RunConfig::from_text("layers = banana\n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            RunConfig::from_text("layers 4\n"),
            Err(ConfigError::Malformed { line: 1 })
        ));
    }
}
