//! Flat `key = value` run configuration.

use std::path::PathBuf;

use crate::augment::AugKind;
use crate::contrastive::default_tau;
use crate::data::{gen_synthetic, load_cifar10_bin, Dataset, DatasetSource, SyntheticSpec};
use crate::encoder::{EncoderConfig, HeadKind};
use crate::error::{config_err, Result};
use crate::mechanisms::Mechanism;

use super::Schedule;

/// Every key accepted in a config file, in the order they are written out.
pub const KEYS: &[&str] = &[
    "mechanism",
    "head",
    "aug",
    "schedule",
    "epochs",
    "batch",
    "lr0",
    "sgd_momentum",
    "weight_decay",
    "tau",
    "K",
    "m",
    "seed_init",
    "seed_data",
    "seed_aug",
    "input_hw",
    "channels",
    "head_hidden",
    "embed_dim",
    "dataset",
    "cifar_files",
    "synth_n_per_class",
    "synth_classes",
    "synth_noise",
    "synth_seed",
    "log_wall_time",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mechanism: Mechanism,
    /// Backbone and head shape; `encoder.head_kind` is the `head` key.
    pub encoder: EncoderConfig,
    pub aug: AugKind,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    /// Queue capacity.
    pub k: usize,
    pub m: f64,
    pub seed_init: u64,
    pub seed_data: u64,
    pub seed_aug: u64,
    pub dataset: DatasetSource,
    /// Record real step times in the metrics log. Off by default so that
    /// repeated runs produce identical files.
    pub log_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        RunConfig {
            mechanism: Mechanism::Moco,
            tau: default_tau(encoder.head_kind),
            aug: AugKind::Plus,
            schedule: Schedule::Cos,
            epochs: 30,
            batch: 64,
            lr0: 0.06,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            k: 4096,
            m: 0.99,
            seed_init: 0,
            seed_data: 0,
            seed_aug: 0,
            dataset: DatasetSource::Synthetic(SyntheticSpec { size: encoder.input_hw, ..SyntheticSpec::default() }),
            encoder,
            log_wall_time: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| config_err!("cannot parse `{value}` for key `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_err!("cannot parse `{value}` for key `{key}` as a boolean")),
    }
}

/// Split config text into `(key, value)` pairs. `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err!("line {}: expected `key = value`, got `{line}`", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults overridden by `pairs` in order. Unless `tau` is among the
    /// keys it follows the head: 0.07 for fc, 0.2 for the MLP head.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut tau_set = false;
        for (k, v) in pairs {
            tau_set |= k.as_ref() == "tau";
            cfg.set(k.as_ref(), v.as_ref())?;
        }
        if !tau_set {
            cfg.tau = default_tau(cfg.encoder.head_kind);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        RunConfig::from_pairs(&parse_pairs(text)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mechanism" => self.mechanism = value.parse()?,
            "head" => self.encoder.head_kind = value.parse::<HeadKind>()?,
            "aug" => self.aug = value.parse()?,
            "schedule" => self.schedule = value.parse()?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "sgd_momentum" => self.sgd_momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "K" => self.k = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "seed_init" => self.seed_init = parse(key, value)?,
            "seed_data" => self.seed_data = parse(key, value)?,
            "seed_aug" => self.seed_aug = parse(key, value)?,
            "input_hw" => {
                self.encoder.input_hw = parse(key, value)?;
                if let DatasetSource::Synthetic(s) = &mut self.dataset {
                    s.size = self.encoder.input_hw;
                }
            }
            "channels" => {
                self.encoder.channels = value
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "head_hidden" => self.encoder.head_hidden = parse(key, value)?,
            "embed_dim" => self.encoder.embed_dim = parse(key, value)?,
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DatasetSource::Synthetic(SyntheticSpec {
                        size: self.encoder.input_hw,
                        ..SyntheticSpec::default()
                    }),
                    "cifar10" => DatasetSource::Cifar10 { files: Vec::new() },
                    _ => return Err(config_err!("unknown dataset `{value}` (expected synthetic or cifar10)")),
                }
            }
            "cifar_files" => match &mut self.dataset {
                DatasetSource::Cifar10 { files } => {
                    *files = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
                }
                _ => return Err(config_err!("`cifar_files` requires `dataset = cifar10` earlier in the config")),
            },
            "synth_n_per_class" | "synth_classes" | "synth_noise" | "synth_seed" => match &mut self.dataset {
                DatasetSource::Synthetic(s) => match key {
                    "synth_n_per_class" => s.n_per_class = parse(key, value)?,
                    "synth_classes" => s.classes = parse(key, value)?,
                    "synth_noise" => s.noise_sigma = parse(key, value)?,
                    _ => s.seed = parse(key, value)?,
                },
                _ => return Err(config_err!("`{key}` requires `dataset = synthetic`")),
            },
            "log_wall_time" => self.log_wall_time = parse_bool(key, value)?,
            _ => return Err(config_err!("unknown config key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.epochs == 0 || self.batch == 0 {
            return Err(config_err!("epochs and batch must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(config_err!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(config_err!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.m) {
            return Err(config_err!("m must lie in [0, 1], got {}", self.m));
        }
        if !(self.sgd_momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(config_err!("sgd_momentum and weight_decay must be non-negative"));
        }
        match self.mechanism {
            Mechanism::Moco if self.k == 0 || !self.k.is_multiple_of(self.batch) => {
                return Err(config_err!("K = {} must be a positive multiple of batch = {}", self.k, self.batch))
            }
            Mechanism::E2e if self.batch < 2 => {
                return Err(config_err!("end-to-end training needs batch ≥ 2"))
            }
            _ => {}
        }
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                s.validate()?;
                if s.size != self.encoder.input_hw {
                    return Err(config_err!("synthetic size {} differs from input_hw {}", s.size, self.encoder.input_hw));
                }
            }
            DatasetSource::Cifar10 { .. } if self.encoder.input_hw != 32 => {
                return Err(config_err!("CIFAR-10 needs input_hw = 32, got {}", self.encoder.input_hw))
            }
            _ => {}
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for &key in KEYS {
            let v = match key {
                "mechanism" => self.mechanism.to_string(),
                "head" => self.encoder.head_kind.to_string(),
                "aug" => self.aug.to_string(),
                "schedule" => self.schedule.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch" => self.batch.to_string(),
                "lr0" => self.lr0.to_string(),
                "sgd_momentum" => self.sgd_momentum.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "tau" => self.tau.to_string(),
                "K" => self.k.to_string(),
                "m" => self.m.to_string(),
                "seed_init" => self.seed_init.to_string(),
                "seed_data" => self.seed_data.to_string(),
                "seed_aug" => self.seed_aug.to_string(),
                "input_hw" => self.encoder.input_hw.to_string(),
                "channels" => self.encoder.channels.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
                "head_hidden" => self.encoder.head_hidden.to_string(),
                "embed_dim" => self.encoder.embed_dim.to_string(),
                "dataset" => match self.dataset {
                    DatasetSource::Synthetic(_) => "synthetic".into(),
                    DatasetSource::Cifar10 { .. } => "cifar10".into(),
                },
                "log_wall_time" => self.log_wall_time.to_string(),
                _ => match (&self.dataset, key) {
                    (DatasetSource::Cifar10 { files }, "cifar_files") => {
                        files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
                    }
                    (DatasetSource::Synthetic(s), "synth_n_per_class") => s.n_per_class.to_string(),
                    (DatasetSource::Synthetic(s), "synth_classes") => s.classes.to_string(),
                    (DatasetSource::Synthetic(s), "synth_noise") => s.noise_sigma.to_string(),
                    (DatasetSource::Synthetic(s), "synth_seed") => s.seed.to_string(),
                    _ => continue,
                },
            };
            out.push((key, v));
        }
        out
    }

    /// Config text that [`RunConfig::from_text`] maps back to `self`.
    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Sets the init, data-order and augmentation seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed_init = seed;
        self.seed_data = seed;
        self.seed_aug = seed;
        self
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Synthetic(s) => gen_synthetic(s),
            DatasetSource::Cifar10 { files } => load_cifar10_bin(files),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig::from_text(
            "mechanism = e2e\nhead = fc  # comment\nschedule = step\nlr0 = 0.125\nchannels = 4,8\ninput_hw = 16\nsynth_noise = 0.1\n",
        )
        .unwrap();
        assert_eq!(cfg.tau, 0.07);
        assert_eq!(cfg.encoder.channels, vec![4, 8]);
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::from_text("bogus = 1"), Err(Error::Config(m)) if m.contains("bogus")));
        assert!(RunConfig::from_text("K = 100\nbatch = 64").is_err());
        assert!(RunConfig::from_text("m = 1.5").is_err());
        assert!(RunConfig::from_text("tau = 0").is_err());
        assert!(RunConfig::from_text("no equals sign").is_err());
    }

    #[test]
    fn explicit_tau_wins() {
        assert_eq!(RunConfig::from_text("tau = 0.3\nhead = fc").unwrap().tau, 0.3);
        assert_eq!(RunConfig::from_text("head = mlp").unwrap().tau, 0.2);
    }
}
