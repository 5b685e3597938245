//! Run configuration: defaults, TOML files, and flag overrides.
//!
//! Precedence is flags > file > defaults. `RunConfig::resolve` applies the
//! coupling rules (meta-learning forces the GSNR criterion and soft gating)
//! and validates every field, naming the offending field on error. The
//! resolved config is persisted verbatim alongside run outputs so a run is
//! reconstructible from its output directory alone.

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::masking::{Criterion, Strategy};
use crate::network::NetConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Dropout mode: no masking, or one of the spatial expansion strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Dropout,
    Dropblock,
    Spatialdropout,
}

impl Mode {
    /// Masking strategy for this mode; `None` for the unmasked baseline.
    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Mode::Baseline => None,
            Mode::Dropout => Some(Strategy::Dropout),
            Mode::Dropblock => Some(Strategy::Dropblock),
            Mode::Spatialdropout => Some(Strategy::Spatialdropout),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Dropout => "dropout",
            Mode::Dropblock => "dropblock",
            Mode::Spatialdropout => "spatialdropout",
        })
    }
}

/// Where training data comes from: generated in-process or ingested from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic { data: DataConfig },
    Ingest { path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            data: DataConfig::default(),
        }
    }
}

/// Full description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub target_domain: usize,
    pub seed: u64,
    pub mode: Mode,
    pub criterion: Criterion,
    pub meta: bool,
    pub candidate_fraction: f64,
    /// Fixed drop ratio used when meta is off; also the initial p when on.
    pub p_gsnr: f64,
    pub block_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch at which the learning rate is multiplied by 0.1.
    pub lr_decay_epoch: usize,
    pub gamma: f64,
    pub beta: f64,
    pub alpha_init: f64,
    pub mtr_fraction: f64,
    pub k_mte: usize,
    pub second_order: bool,
    pub augment: bool,
    pub net: NetConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSource::default(),
            target_domain: 0,
            seed: 0,
            mode: Mode::Baseline,
            criterion: Criterion::Gsnr,
            meta: false,
            candidate_fraction: 1.0 / 3.0,
            p_gsnr: 0.5,
            block_size: 3,
            epochs: 30,
            batch_size: 128,
            lr: 0.004,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_decay_epoch: 24,
            gamma: 0.5,
            beta: 0.001,
            alpha_init: 0.004,
            mtr_fraction: 0.5,
            k_mte: 16,
            second_order: false,
            augment: false,
            net: NetConfig::default(),
            output_dir: None,
        }
    }
}

/// Optional per-field overrides, applied on top of a file or the defaults.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub target_domain: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub criterion: Option<Criterion>,
    pub meta: Option<bool>,
    pub candidate_fraction: Option<f64>,
    pub p_gsnr: Option<f64>,
    pub block_size: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lr_decay_epoch: Option<usize>,
    pub gamma: Option<f64>,
    pub beta: Option<f64>,
    pub alpha_init: Option<f64>,
    pub mtr_fraction: Option<f64>,
    pub k_mte: Option<usize>,
    pub second_order: Option<bool>,
    pub augment: Option<bool>,
    pub output_dir: Option<PathBuf>,
    pub ingest: Option<PathBuf>,
}

fn cfg_err(field: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        detail: detail.into(),
    }
}

impl RunConfig {
    /// Parse a TOML config file.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// Apply flag overrides (flags win over file values).
    pub fn apply(mut self, o: &Overrides) -> RunConfig {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { self.$f = v; } )* };
        }
        take!(
            target_domain,
            seed,
            mode,
            criterion,
            meta,
            candidate_fraction,
            p_gsnr,
            block_size,
            epochs,
            batch_size,
            lr,
            momentum,
            weight_decay,
            lr_decay_epoch,
            gamma,
            beta,
            alpha_init,
            mtr_fraction,
            k_mte,
            second_order,
            augment
        );
        if let Some(dir) = o.output_dir.clone() {
            self.output_dir = Some(dir);
        }
        if let Some(path) = o.ingest.clone() {
            self.dataset = DatasetSource::Ingest { path };
        }
        self
    }

    /// Apply coupling rules and validate. Meta-learning requires the GSNR
    /// criterion and soft gating, so `meta = true` forces `criterion = gsnr`.
    pub fn resolve(mut self) -> Result<RunConfig> {
        if self.meta {
            self.criterion = Criterion::Gsnr;
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let unit = |field: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(cfg_err(field, format!("{v} not in [0, 1]")));
            }
            Ok(())
        };
        let positive = |field: &str, v: f64| -> Result<()> {
            if !(v > 0.0) || !v.is_finite() {
                return Err(cfg_err(field, format!("{v} must be > 0")));
            }
            Ok(())
        };
        if let DatasetSource::Synthetic { data } = &self.dataset {
            data.validate()?;
            if self.target_domain >= data.num_domains {
                return Err(cfg_err(
                    "target_domain",
                    format!(
                        "{} out of range for {} domains",
                        self.target_domain, data.num_domains
                    ),
                ));
            }
            if data.image_hw != self.net.input_hw || data.channels != self.net.in_channels {
                return Err(cfg_err(
                    "net",
                    format!(
                        "network expects {}x{}x{} input but dataset produces {}x{}x{}",
                        self.net.in_channels,
                        self.net.input_hw,
                        self.net.input_hw,
                        data.channels,
                        data.image_hw,
                        data.image_hw
                    ),
                ));
            }
            if data.num_classes != self.net.num_classes {
                return Err(cfg_err(
                    "net.num_classes",
                    format!(
                        "network has {} classes but dataset {}",
                        self.net.num_classes, data.num_classes
                    ),
                ));
            }
        }
        if self.candidate_fraction <= 0.0 || self.candidate_fraction > 1.0 {
            return Err(cfg_err(
                "candidate_fraction",
                format!("{} not in (0, 1]", self.candidate_fraction),
            ));
        }
        unit("p_gsnr", self.p_gsnr)?;
        unit("gamma", self.gamma)?;
        unit("momentum", self.momentum)?;
        if self.block_size == 0 || self.block_size % 2 == 0 {
            return Err(cfg_err(
                "block_size",
                format!("{} must be odd and positive", self.block_size),
            ));
        }
        if self.epochs == 0 {
            return Err(cfg_err("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(cfg_err("batch_size", "must be at least 2"));
        }
        positive("lr", self.lr)?;
        positive("beta", self.beta)?;
        positive("alpha_init", self.alpha_init)?;
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(cfg_err("weight_decay", "must be finite and >= 0"));
        }
        if !(self.mtr_fraction > 0.0 && self.mtr_fraction < 1.0) {
            return Err(cfg_err(
                "mtr_fraction",
                format!("{} not in (0, 1)", self.mtr_fraction),
            ));
        }
        if self.k_mte == 0 {
            return Err(cfg_err("k_mte", "must be at least 1"));
        }
        if self.net.widths.is_empty() {
            return Err(cfg_err("net.widths", "need at least one block"));
        }
        Ok(())
    }

    /// Stable identifier naming the run's axis values.
    pub fn run_id(&self) -> String {
        format!(
            "{}-{}-meta{}-t{}-s{}",
            self.mode,
            match self.criterion {
                Criterion::Random => "random",
                Criterion::Magnitude => "magnitude",
                Criterion::Gsnr => "gsnr",
            },
            if self.meta { "on" } else { "off" },
            self.target_domain,
            self.seed
        )
    }

    /// Output directory: explicit field, else `<root>/<run_id>` under the
    /// env-var root (or `./runs`).
    pub fn resolved_output_dir(&self, env_root: Option<&str>) -> PathBuf {
        match &self.output_dir {
            Some(d) => d.clone(),
            None => {
                let root = env_root.map(PathBuf::from).unwrap_or_else(|| "runs".into());
                root.join(self.run_id())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let c = RunConfig::default();
        assert_eq!(c.block_size, 3);
        assert_eq!(c.gamma, 0.5);
        assert_eq!(c.beta, 0.001);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 0.0005);
        assert_eq!(c.lr, 0.004);
        assert_eq!(c.lr_decay_epoch, 24);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.epochs, 30);
        assert!(c.resolve().is_ok());
    }

    #[test]
    fn meta_forces_gsnr_criterion() {
        let c = RunConfig {
            meta: true,
            criterion: Criterion::Random,
            ..RunConfig::default()
        };
        assert_eq!(c.resolve().unwrap().criterion, Criterion::Gsnr);
    }

    #[test]
    fn validation_names_the_field() {
        let c = RunConfig {
            p_gsnr: 1.5,
            ..RunConfig::default()
        };
        let err = c.resolve().unwrap_err().to_string();
        assert!(err.contains("p_gsnr"), "{err}");
        let c = RunConfig {
            block_size: 2,
            ..RunConfig::default()
        };
        assert!(c.resolve().unwrap_err().to_string().contains("block_size"));
        let c = RunConfig {
            target_domain: 99,
            ..RunConfig::default()
        };
        assert!(c
            .resolve()
            .unwrap_err()
            .to_string()
            .contains("target_domain"));
    }

    #[test]
    fn file_then_flags_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "epochs = 5\nlr = 0.01\nmode = \"dropout\"\n").unwrap();
        let file_cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(file_cfg.epochs, 5);
        assert_eq!(file_cfg.lr, 0.01);
        assert_eq!(file_cfg.mode, Mode::Dropout);
        // untouched fields keep defaults
        assert_eq!(file_cfg.batch_size, 128);
        let merged = file_cfg.apply(&Overrides {
            lr: Some(0.2),
            seed: Some(7),
            ..Overrides::default()
        });
        assert_eq!(merged.lr, 0.2, "flag beats file");
        assert_eq!(merged.epochs, 5, "file beats default");
        assert_eq!(merged.seed, 7);
    }

    #[test]
    fn unknown_file_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "learning_rate = 0.01\n").unwrap();
        assert!(RunConfig::from_file(&path).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = RunConfig {
            mode: Mode::Dropblock,
            meta: true,
            ..RunConfig::default()
        }
        .resolve()
        .unwrap();
        let text = toml::to_string_pretty(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
