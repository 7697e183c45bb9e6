//! Training configuration and `key = value` profile files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::LossWeights;
use crate::model::CaeConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_patience_epochs: usize,
    pub lr_decay: f64,
    pub admm_interval_epochs: usize,
    pub warmup_epochs: usize,
    /// Multiplier on the MSE during warmup.
    pub warmup_mse_scale: f64,
    pub keep_ratio: f64,
    pub rho: f64,
    /// `false` trains the same schedule without penalty or refreshes.
    pub admm: bool,
    pub crop_size: usize,
    pub total_epochs: usize,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 4e-3,
            plateau_patience_epochs: 10,
            lr_decay: 0.5,
            admm_interval_epochs: 20,
            warmup_epochs: 20,
            warmup_mse_scale: 1.0,
            keep_ratio: 0.10,
            rho: 1e-2,
            admm: true,
            crop_size: 128,
            total_epochs: 300,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &CaeConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let f = model.downsample_factor();
        if self.crop_size == 0 || self.crop_size % f != 0 {
            return bad(format!(
                "crop_size {} is not a positive multiple of the downsample factor {f}",
                self.crop_size
            ));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return bad(format!("keep_ratio must be in (0, 1], got {}", self.keep_ratio));
        }
        if !(self.lr > 0.0) || !(self.rho > 0.0) {
            return bad(format!("lr and rho must be positive, got {} and {}", self.lr, self.rho));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if self.batch_size == 0 || self.admm_interval_epochs == 0 {
            return bad("batch_size and admm_interval_epochs must be positive".into());
        }
        if !(self.warmup_mse_scale > 0.0) {
            return bad("warmup_mse_scale must be positive".into());
        }
        self.loss.validate()
    }

    /// Whether an ADMM refresh follows epoch `epoch` (0-based). The first
    /// refresh closes the warmup, later ones come every interval.
    pub fn refresh_after(&self, epoch: usize) -> bool {
        let done = epoch + 1;
        done >= self.warmup_epochs.max(1) && (done - self.warmup_epochs.max(1)) % self.admm_interval_epochs == 0
    }

    /// Number of refresh points strictly before epoch `epoch`; augmentation
    /// views are keyed by it so `Z`, `U` always describe the view being trained.
    pub fn view_cycle(&self, epoch: usize) -> u64 {
        (0..epoch).filter(|&e| self.refresh_after(e)).count() as u64
    }

    pub fn is_warmup(&self, epoch: usize) -> bool {
        epoch < self.warmup_epochs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub model: CaeConfig,
    pub train: TrainConfig,
}

impl Profile {
    /// Full-size settings.
    pub fn full() -> Self {
        Profile {
            model: CaeConfig::default(),
            train: TrainConfig::default(),
        }
    }

    /// Small model and short schedule that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Profile {
            model: CaeConfig {
                base_channels: 16,
                latent_channels: 16,
                n_residual_blocks: 2,
                n_down_pre: 2,
                n_down_post: 1,
                seed: 0,
            },
            train: TrainConfig {
                admm_interval_epochs: 10,
                warmup_epochs: 10,
                crop_size: 64,
                total_epochs: 60,
                // The penalty sums over latent entries while the distortion
                // averages over pixels; 1e-2 swamps the distortion at this size.
                rho: 1e-5,
                ..TrainConfig::default()
            },
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected desk or full)"
            ))),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "profile" => {
                let seed = (m.seed, t.seed);
                *self = Self::named(value)?;
                self.model.seed = seed.0;
                self.train.seed = seed.1;
            }
            "base_channels" => m.base_channels = num(key, value)?,
            "latent_channels" => m.latent_channels = num(key, value)?,
            "n_residual_blocks" => m.n_residual_blocks = num(key, value)?,
            "n_down_pre" => m.n_down_pre = num(key, value)?,
            "n_down_post" => m.n_down_post = num(key, value)?,
            "seed" => self.set_seed(num(key, value)?),
            "batch_size" => t.batch_size = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "plateau_patience_epochs" => t.plateau_patience_epochs = num(key, value)?,
            "lr_decay" => t.lr_decay = num(key, value)?,
            "admm_interval_epochs" => t.admm_interval_epochs = num(key, value)?,
            "warmup_epochs" => t.warmup_epochs = num(key, value)?,
            "warmup_mse_scale" => t.warmup_mse_scale = num(key, value)?,
            "keep_ratio" => t.keep_ratio = num(key, value)?,
            "rho" => t.rho = num(key, value)?,
            "admm" => t.admm = num(key, value)?,
            "crop_size" => t.crop_size = num(key, value)?,
            "total_epochs" => t.total_epochs = num(key, value)?,
            "w_mse" => t.loss.mse = num(key, value)?,
            "w_ssim" => t.loss.ssim = num(key, value)?,
            "w_msssim" => t.loss.ms_ssim = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a profile file. Lines are `key = value`; `#` starts a comment. A
    /// leading `profile = desk` selects the base that later keys override.
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Self::full();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            p.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)
    }

    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("base_channels", &m.base_channels);
        put("latent_channels", &m.latent_channels);
        put("n_residual_blocks", &m.n_residual_blocks);
        put("n_down_pre", &m.n_down_pre);
        put("n_down_post", &m.n_down_post);
        put("seed", &t.seed);
        put("batch_size", &t.batch_size);
        put("lr", &t.lr);
        put("plateau_patience_epochs", &t.plateau_patience_epochs);
        put("lr_decay", &t.lr_decay);
        put("admm_interval_epochs", &t.admm_interval_epochs);
        put("warmup_epochs", &t.warmup_epochs);
        put("warmup_mse_scale", &t.warmup_mse_scale);
        put("keep_ratio", &t.keep_ratio);
        put("rho", &t.rho);
        put("admm", &t.admm);
        put("crop_size", &t.crop_size);
        put("total_epochs", &t.total_epochs);
        put("w_mse", &t.loss.mse);
        put("w_ssim", &t.loss.ssim);
        put("w_msssim", &t.loss.ms_ssim);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refresh_schedule() {
        let t = TrainConfig {
            warmup_epochs: 20,
            admm_interval_epochs: 20,
            ..TrainConfig::default()
        };
        let refreshes: Vec<usize> = (0..100).filter(|&e| t.refresh_after(e)).collect();
        assert_eq!(refreshes, vec![19, 39, 59, 79, 99]);
        assert_eq!(t.view_cycle(19), 0);
        assert_eq!(t.view_cycle(20), 1);
        let no_warm = TrainConfig {
            warmup_epochs: 0,
            admm_interval_epochs: 3,
            ..t
        };
        assert_eq!((0..7).filter(|&e| no_warm.refresh_after(e)).collect::<Vec<_>>(), vec![0, 3, 6]);
    }

    #[test]
    fn text_round_trip() {
        let mut p = Profile::desk();
        p.set_seed(9);
        p.train.keep_ratio = 0.05;
        assert_eq!(Profile::parse(&p.to_text()).unwrap(), p);
    }

    #[test]
    fn overrides_and_errors() {
        let p = Profile::parse("profile = desk\n# comment\nkeep_ratio = 0.2  # inline\nseed=3\n").unwrap();
        assert_eq!(p.train.keep_ratio, 0.2);
        assert_eq!(p.model.seed, 3);
        assert_eq!(p.train.crop_size, 64);
        assert!(Profile::parse("nope = 1").is_err());
        assert!(Profile::parse("keep_ratio").is_err());
        assert!(Profile::parse("keep_ratio = 0").is_err());
        assert!(Profile::parse("profile = desk\ncrop_size = 60").is_err());
        assert!(Profile::named("huge").is_err());
    }
}
