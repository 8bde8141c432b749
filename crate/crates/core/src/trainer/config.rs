use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{FpSign, HpMode, HyperParams};
use crate::model::Fusion;
use crate::objective::LossToggles;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    pub hp_mode: HpMode,
    pub fp_sign: FpSign,
    pub fusion: Fusion,
    /// Apply a descent step of the diversity loss to the action prototypes.
    pub pda_updates_prototypes: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Flags {
            hp_mode: HpMode::Tree,
            fp_sign: FpSign::Paper,
            fusion: Fusion::ProbMean,
            pda_updates_prototypes: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs (1-based) from which the rate is divided by `lr_drop_factor` once more.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub seed: u64,
    /// Epochs during which prototypes stay at their initial values.
    pub warmup_epochs: usize,
    pub hp: HyperParams,
    pub flags: Flags,
    pub losses: LossToggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.0075,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 10,
            epochs: 40,
            lr_drop_epochs: vec![15, 30],
            lr_drop_factor: 10.0,
            seed: 0,
            warmup_epochs: 0,
            hp: HyperParams::default(),
            flags: Flags::default(),
            losses: LossToggles::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Cross-entropy only: no auxiliary losses and no rectification.
    pub fn baseline(&self) -> Self {
        let mut cfg = self.clone();
        cfg.losses = LossToggles {
            hp: false,
            pcc: false,
            pda: false,
        };
        cfg.hp.gamma_a = 0.0;
        cfg.hp.gamma_b = 0.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if let Some(e) = self.lr_drop_epochs.iter().find(|&&e| e >= self.epochs) {
            return bad(format!("lr_drop_epochs entry {e} must be < epochs ({})", self.epochs));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return bad(format!("lr_drop_factor must be > 0, got {}", self.lr_drop_factor));
        }
        self.hp.validate()
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&t| t <= epoch).count();
        self.lr / self.lr_drop_factor.powi(drops as i32)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Sets a parameter by dotted name, e.g. `hp.lambda` or `lambda`.
    /// Used by ablation sweeps.
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{name}: {v:?} is not a number")))
        };
        match name {
            "lambda" | "hp.lambda" => self.hp.lambda = num(value)?,
            "rho" | "hp.rho" => self.hp.rho = num(value)?,
            "tau" | "hp.tau" => self.hp.tau = num(value)?,
            "beta" | "hp.beta" => self.hp.beta = num(value)?,
            "gamma_a" | "hp.gamma_a" => self.hp.gamma_a = num(value)?,
            "gamma_b" | "hp.gamma_b" => self.hp.gamma_b = num(value)?,
            "alpha" | "hp.alpha" => {
                let parts: Vec<&str> = value.split(['/', ':', ' ']).filter(|s| !s.is_empty()).collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!(
                        "alpha takes three values separated by '/', got {value:?}"
                    )));
                }
                for (slot, p) in self.hp.alpha.iter_mut().zip(parts) {
                    *slot = num(p)?;
                }
            }
            "lr" => self.lr = num(value)?,
            "weight_decay" => self.weight_decay = num(value)?,
            "warmup_epochs" => self.warmup_epochs = num(value)? as usize,
            "seed" => self.seed = num(value)? as u64,
            "losses.hp" | "losses.pcc" | "losses.pda" | "flags.pda_updates_prototypes" => {
                let on = match value.trim() {
                    "true" | "on" | "1" => true,
                    "false" | "off" | "0" => false,
                    v => return Err(Error::Config(format!("{name}: {v:?} is not a boolean"))),
                };
                match name {
                    "losses.hp" => self.losses.hp = on,
                    "losses.pcc" => self.losses.pcc = on,
                    "losses.pda" => self.losses.pda = on,
                    _ => self.flags.pda_updates_prototypes = on,
                }
            }
            "flags.hp_mode" | "flags.fp_sign" | "flags.fusion" => {
                let v = toml::Value::String(value.trim().to_string());
                let parsed = |e: toml::de::Error| Error::Config(format!("{name}: {e}"));
                match name {
                    "flags.hp_mode" => self.flags.hp_mode = v.try_into().map_err(parsed)?,
                    "flags.fp_sign" => self.flags.fp_sign = v.try_into().map_err(parsed)?,
                    _ => self.flags.fusion = v.try_into().map_err(parsed)?,
                }
            }
            other => return Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_schedule() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.lr_at(1), 0.0075);
        assert_eq!(cfg.lr_at(14), 0.0075);
        assert!((cfg.lr_at(15) - 0.00075).abs() < 1e-18);
        assert!((cfg.lr_at(30) - 0.000075).abs() < 1e-18);
        assert!((cfg.lr_at(40) - 0.000075).abs() < 1e-18);
    }

    #[test]
    fn toml_round_trip_and_errors() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = TrainConfig::from_toml("epochs = 5\nlr_drop_epochs = [2]\n[hp]\nlambda = 0.1\n").unwrap();
        assert_eq!(partial.hp.lambda, 0.1);
        assert_eq!(partial.hp.tau, 0.125);
        let e = TrainConfig::from_toml("lr = 0.1\nbogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
        let e = TrainConfig::from_toml("epochs = 10\n").unwrap_err().to_string();
        assert!(e.contains("lr_drop_epochs"), "{e}");
        assert!(TrainConfig::from_toml("batch_size = 0\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.hp.lambda = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn sweep_setters() {
        let mut cfg = TrainConfig::default();
        cfg.set("lambda", "10").unwrap();
        assert_eq!(cfg.hp.lambda, 10.0);
        cfg.set("alpha", "1/0.1/0.5").unwrap();
        assert_eq!(cfg.hp.alpha, [1.0, 0.1, 0.5]);
        assert!(cfg.set("alpha", "1/2").is_err());
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("tau", "0").is_err());
    }

    #[test]
    fn baseline_disables_extras() {
        let b = TrainConfig::default().baseline();
        assert!(!b.losses.hp && !b.losses.pcc && !b.losses.pda);
        assert_eq!((b.hp.gamma_a, b.hp.gamma_b), (0.0, 0.0));
    }
}
