use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::tonemap::CellKind;

/// Every training knob. All fields can be set from a TOML file; missing keys
/// take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr_position: f64,
    /// Position rate reached at the last iteration (log-linear decay).
    pub lr_position_final: f64,
    pub lr_sh: f64,
    pub lr_opacity: f64,
    pub lr_scaling: f64,
    pub lr_rotation: f64,
    pub lr_tone_curves: f64,
    pub lr_drcl: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub mu: f64,
    /// Context window `k`.
    pub window: usize,
    /// Context feature size `d`.
    pub context_dim: usize,
    pub cell_kind: CellKind,
    pub bank_momentum: f64,
    pub pixel_level_supervision: bool,
    pub init_gaussians: usize,
    pub init_opacity: f64,
    pub init_temporal_scale: f64,
    /// Multiplier on `(volume / N)^(1/3)` for the initial spatial scale.
    pub init_scale_factor: f64,
    pub init_dc_jitter: f64,
    pub sh_degree: usize,
    pub fourier_order: usize,
    pub seed: u64,
    pub background: [f64; 3],
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            lr_position: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_sh: 2.5e-3,
            lr_opacity: 5e-2,
            lr_scaling: 5e-3,
            lr_rotation: 1e-3,
            lr_tone_curves: 5e-4,
            lr_drcl: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            lambda: 0.2,
            alpha: 0.6,
            mu: 5000.0,
            window: 20,
            context_dim: 2,
            cell_kind: CellKind::Gru,
            bank_momentum: 0.9,
            pixel_level_supervision: true,
            init_gaussians: 2000,
            init_opacity: 0.1,
            init_temporal_scale: 0.1,
            init_scale_factor: 0.5,
            init_dc_jitter: 0.05,
            sh_degree: 2,
            fourier_order: 2,
            seed: 0,
            background: [0.0; 3],
            log_every: 50,
            checkpoint_every: 1000,
            data: None,
            out: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            alpha: self.alpha,
            mu: self.mu,
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }

    /// Position learning rate at iteration `it` (0-based) of `iterations`.
    pub fn position_lr(&self, it: u64) -> f64 {
        let frac = if self.iterations <= 1 {
            0.0
        } else {
            (it as f64 / (self.iterations - 1) as f64).clamp(0.0, 1.0)
        };
        (self.lr_position.ln() * (1.0 - frac) + self.lr_position_final.ln() * frac).exp()
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_position", self.lr_position),
            ("lr_position_final", self.lr_position_final),
            ("lr_sh", self.lr_sh),
            ("lr_opacity", self.lr_opacity),
            ("lr_scaling", self.lr_scaling),
            ("lr_rotation", self.lr_rotation),
            ("lr_tone_curves", self.lr_tone_curves),
            ("lr_drcl", self.lr_drcl),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.iterations < 1 {
            return bad("iterations must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.eps >= 0.0) {
            return bad("eps must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if !(self.mu > 0.0) {
            return bad("mu must be positive");
        }
        if self.window < 1 {
            return bad("window must be at least 1");
        }
        if self.context_dim < 1 {
            return bad("context_dim must be at least 1");
        }
        if !(0.0..1.0).contains(&self.bank_momentum) {
            return bad("bank_momentum must lie in [0, 1)");
        }
        if self.init_gaussians < 1 {
            return bad("init_gaussians must be at least 1");
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("init_opacity must lie in (0, 1)");
        }
        if !(self.init_temporal_scale > 0.0 && self.init_scale_factor > 0.0) {
            return bad("initial scales must be positive");
        }
        if self.sh_degree > 3 {
            return bad("sh_degree must be at most 3");
        }
        if self.log_every < 1 {
            return bad("log_every must be at least 1");
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = TrainConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        assert_eq!(TrainConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(TrainConfig::from_toml("iterationz = 3").is_err());
        assert!(TrainConfig::from_toml("lr_sh = -1.0").is_err());
        let c = TrainConfig::from_toml("cell_kind = \"rnn\"\nwindow = 5").unwrap();
        assert_eq!(c.cell_kind, CellKind::Rnn);
        assert_eq!(c.window, 5);
    }

    #[test]
    fn position_decay_endpoints() {
        let c = TrainConfig::default();
        assert!((c.position_lr(0) - 1.6e-4).abs() < 1e-18);
        assert!((c.position_lr(c.iterations - 1) - 1.6e-6).abs() < 1e-18);
        assert!(c.position_lr(2500) < c.position_lr(100));
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
