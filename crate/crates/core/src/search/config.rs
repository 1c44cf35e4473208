use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::reparam::KernelNorm;
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Simplification {
    None,
    Full,
}

/// Starting architecture logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaInit {
    Zeros,
    /// Large logit on one candidate so that its softmax weight is exactly 1.
    OneHot(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub w_lr_init: f64,
    /// Cosine annealing floor.
    pub w_lr_min: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub w_grad_clip: f64,
    pub alpha: AdamConfig,
    pub seed: u64,
    pub precision: DType,
    pub kernel_norm: KernelNorm,
    pub simplification: Simplification,
    pub alpha_init: AlphaInit,
    pub freeze_alpha: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            w_lr_init: 0.025,
            w_lr_min: 0.0,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            w_grad_clip: 5.0,
            alpha: AdamConfig {
                lr: 3e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 1e-3,
            },
            seed: 0,
            precision: DType::F32,
            kernel_norm: KernelNorm::Off,
            simplification: Simplification::Full,
            alpha_init: AlphaInit::Zeros,
            freeze_alpha: false,
        }
    }
}

impl TrainConfig {
    /// Defaults for a space; the NAS-Bench-201 profile raises the weight
    /// decay to 1e-2.
    pub fn for_space(name: &str) -> Self {
        let mut c = Self::default();
        if name == "nasbench201" {
            c.w_weight_decay = 1e-2;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let positive = [
            ("w_lr_init", self.w_lr_init),
            ("alpha lr", self.alpha.lr),
            ("alpha eps", self.alpha.eps),
            ("w_grad_clip", self.w_grad_clip),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let unit = [
            ("w_momentum", self.w_momentum),
            ("alpha beta1", self.alpha.beta1),
            ("alpha beta2", self.alpha.beta2),
        ];
        for (name, v) in unit {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.w_lr_min < 0.0 || self.w_lr_min > self.w_lr_init {
            return Err(Error::Config("w_lr_min must lie in [0, w_lr_init]".into()));
        }
        if self.w_weight_decay < 0.0 || self.alpha.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
