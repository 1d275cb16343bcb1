use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mda::{Bandwidth, MmdEstimator};
use crate::model::ArchConfig;

/// Which mechanisms are enabled. Every flag defaults to the full model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub ada: bool,
    pub pcc: bool,
    pub dasw: bool,
    pub cda: bool,
    /// Pseudo-labels from the discriminative view alone.
    pub dplc_single: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            ada: true,
            pcc: true,
            dasw: true,
            cda: true,
            dplc_single: false,
        }
    }
}

impl Ablation {
    pub const NAMES: [&'static str; 5] = ["ada", "pcc", "dasw", "cda", "dplc"];

    /// Turns one mechanism off by name; `dplc` switches to single-view pseudo-labels.
    pub fn disable(&mut self, name: &str) -> Result<()> {
        match name.trim() {
            "ada" => self.ada = false,
            "pcc" => self.pcc = false,
            "dasw" => self.dasw = false,
            "cda" => self.cda = false,
            "dplc" | "dplc_single" => self.dplc_single = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown mechanism `{other}`; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrlSchedule {
    /// Reversal strength equals `lambda1` throughout.
    Constant,
    /// `lambda1 * (2 / (1 + exp(-10 p)) - 1)` over training progress `p` in [0, 1].
    /// Starting the reversal at zero keeps early, still random features from
    /// being aligned into a single class.
    #[default]
    Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightCadence {
    /// Recompute source weights once per epoch on full-domain eval features.
    #[default]
    Epoch,
    /// Recompute after every step on that step's batch features.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Adversarial trade-off; also the gradient reversal strength.
    pub lambda1: f64,
    /// Prototype consistency trade-off.
    pub lambda2: f64,
    /// Conditional alignment trade-off.
    pub lambda3: f64,
    /// Decay of the source weighting function.
    pub gamma: f64,
    /// Repulsion from other-class prototypes in the conditional loss.
    pub beta: f64,
    /// Steepness of the pseudo-label fusion schedule; `None` means `8 / epochs`.
    pub k: Option<f64>,
    pub grl_schedule: GrlSchedule,
    pub seed: u64,
    pub ablation: Ablation,
    /// Blend factor of the previous prototype on update (0 recomputes).
    pub prototype_ema: f64,
    pub bandwidth: Bandwidth,
    pub mmd_estimator: MmdEstimator,
    pub weight_update: WeightCadence,
    pub cluster_max_iter: usize,
    pub cluster_tol: f64,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 2e-4,
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 0.1,
            gamma: 0.5,
            beta: 0.1,
            k: None,
            grl_schedule: GrlSchedule::Ramp,
            seed: 0,
            ablation: Ablation::default(),
            prototype_ema: 0.0,
            bandwidth: Bandwidth::Median,
            mmd_estimator: MmdEstimator::Biased,
            weight_update: WeightCadence::Epoch,
            cluster_max_iter: 100,
            cluster_tol: 1e-6,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.lr > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::Config("lr and gamma must be positive".into()));
        }
        if let Some(k) = self.k {
            if !(k > 0.0) {
                return Err(Error::Config(format!("k must be positive, got {k}")));
            }
        }
        if !(0.0..1.0).contains(&self.prototype_ema) {
            return Err(Error::Config(format!("prototype_ema must be in [0, 1), got {}", self.prototype_ema)));
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0) {
                return Err(Error::Config(format!("fixed bandwidth must be positive, got {s}")));
            }
        }
        if self.cluster_max_iter == 0 {
            return Err(Error::Config("cluster_max_iter must be at least 1".into()));
        }
        Ok(())
    }

    /// Copy with every optional value replaced by the value actually used.
    pub fn resolved(&self) -> Self {
        Self {
            k: Some(self.fusion_k()),
            ..self.clone()
        }
    }

    pub fn fusion_k(&self) -> f64 {
        self.k.unwrap_or(8.0 / self.epochs as f64)
    }

    /// Reversal strength at training progress `p` in [0, 1].
    pub fn grl_lambda(&self, progress: f64) -> f64 {
        match self.grl_schedule {
            GrlSchedule::Constant => self.lambda1,
            GrlSchedule::Ramp => self.lambda1 * (2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0),
        }
    }

    /// The source-only reference: no alignment terms and uniform source weights.
    pub fn source_only(&self) -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ablation: Ablation {
                dasw: false,
                ..self.ablation.clone()
            },
            ..self.clone()
        }
    }

    pub fn ada_active(&self) -> bool {
        self.ablation.ada && self.lambda1 > 0.0
    }

    pub fn pcc_active(&self) -> bool {
        self.ablation.pcc && self.lambda2 > 0.0
    }

    pub fn cda_active(&self) -> bool {
        self.ablation.cda && self.lambda3 > 0.0
    }

    pub fn dasw_active(&self) -> bool {
        self.ablation.dasw
    }
}
