//! JSON model snapshots. Floats are written with shortest round-trip
//! formatting so a reload reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Damsdan, EncoderConfig};
use crate::error::{Error, Result};
use crate::mda::{FusionWeights, PrototypeBank};
use crate::numerics::{Rng, Tensor};

pub const CHECKPOINT_FORMAT: &str = "damsdan-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: EncoderConfig,
    pub params: Vec<NamedTensor>,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    pub prototypes: Vec<PrototypeBank>,
    pub fusion: FusionWeights,
}

impl Checkpoint {
    pub fn capture(model: &Damsdan) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config.clone(),
            params: model
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    rows: p.tensor.rows(),
                    cols: p.tensor.cols(),
                    values: p.tensor.data().to_vec(),
                })
                .collect(),
            bn_running_mean: model.bn.running_mean.clone(),
            bn_running_var: model.bn.running_var.clone(),
            prototypes: model.branches.iter().map(|b| b.prototypes.clone()).collect(),
            fusion: model.fusion.clone(),
        }
    }

    /// Rebuilds the model; every stored tensor must match the architecture
    /// implied by the stored config by name and shape.
    pub fn restore(&self) -> Result<Damsdan> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Compatibility(format!(
                "unsupported checkpoint format {:?}",
                self.format
            )));
        }
        let mut model = Damsdan::new(self.config.clone(), &mut Rng::new(0))?;
        if model.params.len() != self.params.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint has {} tensors, architecture expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (p, saved) in model.params.iter_mut().zip(&self.params) {
            if p.name != saved.name || p.tensor.shape() != (saved.rows, saved.cols) {
                return Err(Error::Compatibility(format!(
                    "tensor {} {} does not match expected {} {}",
                    saved.name,
                    format_args!("{}x{}", saved.rows, saved.cols),
                    p.name,
                    p.tensor.shape_str()
                )));
            }
            p.tensor = Tensor::from_vec(saved.rows, saved.cols, saved.values.clone())
                .map_err(|_| Error::Compatibility(format!("tensor {} has wrong value count", saved.name)))?;
        }
        let width = model.config.common_width();
        if self.bn_running_mean.len() != width || self.bn_running_var.len() != width {
            return Err(Error::Compatibility("batch norm moments have wrong length".into()));
        }
        model.bn.running_mean = self.bn_running_mean.clone();
        model.bn.running_var = self.bn_running_var.clone();
        if self.prototypes.len() != model.branches.len() || self.fusion.final_weights.len() != model.branches.len() {
            return Err(Error::Compatibility("branch count mismatch".into()));
        }
        for (b, bank) in model.branches.iter_mut().zip(&self.prototypes) {
            if bank.class_count != model.config.num_classes || bank.dim != model.config.arch.dsfe_width {
                return Err(Error::Compatibility(format!(
                    "prototype bank of branch {} has wrong shape",
                    b.branch_id
                )));
            }
            b.prototypes = bank.clone();
        }
        model.fusion = self.fusion.clone();
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Config(format!("cannot serialize checkpoint: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Compatibility(format!("malformed checkpoint: {e}")))
    }
}

impl Damsdan {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = Checkpoint::capture(self).to_json()?;
        std::fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Checkpoint::from_json(&text)?.restore()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;

    fn model() -> Damsdan {
        let cfg = EncoderConfig::new(7, 3, 2, ArchConfig::default());
        let mut m = Damsdan::new(cfg, &mut Rng::new(21)).unwrap();
        m.bn.running_mean[3] = 0.1 + 0.2;
        m.bn.running_var[0] = 1.0 / 3.0;
        m.branches[1].prototypes = PrototypeBank::from_matrix(&Tensor::filled(3, 32, std::f64::consts::PI));
        m.fusion = FusionWeights::from_raw_mmd(vec![0.3, 0.7], 0.5, 4).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        m.save(&path).unwrap();
        let back = Damsdan::load(&path).unwrap();
        for (a, b) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        assert_eq!(Checkpoint::capture(&m), Checkpoint::capture(&back));
        let x = Tensor::from_vec(4, 7, (0..28).map(|i| (i as f64).sin()).collect()).unwrap();
        let (p, q) = (m.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert_eq!(p.data(), q.data());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ck = Checkpoint::capture(&model());
        ck.params[0].rows += 1;
        assert!(matches!(ck.restore(), Err(Error::Compatibility(_))));
        let mut ck = Checkpoint::capture(&model());
        ck.params[2].name = "bogus".into();
        assert!(matches!(ck.restore(), Err(Error::Compatibility(_))));
        let mut ck = Checkpoint::capture(&model());
        ck.format = "other".into();
        assert!(matches!(ck.restore(), Err(Error::Compatibility(_))));
    }
}
