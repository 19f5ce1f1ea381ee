//! Checkpoints: one JSON document holding named parameter arrays, the model
//! spec, the stored class priors and a free-form training config snapshot.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn, NdFloat};
use serde::{Deserialize, Serialize};

use super::layers::cast;
use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::objectives::PriorTable;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub spec: ModelSpec,
    pub tensors: BTreeMap<String, StoredTensor>,
    #[serde(default)]
    pub priors: Option<PriorTable>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model<F: NdFloat>(model: &Model<F>, priors: Option<&PriorTable>, config: serde_json::Value) -> Self {
        let tensors = model
            .tensors()
            .into_iter()
            .map(|(name, t)| {
                let stored = StoredTensor {
                    shape: t.shape().to_vec(),
                    data: t.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
                };
                (name, stored)
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT,
            spec: model.spec.clone(),
            tensors,
            priors: priors.cloned(),
            config,
        }
    }

    /// Rebuild the model; every tensor must be present with the right shape.
    pub fn to_model<F: NdFloat>(&self) -> Result<Model<F>> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::param(format!("unsupported checkpoint format {}", self.format)));
        }
        // shapes come from the spec; the rng only fills values we overwrite
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model = Model::<F>::new(self.spec.clone(), &mut rng)?;
        let expected = model.tensors().len();
        if expected != self.tensors.len() {
            return Err(Error::param(format!(
                "checkpoint has {} tensors, model needs {expected}",
                self.tensors.len()
            )));
        }
        for (name, mut t) in model.tensors_mut() {
            let stored = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::param(format!("checkpoint is missing tensor `{name}`")))?;
            if stored.shape != t.shape() {
                return Err(Error::param(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    stored.shape,
                    t.shape()
                )));
            }
            let arr = ArrayD::from_shape_vec(
                IxDyn(&stored.shape),
                stored.data.iter().map(|&v| cast::<F>(v)).collect(),
            )
            .map_err(|e| Error::param(format!("tensor `{name}`: {e}")))?;
            t.assign(&arr);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder_decoder::{EncoderArch, InputShape};
    use crate::objectives::standard_priors;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_round_trip() {
        let spec = ModelSpec {
            arch: EncoderArch::default(),
            input: InputShape {
                channels: 2,
                height: 8,
                width: 8,
            },
            latent_dim: 4,
            num_classes: 2,
            p_max: 1.0,
        };
        let model = Model::<f64>::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let priors = standard_priors(2, 4);
        let ck = Checkpoint::from_model(&model, Some(&priors), serde_json::json!({"seed": 3}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model::<f64>().unwrap(), model);
    }

    #[test]
    fn missing_tensor_is_reported() {
        let spec = ModelSpec {
            arch: EncoderArch::Mlp {
                hidden: vec![3],
                pool: 1,
            },
            input: InputShape {
                channels: 1,
                height: 2,
                width: 2,
            },
            latent_dim: 2,
            num_classes: 2,
            p_max: 1.0,
        };
        let model = Model::<f32>::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut ck = Checkpoint::from_model(&model, None, serde_json::Value::Null);
        let t = ck.tensors.remove("head.bias").unwrap();
        ck.tensors.insert("head.bogus".into(), t);
        let err = ck.to_model::<f32>().unwrap_err().to_string();
        assert!(err.contains("head.bias"), "{err}");
    }
}
