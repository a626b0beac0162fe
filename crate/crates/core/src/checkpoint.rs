//! JSON checkpoints of a trained [`ModelBundle`].
//!
//! ```json
//! {
//!   "format": "eqpool-checkpoint",
//!   "version": 1,
//!   "dims": { "d": 104, "n": 8, "hidden": 64, "activation": "relu" },
//!   "config": { ... training configuration ... },
//!   "tensors": { "encoder.0": { "shape": [104, 64], "data": [...] }, ... }
//! }
//! ```
//!
//! Tensor names are `<network>.<index>` where even indices are weights and
//! odd indices biases; the map is ordered by name so files are
//! byte-identical for identical models.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelBundle, ModelDims};
use crate::pipeline::TrainConfig;
use crate::tensor::Tensor;

pub const FORMAT: &str = "eqpool-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: ModelDims,
    pub config: TrainConfig,
    pub tensors: BTreeMap<String, NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &ModelBundle, config: &TrainConfig) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (name, net) in model.networks() {
            for (i, p) in net.params().iter().enumerate() {
                tensors.insert(
                    format!("{name}.{i}"),
                    NamedTensor {
                        shape: [p.rows(), p.cols()],
                        data: p.data().to_vec(),
                    },
                );
            }
        }
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            dims: model.dims,
            config: config.clone(),
            tensors,
        }
    }

    /// Rebuilds the model, checking every tensor against the architecture.
    pub fn to_model(&self) -> Result<ModelBundle> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint {} v{} (expected {FORMAT} v{VERSION})",
                self.format, self.version
            )));
        }
        let mut model = ModelBundle::build(self.dims, 0)?;
        let mut used = 0;
        let names: Vec<&str> = model.networks().iter().map(|(n, _)| *n).collect();
        for name in names {
            let net = match name {
                "encoder" => &mut model.encoder,
                "decoder" => &mut model.decoder,
                "tau" => &mut model.tau,
                "b" => &mut model.b,
                "psi" => &mut model.psi,
                _ => &mut model.head,
            };
            let mut params = Vec::new();
            for i in 0..net.params().len() {
                let key = format!("{name}.{i}");
                let t = self
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Schema(format!("checkpoint lacks tensor '{key}'")))?;
                params.push(Tensor::from_vec(t.shape[0], t.shape[1], t.data.clone())?);
                used += 1;
            }
            net.set_params(params)?;
        }
        if used != self.tensors.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} tensors, the architecture uses {used}",
                self.tensors.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
