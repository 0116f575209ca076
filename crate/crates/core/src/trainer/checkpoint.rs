//! JSON checkpoint of every trained tensor.
//!
//! Values are stored as `f64` (exact for both precisions) and written with
//! shortest round-trip formatting, so a 64-bit save/load is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::amortization::{Dense, LatentParamTable, MlpParams};
use crate::data::write_atomic;
use crate::error::{GpError, Result};
use crate::kernel::KernelParams;
use crate::matrix::Mat;
use crate::optim::ModelParams;
use crate::real::Real;

pub const CHECKPOINT_FORMAT: &str = "sasgp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    /// Run configuration in the flat text format.
    pub config: String,
    pub tensors: Vec<Tensor>,
}

fn mat_tensor<T: Real>(name: String, m: &Mat<T>) -> Tensor {
    Tensor { name, shape: vec![m.rows(), m.cols()], data: m.as_slice().iter().map(|v| v.f64()).collect() }
}

fn vec_tensor<T: Real>(name: String, v: &[T]) -> Tensor {
    Tensor { name, shape: vec![v.len()], data: v.iter().map(|v| v.f64()).collect() }
}

impl Checkpoint {
    pub fn from_params<T: Real>(params: &ModelParams<T>, seed: u64, config: String) -> Self {
        let mut tensors = vec![vec_tensor("kernel".into(), &params.kernel.raw)];
        for (name, net) in [("mean_net", &params.mean_net), ("var_net", &params.var_net)] {
            if let Some(net) = net {
                for (k, l) in net.layers.iter().enumerate() {
                    tensors.push(mat_tensor(format!("{name}.{k}.w"), &l.w));
                    tensors.push(vec_tensor(format!("{name}.{k}.b"), &l.b));
                }
            }
        }
        if let Some(t) = &params.latents {
            tensors.push(mat_tensor("latents.z".into(), &t.z));
            if let Some(lv) = &t.log_var {
                tensors.push(mat_tensor("latents.log_var".into(), lv));
            }
        }
        Self { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, seed, config, tensors }
    }

    fn take(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn mat(&self, name: &str) -> Result<Option<Mat<f64>>> {
        match self.take(name) {
            None => Ok(None),
            Some(t) if t.shape.len() == 2 => Mat::try_from_vec(t.shape[0], t.shape[1], t.data.clone()).map(Some),
            Some(t) => Err(GpError::Checkpoint(format!("tensor `{name}` has shape {:?}, expected a matrix", t.shape))),
        }
    }

    fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.take(name).ok_or_else(|| GpError::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape != [t.data.len()] {
            return Err(GpError::Checkpoint(format!("tensor `{name}` has shape {:?}", t.shape)));
        }
        Ok(t.data.clone())
    }

    fn net(&self, name: &str) -> Result<Option<MlpParams<f64>>> {
        let mut layers = Vec::with_capacity(3);
        for k in 0..3 {
            match self.mat(&format!("{name}.{k}.w"))? {
                Some(w) => layers.push(Dense { w, b: self.vector(&format!("{name}.{k}.b"))? }),
                None if k == 0 => return Ok(None),
                None => return Err(GpError::Checkpoint(format!("`{name}` is missing layer {k}"))),
            }
        }
        let layers: [Dense<f64>; 3] = layers.try_into().expect("three layers");
        let net = MlpParams { layers };
        net.validate().map_err(|e| GpError::Checkpoint(e.to_string()))?;
        Ok(Some(net))
    }

    pub fn to_params(&self) -> Result<ModelParams<f64>> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(GpError::Checkpoint(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        let k = self.vector("kernel")?;
        let raw: [f64; 3] = k.try_into().map_err(|_| GpError::Checkpoint("kernel tensor must hold 3 values".into()))?;
        let latents = match self.mat("latents.z")? {
            Some(z) => Some(LatentParamTable { z, log_var: self.mat("latents.log_var")? }),
            None => None,
        };
        let params = ModelParams {
            kernel: KernelParams { raw },
            mean_net: self.net("mean_net")?,
            var_net: self.net("var_net")?,
            latents,
        };
        if !params.is_finite() {
            return Err(GpError::Checkpoint("checkpoint holds non-finite values".into()));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| GpError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| GpError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
