//! Versioned JSON checkpoints. Tensor data is base64 of little-endian f64.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vae::{Dims, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl EncodedTensor {
    pub fn encode(t: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(8 * t.numel());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::invalid(format!("bad tensor encoding: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::invalid("tensor byte length is not a multiple of 8"));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub m: BTreeMap<String, EncodedTensor>,
    pub v: BTreeMap<String, EncodedTensor>,
}

/// One training phase in a checkpoint's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub mode: String,
    pub seed: u64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dims: Dims,
    pub decoder_uses_teacher: bool,
    pub tensors: BTreeMap<String, EncodedTensor>,
    pub optimizer_state: Option<OptimizerState>,
    pub rng_state: Option<Rng>,
    pub step: u64,
    pub mode_lineage: Vec<LineageEntry>,
}

impl Checkpoint {
    pub fn new(
        params: &ModelParams,
        opt: Option<&AdamState>,
        rng: Option<&Rng>,
        step: u64,
        mode_lineage: Vec<LineageEntry>,
    ) -> Self {
        let names = params.names();
        let tensors = names
            .iter()
            .cloned()
            .zip(params.tensors().into_iter().map(EncodedTensor::encode))
            .collect();
        let optimizer_state = opt.map(|o| OptimizerState {
            t: o.t,
            m: names.iter().cloned().zip(o.m.iter().map(EncodedTensor::encode)).collect(),
            v: names.iter().cloned().zip(o.v.iter().map(EncodedTensor::encode)).collect(),
        });
        Self {
            version: CHECKPOINT_VERSION,
            dims: params.dims,
            decoder_uses_teacher: params.decoder_uses_teacher,
            tensors,
            optimizer_state,
            rng_state: rng.cloned(),
            step,
            mode_lineage,
        }
    }

    fn ordered(&self, map: &BTreeMap<String, EncodedTensor>, names: &[String]) -> Result<Vec<Tensor>> {
        if map.len() != names.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, expected {}",
                map.len(),
                names.len()
            )));
        }
        names
            .iter()
            .map(|n| {
                map.get(n)
                    .ok_or_else(|| Error::invalid(format!("checkpoint is missing tensor {n}")))?
                    .decode()
            })
            .collect()
    }

    pub fn params(&self) -> Result<ModelParams> {
        let mut p = ModelParams::zeros(self.dims, self.decoder_uses_teacher)?;
        let names = p.names();
        let ts = self.ordered(&self.tensors, &names)?;
        p.assign_from(&ts)?;
        p.validate()?;
        Ok(p)
    }

    pub fn optimizer(&self) -> Result<Option<AdamState>> {
        let Some(o) = &self.optimizer_state else {
            return Ok(None);
        };
        let names = ModelParams::zeros(self.dims, self.decoder_uses_teacher)?.names();
        Ok(Some(AdamState {
            t: o.t,
            m: self.ordered(&o.m, &names)?,
            v: self.ordered(&o.v, &names)?,
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        ck.params()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dims {
        Dims {
            input: 3,
            latent: 2,
            classes: 3,
            hidden: 4,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = ModelParams::init(dims(), true, 11).unwrap();
        let mut opt = AdamState::new(&p.to_vec());
        opt.t = 7;
        opt.m[0].data_mut()[0] = -1.0 / 3.0;
        let mut rng = Rng::new(2);
        rng.normal();
        let lineage = vec![LineageEntry {
            mode: "noalign".into(),
            seed: 2,
            steps: 10,
        }];
        let ck = Checkpoint::new(&p, Some(&opt), Some(&rng), 10, lineage);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params().unwrap(), p);
        let o = back.optimizer().unwrap().unwrap();
        assert_eq!((o.t, &o.m, &o.v), (opt.t, &opt.m, &opt.v));
        let mut r2 = back.rng_state.unwrap();
        assert_eq!(r2.normal().to_bits(), rng.clone().normal().to_bits());
    }

    #[test]
    fn special_values_survive() {
        let t = Tensor::matrix(1, 4, vec![f64::NAN, -0.0, f64::MIN_POSITIVE, 1e308]).unwrap();
        let back = EncodedTensor::encode(&t).decode().unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn rejects_missing_or_misshaped() {
        let p = ModelParams::init(dims(), false, 1).unwrap();
        let mut ck = Checkpoint::new(&p, None, None, 0, vec![]);
        ck.tensors.remove("raw_head.0.w");
        assert!(ck.params().is_err());
        let mut ck = Checkpoint::new(&p, None, None, 0, vec![]);
        let bad = EncodedTensor::encode(&Tensor::zeros(&[3, 4]));
        ck.tensors.insert("raw_head.0.w".into(), bad);
        assert!(ck.params().is_err());
    }
}
