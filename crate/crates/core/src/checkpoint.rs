//! Checkpoint files.
//!
//! Layout: the magic bytes `P2DCKPT1`, a little-endian `u64` header length,
//! the JSON header, then the live and EMA parameter vectors as little-endian
//! `f64`s (`param_count` each).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetDescriptor;
use crate::denoiser::{Architecture, Denoiser, DenoiserParams, DenoiserSpec};
use crate::error::{Error, Result};
use crate::schedule::{Schedule, ScheduleConfig};
use crate::weighting::WeightingConfig;

pub const MAGIC: &[u8; 8] = b"P2DCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub spec: DenoiserSpec,
    pub schedule: ScheduleConfig,
    pub weighting: WeightingConfig,
    pub data: DatasetDescriptor,
    pub seed: u64,
    pub step: u64,
    pub param_count: usize,
}

impl CheckpointHeader {
    pub fn new(
        spec: DenoiserSpec,
        schedule: ScheduleConfig,
        weighting: WeightingConfig,
        data: DatasetDescriptor,
        seed: u64,
        step: u64,
        param_count: usize,
    ) -> Self {
        Self {
            spec,
            schedule,
            weighting,
            data,
            seed,
            step,
            param_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
    pub ema: Vec<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.params.len() != self.header.param_count || self.ema.len() != self.header.param_count
        {
            return Err(Error::Checkpoint(format!(
                "header declares {} parameters but vectors hold {} and {}",
                self.header.param_count,
                self.params.len(),
                self.ema.len()
            )));
        }
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 16 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.params.iter().chain(&self.ema) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body_start = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body_start])?;
        let body = &bytes[body_start..];
        let expected = header
            .param_count
            .checked_mul(16)
            .ok_or_else(|| bad("parameter count overflows"))?;
        if body.len() != expected {
            return Err(Error::Checkpoint(format!(
                "header declares {} parameters ({} bytes of vectors) but file holds {} bytes",
                header.param_count,
                expected,
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let params: Vec<f64> = values.by_ref().take(header.param_count).collect();
        let ema: Vec<f64> = values.collect();
        Ok(Self {
            header,
            params,
            ema,
        })
    }

    pub fn schedule(&self) -> Result<Schedule> {
        self.header.schedule.build()
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let arch = Architecture::new(self.header.spec.clone(), self.header.schedule.num_timesteps)?;
        if arch.num_params() != self.header.param_count {
            return Err(Error::Checkpoint(format!(
                "model spec implies {} parameters, header says {}",
                arch.num_params(),
                self.header.param_count
            )));
        }
        Ok(arch)
    }

    pub fn ema_denoiser(&self) -> Result<Denoiser> {
        Denoiser::new(
            self.architecture()?,
            DenoiserParams::from_flat(self.ema.clone()),
        )
    }

    pub fn live_denoiser(&self) -> Result<Denoiser> {
        Denoiser::new(
            self.architecture()?,
            DenoiserParams::from_flat(self.params.clone()),
        )
    }
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Activation;

    fn sample() -> Checkpoint {
        let spec = DenoiserSpec {
            input_dim: 2,
            time_embed_dim: 4,
            hidden_dims: vec![3],
            activation: Activation::Relu,
        };
        let arch = Architecture::new(spec.clone(), 10).unwrap();
        let n = arch.num_params();
        Checkpoint {
            header: CheckpointHeader::new(
                spec,
                ScheduleConfig::linear(10),
                WeightingConfig::p2(1.0, 1.0),
                DatasetDescriptor::ring(8, 0.05),
                7,
                3,
                n,
            ),
            params: (0..n).map(|i| i as f64 * 0.1 - 1.0).collect(),
            ema: (0..n).map(|i| (i as f64).sin()).collect(),
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(back.ema_denoiser().is_ok());
    }

    #[test]
    fn rejects_length_mismatch() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
        let mut bytes = sample().to_bytes().unwrap();
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn rejects_spec_count_mismatch() {
        let mut c = sample();
        c.header.param_count += 1;
        c.params.push(0.0);
        c.ema.push(0.0);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert!(back.architecture().is_err());
    }
}
