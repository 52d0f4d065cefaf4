//! Checkpoint file: one JSON header line, then little-endian `f64` payload
//! (flattened parameters followed by the `k x d` stored centers).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Parameters};
use crate::error::{LvrError, Result};
use crate::lvr::CenterState;
use crate::matrix::Matrix;

const FORMAT: &str = "lvr-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    encoder: EncoderConfig,
    n_params: usize,
    centers: CenterHeader,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CenterHeader {
    n_classes: usize,
    dim: usize,
    omega: f64,
    initialized: Vec<bool>,
}

pub fn to_bytes(params: &Parameters, centers: &CenterState) -> Result<Vec<u8>> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        encoder: params.config().clone(),
        n_params: params.len(),
        centers: CenterHeader {
            n_classes: centers.n_classes(),
            dim: centers.dim(),
            omega: centers.omega(),
            initialized: centers.initialized().to_vec(),
        },
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for v in params.flatten().iter().chain(centers.centers().as_slice()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Parameters, CenterState)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| LvrError::Data("checkpoint: missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(LvrError::Data(format!(
            "checkpoint: unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let payload = &bytes[newline + 1..];
    let n_centers = header.centers.n_classes * header.centers.dim;
    let expected = (header.n_params + n_centers) * 8;
    if payload.len() != expected {
        return Err(LvrError::Dimension {
            context: "checkpoint payload bytes",
            expected,
            actual: payload.len(),
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let (param_values, center_values) = values.split_at(header.n_params);
    let params = Parameters::unflatten(&header.encoder, param_values)?;
    let centers = CenterState::from_parts(
        Matrix::from_vec(
            header.centers.n_classes,
            header.centers.dim,
            center_values.to_vec(),
        )?,
        header.centers.initialized,
        header.centers.omega,
    )?;
    Ok((params, centers))
}

pub fn save(path: &Path, params: &Parameters, centers: &CenterState) -> Result<()> {
    let bytes = to_bytes(params, centers)?;
    let mut f = fs::File::create(path).map_err(|e| LvrError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| LvrError::io(path, e))
}

pub fn load(path: &Path) -> Result<(Parameters, CenterState)> {
    let bytes = fs::read(path).map_err(|e| LvrError::io(path, e))?;
    from_bytes(&bytes)
}
