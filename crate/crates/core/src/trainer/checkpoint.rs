//! Checkpoint container.
//!
//! ```text
//! "GCKP" | version u32 | header_len u64 | header (JSON) | count u64 | count × f64 | CRC-32 u32
//! ```
//!
//! All integers and floats little-endian. The CRC covers every byte before it. The f64 payload
//! holds, in order: concept embeddings (`d × n`, row-major), Fourier frequencies per scale,
//! the flat trainable parameters, then Adam `m` and `v`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::model::{ModelConfig, ModelParams, ModelState};
use super::TrainConfig;
use crate::concepts::ConceptSet;
use crate::encoder::LocationEncoderParams;
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::numkernel::Matrix;
use crate::params::ParamTensors;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    concept_names: Vec<String>,
    concept_selected: Vec<usize>,
    embed_dim: usize,
    step: u64,
    sections: Vec<Section>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Section {
    name: String,
    len: usize,
}

fn sections(state: &ModelState) -> Vec<Section> {
    let n = state.params.param_count();
    let mut out = vec![Section {
        name: "concept_embeddings".into(),
        len: state.concepts.embeddings().len(),
    }];
    for (i, f) in state.params.location.frequencies().iter().enumerate() {
        out.push(Section {
            name: format!("frequencies.{i}"),
            len: f.len(),
        });
    }
    for name in ["params", "adam.m", "adam.v"] {
        out.push(Section {
            name: name.into(),
            len: n,
        });
    }
    out
}

pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let header = Header {
        model_config: state.model_config.clone(),
        train_config: state.train_config.clone(),
        concept_names: state.concepts.names().to_vec(),
        concept_selected: state.concepts.selected().to_vec(),
        embed_dim: state.concepts.dim(),
        step: state.adam.t,
        sections: sections(state),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut payload: Vec<f64> = state.concepts.embeddings().data().to_vec();
    for f in state.params.location.frequencies() {
        payload.extend_from_slice(f.data());
    }
    payload.extend(state.params.flatten());
    payload.extend_from_slice(&state.adam.m);
    payload.extend_from_slice(&state.adam.v);

    let mut out = Vec::with_capacity(24 + header_bytes.len() + 8 * payload.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelState> {
    let corrupt = |msg: &str| Error::data(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: 8,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    if bytes.len() < 8 + 8 + 8 + 4 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: 28,
            found: bytes.len() as u64,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.into(),
            stored,
            computed,
        });
    }

    let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e + 8 <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&body[16..header_end]).map_err(|e| corrupt(&format!("header: {e}")))?;
    let count = u64::from_le_bytes(body[header_end..header_end + 8].try_into().unwrap()) as usize;
    let values = &body[header_end + 8..];
    if values.len() != count.checked_mul(8).ok_or_else(|| corrupt("payload size overflow"))? {
        return Err(corrupt("payload length does not match its count"));
    }
    let payload: Vec<f64> = values
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let d = header.embed_dim;
    let n = header.concept_names.len();
    let k = header.concept_selected.len();
    let mut params = ModelParams::init(
        &header.model_config,
        d,
        k,
        header.train_config.loss.temperature_init,
        header.train_config.seed,
    )?;
    let template = ModelState {
        model_config: header.model_config.clone(),
        train_config: header.train_config.clone(),
        concepts: ConceptSet::new(
            header.concept_names.clone(),
            unit_columns(d, n),
            Some(header.concept_selected.clone()),
        )?,
        params: params.clone(),
        adam: AdamState::new(params.param_count()),
    };
    if sections(&template) != header.sections {
        return Err(corrupt("tensor directory does not match the recorded configuration"));
    }
    if payload.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite value in payload"));
    }

    let mut offset = 0;
    let mut take = |len: usize| {
        let s = &payload[offset..offset + len];
        offset += len;
        s.to_vec()
    };
    let embeddings = Matrix::new(d, n, take(d * n))?;
    let freqs = params
        .location
        .frequencies()
        .iter()
        .map(|f| Matrix::new(f.rows(), f.cols(), take(f.len())))
        .collect::<Result<Vec<_>>>()?;
    let p = params.param_count();
    params.assign_flat(&take(p));
    params.location = LocationEncoderParams::from_parts(
        freqs,
        params.location.scales().to_vec(),
        params.location.mlps().to_vec(),
    )?;
    let adam = AdamState {
        m: take(p),
        v: take(p),
        t: header.step,
    };
    let concepts = ConceptSet::restore(header.concept_names, embeddings, header.concept_selected)?;
    Ok(ModelState {
        model_config: header.model_config,
        train_config: header.train_config,
        concepts,
        params,
        adam,
    })
}

/// Placeholder columns with unit norm, used only to validate the directory layout.
fn unit_columns(d: usize, n: usize) -> Matrix {
    let mut m = Matrix::zeros(d, n);
    for c in 0..n {
        m.set(0, c, 1.0);
    }
    m
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
