//! Checkpoint file: `GROKCKPT1\n`, one JSON manifest line, a blank line, then
//! little-endian tensor payloads in manifest order.
//!
//! The manifest maps tensor name to `{shape, dtype, offset, length}`; offsets
//! are bytes from the start of the payload section. Names are sorted, and the
//! payload follows the same order.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, Params};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8] = b"GROKCKPT1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

pub type Manifest = BTreeMap<String, ManifestEntry>;

pub fn encode<T: Scalar>(params: &Params<T>) -> Vec<u8> {
    let named: BTreeMap<String, &Tensor<T>> = params.named().into_iter().collect();
    let mut manifest = Manifest::new();
    let mut payload = Vec::new();
    for (name, t) in &named {
        let offset = payload.len();
        for v in t.data() {
            v.write_le(&mut payload);
        }
        manifest.insert(
            name.clone(),
            ManifestEntry {
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
                offset,
                length: payload.len() - offset,
            },
        );
    }
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(serde_json::to_string(&manifest).expect("manifest serializes").as_bytes());
    out.extend_from_slice(b"\n\n");
    out.extend_from_slice(&payload);
    out
}

fn read_values<T: Scalar, U: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(U::BYTES)
        .map(|c| T::from_f64(U::read_le(c).as_f64()))
        .collect()
}

/// Parses a checkpoint. Payloads stored at another precision are converted.
pub fn decode<T: Scalar, R: Read>(config: &ModelConfig, reader: R) -> Result<Params<T>, CheckpointError> {
    let mut reader = BufReader::new(reader);
    let mut magic = vec![0u8; MAGIC.len()];
    reader.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::Format("bad magic bytes".into()));
    }
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let manifest: Manifest = serde_json::from_str(line.trim_end_matches('\n'))
        .map_err(|e| CheckpointError::Format(format!("manifest: {e}")))?;
    let mut blank = String::new();
    reader.read_line(&mut blank)?;
    if blank != "\n" {
        return Err(CheckpointError::Format("missing blank line after manifest".into()));
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;

    let mut tensors = BTreeMap::new();
    for (name, e) in manifest {
        let end = e.offset.checked_add(e.length).filter(|&end| end <= payload.len());
        let Some(end) = end else {
            return Err(CheckpointError::Format(format!("{name}: payload out of bounds")));
        };
        let bytes = &payload[e.offset..end];
        let (width, values) = match e.dtype.as_str() {
            "f32" => (4, read_values::<T, f32>(bytes)),
            "f64" => (8, read_values::<T, f64>(bytes)),
            other => return Err(CheckpointError::Format(format!("{name}: unknown dtype {other}"))),
        };
        if e.length % width != 0 {
            return Err(CheckpointError::Format(format!("{name}: ragged payload")));
        }
        let t = Tensor::new(e.shape.clone(), values)
            .map_err(|err| CheckpointError::Format(format!("{name}: {err}")))?;
        tensors.insert(name, t);
    }
    Ok(Params::from_named(config, tensors)?)
}

pub fn save<T: Scalar>(path: &Path, params: &Params<T>) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(params))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path, config: &ModelConfig) -> Result<Params<T>, CheckpointError> {
    decode(config, std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn header_layout() {
        let c = ModelConfig::spherical(6);
        let p = init_params::<f32>(&c).unwrap();
        let bytes = encode(&p);
        assert!(bytes.starts_with(MAGIC));
        let rest = &bytes[MAGIC.len()..];
        let nl = rest.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(rest[nl + 1], b'\n');
        let manifest: Manifest = serde_json::from_slice(&rest[..nl]).unwrap();
        let e = &manifest["token_embed"];
        assert_eq!(e.shape, vec![6, 128]);
        assert_eq!(e.dtype, "f32");
        assert_eq!(e.length, 6 * 128 * 4);
        let payload_len: usize = manifest.values().map(|e| e.length).sum();
        assert_eq!(rest.len() - nl - 2, payload_len);
    }

    #[test]
    fn rejects_corruption() {
        let c = ModelConfig::standard(6);
        let p = init_params::<f32>(&c).unwrap();
        let mut bytes = encode(&p);
        bytes[0] = b'X';
        assert!(matches!(decode::<f32, _>(&c, &bytes[..]), Err(CheckpointError::Format(_))));
        let bytes = encode(&p);
        let truncated = &bytes[..bytes.len() - 4];
        assert!(decode::<f32, _>(&c, truncated).is_err());
        // wrong architecture
        let other = ModelConfig::spherical(6);
        assert!(matches!(decode::<f32, _>(&other, &bytes[..]), Err(CheckpointError::Model(_))));
    }

    #[test]
    fn precision_conversion() {
        let c = ModelConfig::standard(6);
        let p = init_params::<f32>(&c).unwrap();
        let wide: Params<f64> = decode(&c, &encode(&p)[..]).unwrap();
        assert_eq!(wide.cast::<f32>(), p);
    }
}
