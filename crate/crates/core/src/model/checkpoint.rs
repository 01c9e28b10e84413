//! Binary parameter container.
//!
//! Layout: the magic line `TATACKPT\n`, a little-endian `u64` header length,
//! a UTF-8 JSON [`Header`], then every parameter as little-endian `f64` in
//! manifest order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::{Module, Tensor};

const MAGIC: &[u8] = b"TATACKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    /// `"encoder"` or a model kind name.
    pub kind: String,
    /// Kind-specific configuration (configs, vocabularies).
    pub meta: serde_json::Value,
    pub manifest: Vec<Entry>,
    /// Total number of values in the payload.
    pub total: usize,
}

/// Serializes `module` with its manifest.
pub fn to_bytes<M: Module + ?Sized>(kind: &str, meta: serde_json::Value, module: &M) -> Result<Vec<u8>> {
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    module.visit_params("", &mut |name, p| {
        let v = p.value();
        manifest.push(Entry {
            name: name.to_string(),
            shape: v.shape().to_vec(),
            offset,
        });
        offset += v.len();
        for x in v.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    });
    let header = Header {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta,
        manifest,
        total: offset,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save<M: Module + ?Sized>(path: &Path, kind: &str, meta: serde_json::Value, module: &M) -> Result<()> {
    write_atomic(path, &to_bytes(kind, meta, module)?)
}

/// Parsed container: header plus named tensors.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub header: Header,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn from_bytes(bytes: &[u8]) -> Result<Loaded> {
    let fail = |m: &str| Error::Checkpoint(m.to_string());
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| fail("not a checkpoint file"))?;
    if rest.len() < 8 {
        return Err(fail("truncated header"));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&rest[..len])?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {}, expected {FORMAT_VERSION}",
            header.version
        )));
    }
    let payload = &rest[len..];
    let mut offset = 0;
    for e in &header.manifest {
        if e.offset != offset {
            return Err(Error::Checkpoint(format!("manifest offset mismatch at {}", e.name)));
        }
        offset += e.shape.iter().product::<usize>();
    }
    if offset != header.total || payload.len() != header.total * 8 {
        return Err(Error::Checkpoint(format!(
            "payload length mismatch: manifest needs {} values, header says {}, payload has {} bytes",
            offset,
            header.total,
            payload.len()
        )));
    }
    let tensors = header
        .manifest
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let data = payload[e.offset * 8..(e.offset + n) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Loaded { header, tensors })
}

pub fn load(path: &Path) -> Result<Loaded> {
    from_bytes(&fs::read(path)?)
}

/// Copies named tensors into `module`; names and shapes must match exactly.
pub fn restore<M: Module + ?Sized>(module: &mut M, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let mut by_name: HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut problem = None;
    module.visit_params_mut("", &mut |name, p| {
        if problem.is_some() {
            return;
        }
        match by_name.remove(name) {
            Some(t) if t.shape() == p.value().shape() => *p.value_mut() = t,
            Some(t) => {
                problem = Some(format!(
                    "shape mismatch for {name}: file {:?}, model {:?}",
                    t.shape(),
                    p.value().shape()
                ))
            }
            None => problem = Some(format!("missing parameter {name}")),
        }
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(seed: u64) -> Linear {
        Linear::new(3, 2, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn round_trip_is_bitwise() {
        let a = layer(1);
        let bytes = to_bytes("test", serde_json::json!({"x": 1}), &a).unwrap();
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(loaded.header.kind, "test");
        assert_eq!(loaded.header.total, 8);
        let mut b = layer(2);
        restore(&mut b, loaded.tensors).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let bytes = to_bytes("test", serde_json::Value::Null, &layer(1)).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 8]).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");

        let loaded = from_bytes(&bytes).unwrap();
        let mut h = loaded.header.clone();
        h.version = 99;
        let json = serde_json::to_vec(&h).unwrap();
        let payload = &bytes[bytes.len() - 64..];
        let mut forged = MAGIC.to_vec();
        forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(payload);
        let err = from_bytes(&forged).unwrap_err();
        assert!(err.to_string().contains("version mismatch"), "{err}");
        assert!(from_bytes(b"garbage").is_err());
    }

    #[test]
    fn restore_checks_shapes() {
        let bytes = to_bytes("test", serde_json::Value::Null, &layer(1)).unwrap();
        let mut other = Linear::new(2, 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(restore(&mut other, from_bytes(&bytes).unwrap().tensors).is_err());
    }
}
