//! Binary weight container.
//!
//! Layout (little-endian): magic `PSTW`, `u32` schema version, 32-byte spec
//! fingerprint, `u32` tensor count, then per tensor: `u16` name length, UTF-8
//! name, `u8` dtype (0 = f32, 1 = f64), `u8` rank, `u32` per dimension, raw
//! element data. A trailing CRC-32 covers every preceding byte.

use std::path::Path;

use super::model::{LayerParams, ModelSpec, ModelWeights};
use super::tensor::{DType, Scalar, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"PSTW";
const VERSION: u32 = 1;

pub fn encode_weights<T: Scalar>(weights: &ModelWeights<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&weights.fingerprint);
    let named: Vec<(String, &Tensor<T>)> = weights
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.as_ref().map(|p| (i, p)))
        .flat_map(|(i, p)| [(format!("layer{i}.weight"), &p.weight), (format!("layer{i}.bias"), &p.bias)])
        .collect();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Weights("truncated weight file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a weight container and checks it against `spec`.
pub fn decode_weights<T: Scalar>(bytes: &[u8], spec: &ModelSpec) -> Result<ModelWeights<T>> {
    if bytes.len() < 4 + 4 + 32 + 4 + 4 || &bytes[..4] != MAGIC {
        return Err(Error::Weights("not a weight file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Weights("checksum mismatch: file is corrupt".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Weights(format!("unsupported weight file version {version}")));
    }
    let fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
    if fingerprint != spec.fingerprint() {
        return Err(Error::FingerprintMismatch);
    }

    let mut weights = ModelWeights::<T>::zeros(spec)?;
    let expected = weights.tensors().count();
    let count = r.u32()? as usize;
    if count != expected {
        return Err(Error::Weights(format!("file holds {count} tensors, model needs {expected}")));
    }
    let elem = match T::DTYPE {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Weights("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != T::DTYPE as u8 {
            return Err(Error::Weights(format!("tensor {name} has dtype {dtype}, expected {}", T::DTYPE as u8)));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let target = tensor_by_name(&mut weights, &name)?;
        if target.shape() != shape.as_slice() {
            return Err(Error::Weights(format!(
                "tensor {name} has shape {shape:?}, model needs {:?}",
                target.shape()
            )));
        }
        let raw = r.take(target.len() * elem)?;
        for (v, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(elem)) {
            *v = T::read_le(chunk);
        }
    }
    if r.pos != body.len() {
        return Err(Error::Weights("trailing bytes after tensors".into()));
    }
    Ok(weights)
}

fn tensor_by_name<'a, T>(weights: &'a mut ModelWeights<T>, name: &str) -> Result<&'a mut Tensor<T>> {
    let bad = || Error::Weights(format!("unexpected tensor {name}"));
    let rest = name.strip_prefix("layer").ok_or_else(bad)?;
    let (index, kind) = rest.split_once('.').ok_or_else(bad)?;
    let index: usize = index.parse().map_err(|_| bad())?;
    let params: &mut LayerParams<T> = weights
        .layers
        .get_mut(index)
        .and_then(|l| l.as_mut())
        .ok_or_else(bad)?;
    match kind {
        "weight" => Ok(&mut params.weight),
        "bias" => Ok(&mut params.bias),
        _ => Err(bad()),
    }
}

pub fn save_weights<T: Scalar>(weights: &ModelWeights<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(weights)).map_err(|e| Error::file(path, e))
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<ModelWeights<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_weights(&bytes, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    #[test]
    fn save_load_is_bitwise_lossless() {
        let spec = ModelSpec::default();
        let weights = ModelWeights::<f32>::init_he_uniform(&spec, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&weights, &path).unwrap();
        let loaded: ModelWeights<f32> = load_weights(&path, &spec).unwrap();
        assert_eq!(loaded, weights);
        for (a, b) in loaded.tensors().zip(weights.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn altered_spec_is_refused() {
        let spec = ModelSpec::default();
        let bytes = encode_weights(&ModelWeights::<f32>::zeros(&spec).unwrap());
        let mut other = spec.clone();
        other.layers[1] = LayerSpec::Dropout { rate: 0.3 };
        assert!(matches!(decode_weights::<f32>(&bytes, &other), Err(Error::FingerprintMismatch)));
    }

    #[test]
    fn flipped_byte_is_detected() {
        let spec = ModelSpec::default();
        let mut bytes = encode_weights(&ModelWeights::<f32>::init_he_uniform(&spec, 1).unwrap());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        let err = decode_weights::<f32>(&bytes, &spec).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        // corrupting the checksum itself is caught too
        let mut bytes = encode_weights(&ModelWeights::<f32>::zeros(&spec).unwrap());
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(decode_weights::<f32>(&bytes, &spec).is_err());
    }

    #[test]
    fn dtype_mismatch_is_refused() {
        let spec = ModelSpec::default();
        let bytes = encode_weights(&ModelWeights::<f64>::zeros(&spec).unwrap());
        assert!(decode_weights::<f32>(&bytes, &spec).is_err());
        assert!(decode_weights::<f64>(&bytes, &spec).is_ok());
    }
}
