//! `.fgs` model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"FGS1"  u32 version
//! u32 header length, header bytes (JSON: {"spec": ..., "meta": ...})
//! u32 array count
//! per array: u32 name length, name bytes, u64 value count, f32 values
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! Arrays are the parameters in layer order followed by batch-norm running
//! moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Network, TrainMeta};
use super::spec::ModelSpec;
use crate::error::{CheckpointError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FGS1";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "fgs";

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    meta: TrainMeta,
}

pub fn encode(net: &Network) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        spec: net.spec().clone(),
        meta: net.meta.clone(),
    })
    .expect("spec serializes");
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((header.len() as u32).to_le_bytes());
    out.extend(header);
    let names = net.param_specs().iter().chain(net.buffer_specs());
    let arrays = net.params.iter().chain(&net.buffers);
    out.extend((net.params.len() as u32 + net.buffers.len() as u32).to_le_bytes());
    for (spec, array) in names.zip(arrays) {
        out.extend((spec.name.len() as u32).to_le_bytes());
        out.extend(spec.name.as_bytes());
        out.extend((array.numel() as u64).to_le_bytes());
        for v in array.data() {
            out.extend(v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network, CheckpointError> {
    let mut r = Reader { bytes };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let len = r.u32("header length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len, "header")?).map_err(|e| CheckpointError::Spec(e.to_string()))?;
    let param_specs = header.spec.param_specs().map_err(|e| CheckpointError::Spec(e.to_string()))?;
    let buffer_specs = header.spec.buffer_specs().map_err(|e| CheckpointError::Spec(e.to_string()))?;
    let count = r.u32("array count")? as usize;
    let expected: Vec<_> = param_specs.iter().chain(&buffer_specs).collect();
    let mut arrays = Vec::with_capacity(expected.len());
    for i in 0..count {
        let name_len = r.u32("array name length")? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, "array name")?).into_owned();
        let Some(spec) = expected.get(i) else {
            return Err(CheckpointError::UnexpectedParameter(name));
        };
        if spec.name != name {
            return Err(if expected.iter().any(|s| s.name == name) {
                CheckpointError::MissingParameter(spec.name.clone())
            } else {
                CheckpointError::UnexpectedParameter(name)
            });
        }
        let n = r.u64("array length")? as usize;
        if n != spec.numel() {
            return Err(CheckpointError::LengthMismatch {
                name,
                expected: spec.numel(),
                found: n,
            });
        }
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated("array values"))?, "array values")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        arrays.push(Tensor::new(spec.shape.clone(), data).expect("length checked"));
    }
    if count < expected.len() {
        return Err(CheckpointError::MissingParameter(expected[count].name.clone()));
    }
    let body_len = bytes.len() - r.bytes.len();
    let stored = r.u32("checksum")?;
    if !r.bytes.is_empty() {
        return Err(CheckpointError::TrailingBytes {
            trailing: r.bytes.len(),
        });
    }
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let buffers = arrays.split_off(param_specs.len());
    Network::from_parts(header.spec, arrays, buffers, header.meta).map_err(|e| CheckpointError::Spec(e.to_string()))
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let io = |source| CheckpointError::Io {
        path: path.into(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, encode(net)).map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.into(),
        source,
    })?;
    Ok(decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabelSet;
    use crate::modelzoo::{build_cnn, build_gan, GanShape};

    fn cnn() -> Network {
        let mut net = Network::init(build_cnn([16, 16, 3], LabelSet::Hr1).unwrap(), 3).unwrap();
        net.meta = TrainMeta {
            seed: 3,
            epochs: 2,
            final_loss: Some(0.25),
        };
        net
    }

    #[test]
    fn round_trip_is_bitwise() {
        let net = cnn();
        let back = decode(&encode(&net)).unwrap();
        assert_eq!(back, net);
        let (g, _) = build_gan([8, 8, 3], &GanShape::default()).unwrap();
        let mut gen = Network::init(g, 5).unwrap();
        gen.buffers[0].data_mut()[0] = 0.123;
        assert_eq!(decode(&encode(&gen)).unwrap(), gen);
    }

    #[test]
    fn corruption_yields_typed_errors() {
        let bytes = encode(&cnn());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(CheckpointError::UnsupportedVersion { found: 9, .. })));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        assert!(matches!(decode(&bytes[..6]), Err(CheckpointError::Truncated(_))));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode(&bad), Err(CheckpointError::TrailingBytes { trailing: 1 })));
        let mut bad = bytes.clone();
        bad[12] = b'!';
        assert!(matches!(decode(&bad), Err(CheckpointError::Spec(_))));
    }

    #[test]
    fn flipped_value_bits_fail_the_checksum() {
        let bytes = encode(&cnn());
        for at in [bytes.len() - 5, bytes.len() / 2 + 40] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x01;
            assert!(matches!(decode(&bad), Err(CheckpointError::ChecksumMismatch { .. })), "byte {at}");
        }
    }

    #[test]
    fn length_prefix_mismatch_is_reported() {
        let net = cnn();
        let bytes = encode(&net);
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let first = 12 + header_len + 4;
        let name_len = u32::from_le_bytes(bytes[first..first + 4].try_into().unwrap()) as usize;
        let len_at = first + 4 + name_len;
        let mut bad = bytes.clone();
        bad[len_at..len_at + 8].copy_from_slice(&7u64.to_le_bytes());
        assert!(matches!(decode(&bad), Err(CheckpointError::LengthMismatch { found: 7, .. })));
    }
}
