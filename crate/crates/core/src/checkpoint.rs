//! Binary archives for network checkpoints and training-state snapshots.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! version line  (e.g. "purer-ckpt-v1\n")
//! header length, header bytes (key = value text)
//! array count
//! per array: name length, name bytes, ndim, dims..., values
//! ```
//!
//! Model checkpoints store values as `f32`; training-state snapshots use
//! `f64` so a resumed run continues bit-for-bit.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::{ArchSpec, NetworkParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "purer-ckpt-v1";
pub const STATE_VERSION: &str = "purer-state-v1";

const PARAM_PREFIX: &str = "param/";
const BUFFER_PREFIX: &str = "buffer/";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// A decoded archive.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub version: String,
    pub header: String,
    pub arrays: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} too large for archive")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_archive(archive: &Archive, precision: Precision) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(archive.version.as_bytes());
    out.push(b'\n');
    put_str(&mut out, &archive.header)?;
    put_u32(&mut out, archive.arrays.len())?;
    for (name, t) in &archive.arrays {
        put_str(&mut out, name)?;
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        match precision {
            Precision::F32 => {
                for &x in t.data() {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
            Precision::F64 => {
                for &x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated archive".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Format("non-UTF-8 string in archive".into()))
    }
}

pub fn decode_archive(bytes: &[u8], precision: Precision) -> Result<Archive> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing archive version line".into()))?;
    let version =
        String::from_utf8(bytes[..nl].to_vec()).map_err(|_| Error::Format("bad archive version line".into()))?;
    let mut r = Reader(Cursor::new(&bytes[nl + 1..]));
    let header = r.string()?;
    let count = r.u32()?;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match precision {
            Precision::F32 => r
                .bytes(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            Precision::F64 => r
                .bytes(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        arrays.push((name, Tensor::new(shape, data)));
    }
    if (r.0.position() as usize) != bytes.len() - nl - 1 {
        return Err(Error::Format("trailing bytes after archive".into()));
    }
    Ok(Archive {
        version,
        header,
        arrays,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn network_archive(net: &NetworkParams, version: &str) -> Archive {
    let mut arrays = Vec::new();
    for (k, v) in &net.params {
        arrays.push((format!("{PARAM_PREFIX}{k}"), v.clone()));
    }
    for (k, v) in &net.buffers {
        arrays.push((format!("{BUFFER_PREFIX}{k}"), v.clone()));
    }
    Archive {
        version: version.to_string(),
        header: net.spec.to_kv(),
        arrays,
    }
}

fn network_from_archive(archive: Archive) -> Result<NetworkParams> {
    let spec = ArchSpec::from_kv(&archive.header)?;
    let mut net = NetworkParams {
        spec,
        params: Default::default(),
        buffers: Default::default(),
    };
    for (name, t) in archive.arrays {
        if let Some(k) = name.strip_prefix(PARAM_PREFIX) {
            net.params.insert(k.to_string(), t);
        } else if let Some(k) = name.strip_prefix(BUFFER_PREFIX) {
            net.buffers.insert(k.to_string(), t);
        } else {
            return Err(Error::Format(format!("unexpected array `{name}` in checkpoint")));
        }
    }
    Ok(net)
}

/// Encodes a network as a `purer-ckpt-v1` checkpoint (`f32` values).
pub fn encode_checkpoint(net: &NetworkParams) -> Result<Vec<u8>> {
    encode_archive(&network_archive(net, CHECKPOINT_VERSION), Precision::F32)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkParams> {
    let archive = decode_archive(bytes, Precision::F32)?;
    if archive.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version `{}`",
            archive.version
        )));
    }
    network_from_archive(archive)
}

pub fn save_checkpoint(path: &Path, net: &NetworkParams) -> Result<()> {
    write_file(path, &encode_checkpoint(net)?)
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    decode_checkpoint(&read_file(path)?)
}

/// Full-precision network archive used inside training-state snapshots.
pub(crate) fn network_state_arrays(net: &NetworkParams, prefix: &str) -> Vec<(String, Tensor)> {
    network_archive(net, STATE_VERSION)
        .arrays
        .into_iter()
        .map(|(k, v)| (format!("{prefix}{k}"), v))
        .collect()
}

pub(crate) fn network_from_state_arrays(
    spec_kv: &str,
    arrays: &[(String, Tensor)],
    prefix: &str,
) -> Result<NetworkParams> {
    let picked = arrays
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
        .collect();
    network_from_archive(Archive {
        version: STATE_VERSION.into(),
        header: spec_kv.to_string(),
        arrays: picked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_network, ArchId};

    #[test]
    fn checkpoint_layout_starts_with_version() {
        let spec = ArchSpec::new(ArchId::Conv4, [1, 4, 4], 2).with_width(0.125);
        let net = build_network(&spec, 1).unwrap();
        let bytes = encode_checkpoint(&net).unwrap();
        assert!(bytes.starts_with(b"purer-ckpt-v1\n"));
    }

    #[test]
    fn rounded_network_round_trips_exactly() {
        let spec = ArchSpec::new(ArchId::Resnet8, [3, 8, 8], 3).with_width(0.25);
        let mut net = build_network(&spec, 2).unwrap();
        net.round_to_f32();
        let back = decode_checkpoint(&encode_checkpoint(&net).unwrap()).unwrap();
        assert_eq!(back, net);
        assert_eq!(encode_checkpoint(&back).unwrap(), encode_checkpoint(&net).unwrap());
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let spec = ArchSpec::new(ArchId::Conv4, [1, 4, 4], 2).with_width(0.125);
        let bytes = encode_checkpoint(&build_network(&spec, 1).unwrap()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[12] = b'9';
        assert!(decode_checkpoint(&wrong).is_err());
    }

    #[test]
    fn f64_archive_is_lossless() {
        let t = Tensor::new(vec![3], vec![0.1, 1.0 / 3.0, -2e-300]);
        let a = Archive {
            version: STATE_VERSION.into(),
            header: "k = v\n".into(),
            arrays: vec![("x".into(), t)],
        };
        let back = decode_archive(&encode_archive(&a, Precision::F64).unwrap(), Precision::F64).unwrap();
        assert_eq!(back, a);
    }
}
