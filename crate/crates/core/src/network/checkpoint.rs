use std::path::Path;

use super::model::Network;
use super::spec::NetworkSpec;
use super::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"STRNCKPT";
const VERSION: u32 = 1;

/// Layout: magic, version, spec hash, spec JSON (length-prefixed), tensor
/// count, then per tensor its rank, dims and `f32` data. All integers are
/// `u32` little-endian.
pub fn write_checkpoint(net: &Network<f32>) -> Vec<u8> {
    let spec = net.spec();
    let json = serde_json::to_vec(spec).expect("spec serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&spec.hash());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Network<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hash = r.take(32)?.to_vec();
    let len = r.u32()?;
    let spec: NetworkSpec = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("spec: {e}")))?;
    if spec.hash()[..] != hash[..] {
        return Err(Error::Checkpoint("spec hash mismatch".into()));
    }
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Network::from_params(spec, params).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(path: &Path, net: &Network<f32>) -> Result<()> {
    std::fs::write(path, write_checkpoint(net)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; with `expected`, also requires the stored spec to be
/// identical to it.
pub fn load_checkpoint(path: &Path, expected: Option<&NetworkSpec>) -> Result<Network<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let net = read_checkpoint(&bytes)?;
    if let Some(spec) = expected {
        if spec.hash() != net.spec().hash() {
            return Err(Error::Checkpoint(format!(
                "{} holds a different architecture",
                path.display()
            )));
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::InputShape;

    fn net() -> Network<f32> {
        Network::new(NetworkSpec::thermal(InputShape::new(8, 8, 1)).unwrap(), 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let a = net();
        let bytes = write_checkpoint(&a);
        assert_eq!(&bytes[..8], b"STRNCKPT");
        assert_eq!(read_checkpoint(&bytes).unwrap(), a);
    }

    #[test]
    fn corruption_detected() {
        let bytes = write_checkpoint(&net());
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad).is_err());
        let mut bad = bytes.clone();
        bad[12] ^= 1; // inside the hash
        assert!(read_checkpoint(&bad).is_err());
    }

    #[test]
    fn spec_mismatch_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &net()).unwrap();
        let other = NetworkSpec::rgb(InputShape::new(8, 8, 3)).unwrap();
        assert!(load_checkpoint(&path, Some(&other)).is_err());
        assert!(load_checkpoint(&path, Some(net().spec())).is_ok());
    }
}
