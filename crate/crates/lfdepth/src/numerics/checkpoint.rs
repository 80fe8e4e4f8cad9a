//! Versioned binary checkpoint format for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   6 bytes  "LFCKPT"
//! version u32      currently 1
//! fprint  u64      architecture/config fingerprint
//! config  u32 len + utf-8 canonical config text
//! count   u32
//! tensor  u16 name len + utf-8 name
//!         u8  precision tag (0 = f32, 1 = f64)
//!         u8  rank, then rank x u32 dims
//!         raw little-endian element payload
//! crc32   u32 over every preceding byte
//! ```
//!
//! Writes go through a temporary file and a rename, so a crash never leaves
//! a half-written checkpoint behind.

use std::io::Write;
use std::path::Path;

use crate::error::{LfError, Result};
use crate::numerics::tensor::{Element, Precision, Shape, Tensor};

const MAGIC: &[u8; 6] = b"LFCKPT";
const VERSION: u32 = 1;

/// A parsed checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub fingerprint: u64,
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

/// Serialize named tensors with the run's fingerprint and config text.
pub fn write_checkpoint<T: Element>(
    path: &Path,
    fingerprint: u64,
    config_text: &str,
    tensors: &[(String, Tensor<T>)],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&fingerprint.to_le_bytes());
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        if name.len() > u16::MAX as usize {
            return Err(LfError::Checkpoint(format!("tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::PRECISION.tag());
        let shape = tensor.shape();
        buf.push(shape.rank() as u8);
        for &d in shape.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&buf);
    buf.extend_from_slice(&hasher.finalize().to_le_bytes());

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| LfError::io(dir, e))?;
    tmp.write_all(&buf).map_err(|e| LfError::io(path, e))?;
    tmp.persist(path).map_err(|e| LfError::io(path, e.error))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(LfError::Checkpoint(format!(
                "truncated at byte {} while reading {what}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Load a checkpoint, casting stored tensors into `T` when the requested
/// precision differs from the stored one.
pub fn read_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| LfError::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 + 8 + 4 + 4 + 4 {
        return Err(LfError::Checkpoint(format!("file too short: {} bytes", bytes.len())));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(body);
    let want = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if hasher.finalize() != want {
        return Err(LfError::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(LfError::Checkpoint("bad magic string".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(LfError::Checkpoint(format!("unsupported layout version {version}")));
    }
    let fingerprint = r.u64("fingerprint")?;
    let cfg_len = r.u32("config length")? as usize;
    let config_text = String::from_utf8(r.take(cfg_len, "config text")?.to_vec())
        .map_err(|e| LfError::Checkpoint(format!("config text not utf-8: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|e| LfError::Checkpoint(format!("tensor {i} name not utf-8: {e}")))?;
        let precision = Precision::from_tag(r.take(1, "precision")?[0])?;
        let rank = r.take(1, "rank")?[0] as usize;
        if rank > 4 {
            return Err(LfError::Checkpoint(format!("tensor {name}: rank {rank} > 4")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")? as usize);
        }
        let shape = Shape::from_dims(&dims)?;
        let n = shape.len();
        let tensor = match precision {
            Precision::Single => {
                let payload = r.take(n * 4, "payload")?;
                let data: Vec<f32> = payload.chunks_exact(4).map(f32::read_le).collect();
                Tensor::from_vec(shape, data)?.cast::<T>()
            }
            Precision::Double => {
                let payload = r.take(n * 8, "payload")?;
                let data: Vec<f64> = payload.chunks_exact(8).map(f64::read_le).collect();
                Tensor::from_vec(shape, data)?.cast::<T>()
            }
        };
        tensors.push((name, tensor));
    }
    if r.pos != body.len() {
        return Err(LfError::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint { fingerprint, config_text, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_tensors() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("w.kernel".to_string(), Tensor::from_vec(Shape::d2(2, 3), vec![1.0, -2.5, 0.0, 3.25, 4.0, -0.125]).unwrap()),
            ("w.bias".to_string(), Tensor::from_vec(Shape::d1(3), vec![0.5, 0.25, -1.0]).unwrap()),
            ("stat".to_string(), Tensor::scalar(42.0)),
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let tensors = sample_tensors();
        write_checkpoint(&path, 0xdead_beef_1234, "width = 16\n", &tensors).unwrap();
        let ck = read_checkpoint::<f32>(&path).unwrap();
        assert_eq!(ck.fingerprint, 0xdead_beef_1234);
        assert_eq!(ck.config_text, "width = 16\n");
        assert_eq!(ck.tensors.len(), 3);
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(&ck.tensors) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (a, b) in t0.data().iter().zip(t1.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, 1, "", &sample_tensors()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_checkpoint::<f32>(&path), Err(LfError::Checkpoint(_))));
    }

    #[test]
    fn truncated_file_reports_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, 1, "", &sample_tensors()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..10]).unwrap();
        assert!(read_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn cross_precision_load_casts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, 7, "", &sample_tensors()).unwrap();
        let ck = read_checkpoint::<f64>(&path).unwrap();
        assert_eq!(ck.tensors[0].1.data()[1], -2.5f64);
    }
}
