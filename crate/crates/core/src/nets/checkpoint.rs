//! Binary checkpoint files.
//!
//! Layout (little-endian): magic `SGTC`, u16 version, u8 architecture kind,
//! u32 field count and u32 fields, u32 epoch, u64 seed, u32 tensor count, then
//! per tensor a u32 name length, UTF-8 name, u32 rank, u32 dims and raw f32
//! values. BN running statistics are stored like any other tensor.

use std::path::Path;

use super::ArchSpec;
use crate::engine::{Graph, Real};
use crate::error::{Error, Result};
use crate::io::ByteReader;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGTC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainMeta {
    pub epoch: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub arch: ArchSpec,
    pub meta: TrainMeta,
    pub tensors: Vec<StoredTensor>,
}

pub fn save_checkpoint<T: Real>(path: &Path, arch: &ArchSpec, graph: &Graph<T>, meta: TrainMeta) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(arch.kind_tag());
    let fields = arch.fields();
    out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for f in fields {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&(graph.params().len() as u32).to_le_bytes());
    for p in graph.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&(v.to_f64c() as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let tag = r.u8("architecture kind")?;
    let n_fields = r.u32("field count")? as usize;
    let fields = (0..n_fields).map(|_| r.u32("architecture field")).collect::<Result<Vec<_>>>()?;
    let arch = ArchSpec::from_fields(tag, &fields)?;
    let meta = TrainMeta {
        epoch: r.u32("epoch")?,
        seed: r.u64("seed")?,
    };
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
            .map_err(|_| Error::Format(format!("tensor name at byte {} is not UTF-8", r.offset())))?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, "tensor values")?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push(StoredTensor { name, shape, values });
    }
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after last tensor", r.remaining())));
    }
    Ok(CheckpointFile { arch, meta, tensors })
}

/// Build `arch` and fill it from the file. Any difference in tensor names or
/// shapes is reported as a spec mismatch naming the first offending tensor.
pub fn load_checkpoint<T: Real>(arch: &ArchSpec, path: &Path) -> Result<(Graph<T>, TrainMeta)> {
    let file = read_checkpoint(path)?;
    let mut graph: Graph<T> = arch.build(0)?;
    for (i, p) in graph.params().iter().enumerate() {
        match file.tensors.get(i) {
            Some(t) if t.name == p.name && t.shape == p.tensor.shape() => {}
            Some(t) if t.name == p.name => {
                return Err(Error::SpecMismatch(format!(
                    "tensor {}: expected shape {:?}, checkpoint has {:?}",
                    p.name,
                    p.tensor.shape(),
                    t.shape
                )))
            }
            Some(t) => {
                return Err(Error::SpecMismatch(format!(
                    "tensor {}: checkpoint has {} in its place",
                    p.name, t.name
                )))
            }
            None => return Err(Error::SpecMismatch(format!("tensor {}: missing from checkpoint", p.name))),
        }
    }
    if let Some(extra) = file.tensors.get(graph.params().len()) {
        return Err(Error::SpecMismatch(format!("tensor {}: not part of the requested architecture", extra.name)));
    }
    if &file.arch != arch {
        return Err(Error::SpecMismatch(format!(
            "architecture differs: requested {arch:?}, checkpoint has {:?}",
            file.arch
        )));
    }
    for (p, t) in graph.params_mut().iter_mut().zip(&file.tensors) {
        for (dst, &src) in p.tensor.data_mut().iter_mut().zip(&t.values) {
            *dst = T::from_f64c(src as f64);
        }
    }
    Ok((graph, file.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::MNetSpec;

    fn spec(n_s: usize) -> ArchSpec {
        ArchSpec::MNet(MNetSpec::new(2, &[16, 16], n_s, 3))
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let arch = spec(2);
        let mut g: Graph<f32> = arch.build(7).unwrap();
        // Non-default running stats must survive too.
        g.params_mut()[3].tensor.data_mut()[0] = 0.123;
        let meta = TrainMeta { epoch: 12, seed: 99 };
        save_checkpoint(&path, &arch, &g, meta).unwrap();
        let (h, m) = load_checkpoint::<f32>(&arch, &path).unwrap();
        assert_eq!(m, meta);
        for (a, b) in g.params().iter().zip(h.params()) {
            assert_eq!(a.name, b.name);
            let (x, y): (Vec<u32>, Vec<u32>) = (
                a.tensor.data().iter().map(|v| v.to_bits()).collect(),
                b.tensor.data().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(x, y);
        }
    }

    #[test]
    fn tampered_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let arch = spec(2);
        let g: Graph<f32> = arch.build(7).unwrap();
        save_checkpoint(&path, &arch, &g, TrainMeta::default()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Truncated { .. })));
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_width_names_first_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let g: Graph<f32> = spec(2).build(0).unwrap();
        save_checkpoint(&path, &spec(2), &g, TrainMeta::default()).unwrap();
        let err = load_checkpoint::<f32>(&spec(3), &path).unwrap_err();
        assert!(matches!(err, Error::SpecMismatch(_)));
        assert!(err.to_string().contains("enc0.a.conv.weight"), "{err}");
    }
}
