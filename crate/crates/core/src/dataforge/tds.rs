//! Dataset files.
//!
//! Layout (little-endian): magic `TDS1`, u16 version, u8 dim, u32 sample count,
//! u8 label count, u8 class count, u32 per spatial dim; then per sample the
//! image as f32, the label map as u8 and the class as u8 (255 when absent).

use std::path::Path;

use super::{Dataset, Sample, NO_CLASS};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::io::ByteReader;

pub const TDS_MAGIC: &[u8; 4] = b"TDS1";
pub const TDS_VERSION: u16 = 1;

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    data.validate()?;
    let n: usize = data.spatial.iter().product();
    let mut out = Vec::with_capacity(32 + data.len() * n * 5);
    out.extend_from_slice(TDS_MAGIC);
    out.extend_from_slice(&TDS_VERSION.to_le_bytes());
    out.push(data.dim as u8);
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.push(data.n_labels);
    out.push(data.n_classes);
    for &d in &data.spatial {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in &data.samples {
        for v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.labels);
        out.push(s.class.unwrap_or(NO_CLASS));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes);
    let magic = r.take(4, "magic")?;
    if magic != TDS_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = r.u16("version")?;
    if version != TDS_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let dim = r.u8("dim")? as usize;
    if dim != 2 && dim != 3 {
        return Err(Error::Format(format!("dataset dim {dim} is not 2 or 3")));
    }
    let count = r.u32("sample count")? as usize;
    let n_labels = r.u8("label count")?;
    let n_classes = r.u8("class count")?;
    let spatial = (0..dim).map(|_| r.u32("spatial dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    if spatial.contains(&0) {
        return Err(Error::Format(format!("zero-sized spatial dims {spatial:?}")));
    }
    let n: usize = spatial.iter().product();
    let mut shape = vec![1];
    shape.extend_from_slice(&spatial);
    let mut data = Dataset::new(&spatial, n_labels, n_classes);
    for i in 0..count {
        let raw = r.take(n * 4, &format!("image of sample {i}"))?;
        let image = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let labels = r.take(n, &format!("labels of sample {i}"))?.to_vec();
        let class = r.u8(&format!("class of sample {i}"))?;
        data.samples.push(Sample {
            image: Tensor::new(shape.clone(), image)?,
            labels,
            class: (class != NO_CLASS).then_some(class),
        });
    }
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after sample {count}", r.remaining())));
    }
    data.validate()?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataforge::{generate_phantoms, PhantomSpec};

    #[test]
    fn round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tds");
        let spec = PhantomSpec { size: 16, ..PhantomSpec::new(2) };
        let mut data = Dataset::new(&spec.spatial(), spec.n_labels(), spec.n_classes());
        data.samples = generate_phantoms(&spec, 3, 1).unwrap();
        data.samples[1].class = None;
        save_dataset(&path, &data).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, data);
        let bits = |d: &Dataset| -> Vec<u32> { d.samples.iter().flat_map(|s| s.image.data().iter().map(|v| v.to_bits())).collect() };
        assert_eq!(bits(&back), bits(&data));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match load_dataset(&path) {
            Err(Error::Truncated { offset, .. }) => assert!(offset > 0 && (offset as usize) < bytes.len()),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.tds");
        let data = Dataset::new(&[8, 8, 8], 3, 2);
        save_dataset(&path, &data).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), data);
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tds");
        std::fs::write(&path, b"TDS2\x01\x00").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
    }
}
