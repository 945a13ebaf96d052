use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"DCFEAT01";

/// Writes `[frames × feat_dim]` as the magic, two little-endian `u32`
/// dimensions, then little-endian `f32` values in row-major order.
pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let (frames, dim) = features.dims2()?;
    let mut buf = Vec::with_capacity(16 + 4 * features.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(frames as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_owned(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("missing DCFEAT01 header".into()));
    }
    let frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if frames == 0 || dim == 0 {
        return Err(bad(format!("empty feature matrix {frames}x{dim}")));
    }
    let want = 16 + 4 * frames * dim;
    if bytes.len() != want {
        return Err(bad(format!("expected {want} bytes, found {}", bytes.len())));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{}: value #{pos} is not finite",
            path.display()
        )));
    }
    Tensor::matrix(frames, dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.dcfeat");
        let t = Tensor::matrix(2, 1, vec![1.0, -0.5]).unwrap();
        write_features(&p, &t).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"DCFEAT01");
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(read_features(&p).unwrap(), t);
    }

    #[test]
    fn rejects_truncation_and_nan() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.dcfeat");
        let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, f64::NAN]).unwrap();
        write_features(&p, &t).unwrap();
        assert!(matches!(read_features(&p), Err(Error::NonFinite(_))));
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_features(&p), Err(Error::Format { .. })));
    }
}
