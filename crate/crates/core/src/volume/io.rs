//! `.evr` volume files: a raw little-endian `f32` blob (x-fastest) with a
//! sibling `.json` header `{"dims":[..],"spacing":[..],"version":1}`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{voxel_count, Volume3};
use crate::error::{Error, Result};

pub const HEADER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub version: u32,
}

fn header_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    let path = path.as_ref();
    let hpath = header_path(path);
    let text = fs::read_to_string(&hpath).map_err(|e| Error::Format {
        path: hpath.clone(),
        reason: format!("cannot read header: {e}"),
    })?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: hpath.clone(),
        reason: e.to_string(),
    })?;
    if header.version != HEADER_VERSION {
        return Err(Error::Format {
            path: hpath,
            reason: format!("unsupported version {}", header.version),
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = voxel_count(header.dims);
    if bytes.len() != expected * 4 {
        return Err(Error::Size {
            expected,
            found: bytes.len() / 4,
        });
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Value(format!("{}: non-finite voxel at linear index {pos}", path.display())));
    }
    Volume3::new(header.dims, header.spacing, data)
}

/// Writes `path` (the blob) and its `.json` header next to it.
pub fn save_volume(v: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = VolumeHeader {
        dims: v.dims(),
        spacing: v.spacing(),
        version: HEADER_VERSION,
    };
    let hpath = header_path(path);
    fs::write(&hpath, serde_json::to_vec(&header)?).map_err(|e| Error::io(&hpath, e))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for x in v.data() {
        w.write_all(&x.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_volume_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.evr");
        fs::write(&p, vec![0u8; 64 * 4]).unwrap();
        fs::write(p.with_extension("json"), r#"{"dims":[4,4,4],"spacing":[1,1,1],"version":1}"#).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.dims(), [4, 4, 4]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn short_blob_is_size_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.evr");
        fs::write(&p, vec![0u8; 7 * 4]).unwrap();
        fs::write(p.with_extension("json"), r#"{"dims":[2,2,2],"spacing":[1,1,1],"version":1}"#).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Size { expected: 8, found: 7 })));
    }

    #[test]
    fn header_problems_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.evr");
        fs::write(&p, vec![0u8; 4]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
        fs::write(p.with_extension("json"), "{not json").unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
        fs::write(p.with_extension("json"), r#"{"dims":[1,1,1],"spacing":[1,1,1],"version":2}"#).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn non_finite_is_value_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.evr");
        let mut bytes = 1.0f32.to_le_bytes().to_vec();
        bytes.extend(f32::INFINITY.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        fs::write(p.with_extension("json"), r#"{"dims":[2,1,1],"spacing":[1,1,1],"version":1}"#).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Value(_))));
    }
}
