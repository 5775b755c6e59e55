//! Ensemble model directory: `manifest.json` plus one JSON file per patch
//! pipeline. kPCA training vectors go to a raw little-endian `f32` file next
//! to each pipeline (they are masked voxels, so `f32` holds them exactly).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EnsembleConfig, EnsembleModel, PatchPipeline};
use crate::error::{Error, Result};
use crate::kernel::SampleMatrix;
use crate::volume::PatchGrid;

const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct PatchEntry {
    patch_id: usize,
    model: String,
    vectors: Option<String>,
    vector_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    grid: PatchGrid,
    active_patches: Vec<usize>,
    config: EnsembleConfig,
    patches: Vec<PatchEntry>,
}

fn write_f32(path: &Path, values: &[f64]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "length is not a multiple of 4".into(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

pub fn save_model(model: &EnsembleModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut patches = Vec::with_capacity(model.pipelines.len());
    for pipe in &model.pipelines {
        let mut pipe = pipe.clone();
        let stem = format!("patch_{:04}", pipe.patch_id);
        let vectors = pipe.kpca.as_mut().and_then(|k| k.take_vectors());
        let (vec_file, vector_dim) = match &vectors {
            Some(x) => {
                let name = format!("{stem}.vectors.f32");
                write_f32(&dir.join(&name), x.data())?;
                (Some(name), x.cols())
            }
            None => (None, 0),
        };
        let name = format!("{stem}.json");
        let path = dir.join(&name);
        fs::write(&path, serde_json::to_vec(&pipe)?).map_err(|e| Error::io(&path, e))?;
        patches.push(PatchEntry {
            patch_id: pipe.patch_id,
            model: name,
            vectors: vec_file,
            vector_dim,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        grid: model.grid.clone(),
        active_patches: model.active_patches.clone(),
        config: model.config,
        patches,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<EnsembleModel> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format {
            path,
            reason: format!("unsupported model version {}", manifest.version),
        });
    }
    let mut pipelines = Vec::with_capacity(manifest.patches.len());
    for entry in &manifest.patches {
        let p = dir.join(&entry.model);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut pipe: PatchPipeline = serde_json::from_str(&text)?;
        if let (Some(file), Some(kpca)) = (&entry.vectors, pipe.kpca.as_mut()) {
            let data = read_f32(&dir.join(file))?;
            let rows = kpca.n_train();
            if entry.vector_dim == 0 || data.len() != rows * entry.vector_dim {
                return Err(Error::Size {
                    expected: rows * entry.vector_dim,
                    found: data.len(),
                });
            }
            kpca.attach_vectors(SampleMatrix::new(rows, entry.vector_dim, data)?)?;
        }
        pipelines.push(pipe);
    }
    if pipelines.iter().map(|p| p.patch_id).ne(manifest.active_patches.iter().copied()) {
        return Err(Error::Format {
            path: dir.join(MANIFEST),
            reason: "patch files do not match the active patch list".into(),
        });
    }
    Ok(EnsembleModel {
        grid: manifest.grid,
        active_patches: manifest.active_patches,
        config: manifest.config,
        pipelines,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests_support::small_model;
    use super::*;

    #[test]
    fn round_trip_preserves_model() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p).unwrap().replace("\"version\": 1", "\"version\": 9");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Format { .. })));
    }
}
