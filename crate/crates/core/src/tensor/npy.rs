//! NPY (format 1.0, little-endian, C-order) tensor files and parameter
//! checkpoint directories.
//!
//! A checkpoint directory holds one `<name>.npy` per parameter and a
//! `manifest.json` mapping each name to its file, shape, dtype and step.

use super::{Real, Tensor};
use crate::error::{Error, Result};
use indexmap::IndexMap;
use ndarray::{Array, Array3, Array4};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

fn format_err(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Format { path: path.to_path_buf(), detail: detail.to_string() }
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let [n, c, h, w] = t.shape();
    let arr = Array4::from_shape_vec((n, c, h, w), t.data().to_vec())
        .map_err(|e| format_err(path, e))?;
    ndarray_npy::write_npy(path, &arr).map_err(|e| format_err(path, e))
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let arr: Array4<T> = ndarray_npy::read_npy(path).map_err(|e| format_err(path, e))?;
    let shape = arr.shape();
    let shape = [shape[0], shape[1], shape[2], shape[3]];
    let data = if arr.is_standard_layout() {
        arr.into_raw_vec_and_offset().0
    } else {
        arr.iter().copied().collect()
    };
    Tensor::from_vec(shape, data)
}

/// Writes an (h, w, c) real plane, e.g. a 6-channel gradient map.
pub fn write_plane(path: &Path, shape: (usize, usize, usize), data: &[f64]) -> Result<()> {
    let arr = Array3::from_shape_vec(shape, data.to_vec()).map_err(|e| format_err(path, e))?;
    ndarray_npy::write_npy(path, &arr).map_err(|e| format_err(path, e))
}

pub fn read_plane(path: &Path) -> Result<((usize, usize, usize), Vec<f64>)> {
    let arr: Array<f64, ndarray::Ix3> =
        ndarray_npy::read_npy(path).map_err(|e| format_err(path, e))?;
    let s = arr.shape();
    let shape = (s[0], s[1], s[2]);
    Ok((shape, arr.iter().copied().collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub shape: [usize; 4],
    pub dtype: String,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub tensors: IndexMap<String, ManifestEntry>,
}

fn file_name(name: &str) -> String {
    format!("{}.npy", name.replace(['/', '\\'], "_"))
}

/// Saves named tensors into `dir`, returning the manifest that was written.
pub fn save_named<T: Real>(
    dir: &Path,
    tensors: &IndexMap<String, Tensor<T>>,
    step: u64,
) -> Result<ParamsManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = IndexMap::new();
    for (name, t) in tensors {
        let file = file_name(name);
        write_tensor(&dir.join(&file), t)?;
        entries.insert(
            name.clone(),
            ManifestEntry { file, shape: t.shape(), dtype: T::DTYPE.to_string(), step },
        );
    }
    let manifest = ParamsManifest { tensors: entries };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| format_err(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<ParamsManifest> {
    let path: PathBuf = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(&path, e))
}

pub fn load_named<T: Real>(dir: &Path) -> Result<(IndexMap<String, Tensor<T>>, u64)> {
    let manifest = read_manifest(dir)?;
    let mut out = IndexMap::new();
    let mut step = 0;
    for (name, entry) in &manifest.tensors {
        let path = dir.join(&entry.file);
        if entry.dtype != T::DTYPE {
            return Err(format_err(
                &path,
                format!("stored dtype {} but {} was requested", entry.dtype, T::DTYPE),
            ));
        }
        let t: Tensor<T> = read_tensor(&path)?;
        if t.shape() != entry.shape {
            return Err(format_err(
                &path,
                format!("manifest shape {:?} but file holds {:?}", entry.shape, t.shape()),
            ));
        }
        step = entry.step;
        out.insert(name.clone(), t);
    }
    Ok((out, step))
}
