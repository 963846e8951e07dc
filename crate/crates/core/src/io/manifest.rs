//! Raw little-endian weight files described by a JSON manifest.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::spectral::{LayerRole, WeightMatrix};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLayer {
    pub name: String,
    pub role: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: Dtype,
    /// Path relative to the manifest's directory.
    pub file: String,
    pub byte_offset: u64,
}

impl ManifestLayer {
    fn byte_len(&self) -> u64 {
        (self.rows * self.cols * self.dtype.size()) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub layers: Vec<ManifestLayer>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| IoError::Parse(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(IoError::Parse(format!("unsupported manifest version {}", m.version)));
        }
        let mut names = HashSet::new();
        for l in &m.layers {
            if !names.insert(l.name.as_str()) {
                return Err(IoError::Parse(format!("duplicate layer name `{}`", l.name)));
            }
            if l.rows == 0 || l.cols == 0 {
                return Err(IoError::Parse(format!("layer `{}` has an empty dimension", l.name)));
            }
        }
        Ok(m)
    }

    /// Rejects ranges that overlap within a file or run past its end.
    fn check_ranges(&self, file_len: impl Fn(&str) -> u64) -> Result<(), IoError> {
        let mut by_file: HashMap<&str, Vec<(u64, u64, &str)>> = HashMap::new();
        for l in &self.layers {
            by_file
                .entry(l.file.as_str())
                .or_default()
                .push((l.byte_offset, l.byte_offset + l.byte_len(), l.name.as_str()));
        }
        for (file, mut ranges) in by_file {
            let len = file_len(file);
            ranges.sort_unstable();
            for (i, &(start, end, name)) in ranges.iter().enumerate() {
                if end > len {
                    return Err(IoError::ByteRange(format!(
                        "layer `{name}` needs bytes {start}..{end} but `{file}` has {len}"
                    )));
                }
                if let Some(&(_, prev_end, prev)) = i.checked_sub(1).map(|j| &ranges[j]) {
                    if start < prev_end {
                        return Err(IoError::ByteRange(format!(
                            "layers `{prev}` and `{name}` overlap in `{file}`"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn parse_role(tag: &str, name: &str) -> LayerRole {
    tag.parse().unwrap_or_else(|_| {
        log::warn!("layer `{name}`: unknown role `{tag}`, treating as a generic matrix");
        LayerRole::Other2D
    })
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
    }
}

/// Matrices of a manifest, in manifest order, widened to `f64`.
///
/// Unknown role strings fall back to [`LayerRole::Other2D`] with a warning.
pub fn load_manifest(path: &Path) -> Result<Vec<WeightMatrix>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    let manifest = Manifest::parse(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut files: HashMap<&str, Vec<u8>> = HashMap::new();
    for l in &manifest.layers {
        if !files.contains_key(l.file.as_str()) {
            let p = dir.join(&l.file);
            let data = fs::read(&p).map_err(|e| IoError::file(&p, e))?;
            files.insert(l.file.as_str(), data);
        }
    }
    manifest.check_ranges(|f| files[f].len() as u64)?;
    manifest
        .layers
        .iter()
        .map(|l| {
            let start = l.byte_offset as usize;
            let bytes = &files[l.file.as_str()][start..start + l.byte_len() as usize];
            let role = parse_role(&l.role, &l.name);
            Ok(WeightMatrix::new(l.name.clone(), role, l.rows, l.cols, decode(bytes, l.dtype))?)
        })
        .collect()
}

/// Writes `matrices` back to back into `dir/weights.bin` and describes them in
/// `dir/manifest.json`. Returns the manifest path.
pub fn save_manifest(dir: &Path, matrices: &[WeightMatrix], dtype: Dtype) -> Result<PathBuf, IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(matrices.len());
    for w in matrices {
        layers.push(ManifestLayer {
            name: w.name.clone(),
            role: w.role.tag().to_string(),
            rows: w.rows(),
            cols: w.cols(),
            dtype,
            file: "weights.bin".into(),
            byte_offset: blob.len() as u64,
        });
        for &v in w.values() {
            match dtype {
                Dtype::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let weights = dir.join("weights.bin");
    fs::write(&weights, &blob).map_err(|e| IoError::file(&weights, e))?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        layers,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(|e| IoError::file(&path, e))?;
    Ok(path)
}
