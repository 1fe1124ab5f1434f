//! On-disk datasets: tensor files per fold and block plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tgcca::io::{read_tensor, write_tensor};
use tgcca::model::BlockSet;
use tgcca::simgen::SimSpec;
use tgcca::tensor::CpVector;

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// A CP vector in plain arrays; factors are stored column-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpRecord {
    pub dims: Vec<usize>,
    pub weights: Vec<f64>,
    pub factors: Vec<Vec<f64>>,
}

impl CpRecord {
    pub fn from_cp(cp: &CpVector) -> Self {
        Self {
            dims: cp.dims(),
            weights: cp.weights.as_slice().to_vec(),
            factors: cp.factors.iter().map(|f| f.as_slice().to_vec()).collect(),
        }
    }

    pub fn to_cp(&self) -> Result<CpVector> {
        let r = self.weights.len();
        if self.factors.len() != self.dims.len() {
            return Err(CliError::Config("CP record: one factor per mode expected".into()));
        }
        let factors = self
            .dims
            .iter()
            .zip(&self.factors)
            .map(|(&p, f)| {
                if f.len() != p * r {
                    return Err(CliError::Config(format!("CP record: factor of length {} for {p}x{r}", f.len())));
                }
                Ok(DMatrix::from_column_slice(p, r, f))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CpVector::new(DVector::from_column_slice(&self.weights), factors)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the directory holding the manifest.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldStream {
    pub fold: usize,
    pub seed: u64,
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tool_version: String,
    pub spec: SimSpec,
    pub block_names: Vec<String>,
    /// Variable dims of each block (without the sample mode).
    pub block_dims: Vec<Vec<usize>>,
    pub fold_streams: Vec<FoldStream>,
    /// `folds[f][l]`.
    pub folds: Vec<Vec<FileRecord>>,
    pub truths: Vec<CpRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn fold_file(fold: usize, block: usize) -> PathBuf {
    PathBuf::from(format!("fold{fold:02}")).join(format!("block{block}.tnsr"))
}

pub fn save_fold(dir: &Path, fold: usize, bs: &BlockSet) -> Result<Vec<FileRecord>> {
    let mut out = Vec::with_capacity(bs.num_blocks());
    for l in 0..bs.num_blocks() {
        let rel = fold_file(fold, l);
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        write_tensor(&path, bs.block(l))?;
        out.push(FileRecord {
            path: rel.to_string_lossy().into_owned(),
            sha256: sha256_file(&path)?,
        });
    }
    Ok(out)
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let m: Self = load_json(&dir.join(MANIFEST))?;
        if m.folds.iter().any(|f| f.len() != m.block_dims.len()) || m.truths.len() != m.block_dims.len() {
            return Err(CliError::Config("manifest: block counts disagree".into()));
        }
        Ok(m)
    }

    pub fn num_folds(&self) -> usize {
        self.folds.len()
    }

    pub fn truth(&self, l: usize) -> Result<CpVector> {
        self.truths[l].to_cp()
    }

    /// Reads fold `fold`, checking hashes and dims against the manifest.
    pub fn load_fold(&self, dir: &Path, fold: usize) -> Result<BlockSet> {
        let files = self
            .folds
            .get(fold)
            .ok_or_else(|| CliError::Config(format!("fold {fold} not in dataset ({} folds)", self.folds.len())))?;
        let mut blocks = Vec::with_capacity(files.len());
        for (l, rec) in files.iter().enumerate() {
            let path = dir.join(&rec.path);
            let hash = sha256_file(&path)?;
            if hash != rec.sha256 {
                return Err(CliError::Config(format!("{}: hash does not match the manifest", path.display())));
            }
            let t = read_tensor(&path)?;
            if t.dims().len() < 2 || t.dims()[1..] != self.block_dims[l][..] {
                return Err(CliError::Config(format!(
                    "{}: dims {:?} do not match manifest {:?}",
                    path.display(),
                    t.dims(),
                    self.block_dims[l]
                )));
            }
            blocks.push(t);
        }
        Ok(BlockSet::new(blocks)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cp_record_round_trip() {
        let cp = CpVector::new(
            DVector::from_vec(vec![0.6, 0.8]),
            vec![
                DMatrix::from_fn(3, 2, |i, j| (i + 3 * j) as f64),
                DMatrix::from_fn(4, 2, |i, j| (i * j) as f64 - 1.0),
            ],
        )
        .unwrap();
        let rec = CpRecord::from_cp(&cp);
        let text = serde_json::to_string(&rec).unwrap();
        let back: CpRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_cp().unwrap(), cp);
        let bad = CpRecord {
            dims: vec![3],
            weights: vec![1.0],
            factors: vec![vec![1.0, 2.0]],
        };
        assert!(bad.to_cp().is_err());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
