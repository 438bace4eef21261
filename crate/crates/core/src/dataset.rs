//! Labeled samples and their line-delimited file format.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, SparseIds};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub dense: Vec<f32>,
    pub sparse: Vec<Vec<u32>>,
    pub label: u8,
    pub weight: f32,
}

/// A batch in the layout the executor consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub dense: Matrix,
    pub sparse: Vec<SparseIds>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.dense.rows
    }

    pub fn is_empty(&self) -> bool {
        self.dense.rows == 0
    }
}

pub fn to_batch(samples: &[LabeledSample]) -> Result<Batch> {
    let dense_dim = samples.first().map_or(0, |s| s.dense.len());
    let slots = samples.first().map_or(0, |s| s.sparse.len());
    let mut dense = Vec::with_capacity(samples.len() * dense_dim);
    let mut sparse = vec![SparseIds::default(); slots];
    for (i, s) in samples.iter().enumerate() {
        if s.dense.len() != dense_dim || s.sparse.len() != slots {
            return Err(Error::Data(format!("sample {i} does not match the batch layout")));
        }
        dense.extend_from_slice(&s.dense);
        for (slot, ids) in sparse.iter_mut().zip(&s.sparse) {
            slot.lengths.push(ids.len() as u32);
            slot.ids.extend_from_slice(ids);
        }
    }
    Ok(Batch {
        dense: Matrix::new(samples.len(), dense_dim, dense)?,
        sparse,
    })
}

pub fn validate_samples(samples: &[LabeledSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if !(s.weight > 0.0) || !s.weight.is_finite() {
            return Err(Error::Data(format!("sample {i}: weight must be positive")));
        }
        if s.label > 1 {
            return Err(Error::Data(format!("sample {i}: label must be 0 or 1")));
        }
        if s.dense.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("sample {i}: non-finite dense feature")));
        }
    }
    Ok(())
}

pub fn has_both_classes(samples: &[LabeledSample]) -> bool {
    let pos = samples.iter().any(|s| s.label == 1);
    let neg = samples.iter().any(|s| s.label == 0);
    pos && neg
}

pub fn save_jsonl(samples: &[LabeledSample], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<LabeledSample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: LabeledSample = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(s);
    }
    validate_samples(&out)?;
    Ok(out)
}

/// Content hash of a sample list, stable across runs.
pub fn dataset_hash(samples: &[LabeledSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        for v in &s.dense {
            h.update(v.to_le_bytes());
        }
        for ids in &s.sparse {
            h.update((ids.len() as u32).to_le_bytes());
            for id in ids {
                h.update(id.to_le_bytes());
            }
        }
        h.update([s.label]);
        h.update(s.weight.to_le_bytes());
    }
    hex::encode(h.finalize())
}
