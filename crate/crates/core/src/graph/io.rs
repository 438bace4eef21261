//! Model directory format: `manifest.json` (topology, attributes, quantization
//! parameters, blob index and checksum) plus `weights.bin` (little-endian
//! tensors, each starting on a 64-byte boundary).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Blob, IoSpec, ModelGraph, Node};
use crate::embedding::{EmbeddingTable, TableFormat};
use crate::error::{Error, Result};
use crate::numerics::Half;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";
const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    dtype: String,
    len: usize,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableEntry {
    name: String,
    rows: usize,
    dim: usize,
    format: TableFormat,
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    name: String,
    io: IoSpec,
    nodes: Vec<Node>,
    blobs: Vec<BlobEntry>,
    tables: Vec<TableEntry>,
    blob_bytes: usize,
    blob_sha256: String,
}

fn pad(buf: &mut Vec<u8>) {
    let rem = buf.len() % ALIGN;
    if rem != 0 {
        buf.resize(buf.len() + ALIGN - rem, 0);
    }
}

fn encode_blob(b: &Blob, buf: &mut Vec<u8>) {
    match b {
        Blob::F32(v) => v.iter().for_each(|x| buf.extend(x.to_le_bytes())),
        Blob::F16(v) => v.iter().for_each(|x| buf.extend(x.to_bits().to_le_bytes())),
        Blob::I8(v) => v.iter().for_each(|x| buf.extend(x.to_le_bytes())),
        Blob::I32(v) => v.iter().for_each(|x| buf.extend(x.to_le_bytes())),
    }
}

/// Serialized manifest text and blob bytes.
pub fn to_bytes(g: &ModelGraph) -> Result<(String, Vec<u8>)> {
    let mut buf = Vec::new();
    let mut blobs = Vec::new();
    for (name, b) in &g.weights {
        pad(&mut buf);
        blobs.push(BlobEntry {
            name: name.clone(),
            dtype: b.dtype().to_string(),
            len: b.len(),
            offset: buf.len(),
        });
        encode_blob(b, &mut buf);
    }
    let mut tables = Vec::new();
    for (name, t) in &g.tables {
        pad(&mut buf);
        tables.push(TableEntry {
            name: name.clone(),
            rows: t.rows,
            dim: t.dim,
            format: t.format,
            offset: buf.len(),
            bytes: t.bytes.len(),
        });
        buf.extend_from_slice(&t.bytes);
    }
    pad(&mut buf);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: g.name.clone(),
        io: g.io.clone(),
        nodes: g.nodes.clone(),
        blobs,
        tables,
        blob_bytes: buf.len(),
        blob_sha256: hex::encode(Sha256::digest(&buf)),
    };
    Ok((serde_json::to_string_pretty(&manifest)?, buf))
}

pub fn save(g: &ModelGraph, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = to_bytes(g)?;
    let bp = dir.join(BLOB_FILE);
    std::fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
    let mp = dir.join(MANIFEST_FILE);
    std::fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))
}

fn slice<'a>(buf: &'a [u8], offset: usize, bytes: usize, what: &str) -> Result<&'a [u8]> {
    buf.get(offset..offset + bytes)
        .ok_or_else(|| Error::Data(format!("blob entry `{what}` lies outside the weight file")))
}

fn decode_blob(e: &BlobEntry, buf: &[u8]) -> Result<Blob> {
    let b = match e.dtype.as_str() {
        "f32" => Blob::F32(
            slice(buf, e.offset, 4 * e.len, &e.name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        "f16" => Blob::F16(
            slice(buf, e.offset, 2 * e.len, &e.name)?
                .chunks_exact(2)
                .map(|c| Half::from_bits(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
        ),
        "i8" => Blob::I8(
            slice(buf, e.offset, e.len, &e.name)?
                .iter()
                .map(|&x| x as i8)
                .collect(),
        ),
        "i32" => Blob::I32(
            slice(buf, e.offset, 4 * e.len, &e.name)?
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        other => return Err(Error::Data(format!("unknown blob dtype `{other}`"))),
    };
    Ok(b)
}

pub fn from_bytes(manifest: &str, blob: &[u8], blob_path: &Path) -> Result<ModelGraph> {
    let version: serde_json::Value = serde_json::from_str(manifest)?;
    let found = version
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let m: Manifest = serde_json::from_value(version)?;
    if blob.len() != m.blob_bytes || hex::encode(Sha256::digest(blob)) != m.blob_sha256 {
        return Err(Error::Checksum(blob_path.to_path_buf()));
    }
    let mut weights = BTreeMap::new();
    for e in &m.blobs {
        weights.insert(e.name.clone(), decode_blob(e, blob)?);
    }
    let mut tables = BTreeMap::new();
    for t in &m.tables {
        let table = EmbeddingTable {
            rows: t.rows,
            dim: t.dim,
            format: t.format,
            bytes: slice(blob, t.offset, t.bytes, &t.name)?.to_vec(),
        };
        table.check_layout()?;
        tables.insert(t.name.clone(), table);
    }
    Ok(ModelGraph {
        name: m.name,
        io: m.io,
        nodes: m.nodes,
        weights,
        tables,
    })
}

pub fn load(dir: &Path) -> Result<ModelGraph> {
    let mp = dir.join(MANIFEST_FILE);
    let manifest = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let bp = dir.join(BLOB_FILE);
    let blob = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    from_bytes(&manifest, &blob, &bp)
}
