//! `CCRD1` container: magic line, one JSON header line, then raw
//! little-endian f64 blocks in column-major order.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Dataset, DgpConfig, GroundTruth};
use crate::error::{CcrError, Result};
use crate::scalar::Real;

const DATASET_MAGIC: &[u8] = b"CCRD1\n";
const VECTOR_MAGIC: &[u8] = b"CCRV1\n";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockSpec {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    n: usize,
    p: usize,
    p_w: usize,
    has_truth: bool,
    blocks: Vec<BlockSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<DgpConfig>,
    /// How `beta` in the truth section was produced (simulation provenance).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta_construction: Option<String>,
}

fn push_block<T: Real>(out: &mut Vec<u8>, values: &[T]) {
    for v in values {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}

pub fn save_dataset<T: Real>(dataset: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (n, p, p_w) = (dataset.n(), dataset.p(), dataset.p_w());
    let mut blocks = vec![
        BlockSpec { name: "y".into(), rows: n, cols: 1 },
        BlockSpec { name: "z_x".into(), rows: n, cols: p },
        BlockSpec { name: "z_w".into(), rows: n, cols: p_w },
    ];
    if dataset.truth.is_some() {
        blocks.extend([
            BlockSpec { name: "x".into(), rows: n, cols: p },
            BlockSpec { name: "w".into(), rows: n, cols: p_w },
            BlockSpec { name: "beta".into(), rows: p, cols: 1 },
            BlockSpec { name: "eps".into(), rows: n, cols: 1 },
        ]);
    }
    let header = DatasetHeader {
        n,
        p,
        p_w,
        has_truth: dataset.truth.is_some(),
        blocks,
        config: dataset.config.clone(),
        beta_construction: dataset
            .config
            .as_ref()
            .map(|_| "unit-norm gaussian per block, projected onto row(X)".to_string()),
    };

    let mut out = Vec::with_capacity(8 * n * (p + p_w) * 2 + 1024);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(serde_json::to_string(&header)?.as_bytes());
    out.push(b'\n');
    push_block(&mut out, dataset.y.as_slice());
    push_block(&mut out, dataset.z_x.as_slice());
    push_block(&mut out, dataset.z_w.as_slice());
    if let Some(t) = &dataset.truth {
        push_block(&mut out, t.x.as_slice());
        push_block(&mut out, t.w.as_slice());
        push_block(&mut out, t.beta.as_slice());
        push_block(&mut out, t.eps.as_slice());
    }
    fs::write(path, out).map_err(|e| CcrError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn block<T: Real>(&mut self, spec: &BlockSpec) -> Result<Vec<T>> {
        let want = spec.rows * spec.cols * 8;
        let have = self.bytes.len() - self.pos;
        if have < want {
            return Err(CcrError::format(
                format!("block `{}` at byte {}", spec.name, self.pos),
                format!("truncated: section `{}` needs {want} bytes, {have} remain", spec.name),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + want];
        self.pos += want;
        Ok(slice
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect())
    }
}

fn split_header<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<(&'a str, usize)> {
    if !bytes.starts_with(magic) {
        return Err(CcrError::format("line 1", "missing magic string"));
    }
    let rest = &bytes[magic.len()..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CcrError::format("line 2", "truncated: header line is not terminated"))?;
    let text = std::str::from_utf8(&rest[..end])
        .map_err(|e| CcrError::format("line 2", format!("header is not UTF-8: {e}")))?;
    Ok((text, magic.len() + end + 1))
}

fn expect_block(header: &DatasetHeader, index: usize, name: &str, rows: usize, cols: usize) -> Result<()> {
    let b = header.blocks.get(index).ok_or_else(|| {
        CcrError::format(format!("header field `blocks[{index}]`"), format!("missing section `{name}`"))
    })?;
    if b.name != name || b.rows != rows || b.cols != cols {
        return Err(CcrError::format(
            format!("header field `blocks[{index}]`"),
            format!(
                "expected `{name}` ({rows}x{cols}), found `{}` ({}x{})",
                b.name, b.rows, b.cols
            ),
        ));
    }
    Ok(())
}

pub fn load_dataset<T: Real>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CcrError::io(path, e))?;
    let (text, start) = split_header(&bytes, DATASET_MAGIC)?;
    let header: DatasetHeader = serde_json::from_str(text)
        .map_err(|e| CcrError::format(format!("line 2, column {}", e.column()), e.to_string()))?;
    let (n, p, p_w) = (header.n, header.p, header.p_w);
    let expected: Vec<(&str, usize, usize)> = if header.has_truth {
        vec![("y", n, 1), ("z_x", n, p), ("z_w", n, p_w), ("x", n, p), ("w", n, p_w), ("beta", p, 1), ("eps", n, 1)]
    } else {
        vec![("y", n, 1), ("z_x", n, p), ("z_w", n, p_w)]
    };
    if header.blocks.len() != expected.len() {
        return Err(CcrError::format(
            "header field `blocks`",
            format!("expected {} sections, found {}", expected.len(), header.blocks.len()),
        ));
    }
    for (i, (name, rows, cols)) in expected.iter().enumerate() {
        expect_block(&header, i, name, *rows, *cols)?;
    }

    let mut cur = Cursor { bytes: &bytes, pos: start };
    let mut blocks = Vec::with_capacity(expected.len());
    for spec in &header.blocks {
        blocks.push(cur.block::<T>(spec)?);
    }
    if cur.pos != bytes.len() {
        return Err(CcrError::format(
            format!("byte {}", cur.pos),
            format!("{} trailing bytes after last section", bytes.len() - cur.pos),
        ));
    }
    let mut it = blocks.into_iter();
    let mut next = || it.next().expect("block count checked above");
    let y = DVector::from_vec(next());
    let z_x = DMatrix::from_vec(n, p, next());
    let z_w = DMatrix::from_vec(n, p_w, next());
    let truth = if header.has_truth {
        let x = DMatrix::from_vec(n, p, next());
        let w = DMatrix::from_vec(n, p_w, next());
        let beta = DVector::from_vec(next());
        let eps = DVector::from_vec(next());
        Some(GroundTruth::new(x, w, beta, eps, &z_x, &z_w)?)
    } else {
        None
    };
    let mut ds = Dataset::new(y, z_x, z_w, truth)?;
    ds.config = header.config;
    Ok(ds)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VectorHeader {
    len: usize,
}

/// Writes a float64 vector file (`CCRV1` magic, `{"len": ..}` header, raw values).
pub fn write_vector<T: Real>(v: &DVector<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 * v.len() + 32);
    out.extend_from_slice(VECTOR_MAGIC);
    out.extend_from_slice(serde_json::to_string(&VectorHeader { len: v.len() })?.as_bytes());
    out.push(b'\n');
    push_block(&mut out, v.as_slice());
    fs::write(path, out).map_err(|e| CcrError::io(path, e))
}

pub fn read_vector<T: Real>(path: impl AsRef<Path>) -> Result<DVector<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CcrError::io(path, e))?;
    let (text, start) = split_header(&bytes, VECTOR_MAGIC)?;
    let header: VectorHeader = serde_json::from_str(text)
        .map_err(|e| CcrError::format(format!("line 2, column {}", e.column()), e.to_string()))?;
    let spec = BlockSpec { name: "values".into(), rows: header.len, cols: 1 };
    let mut cur = Cursor { bytes: &bytes, pos: start };
    let values = cur.block::<T>(&spec)?;
    if cur.pos != bytes.len() {
        return Err(CcrError::format(format!("byte {}", cur.pos), "trailing bytes"));
    }
    Ok(DVector::from_vec(values))
}
