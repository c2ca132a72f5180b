//! "ACTV" activation caches: residual vectors at the answer position for
//! every example and layer, stored row-major so single rows can be read
//! back by offset. Round trips are bit-exact.

use crate::HarnessError;
use conflictlens_core::numerics::Mat;
use conflictlens_core::probelab::TraceSet;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ACTV";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 * 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheHeader {
    /// Transformer block count; the body holds `n_layers + 1` vectors per
    /// row (post-embedding plus each block).
    pub n_layers: usize,
    pub d_model: usize,
    pub n_rows: usize,
    pub condition_id: u32,
}

impl CacheHeader {
    fn vecs_per_row(&self) -> usize {
        self.n_layers + 1
    }

    fn row_bytes(&self) -> u64 {
        (self.vecs_per_row() * self.d_model * 4) as u64
    }
}

/// Write a trace set's activations (meta is re-derived by consumers).
pub fn write_cache(path: &Path, condition_id: u32, traces: &TraceSet) -> Result<(), HarnessError> {
    let n_mats = traces.n_layers();
    let header = CacheHeader {
        n_layers: n_mats - 1,
        d_model: traces.per_layer[0].cols(),
        n_rows: traces.n_rows(),
        condition_id,
    };
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + (header.row_bytes() as usize) * header.n_rows);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        header.n_layers as u32,
        header.d_model as u32,
        header.n_rows as u32,
        header.condition_id,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for row in 0..header.n_rows {
        for layer in 0..n_mats {
            for &x in traces.per_layer[layer].row(row) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    crate::write_atomic(path, &buf)
}

/// Read a full cache back into per-layer matrices.
pub fn read_cache(path: &Path) -> Result<(CacheHeader, Vec<Mat>), HarnessError> {
    let bytes = std::fs::read(path)
        .map_err(|e| HarnessError::Io(format!("read {}: {e}", path.display())))?;
    let header = parse_header(&bytes, path)?;
    let expected = HEADER_LEN + header.row_bytes() * header.n_rows as u64;
    if bytes.len() as u64 != expected {
        return Err(HarnessError::Numerical(format!(
            "{}: cache body is {} bytes, header implies {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let n_mats = header.vecs_per_row();
    let mut per_layer = vec![Mat::zeros(header.n_rows, header.d_model); n_mats];
    let mut cursor = HEADER_LEN as usize;
    for row in 0..header.n_rows {
        for mat in per_layer.iter_mut() {
            let dst = mat.row_mut(row);
            for d in dst.iter_mut() {
                *d = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
                cursor += 4;
            }
        }
    }
    Ok((header, per_layer))
}

/// Read one row's vectors by direct offset (the row-aligned index).
pub fn read_row(path: &Path, row: usize) -> Result<Vec<Vec<f32>>, HarnessError> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| HarnessError::Io(format!("open {}: {e}", path.display())))?;
    let mut head = vec![0u8; HEADER_LEN as usize];
    f.read_exact(&mut head)
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    let header = parse_header(&head, path)?;
    if row >= header.n_rows {
        return Err(HarnessError::Numerical(format!(
            "row {row} out of range ({} rows)",
            header.n_rows
        )));
    }
    f.seek(SeekFrom::Start(HEADER_LEN + header.row_bytes() * row as u64))
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    let mut buf = vec![0u8; header.row_bytes() as usize];
    f.read_exact(&mut buf)
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    let mut out = Vec::with_capacity(header.vecs_per_row());
    for layer in 0..header.vecs_per_row() {
        let start = layer * header.d_model * 4;
        out.push(
            buf[start..start + header.d_model * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    Ok(out)
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<CacheHeader, HarnessError> {
    if bytes.len() < HEADER_LEN as usize || &bytes[..4] != MAGIC {
        return Err(HarnessError::Numerical(format!(
            "{}: not an ACTV cache",
            path.display()
        )));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + i * 4..8 + i * 4].try_into().unwrap());
    if word(0) != VERSION {
        return Err(HarnessError::Numerical(format!(
            "{}: unsupported cache version {}",
            path.display(),
            word(0)
        )));
    }
    Ok(CacheHeader {
        n_layers: word(1) as usize,
        d_model: word(2) as usize,
        n_rows: word(3) as usize,
        condition_id: word(4),
    })
}

/// Write a PathBuf-free Writer variant used by tests.
pub fn write_cache_to<W: Write>(
    w: &mut W,
    condition_id: u32,
    traces: &TraceSet,
) -> Result<(), HarnessError> {
    let n_mats = traces.n_layers();
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    for v in [
        (n_mats - 1) as u32,
        traces.per_layer[0].cols() as u32,
        traces.n_rows() as u32,
        condition_id,
    ] {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    for row in 0..traces.n_rows() {
        for layer in 0..n_mats {
            for &x in traces.per_layer[layer].row(row) {
                w.write_all(&x.to_le_bytes()).map_err(io_err)?;
            }
        }
    }
    Ok(())
}

fn io_err(e: std::io::Error) -> HarnessError {
    HarnessError::Io(e.to_string())
}
