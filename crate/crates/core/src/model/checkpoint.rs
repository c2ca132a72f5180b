//! "TVLM" checkpoint files: magic, version, config block, then parameter
//! tensors in canonical order as name-prefixed little-endian f32 blobs.
//! Round trips are bit-exact.

use super::{ModelConfig, ModelError, Params, Result, TinyVlm};
use crate::numerics::Mat;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TVLM";
const VERSION: u32 = 1;

impl TinyVlm {
    pub fn save_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let c = &self.cfg;
        for v in [
            c.n_layers,
            c.n_heads,
            c.d_model,
            c.vocab_size,
            c.n_image_tokens,
            c.max_seq,
            c.n_classes,
            c.patch_dim,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let tensors = self.params.tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, mat) in tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(mat.rows() as u32).to_le_bytes())?;
            w.write_all(&(mat.cols() as u32).to_le_bytes())?;
            for &x in mat.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint<R: Read>(r: &mut R) -> Result<TinyVlm> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let cfg = ModelConfig {
            n_layers: read_u32(r)? as usize,
            n_heads: read_u32(r)? as usize,
            d_model: read_u32(r)? as usize,
            vocab_size: read_u32(r)? as usize,
            n_image_tokens: read_u32(r)? as usize,
            max_seq: read_u32(r)? as usize,
            n_classes: read_u32(r)? as usize,
            patch_dim: read_u32(r)? as usize,
        };
        cfg.validate()?;
        let mut params = Params::zeros(&cfg);
        let n_tensors = read_u32(r)? as usize;
        let expected = params.tensors_mut();
        if n_tensors != expected.len() {
            return Err(ModelError::Checkpoint(format!(
                "tensor count {n_tensors} != expected {}",
                expected.len()
            )));
        }
        for (expected_name, mat) in expected {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| ModelError::Checkpoint(format!("bad tensor name: {e}")))?;
            if name != expected_name {
                return Err(ModelError::Checkpoint(format!(
                    "tensor order mismatch: got {name}, expected {expected_name}"
                )));
            }
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            if rows != mat.rows() || cols != mat.cols() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name}: shape {rows}x{cols} != expected {}x{}",
                    mat.rows(),
                    mat.cols()
                )));
            }
            let mut buf = vec![0u8; rows * cols * 4];
            r.read_exact(&mut buf)?;
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *mat = Mat::from_vec(rows, cols, data)?;
        }
        Ok(TinyVlm { cfg, params })
    }

    pub fn save_to_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save_checkpoint(&mut f)
    }

    pub fn load_from_path<P: AsRef<Path>>(path: P) -> Result<TinyVlm> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        TinyVlm::load_checkpoint(&mut f)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
