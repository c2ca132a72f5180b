//! "CGEN" dataset files: magic, class count, grid size, patch dim, record
//! count, then (u16 class id, f32-LE grid) records. Round trips bit-exactly.

use super::{DataError, LabeledImage, Result};
use crate::numerics::Mat;
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"CGEN";

pub fn save_dataset<W: Write>(
    w: &mut W,
    n_classes: usize,
    grid_size: usize,
    patch_dim: usize,
    images: &[LabeledImage],
) -> Result<()> {
    w.write_all(MAGIC)?;
    for v in [n_classes, grid_size, patch_dim, images.len()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for img in images {
        w.write_all(&(img.class_id as u16).to_le_bytes())?;
        for &x in img.grid.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_dataset<R: Read>(r: &mut R) -> Result<(usize, usize, usize, Vec<LabeledImage>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DataError::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    let word = |i: usize| u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (n_classes, grid_size, patch_dim, n) = (word(0), word(1), word(2), word(3));
    let n_patches = grid_size * grid_size;
    let mut images = Vec::with_capacity(n);
    for rec in 0..n {
        let mut class = [0u8; 2];
        r.read_exact(&mut class).map_err(|e| DataError::Format {
            offset: 20 + rec * (2 + n_patches * patch_dim * 4),
            msg: format!("truncated record: {e}"),
        })?;
        let class_id = u16::from_le_bytes(class) as usize;
        if class_id >= n_classes {
            return Err(DataError::Format {
                offset: 20 + rec * (2 + n_patches * patch_dim * 4),
                msg: format!("class id {class_id} >= {n_classes}"),
            });
        }
        let mut buf = vec![0u8; n_patches * patch_dim * 4];
        r.read_exact(&mut buf).map_err(|e| DataError::Format {
            offset: 20 + rec * (2 + n_patches * patch_dim * 4) + 2,
            msg: format!("truncated grid: {e}"),
        })?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        images.push(LabeledImage {
            grid: Mat::from_vec(n_patches, patch_dim, data).expect("sized above"),
            class_id,
        });
    }
    Ok((n_classes, grid_size, patch_dim, images))
}
