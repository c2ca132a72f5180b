//! CIFAR-10 binary format ingestion.
//!
//! Each record is 3073 bytes: one label byte (0-9) followed by 3072 pixel
//! bytes laid out as full R, G, B planes of a 32x32 row-major image. Pixels
//! are scaled to [0, 1] and average-pooled 8x8 down to a 4x4 grid of
//! (r, g, b) patch vectors.

use super::{DataError, LabeledImage, Result};
use crate::numerics::Mat;

const RECORD_LEN: usize = 3073;
const PLANE: usize = 1024;
const SIDE: usize = 32;
const POOL: usize = 8;
const GRID: usize = SIDE / POOL;

/// Grid side length produced by the pooled CIFAR-10 loader.
pub const CIFAR_GRID_SIZE: usize = GRID;
/// Patch vector length produced by the pooled CIFAR-10 loader (r, g, b).
pub const CIFAR_PATCH_DIM: usize = 3;

/// Parse a CIFAR-10 binary batch buffer into pooled labeled grids.
pub fn parse_cifar10_binary(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    if bytes.len() % RECORD_LEN != 0 {
        let offset = bytes.len() / RECORD_LEN * RECORD_LEN;
        return Err(DataError::Format {
            offset,
            msg: format!(
                "truncated record: {} trailing bytes (records are {RECORD_LEN} bytes)",
                bytes.len() - offset
            ),
        });
    }
    let mut images = Vec::with_capacity(bytes.len() / RECORD_LEN);
    for (rec, chunk) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        let offset = rec * RECORD_LEN;
        let label = chunk[0];
        if label > 9 {
            return Err(DataError::Format {
                offset,
                msg: format!("label byte {label} out of range 0-9"),
            });
        }
        let pixels = &chunk[1..];
        let mut grid = Mat::zeros(GRID * GRID, CIFAR_PATCH_DIM);
        for gy in 0..GRID {
            for gx in 0..GRID {
                let patch = gy * GRID + gx;
                for (channel, plane) in pixels.chunks_exact(PLANE).enumerate() {
                    let mut acc = 0.0f64;
                    for py in 0..POOL {
                        for px in 0..POOL {
                            let y = gy * POOL + py;
                            let x = gx * POOL + px;
                            acc += plane[y * SIDE + x] as f64 / 255.0;
                        }
                    }
                    grid.set(patch, channel, (acc / (POOL * POOL) as f64) as f32);
                }
            }
        }
        images.push(LabeledImage {
            grid,
            class_id: label as usize,
        });
    }
    Ok(images)
}
