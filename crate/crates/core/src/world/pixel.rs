use serde::{Deserialize, Serialize};

use super::render::{check_resolution, ImageGrid};
use super::{LatentSeq, LatentSpace};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const PATCH: usize = 4;
pub const PIXEL_DIM: usize = PATCH * PATCH * 3;

/// Number of pixel tokens at resolution `res`.
pub fn pixel_tokens(res: usize) -> usize {
    (res / PATCH) * (res / PATCH)
}

/// Patchify codec with a per-channel affine whitening.
///
/// Tokens run row-major over the patch grid; each token is the patch
/// flattened as `[dy][dx][c]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelCodec {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl PixelCodec {
    /// Fits channel mean and standard deviation over `images`.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a ImageGrid>) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for img in images {
            for px in img.data.chunks(3) {
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                    sq[c] += (px[c] as f64).powi(2);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::contract("pixel whitening needs at least one image"));
        }
        let mean = [0, 1, 2].map(|c| sum[c] / n as f64);
        let std = [0, 1, 2].map(|c| (sq[c] / n as f64 - mean[c] * mean[c]).max(1e-8).sqrt());
        Ok(Self {
            mean: mean.map(|v| v as f32),
            std: std.map(|v| v as f32),
        })
    }

    pub fn encode(&self, img: &ImageGrid) -> LatentSeq {
        let res = img.res;
        let side = res / PATCH;
        let mut data = Vec::with_capacity(res * res * 3);
        for py in 0..side {
            for px in 0..side {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        for c in 0..3 {
                            let v = img.get(py * PATCH + dy, px * PATCH + dx, c);
                            data.push((v - self.mean[c]) / self.std[c]);
                        }
                    }
                }
            }
        }
        LatentSeq {
            space: LatentSpace::Pixel,
            tokens: Tensor::new([side * side, PIXEL_DIM], data).expect("patch grid"),
            source_resolution: res,
        }
    }

    /// Inverse of [`PixelCodec::encode`], clipped to `[0, 1]`.
    pub fn decode(&self, lat: &LatentSeq) -> Result<ImageGrid> {
        if lat.space != LatentSpace::Pixel {
            return Err(Error::contract("decode_pixel needs a pixel-space latent"));
        }
        let res = lat.source_resolution;
        check_resolution(res)?;
        let side = res / PATCH;
        if lat.tokens.shape() != [side * side, PIXEL_DIM] {
            return Err(Error::shape("decode_pixel", lat.tokens.shape(), &[side * side, PIXEL_DIM]));
        }
        let mut data = vec![0.0f32; res * res * 3];
        let tok = lat.tokens.data();
        let mut i = 0;
        for py in 0..side {
            for px in 0..side {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        for c in 0..3 {
                            let (y, x) = (py * PATCH + dy, px * PATCH + dx);
                            data[(y * res + x) * 3 + c] = tok[i] * self.std[c] + self.mean[c];
                            i += 1;
                        }
                    }
                }
            }
        }
        ImageGrid::new(res, data)
    }
}
