use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::World;
use crate::error::{Error, Result};

pub const WORLD_MAGIC: &[u8; 8] = b"B3OWRLD1";
pub const WORLD_VERSION: u8 = 1;
/// Magic, version byte, master seed.
const HEADER_LEN: usize = 8 + 1 + 8;

/// One JSONL manifest line. Offsets and lengths count `f32` values from the
/// start of the blob payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldRecord {
    pub class: usize,
    pub shape: super::Shape,
    pub color: super::Color,
    pub quadrant: super::Quadrant,
    pub size: super::Size,
    pub style_seed: usize,
    pub resolution: usize,
    pub image_offset: usize,
    pub image_len: usize,
    pub semantic_offset: usize,
    pub semantic_len: usize,
    pub pixel_offset: usize,
    pub pixel_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldBlob {
    pub version: u8,
    pub seed: u64,
    pub payload: Vec<f32>,
}

impl World {
    /// Writes `manifest.jsonl` and `world.bin` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::with_capacity(HEADER_LEN);
        blob.extend_from_slice(WORLD_MAGIC);
        blob.push(WORLD_VERSION);
        blob.extend_from_slice(&self.config.seed.to_le_bytes());
        let mut manifest = Vec::new();
        let mut offset = 0usize;
        for (i, s) in self.samples.iter().enumerate() {
            let pixel = self.latent(i, super::LatentSpace::Pixel);
            let parts = [s.image.data.as_slice(), s.semantic.tokens.data(), pixel.tokens.data()];
            let mut spans = [(0usize, 0usize); 3];
            for (span, part) in spans.iter_mut().zip(parts) {
                *span = (offset, part.len());
                offset += part.len();
                for v in part {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
            let rec = WorldRecord {
                class: s.spec.class_index(),
                shape: s.spec.shape,
                color: s.spec.color,
                quadrant: s.spec.quadrant,
                size: s.spec.size,
                style_seed: s.spec.style_seed,
                resolution: s.image.res,
                image_offset: spans[0].0,
                image_len: spans[0].1,
                semantic_offset: spans[1].0,
                semantic_len: spans[1].1,
                pixel_offset: spans[2].0,
                pixel_len: spans[2].1,
            };
            serde_json::to_writer(&mut manifest, &rec)?;
            manifest.push(b'\n');
        }
        fs::File::create(dir.join("world.bin"))?.write_all(&blob)?;
        fs::File::create(dir.join("manifest.jsonl"))?.write_all(&manifest)?;
        Ok(())
    }
}

/// Parses a `world.bin` file, checking magic and version.
pub fn read_world_blob(path: &Path) -> Result<WorldBlob> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != WORLD_MAGIC {
        return Err(Error::Format(format!("{} is not a world blob", path.display())));
    }
    let version = bytes[8];
    if version != WORLD_VERSION {
        return Err(Error::Format(format!("unsupported world version {version}")));
    }
    let seed = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_LEN..];
    if body.len() % 4 != 0 {
        return Err(Error::Format("world payload is not a whole number of f32".into()));
    }
    let payload = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(WorldBlob { version, seed, payload })
}
