//! Procedural prompt→image world and its two latent pipelines.

mod decoder;
mod io;
mod pixel;
mod prompt;
mod render;
mod semantic;

use serde::{Deserialize, Serialize};

pub use decoder::{train_semantic_decoder, DECODER_PREFIX, DecoderTrainConfig, SemanticDecoder};
pub use io::{read_world_blob, WorldBlob, WorldRecord, WORLD_MAGIC, WORLD_VERSION};
pub use pixel::{pixel_tokens, PixelCodec, PATCH, PIXEL_DIM};
pub use prompt::{
    tokenize, Color, PromptSpec, Quadrant, Shape, Size, TokenSeq, ATTRIBUTE_GROUPS, BOS, MAX_PROMPT_LEN, NUM_CLASSES,
    PAD, VOCAB, VOCAB_SIZE,
};
pub use render::{color_rgb, render, ImageGrid, StyleParams, RESOLUTIONS};
pub use semantic::{SemanticEncoder, SEMANTIC_DIM, SEMANTIC_TOKENS};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::stream;

/// Master seed whose featurizer passed the held-out understanding check.
pub const DEFAULT_WORLD_SEED: u64 = 37;
pub const DEFAULT_STYLES: usize = 4;

const STREAM_STYLES: u64 = 1;
const STREAM_FEATURIZER: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSpace {
    Semantic,
    Pixel,
}

impl LatentSpace {
    pub fn dim(self) -> usize {
        match self {
            LatentSpace::Semantic => SEMANTIC_DIM,
            LatentSpace::Pixel => PIXEL_DIM,
        }
    }

    pub fn tokens(self, res: usize) -> usize {
        match self {
            LatentSpace::Semantic => SEMANTIC_TOKENS,
            LatentSpace::Pixel => pixel_tokens(res),
        }
    }
}

/// Token sequence tagged with the space it lives in.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSeq {
    pub space: LatentSpace,
    pub tokens: Tensor,
    pub source_resolution: usize,
}

impl LatentSeq {
    pub fn new(space: LatentSpace, tokens: Tensor, source_resolution: usize) -> Result<Self> {
        let want = [space.tokens(source_resolution), space.dim()];
        if tokens.shape() != want {
            return Err(Error::shape("LatentSeq", tokens.shape(), &want));
        }
        Ok(Self {
            space,
            tokens,
            source_resolution,
        })
    }

    /// Mean over tokens.
    pub fn pooled(&self) -> Vec<f32> {
        pool_rows(&self.tokens)
    }
}

pub(crate) fn pool_rows(t: &Tensor) -> Vec<f32> {
    let d = t.cols();
    let mut out = vec![0.0f64; d];
    for row in t.data().chunks(d) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += *v as f64);
    }
    out.iter().map(|v| (v / t.rows() as f64) as f32).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub resolution: usize,
    pub styles: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_WORLD_SEED,
            resolution: 16,
            styles: DEFAULT_STYLES,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldSample {
    pub spec: PromptSpec,
    pub image: ImageGrid,
    pub semantic: LatentSeq,
}

/// Every class × style rendering with its latents, generated from one
/// master seed.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub styles: Vec<StyleParams>,
    pub encoder: SemanticEncoder,
    pub codec: PixelCodec,
    /// Class-major, style-minor.
    pub samples: Vec<WorldSample>,
}

impl World {
    pub fn generate(config: WorldConfig) -> Result<Self> {
        render::check_resolution(config.resolution)?;
        if config.styles == 0 {
            return Err(Error::config("styles", "must be at least 1"));
        }
        let mut srng = stream(config.seed, STREAM_STYLES);
        let styles: Vec<StyleParams> = (0..config.styles).map(|_| StyleParams::sample(&mut srng)).collect();
        let mut encoder = SemanticEncoder::new(&mut stream(config.seed, STREAM_FEATURIZER));
        let mut rendered = Vec::with_capacity(NUM_CLASSES * config.styles);
        for class in 0..NUM_CLASSES {
            for (s, style) in styles.iter().enumerate() {
                let spec = PromptSpec::from_class(class, s)?;
                rendered.push((spec, render(&spec, style, config.resolution)?));
            }
        }
        encoder.fit_standardization(rendered.iter().map(|(_, img)| img));
        let samples: Vec<WorldSample> = rendered
            .into_iter()
            .map(|(spec, image)| {
                let semantic = encoder.encode(&image);
                WorldSample { spec, image, semantic }
            })
            .collect();
        let codec = PixelCodec::fit(samples.iter().map(|s| &s.image))?;
        Ok(Self {
            config,
            styles,
            encoder,
            codec,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn index(&self, class: usize, style: usize) -> usize {
        class * self.config.styles + style
    }

    pub fn sample(&self, class: usize, style: usize) -> &WorldSample {
        &self.samples[self.index(class, style)]
    }

    /// Renders `spec` at another resolution with this world's styles.
    pub fn render_at(&self, spec: &PromptSpec, res: usize) -> Result<ImageGrid> {
        let style = self
            .styles
            .get(spec.style_seed)
            .ok_or_else(|| Error::config("style_seed", format!("{} >= {}", spec.style_seed, self.config.styles)))?;
        render(spec, style, res)
    }

    pub fn encode_semantic(&self, img: &ImageGrid) -> LatentSeq {
        self.encoder.encode(img)
    }

    pub fn encode_pixel(&self, img: &ImageGrid) -> LatentSeq {
        self.codec.encode(img)
    }

    pub fn decode_pixel(&self, lat: &LatentSeq) -> Result<ImageGrid> {
        self.codec.decode(lat)
    }

    pub fn latent(&self, i: usize, space: LatentSpace) -> LatentSeq {
        match space {
            LatentSpace::Semantic => self.samples[i].semantic.clone(),
            LatentSpace::Pixel => self.codec.encode(&self.samples[i].image),
        }
    }

    /// Held-out style for understanding evaluation: `class % styles`.
    pub fn heldout_style(&self, class: usize) -> usize {
        class % self.config.styles
    }

    /// `(train, heldout)` sample indices for understanding.
    pub fn understanding_split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| {
            let spec = &self.samples[i].spec;
            spec.style_seed != self.heldout_style(spec.class_index())
        })
    }

    /// Pooled semantic feature of every style of `class`.
    pub fn style_features(&self, class: usize) -> Vec<Vec<f32>> {
        (0..self.config.styles).map(|s| self.sample(class, s).semantic.pooled()).collect()
    }

    /// Per-class mean semantic latent, `[L, d]`.
    pub fn class_centroid(&self, class: usize) -> Tensor {
        let mut acc = Tensor::zeros([SEMANTIC_TOKENS, SEMANTIC_DIM]);
        for s in 0..self.config.styles {
            acc = acc.add(&self.sample(class, s).semantic.tokens).expect("same shape");
        }
        acc.scale(1.0 / self.config.styles as f32)
    }
}
