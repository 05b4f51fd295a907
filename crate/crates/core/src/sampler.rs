//! Transport from Gaussian noise to latents along a learned velocity field,
//! and end-to-end image generation for each pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Models, Pipeline};
use crate::numerics::{ParamStore, Tensor};
use crate::objectives::standard_normal;
use crate::rng::stream;
use crate::velocity::VelocityNet;
use crate::world::{tokenize, ImageGrid, LatentSeq, LatentSpace, PromptSpec, TokenSeq};

const NOISE_STREAM: u64 = 0x5a3b1e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Heun,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub method: Method,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            method: Method::Euler,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::config("n_steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// A time-dependent vector field over a batch of stacked latents.
///
/// `x` is `[B·L, d]` and `ts` holds one time per batch element.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, ts: &[f32]) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, &[f32]) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, ts: &[f32]) -> Result<Tensor> {
        self(x, ts)
    }
}

/// A trained velocity net with its conditioning fixed.
pub struct NetField<'a> {
    pub net: &'a VelocityNet,
    pub store: &'a ParamStore,
    pub q_cond: &'a Tensor,
}

impl VelocityField for NetField<'_> {
    fn velocity(&self, x: &Tensor, ts: &[f32]) -> Result<Tensor> {
        self.net.velocity(self.store, x, self.q_cond, ts)
    }
}

/// Integrates `dx/dt = v(x, t)` from `t = 0` to `t = 1` on a uniform grid.
pub fn integrate<V: VelocityField + ?Sized>(
    field: &V,
    x0: Tensor,
    batch: usize,
    n_steps: usize,
    method: Method,
) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::config("n_steps", "must be at least 1"));
    }
    let dt = 1.0 / n_steps as f32;
    let mut x = x0;
    for k in 0..n_steps {
        let t = k as f32 * dt;
        let v = field.velocity(&x, &vec![t; batch])?;
        let next = match method {
            Method::Euler => x.zip_map(&v, "euler", |a, b| a + dt * b)?,
            Method::Heun => {
                let pred = x.zip_map(&v, "euler", |a, b| a + dt * b)?;
                let v2 = field.velocity(&pred, &vec![t + dt; batch])?;
                let avg = v.zip_map(&v2, "heun", |a, b| 0.5 * (a + b))?;
                x.zip_map(&avg, "heun", |a, b| a + dt * b)?
            }
        };
        if !next.is_finite() {
            return Err(Error::SamplerNan { step: k });
        }
        x = next;
    }
    Ok(x)
}

/// Initial noise for one sample: a pure function of `seed`.
pub fn initial_noise(seed: u64, tokens: usize, dim: usize) -> Tensor {
    standard_normal(&[tokens, dim], &mut stream(seed, NOISE_STREAM))
}

/// Samples one latent per conditioning block. `q_cond` is `[B·N_q, d_model]`
/// and `seeds[i]` fixes the noise of sample `i`.
pub fn sample_latents(
    net: &VelocityNet,
    store: &ParamStore,
    q_cond: &Tensor,
    seeds: &[u64],
    cfg: &SamplerConfig,
) -> Result<Vec<LatentSeq>> {
    cfg.validate()?;
    let (l, d) = (net.cfg.latent_tokens(), net.cfg.latent_dim());
    let noise: Vec<Tensor> = seeds.iter().map(|&s| initial_noise(s, l, d)).collect();
    let rows: Vec<&[f32]> = noise.iter().map(Tensor::data).collect();
    let x0 = Tensor::stack_rows(&rows)?.reshape([seeds.len() * l, d])?;
    let field = NetField { net, store, q_cond };
    let x1 = integrate(&field, x0, seeds.len(), cfg.n_steps, cfg.method)?;
    (0..seeds.len())
        .map(|i| LatentSeq::new(net.cfg.space, x1.slice_rows(i * l, l)?, net.cfg.resolution))
        .collect()
}

/// Single-sample form using `cfg.seed` for the noise.
pub fn sample_latent(net: &VelocityNet, store: &ParamStore, q_cond: &Tensor, cfg: &SamplerConfig) -> Result<LatentSeq> {
    Ok(sample_latents(net, store, q_cond, &[cfg.seed], cfg)?.remove(0))
}

/// One generated image with the latent it was decoded from.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub latent: LatentSeq,
    pub image: ImageGrid,
}

/// Generates one image per `(prompt, seed)` pair. Seeds are ignored by
/// `clip_mse`, whose output is a deterministic function of the prompt.
pub fn generate_batch(
    prompts: &[TokenSeq],
    seeds: &[u64],
    pipeline: Pipeline,
    models: &Models,
    cfg: &SamplerConfig,
) -> Result<Vec<Generated>> {
    if prompts.len() != seeds.len() {
        return Err(Error::contract(format!("{} prompts but {} seeds", prompts.len(), seeds.len())));
    }
    if prompts.is_empty() {
        return Ok(Vec::new());
    }
    models.require_pipeline(pipeline)?;
    let store = &models.store;
    let q = models.conditioner.condition_batch(store, prompts)?;
    let latents = match pipeline {
        Pipeline::ClipMse => {
            let head = models.mse_head.as_ref().expect("required above");
            let x = head.predict(store, &q)?;
            let l = models.conditioner.cfg.n_queries;
            (0..prompts.len())
                .map(|i| LatentSeq::new(LatentSpace::Semantic, x.slice_rows(i * l, l)?, models.world.resolution))
                .collect::<Result<Vec<_>>>()?
        }
        Pipeline::ClipFm | Pipeline::VaeFm => {
            let net = models.velocity.as_ref().expect("required above");
            sample_latents(net, store, &q, seeds, cfg)?
        }
    };
    let images = match pipeline.space() {
        LatentSpace::Semantic => models.decoder.as_ref().expect("required above").decode_batch(store, &latents)?,
        LatentSpace::Pixel => latents.iter().map(|l| models.codec.decode(l)).collect::<Result<Vec<_>>>()?,
    };
    Ok(latents
        .into_iter()
        .zip(images)
        .map(|(latent, image)| Generated { latent, image })
        .collect())
}

pub fn generate(prompt: &TokenSeq, pipeline: Pipeline, models: &Models, cfg: &SamplerConfig) -> Result<ImageGrid> {
    Ok(generate_batch(std::slice::from_ref(prompt), &[cfg.seed], pipeline, models, cfg)?
        .remove(0)
        .image)
}

/// Convenience: every `(spec, seed)` combination, spec-major.
pub fn generate_grid(
    specs: &[PromptSpec],
    seeds: &[u64],
    pipeline: Pipeline,
    models: &Models,
    cfg: &SamplerConfig,
) -> Result<Vec<Generated>> {
    let mut prompts = Vec::with_capacity(specs.len() * seeds.len());
    let mut all_seeds = Vec::with_capacity(prompts.capacity());
    for spec in specs {
        let p = tokenize(spec);
        for &s in seeds {
            prompts.push(p.clone());
            all_seeds.push(s);
        }
    }
    generate_batch(&prompts, &all_seeds, pipeline, models, cfg)
}
