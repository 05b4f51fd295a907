use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{check_resolution, ImageGrid};
use super::{LatentSeq, LatentSpace, World, SEMANTIC_DIM, SEMANTIC_TOKENS};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use crate::rng::stream;

const HIDDEN: usize = 256;
pub const DECODER_PREFIX: &str = "decoder.";

/// Deterministic perceptron from a flattened semantic latent to pixels.
#[derive(Clone, Debug)]
pub struct SemanticDecoder {
    pub res: usize,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl SemanticDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, res: usize, rng: &mut R) -> Result<Self> {
        check_resolution(res)?;
        let d_in = SEMANTIC_TOKENS * SEMANTIC_DIM;
        Ok(Self {
            res,
            l1: Linear::new(store, "decoder.l1", d_in, HIDDEN, true, rng)?,
            l2: Linear::new(store, "decoder.l2", HIDDEN, HIDDEN, true, rng)?,
            l3: Linear::new(store, "decoder.l3", HIDDEN, res * res * 3, true, rng)?,
        })
    }

    /// Whether `store` already holds decoder weights for `res`.
    pub fn present(store: &ParamStore, res: usize) -> bool {
        store
            .id("decoder.l3.w")
            .is_some_and(|id| store.value(id).shape() == [HIDDEN, res * res * 3])
    }

    /// `[B, 128] → [B, res²·3]`, unclipped.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.silu(h);
        let h = self.l2.forward(g, store, h)?;
        let h = g.silu(h);
        self.l3.forward(g, store, h)
    }

    pub fn decode(&self, store: &ParamStore, lat: &LatentSeq) -> Result<ImageGrid> {
        Ok(self.decode_batch(store, std::slice::from_ref(lat))?.remove(0))
    }

    pub fn decode_batch(&self, store: &ParamStore, lats: &[LatentSeq]) -> Result<Vec<ImageGrid>> {
        if lats.iter().any(|l| l.space != LatentSpace::Semantic) {
            return Err(Error::contract("semantic decoder needs semantic latents"));
        }
        let rows: Vec<&[f32]> = lats.iter().map(|l| l.tokens.data()).collect();
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::stack_rows(&rows)?);
        let y = self.forward(&mut g, store, x)?;
        let out = g.value(y);
        (0..lats.len())
            .map(|i| ImageGrid::new(self.res, out.row(i).to_vec()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

const SNAPSHOT_EVERY: usize = 250;

/// Fits a [`SemanticDecoder`] to reconstruct `world` images from their
/// frozen semantic latents by mean squared pixel error. Returns the loss
/// every 50 steps.
///
/// A non-finite loss restores the last finite weights and returns
/// [`Error::Divergence`].
pub fn train_semantic_decoder(
    store: &mut ParamStore,
    world: &World,
    cfg: DecoderTrainConfig,
) -> Result<(SemanticDecoder, Vec<f32>)> {
    if cfg.batch == 0 {
        return Err(Error::config("batch", "must be positive"));
    }
    let mut rng = stream(cfg.seed, 0xdec0de);
    let dec = SemanticDecoder::new(store, world.resolution(), &mut rng)?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut curve = Vec::new();
    let mut snapshot = store.clone();
    for step in 0..cfg.steps {
        if step % SNAPSHOT_EVERY == 0 {
            snapshot = store.clone();
        }
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..world.len())).collect();
        let lat: Vec<&[f32]> = idx.iter().map(|&i| world.samples[i].semantic.tokens.data()).collect();
        let img: Vec<&[f32]> = idx.iter().map(|&i| world.samples[i].image.data.as_slice()).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::stack_rows(&lat)?);
        let y = g.constant(Tensor::stack_rows(&img)?);
        let pred = dec.forward(&mut g, store, x)?;
        let loss = g.mse(pred, y)?;
        let lv = g.value(loss).item()?;
        if !lv.is_finite() {
            *store = snapshot;
            return Err(Error::Divergence {
                step,
                detail: "semantic decoder loss is not finite".into(),
            });
        }
        if step % 50 == 0 {
            curve.push(lv);
        }
        let grads = g.backward(loss)?;
        opt.step(store, &grads)?;
    }
    Ok((dec, curve))
}
