//! Diffusion transformer predicting the flow velocity of latent tokens.
//!
//! Latent tokens and conditioning tokens are concatenated into one
//! sequence, every token receives the time embedding, and sandwich-norm
//! blocks with grouped-query attention and 3-axis rotary embeddings run
//! bidirectionally over the whole sequence. Output is read back at the
//! latent positions only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, Block, Linear, Mlp, RmsNorm};
use crate::numerics::{AttnMask, Graph, ParamStore, RopeTable, Tensor, Var};
use crate::world::{LatentSeq, LatentSpace, PATCH};

pub const VELOCITY_PREFIX: &str = "velocity.";
pub const TIME_FEATURES: usize = 32;
const TIME_BASE: f32 = 1e4;
/// `t ∈ [0, 1]` is stretched before the sinusoidal features.
const TIME_SCALE: f32 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityConfig {
    pub space: LatentSpace,
    pub resolution: usize,
    pub d_model: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub n_cond: usize,
    pub rope_base: f32,
    pub sandwich: bool,
}

impl VelocityConfig {
    pub fn new(space: LatentSpace, resolution: usize) -> Self {
        Self {
            space,
            resolution,
            d_model: 64,
            q_heads: 8,
            kv_heads: 2,
            head_dim: 12,
            layers: 4,
            mlp_hidden: 128,
            n_cond: 8,
            rope_base: 100.0,
            sandwich: true,
        }
    }

    pub fn latent_tokens(&self) -> usize {
        self.space.tokens(self.resolution)
    }

    pub fn latent_dim(&self) -> usize {
        self.space.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kv_heads == 0 || self.q_heads % self.kv_heads != 0 {
            return Err(Error::config(
                "kv_heads",
                format!("{} query heads are not divisible by {}", self.q_heads, self.kv_heads),
            ));
        }
        if self.head_dim % 6 != 0 {
            return Err(Error::config("head_dim", format!("{} is not divisible by 6", self.head_dim)));
        }
        Ok(())
    }

    /// `(time, height, width)` per sequence position: latents first, then
    /// conditioning tokens on the time=1 plane.
    pub fn coords(&self) -> Vec<[usize; 3]> {
        let mut c: Vec<[usize; 3]> = match self.space {
            LatentSpace::Semantic => (0..self.latent_tokens()).map(|i| [0, i, 0]).collect(),
            LatentSpace::Pixel => {
                let side = self.resolution / PATCH;
                (0..side * side).map(|i| [0, i / side, i % side]).collect()
            }
        };
        c.extend((0..self.n_cond).map(|i| [1, i, 0]));
        c
    }
}

/// Rotary table over three coordinate axes. Each head is split into three
/// equal bands; band `a` rotates by `coord[a] · base^(-k / pairs_per_band)`
/// for pair `k` of the band.
pub fn rope_table(coords: &[[usize; 3]], head_dim: usize, base: f32) -> Result<RopeTable> {
    if head_dim % 6 != 0 || head_dim == 0 {
        return Err(Error::config("head_dim", format!("{head_dim} is not divisible by 6")));
    }
    let band_pairs = head_dim / 6;
    let freqs: Vec<f32> = (0..band_pairs).map(|k| base.powf(-(k as f32) / band_pairs as f32)).collect();
    let pairs = head_dim / 2;
    let mut cos = Vec::with_capacity(coords.len() * pairs);
    let mut sin = Vec::with_capacity(coords.len() * pairs);
    for c in coords {
        for axis in c {
            for f in &freqs {
                let a = *axis as f32 * f;
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
    }
    Ok(RopeTable {
        len: coords.len(),
        head_dim,
        cos,
        sin,
    })
}

/// Applies `table` to `[len, heads·head_dim]` rows.
pub fn rope_apply(x: &Tensor, table: &RopeTable) -> Result<Tensor> {
    let mut g = Graph::no_grad();
    let v = g.constant(x.clone());
    let y = g.rope(v, table)?;
    Ok(g.value(y).clone())
}

/// Sinusoidal features of `TIME_SCALE · t`, `[B, 32]`: sines then cosines.
pub fn time_features(ts: &[f32]) -> Tensor {
    let half = TIME_FEATURES / 2;
    let mut data = Vec::with_capacity(ts.len() * TIME_FEATURES);
    for &t in ts {
        let s = t * TIME_SCALE;
        let f = |k: usize| s * TIME_BASE.powf(-(k as f32) / half as f32);
        data.extend((0..half).map(|k| f(k).sin()));
        data.extend((0..half).map(|k| f(k).cos()));
    }
    Tensor::new([ts.len(), TIME_FEATURES], data).expect("non-empty batch")
}

#[derive(Clone, Debug)]
pub struct VelocityNet {
    pub cfg: VelocityConfig,
    proj_in: Linear,
    cond_in: Linear,
    time_mlp: Mlp,
    pub blocks: Vec<Block>,
    final_norm: RmsNorm,
    proj_out: Linear,
    rope: RopeTable,
}

impl VelocityNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: VelocityConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let attn = AttentionConfig {
            d_model: d,
            q_heads: cfg.q_heads,
            kv_heads: cfg.kv_heads,
            head_dim: cfg.head_dim,
        };
        let proj_in = Linear::new(store, "velocity.proj_in", cfg.latent_dim(), d, true, rng)?;
        let cond_in = Linear::new(store, "velocity.cond_in", d, d, true, rng)?;
        let time_mlp = Mlp::new(store, "velocity.time", TIME_FEATURES, d, d, rng)?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, &format!("velocity.block{i}"), attn, cfg.mlp_hidden, cfg.sandwich, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = RmsNorm::new(store, "velocity.final_norm", d)?;
        let proj_out = Linear::new(store, "velocity.proj_out", d, cfg.latent_dim(), true, rng)?;
        let rope = rope_table(&cfg.coords(), cfg.head_dim, cfg.rope_base)?;
        Ok(Self {
            cfg,
            proj_in,
            cond_in,
            time_mlp,
            blocks,
            final_norm,
            proj_out,
            rope,
        })
    }

    pub fn rope(&self) -> &RopeTable {
        &self.rope
    }

    /// Velocity at the latent positions, `[B·L, d_latent]`.
    ///
    /// `x_t` is `[B·L, d_latent]`, `q_cond` is `[B·N_q, d_model]` and `ts`
    /// holds one time per sample.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_t: Var, q_cond: Var, ts: &[f32]) -> Result<Var> {
        let b = ts.len();
        let l = self.cfg.latent_tokens();
        let xs = g.value(x_t).shape().to_vec();
        if xs != [b * l, self.cfg.latent_dim()] {
            return Err(Error::shape("predict_velocity.x_t", &xs, &[b * l, self.cfg.latent_dim()]));
        }
        let qs = g.value(q_cond).shape().to_vec();
        if qs != [b * self.cfg.n_cond, self.cfg.d_model] {
            return Err(Error::shape("predict_velocity.q_cond", &qs, &[b * self.cfg.n_cond, self.cfg.d_model]));
        }
        let h = self.proj_in.forward(g, store, x_t)?;
        let c = self.cond_in.forward(g, store, q_cond)?;
        let mut x = g.concat_seq(h, c, b)?;
        let tf = g.constant(time_features(ts));
        let temb = self.time_mlp.forward(g, store, tf)?;
        x = g.add_repeated(x, temb)?;
        let len = l + self.cfg.n_cond;
        let mask = AttnMask::full();
        for block in &self.blocks {
            x = block.forward(g, store, x, b, len, &mask, Some(&self.rope))?;
        }
        let x = self.final_norm.forward(g, store, x)?;
        let x = g.slice_seq(x, b, 0, l)?;
        self.proj_out.forward(g, store, x)
    }

    /// Batched inference on plain tensors.
    pub fn velocity(&self, store: &ParamStore, x_t: &Tensor, q_cond: &Tensor, ts: &[f32]) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let x = g.constant(x_t.clone());
        let q = g.constant(q_cond.clone());
        let v = self.forward(&mut g, store, x, q, ts)?;
        Ok(g.value(v).clone())
    }

    pub fn predict_velocity(&self, store: &ParamStore, x_t: &LatentSeq, q_cond: &Tensor, t: f32) -> Result<Tensor> {
        if x_t.space != self.cfg.space {
            return Err(Error::contract(format!(
                "velocity net configured for {:?} latents, got {:?}",
                self.cfg.space, x_t.space
            )));
        }
        self.velocity(store, &x_t.tokens, q_cond, &[t])
    }
}
