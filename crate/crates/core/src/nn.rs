//! Layers shared by the conditioner, velocity net and decoder.
//!
//! Layers hold only [`ParamId`]s; values live in a [`ParamStore`]. Building a
//! layer against a store that already holds its names reuses those values,
//! which is how checkpoints are rebound to fresh model structs.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{AttnMask, AttnShape, Graph, ParamId, ParamStore, RopeTable, Tensor, Var, NORM_EPS};

pub(crate) fn param<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    shape: &[usize],
    std: f32,
    rng: &mut R,
) -> Result<ParamId> {
    // draw unconditionally so the rng stream does not depend on store contents
    let fresh = if std == 0.0 {
        Tensor::zeros(shape.to_vec())
    } else {
        Tensor::randn(shape.to_vec(), std, rng)
    };
    store.get_or_insert_with(name, shape, || fresh)
}

pub(crate) fn ones_param(store: &mut ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    store.get_or_insert_with(name, shape, || Tensor::ones(shape.to_vec()))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = param(store, &format!("{name}.w"), &[d_in, d_out], 1.0 / (d_in as f32).sqrt(), rng)?;
        let b = if bias {
            Some(param(store, &format!("{name}.b"), &[1, d_out], 0.0, rng)?)
        } else {
            None
        };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_tiled(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: ones_param(store, &format!("{name}.gain"), &[d])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        g.rms_norm(x, gain, NORM_EPS)
    }
}

/// `Linear → SiLU → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, d_out, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.silu(h);
        self.down.forward(g, store, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

/// Multi-head attention with grouped key/value heads.
#[derive(Clone, Debug)]
pub struct Attention {
    pub cfg: AttentionConfig,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut R) -> Result<Self> {
        let qd = cfg.q_heads * cfg.head_dim;
        let kd = cfg.kv_heads * cfg.head_dim;
        Ok(Self {
            cfg,
            wq: Linear::new(store, &format!("{name}.wq"), cfg.d_model, qd, false, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), cfg.d_model, kd, false, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), cfg.d_model, kd, false, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), qd, cfg.d_model, false, rng)?,
        })
    }

    /// Projected keys and values of `x`, `[B·L, kv_heads·head_dim]` each.
    pub fn project_kv(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        Ok((self.wk.forward(g, store, x)?, self.wv.forward(g, store, x)?))
    }

    /// Self-attention over `batch` sequences of `len` rows each.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        batch: usize,
        len: usize,
        mask: &AttnMask,
        rope: Option<&RopeTable>,
    ) -> Result<Var> {
        let mut q = self.wq.forward(g, store, x)?;
        let (mut k, v) = self.project_kv(g, store, x)?;
        if let Some(table) = rope {
            q = g.rope(q, table)?;
            k = g.rope(k, table)?;
        }
        let shape = AttnShape {
            batch,
            lq: len,
            lk: len,
            q_heads: self.cfg.q_heads,
            kv_heads: self.cfg.kv_heads,
            head_dim: self.cfg.head_dim,
        };
        let o = g.attention(q, k, v, shape, mask)?;
        self.wo.forward(g, store, o)
    }
}

/// Transformer block. With `sandwich` set, each sublayer output is
/// normalized again before the residual add.
#[derive(Clone, Debug)]
pub struct Block {
    pub attn: Attention,
    pub mlp: Mlp,
    pub pre_attn: RmsNorm,
    pub pre_mlp: RmsNorm,
    pub post: Option<(RmsNorm, RmsNorm)>,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        mlp_hidden: usize,
        sandwich: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let attn = Attention::new(store, &format!("{name}.attn"), cfg, rng)?;
        let mlp = Mlp::new(store, &format!("{name}.mlp"), d, mlp_hidden, d, rng)?;
        let pre_attn = RmsNorm::new(store, &format!("{name}.pre_attn"), d)?;
        let pre_mlp = RmsNorm::new(store, &format!("{name}.pre_mlp"), d)?;
        let post = if sandwich {
            Some((
                RmsNorm::new(store, &format!("{name}.post_attn"), d)?,
                RmsNorm::new(store, &format!("{name}.post_mlp"), d)?,
            ))
        } else {
            None
        };
        Ok(Self {
            attn,
            mlp,
            pre_attn,
            pre_mlp,
            post,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        batch: usize,
        len: usize,
        mask: &AttnMask,
        rope: Option<&RopeTable>,
    ) -> Result<Var> {
        let h = self.pre_attn.forward(g, store, x)?;
        let mut a = self.attn.forward(g, store, h, batch, len, mask, rope)?;
        if let Some((post, _)) = &self.post {
            a = post.forward(g, store, a)?;
        }
        let x = g.add(x, a)?;
        let h = self.pre_mlp.forward(g, store, x)?;
        let mut m = self.mlp.forward(g, store, h)?;
        if let Some((_, post)) = &self.post {
            m = post.forward(g, store, m)?;
        }
        g.add(x, m)
    }
}
