//! Causal transformer backbone over prompt tokens plus learnable queries,
//! with an attribute-classification head for understanding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{param, AttentionConfig, Block, Linear, RmsNorm};
use crate::numerics::{AttnMask, Graph, ParamId, ParamStore, Tensor, Var};
use crate::world::{LatentSeq, LatentSpace, TokenSeq, ATTRIBUTE_GROUPS, MAX_PROMPT_LEN, SEMANTIC_DIM, VOCAB_SIZE};

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const QUERIES_PREFIX: &str = "queries.";
pub const HEAD_LOGITS: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub n_queries: usize,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 4,
            mlp_hidden: 128,
            n_queries: 8,
        }
    }
}

/// Parameter handles for the backbone (`backbone.*`) and the query set
/// (`queries.*`).
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub cfg: ConditionerConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    queries: ParamId,
    blocks: Vec<Block>,
    final_norm: RmsNorm,
    understand_norm: ParamId,
    understand_in: Linear,
    head: Linear,
}

/// Per-attribute logits: shape, color, quadrant, size.
pub type AttributeLogits = [Vec<f32>; 4];

impl Conditioner {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: ConditionerConfig, rng: &mut R) -> Result<Self> {
        if cfg.d_model % cfg.heads != 0 {
            return Err(Error::config("heads", format!("{} does not divide d_model {}", cfg.heads, cfg.d_model)));
        }
        let d = cfg.d_model;
        let tok_emb = param(store, "backbone.tok_emb", &[VOCAB_SIZE, d], 1.0, rng)?;
        let pos_emb = param(store, "backbone.pos_emb", &[MAX_PROMPT_LEN, d], 0.1, rng)?;
        let queries = param(store, "queries.q", &[cfg.n_queries, d], 1.0, rng)?;
        let attn = AttentionConfig {
            d_model: d,
            q_heads: cfg.heads,
            kv_heads: cfg.heads,
            head_dim: d / cfg.heads,
        };
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, &format!("backbone.block{i}"), attn, cfg.mlp_hidden, false, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = RmsNorm::new(store, "backbone.final_norm", d)?;
        let understand_norm = store.get_or_insert_with("backbone.understand_norm", &[2, SEMANTIC_DIM], || {
            let mut data = vec![0.0; SEMANTIC_DIM];
            data.extend(std::iter::repeat_n(1.0, SEMANTIC_DIM));
            Tensor::new([2, SEMANTIC_DIM], data).expect("fixed shape")
        })?;
        let understand_in = Linear::new(store, "backbone.understand_in", SEMANTIC_DIM, d, true, rng)?;
        let fresh_head = store.id("backbone.head.w").is_none();
        let head = Linear::new(store, "backbone.head", d, HEAD_LOGITS, true, rng)?;
        if fresh_head {
            // uniform predictions before any training
            store.set_value(head.w, Tensor::zeros([d, HEAD_LOGITS]))?;
        }
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            queries,
            blocks,
            final_norm,
            understand_norm,
            understand_in,
            head,
        })
    }

    /// Attention mask for `[C; Q]` sequences, or `C` alone when
    /// `n_queries` is 0: causal, and padded prompt positions are invisible
    /// as keys.
    fn mask(prompts: &[TokenSeq], n_queries: usize) -> AttnMask {
        let len = MAX_PROMPT_LEN + n_queries;
        let mut valid = Vec::with_capacity(prompts.len() * len);
        for p in prompts {
            valid.extend((0..len).map(|j| j < p.len || j >= MAX_PROMPT_LEN));
        }
        AttnMask {
            causal_offset: Some(0),
            key_valid: Some(valid),
        }
    }

    pub fn prompt_mask(&self, prompts: &[TokenSeq]) -> AttnMask {
        Self::mask(prompts, self.cfg.n_queries)
    }

    /// Final-norm states of every position of `[C; Q]` (or `C` alone),
    /// `[B·len, d_model]`.
    fn run_sequence(&self, g: &mut Graph, store: &ParamStore, prompts: &[TokenSeq], with_queries: bool) -> Result<Var> {
        let b = prompts.len();
        if b == 0 {
            return Err(Error::contract("condition needs at least one prompt"));
        }
        let mut ids = Vec::with_capacity(b * MAX_PROMPT_LEN);
        for p in prompts {
            if p.ids.len() != MAX_PROMPT_LEN || p.len > MAX_PROMPT_LEN {
                return Err(Error::contract(format!("prompt must be padded to {MAX_PROMPT_LEN} tokens")));
            }
            ids.extend_from_slice(&p.ids);
        }
        let table = g.param(store, self.tok_emb);
        let emb = g.embedding(table, &ids)?;
        let pos = g.param(store, self.pos_emb);
        let mut x = g.add_tiled(emb, pos)?;
        let n_q = if with_queries { self.cfg.n_queries } else { 0 };
        if with_queries {
            let q = g.param(store, self.queries);
            let q = g.tile_rows(q, b);
            x = g.concat_seq(x, q, b)?;
        }
        let len = MAX_PROMPT_LEN + n_q;
        let mask = Self::mask(prompts, n_q);
        for block in &self.blocks {
            x = block.forward(g, store, x, b, len, &mask, None)?;
        }
        self.final_norm.forward(g, store, x)
    }

    /// Output states at the query positions, `[B·N_q, d_model]`, read after
    /// the final norm.
    pub fn condition_graph(&self, g: &mut Graph, store: &ParamStore, prompts: &[TokenSeq]) -> Result<Var> {
        let x = self.run_sequence(g, store, prompts, true)?;
        g.slice_seq(x, prompts.len(), MAX_PROMPT_LEN, self.cfg.n_queries)
    }

    /// Attribute logits `[B, 14]` read through the understanding head at the
    /// last prompt position. Every prompt must have the same length.
    pub fn read_prompt_graph(&self, g: &mut Graph, store: &ParamStore, prompts: &[TokenSeq]) -> Result<Var> {
        let len = prompts.first().map(|p| p.len).unwrap_or(0);
        if prompts.iter().any(|p| p.len != len) || len == 0 {
            return Err(Error::contract("prompt readout needs prompts of one common length"));
        }
        let x = self.run_sequence(g, store, prompts, false)?;
        let last = g.slice_seq(x, prompts.len(), len - 1, 1)?;
        self.head.forward(g, store, last)
    }

    pub fn condition(&self, store: &ParamStore, prompt: &TokenSeq) -> Result<Tensor> {
        self.condition_batch(store, std::slice::from_ref(prompt))
    }

    /// Stacked query outputs, `[B·N_q, d_model]`.
    pub fn condition_batch(&self, store: &ParamStore, prompts: &[TokenSeq]) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let v = self.condition_graph(&mut g, store, prompts)?;
        Ok(g.value(v).clone())
    }

    /// Fixes the per-dimension standardization applied to pooled features
    /// before the understanding projection. The statistics are stored with
    /// the backbone but never receive gradients.
    pub fn set_understanding_stats(&self, store: &mut ParamStore, pooled: &[Vec<f32>]) -> Result<()> {
        if pooled.len() < 2 {
            return Err(Error::contract("feature statistics need at least two samples"));
        }
        let n = pooled.len() as f64;
        let mut mean = [0.0f64; SEMANTIC_DIM];
        let mut var = [0.0f64; SEMANTIC_DIM];
        for p in pooled {
            for k in 0..SEMANTIC_DIM {
                mean[k] += p[k] as f64 / n;
            }
        }
        for p in pooled {
            for k in 0..SEMANTIC_DIM {
                var[k] += (p[k] as f64 - mean[k]).powi(2) / n;
            }
        }
        let mut data: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
        data.extend(var.iter().map(|&v| v.sqrt().max(1e-6) as f32));
        store.set_value(self.understand_norm, Tensor::new([2, SEMANTIC_DIM], data)?)
    }

    /// Understanding logits `[B, 14]` from pooled semantic features `[B, 16]`.
    pub fn understand_graph(&self, g: &mut Graph, store: &ParamStore, pooled: Var) -> Result<Var> {
        let b = g.value(pooled).rows();
        let stats = store.value(self.understand_norm);
        let neg_mean = g.constant(Tensor::new([1, SEMANTIC_DIM], stats.row(0).iter().map(|m| -m).collect())?);
        let inv_std: Vec<f32> = stats.row(1).iter().map(|s| 1.0 / s).collect();
        let inv_std = g.constant(Tensor::new([b, SEMANTIC_DIM], inv_std.repeat(b))?);
        let centered = g.add_tiled(pooled, neg_mean)?;
        let standardized = g.mul(centered, inv_std)?;
        let mut x = self.understand_in.forward(g, store, standardized)?;
        for block in &self.blocks {
            x = block.forward(g, store, x, b, 1, &AttnMask::full(), None)?;
        }
        let x = self.final_norm.forward(g, store, x)?;
        self.head.forward(g, store, x)
    }

    /// Summed per-group mean cross-entropy of `logits` against labels.
    pub fn understanding_loss(g: &mut Graph, logits: Var, labels: &[[usize; 4]]) -> Result<Var> {
        let mut total: Option<Var> = None;
        let mut start = 0;
        for (k, &width) in ATTRIBUTE_GROUPS.iter().enumerate() {
            let part = g.slice_cols(logits, start, width)?;
            let targets: Vec<usize> = labels.iter().map(|l| l[k]).collect();
            let ce = g.cross_entropy(part, &targets)?;
            total = Some(match total {
                Some(t) => g.add(t, ce)?,
                None => ce,
            });
            start += width;
        }
        Ok(total.expect("four groups"))
    }

    pub fn understand_batch(&self, store: &ParamStore, lats: &[&LatentSeq]) -> Result<Vec<AttributeLogits>> {
        if lats.iter().any(|l| l.space != LatentSpace::Semantic) {
            return Err(Error::contract("understand needs semantic latents"));
        }
        let pooled: Vec<Vec<f32>> = lats.iter().map(|l| l.pooled()).collect();
        let rows: Vec<&[f32]> = pooled.iter().map(Vec::as_slice).collect();
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::stack_rows(&rows)?);
        let logits = self.understand_graph(&mut g, store, x)?;
        Ok((0..lats.len()).map(|i| split_groups(g.value(logits).row(i))).collect())
    }

    pub fn understand(&self, store: &ParamStore, lat: &LatentSeq) -> Result<AttributeLogits> {
        Ok(self.understand_batch(store, &[lat])?.remove(0))
    }
}

pub fn split_groups(row: &[f32]) -> AttributeLogits {
    let mut start = 0;
    ATTRIBUTE_GROUPS.map(|w| {
        let v = row[start..start + w].to_vec();
        start += w;
        v
    })
}

/// Arg-max per attribute group.
pub fn predict(logits: &AttributeLogits) -> [usize; 4] {
    [0, 1, 2, 3].map(|k| {
        logits[k]
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    })
}
