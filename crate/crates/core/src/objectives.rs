//! The regression head with its MSE loss, and flow-matching samples with
//! their velocity loss.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::param;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::world::{LatentSeq, LatentSpace, SEMANTIC_DIM};

pub const MSE_HEAD_PREFIX: &str = "mse_head.";

/// Per-token linear map `W: d_model → d_latent`, shared across tokens.
#[derive(Clone, Debug)]
pub struct MseHead {
    pub w: ParamId,
    pub d_model: usize,
}

impl MseHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_model: usize, rng: &mut R) -> Result<Self> {
        let w = param(store, "mse_head.w", &[d_model, SEMANTIC_DIM], 1.0 / (d_model as f32).sqrt(), rng)?;
        Ok(Self { w, d_model })
    }

    /// `[B·N_q, d_model] → [B·N_q, d_latent]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q_out: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        g.matmul(q_out, w)
    }

    pub fn predict(&self, store: &ParamStore, q_out: &Tensor) -> Result<Tensor> {
        q_out.matmul(store.value(self.w))
    }
}

/// Rejects the excluded pixel-space regression design.
pub fn check_mse_target(space: LatentSpace) -> Result<()> {
    match space {
        LatentSpace::Semantic => Ok(()),
        LatentSpace::Pixel => Err(Error::UnsupportedDesign(
            "MSE regression onto pixel latents is excluded; use flow matching for pixel targets".into(),
        )),
    }
}

/// Mean over tokens and dims of `(target − W·q_out)²`.
pub fn mse_loss(q_out: &Tensor, head: &MseHead, store: &ParamStore, target: &LatentSeq) -> Result<f32> {
    check_mse_target(target.space)?;
    if q_out.rows() != target.tokens.rows() {
        return Err(Error::shape("mse_loss", q_out.shape(), target.tokens.shape()));
    }
    let pred = head.predict(store, q_out)?;
    Ok(pred.mean_sq_diff(&target.tokens)? as f32)
}

/// One flow-matching training tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x1: LatentSeq,
    pub x0: Tensor,
    pub t: f32,
    pub xt: Tensor,
    pub vt: Tensor,
}

/// `x_t = t·x1 + (1−t)·x0`.
pub fn interpolate(x1: &Tensor, x0: &Tensor, t: f32) -> Result<Tensor> {
    x1.zip_map(x0, "interpolate", |a, b| t * a + (1.0 - t) * b)
}

/// `v_t = x1 − x0`.
pub fn target_velocity(x1: &Tensor, x0: &Tensor) -> Result<Tensor> {
    x1.sub(x0)
}

impl FlowSample {
    pub fn from_parts(x1: LatentSeq, x0: Tensor, t: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract(format!("t = {t} outside [0, 1]")));
        }
        let xt = interpolate(&x1.tokens, &x0, t)?;
        let vt = target_velocity(&x1.tokens, &x0)?;
        Ok(Self { x1, x0, t, xt, vt })
    }
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Draws `t ~ U(0, 1)` and `x0 ~ N(0, I)` for `x1`.
pub fn make_flow_sample<R: Rng + ?Sized>(x1: &LatentSeq, rng: &mut R) -> Result<FlowSample> {
    let t: f32 = rng.random_range(0.0..1.0);
    let x0 = standard_normal(x1.tokens.shape(), rng);
    FlowSample::from_parts(x1.clone(), x0, t)
}

/// Mean squared error between a predicted velocity and the sample target.
pub fn flow_loss(pred: &Tensor, sample: &FlowSample) -> Result<f32> {
    Ok(pred.mean_sq_diff(&sample.vt)? as f32)
}

/// Flow-matching loss on the tape for a batch of samples, with the
/// prediction supplied by `predict(g, x_t, ts)`.
pub fn flow_loss_graph<F>(g: &mut Graph, samples: &[FlowSample], predict: F) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var, &[f32]) -> Result<Var>,
{
    if samples.is_empty() {
        return Err(Error::contract("flow loss needs at least one sample"));
    }
    let xt_rows: Vec<&[f32]> = samples.iter().map(|s| s.xt.data()).collect();
    let vt_rows: Vec<&[f32]> = samples.iter().map(|s| s.vt.data()).collect();
    let d = samples[0].xt.cols();
    let xt = Tensor::stack_rows(&xt_rows)?;
    let rows = xt.len() / d;
    let xt = g.constant(xt.reshape([rows, d])?);
    let vt = g.constant(Tensor::stack_rows(&vt_rows)?.reshape([rows, d])?);
    let ts: Vec<f32> = samples.iter().map(|s| s.t).collect();
    let pred = predict(g, xt, &ts)?;
    g.mse(pred, vt)
}
