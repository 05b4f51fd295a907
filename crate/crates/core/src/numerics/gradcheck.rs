//! Central-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Norms below this are treated as an exact zero gradient.
const ZERO_FLOOR: f64 = 1e-6;

/// Finite-difference estimator used for the numeric side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(p+h) − f(p−h)) / 2h`.
    Central,
    /// `(4·D(h) − D(2h)) / 3` over central differences `D`. The `h²` error
    /// term cancels, so wider steps stay accurate; f32 roundoff shrinks as
    /// the step grows.
    Richardson,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub coords_checked: usize,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn failed_blocks(&self) -> Vec<&str> {
        self.blocks.iter().filter(|b| !b.passed).map(|b| b.name.as_str()).collect()
    }

    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.rel_error).fold(0.0, f64::max)
    }
}

/// Evaluates `f` once with gradients enabled and returns the parameter
/// gradients.
pub fn analytic_gradients<F>(store: &ParamStore, f: &F) -> Result<Gradients>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)
}

fn eval_loss<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::no_grad();
    let loss = f(&mut g, store)?;
    g.scalar(loss)
}

/// Compares `analytic` against central differences of `f` on up to
/// `samples` random coordinates of every trainable block.
///
/// Per-block error is `‖a − n‖ / max(‖a‖, ‖n‖)` over the sampled
/// coordinates. Failures are reported, not raised.
pub fn compare_gradients<F>(
    store: &mut ParamStore,
    f: &F,
    analytic: &Gradients,
    step: f32,
    tol: f64,
    samples: usize,
    seed: u64,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::new();
    for id in store.trainable_ids() {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            let mut c = rand::seq::index::sample(&mut rng, n, samples).into_vec();
            c.sort_unstable();
            c
        };
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for &c in &coords {
            let numeric = match stencil {
                Stencil::Central => central_difference(store, f, id, c, step)?,
                Stencil::Richardson => {
                    let near = central_difference(store, f, id, c, step)?;
                    let far = central_difference(store, f, id, c, 2.0 * step)?;
                    (4.0 * near - far) / 3.0
                }
            };
            let a = analytic.param(id).map_or(0.0, |g| g.data()[c] as f64);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel_error = if denom < ZERO_FLOOR { 0.0 } else { diff2.sqrt() / denom };
        blocks.push(BlockReport {
            name: store.name(id).to_string(),
            coords_checked: coords.len(),
            rel_error,
            passed: rel_error < tol,
        });
    }
    Ok(GradCheckReport { tol, blocks })
}

fn central_difference<F>(store: &mut ParamStore, f: &F, id: ParamId, coord: usize, step: f32) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let orig = store.value(id).data()[coord];
    store.value_mut(id).data_mut()[coord] = orig + step;
    let plus = eval_loss(store, f);
    store.value_mut(id).data_mut()[coord] = orig - step;
    let minus = eval_loss(store, f);
    store.value_mut(id).data_mut()[coord] = orig;
    // the realized step differs from `step` by f32 rounding of orig ± step
    let h = ((orig + step) as f64 - (orig - step) as f64) / 2.0;
    Ok((plus? - minus?) / (2.0 * h))
}

/// Full check: tape gradients of `f` against central differences.
pub fn grad_check<F>(store: &mut ParamStore, f: F, step: f32, tol: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &f)?;
    compare_gradients(store, &f, &analytic, step, tol, 32, seed, Stencil::Central)
}

/// [`grad_check`] with the [`Stencil::Richardson`] estimator, for deep f32
/// networks where plain central differences sit at the roundoff floor.
pub fn grad_check_extrapolated<F>(store: &mut ParamStore, f: F, step: f32, tol: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &f)?;
    compare_gradients(store, &f, &analytic, step, tol, 32, seed, Stencil::Richardson)
}
