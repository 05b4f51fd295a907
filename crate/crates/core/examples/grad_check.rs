//! Compares tape gradients of the conditioner with regression head against
//! finite differences, per parameter block, with both stencils.
//!
//! cargo run --release --example grad_check -- [seed]

use arflow::conditioner::{Conditioner, ConditionerConfig};
use arflow::numerics::{grad_check, grad_check_extrapolated, Graph, ParamStore, Tensor};
use arflow::objectives::MseHead;
use arflow::world::{tokenize, PromptSpec, SEMANTIC_DIM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> arflow::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cond = Conditioner::new(&mut store, ConditionerConfig::default(), &mut rng)?;
    let head = MseHead::new(&mut store, 64, &mut rng)?;
    let prompts = vec![tokenize(&PromptSpec::from_class(3, 0)?), tokenize(&PromptSpec::from_class(77, 0)?)];
    let target = Tensor::randn([16, SEMANTIC_DIM], 1.0, &mut rng);
    let f = |g: &mut Graph, s: &ParamStore| {
        let q = cond.condition_graph(g, s, &prompts)?;
        let pred = head.forward(g, s, q)?;
        let t = g.constant(target.clone());
        g.mse(pred, t)
    };
    let plain = grad_check(&mut store, f, 0.02, 1e-3, seed)?;
    let wide = grad_check_extrapolated(&mut store, f, 0.12, 1e-3, seed)?;
    println!("{:<32} {:>10} {:>12}", "block", "central", "extrapolated");
    for (a, b) in plain.blocks.iter().zip(&wide.blocks) {
        println!("{:<32} {:>10.2e} {:>12.2e}", a.name, a.rel_error, b.rel_error);
    }
    println!("worst: central {:.2e}, extrapolated {:.2e}", plain.worst(), wide.worst());
    Ok(())
}
