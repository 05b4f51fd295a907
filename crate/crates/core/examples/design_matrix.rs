//! Runs the three-pipeline comparison and prints the scored table with
//! each pipeline's steps-to-threshold on its normalized loss.
//!
//! cargo run --release --example design_matrix -- [generation_steps] [seed]

use arflow::matrix::{run_matrix, MatrixConfig};
use arflow::models::Pipeline;
use arflow::world::World;

fn main() -> arflow::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let steps = args.first().copied().unwrap_or(5000) as usize;
    let cfg = MatrixConfig {
        seed: args.get(1).copied().unwrap_or(0),
        understanding_steps: 2000,
        steps,
        checkpoints: vec![steps / 5, steps / 2, steps],
        ..MatrixConfig::default()
    };
    cfg.validate()?;
    let world = World::generate(cfg.world)?;
    let r = run_matrix(&cfg, &world)?;
    println!("held-out probe {:.3?}", r.probe);
    println!("{:<9} {:>6} {:>9} {:>8} {:>9}", "pipeline", "step", "alignment", "frechet", "diversity");
    for row in &r.rows {
        println!(
            "{:<9} {:>6} {:>9.3} {:>8.3} {:>9.3}",
            row.pipeline.name(),
            row.step,
            row.alignment_acc,
            row.frechet,
            row.diversity
        );
    }
    for p in Pipeline::ALL {
        let run = r.run(p).expect("every pipeline runs");
        println!("{p}: normalized loss below {} at step {:?}", cfg.tau, run.steps_to_threshold);
    }
    Ok(())
}
