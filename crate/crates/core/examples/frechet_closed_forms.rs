//! Fréchet distance between Gaussian fits, checked against the cases with
//! closed forms, then measured between world styles.

use arflow::evaluator::{frechet_distance, GaussianFit};
use arflow::world::{World, WorldConfig};

fn diag(v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d * d).map(|k| if k / d == k % d { v[k / d] } else { 0.0 }).collect()
}

fn main() -> arflow::Result<()> {
    let d = 16;
    let shift: Vec<f64> = (0..d).map(|i| 0.1 * i as f64).collect();
    let a = GaussianFit::new(vec![0.0; d], diag(&vec![1.0; d]))?;
    let b = GaussianFit::new(shift.clone(), diag(&vec![1.0; d]))?;
    let expected: f64 = shift.iter().map(|x| x * x).sum();
    println!("identity covariances, shifted mean: {:.12} (closed form {expected:.12})", frechet_distance(&a, &b)?);

    let va: Vec<f64> = (0..d).map(|i| 0.5 + 0.1 * i as f64).collect();
    let vb: Vec<f64> = (0..d).map(|i| 2.0 - 0.05 * i as f64).collect();
    let expected: f64 = va.iter().zip(&vb).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum();
    let fa = GaussianFit::new(vec![0.0; d], diag(&va))?;
    let fb = GaussianFit::new(vec![0.0; d], diag(&vb))?;
    println!("diagonal covariances: {:.12} (closed form {expected:.12})", frechet_distance(&fa, &fb)?);

    let world = World::generate(WorldConfig::default())?;
    let by_style = |s: usize| -> Vec<Vec<f32>> { (0..128).map(|c| world.style_features(c)[s].clone()).collect() };
    let s0 = GaussianFit::fit(&by_style(0))?;
    for s in 1..world.config.styles {
        println!("world: style 0 vs style {s}: {:.4}", frechet_distance(&s0, &GaussianFit::fit(&by_style(s))?)?);
    }
    Ok(())
}
