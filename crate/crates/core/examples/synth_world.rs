//! Renders the default world, reports how its latent variance splits into
//! class and style parts, and writes a few renders as PPM files.
//!
//! cargo run --release --example synth_world -- [out_dir]

use std::path::PathBuf;

use arflow::numerics::Tensor;
use arflow::world::{LatentSpace, World, WorldConfig, NUM_CLASSES};

fn variance_split(world: &World, space: LatentSpace) -> arflow::Result<(f64, f64)> {
    let lats: Vec<Tensor> = (0..world.len()).map(|i| world.latent(i, space).tokens).collect();
    let n = lats.len() as f64;
    let mut grand = Tensor::zeros(lats[0].shape().to_vec());
    for l in &lats {
        grand = grand.add(l)?;
    }
    let grand = grand.scale(1.0 / n as f32);
    let styles = world.config.styles;
    let (mut total, mut within) = (0.0, 0.0);
    for c in 0..NUM_CLASSES {
        let group: Vec<&Tensor> = (0..styles).map(|s| &lats[world.index(c, s)]).collect();
        let mut centroid = Tensor::zeros(grand.shape().to_vec());
        for l in &group {
            centroid = centroid.add(l)?;
        }
        let centroid = centroid.scale(1.0 / styles as f32);
        for l in group {
            total += l.mean_sq_diff(&grand)? / n;
            within += l.mean_sq_diff(&centroid)? / n;
        }
    }
    Ok((total, within))
}

fn main() -> arflow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth_world_out".into()));
    let world = World::generate(WorldConfig::default())?;
    println!("{} samples, {} styles per class, resolution {}", world.len(), world.config.styles, world.resolution());
    for space in [LatentSpace::Semantic, LatentSpace::Pixel] {
        let (total, within) = variance_split(&world, space)?;
        println!("{space:?}: total variance {total:.4}, within-class {within:.4}, between-class {:.4}", total - within);
    }
    std::fs::create_dir_all(&out)?;
    for class in [0, 37, 90, 127] {
        for style in 0..world.config.styles {
            let s = world.sample(class, style);
            std::fs::write(out.join(format!("c{class:03}_s{style}.ppm")), s.image.to_ppm())?;
        }
        println!("class {class}: `{}`", world.sample(class, 0).spec.text());
    }
    println!("renders written to {}", out.display());
    Ok(())
}
