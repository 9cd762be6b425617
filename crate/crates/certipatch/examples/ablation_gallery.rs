//! Renders every ablation family as ASCII art on a small image so the
//! retention geometry (including wrap-around at the borders) is visible.
//!
//! Run with: cargo run --example ablation_gallery

use certipatch::ablation::{Geometry, Shape};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn show(name: &str, geometry: &Geometry, pattern: &certipatch::ablation::AblationPattern) {
    let mask = geometry.retained_mask(pattern).unwrap();
    println!("{name}:");
    for y in 0..geometry.shape.height {
        let row: String = (0..geometry.shape.width)
            .map(|x| if mask[y * geometry.shape.width + x] { '#' } else { '.' })
            .collect();
        println!("  {row}");
    }
    println!();
}

fn main() -> certipatch::Result<()> {
    let shape = Shape::new(12, 12);

    let g = Geometry::column(shape, 3)?;
    // anchored near the right edge so the band wraps around
    let positions = g.enumerate_positions()?;
    show("column band s=3 (wrapping)", &g, &positions[10]);

    let g = Geometry::row(shape, 3)?;
    let positions = g.enumerate_positions()?;
    show("row band s=3", &g, &positions[4]);

    let g = Geometry::block(shape, 4)?;
    let positions = g.enumerate_positions()?;
    show("block s=4 (wrapping corner)", &g, &positions[positions.len() - 1]);

    let g = Geometry::multi_column(shape, 2, 2)?;
    let positions = g.enumerate_positions()?;
    println!("multi-column s=2 kappa=2: {} group pairs\n", positions.len());
    show("multi-column s=2 kappa=2", &g, &positions[7]);

    let g = Geometry::multi_block(shape, 4, 2)?;
    let positions = g.enumerate_positions()?;
    show("multi-block s=4 kappa=2", &g, &positions[3]);

    let g = Geometry::sparse(shape, 18)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pattern = g.sample_sparse(&mut rng)?;
    show("sparse k=18 (sampled)", &g, &pattern);
    Ok(())
}
