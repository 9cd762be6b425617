//! Prints exact probability-mass bounds (delta) and affected-position
//! counts for every ablation family on a 28x28 image, for a grid of patch
//! sizes. These are the quantities that decide how large a vote margin a
//! certificate needs.
//!
//! Run with: cargo run --example delta_tables

use certipatch::ablation::{Geometry, Shape};

fn main() -> certipatch::Result<()> {
    let shape = Shape::new(28, 28);
    let geometries: Vec<(String, Geometry)> = vec![
        ("column s=2".into(), Geometry::column(shape, 2)?),
        ("column s=4".into(), Geometry::column(shape, 4)?),
        ("row s=2".into(), Geometry::row(shape, 2)?),
        ("block s=4".into(), Geometry::block(shape, 4)?),
        ("multi-column s=2 kappa=2".into(), Geometry::multi_column(shape, 2, 2)?),
        ("multi-block s=7 kappa=2".into(), Geometry::multi_block(shape, 7, 2)?),
    ];
    println!("{:<26} {:>4} {:>14} {:>12} {:>10}", "geometry", "m", "positions", "affected", "delta");
    for (name, g) in &geometries {
        for m in [3, 5, 7, 9] {
            let delta = g.delta(m)?;
            println!(
                "{:<26} {:>4} {:>14} {:>12} {:>10.5}",
                name,
                m,
                g.position_count().to_string(),
                g.affected_count(m)?.to_string(),
                delta.value()
            );
        }
        println!();
    }

    // sparse ablation treats the patch as an L0 adversary on m^2 pixels
    let sparse = Geometry::sparse(shape, 45)?;
    println!("sparse k=45 on 28x28:");
    for m in [3, 5, 7, 9] {
        let delta = sparse.delta(m)?;
        println!("  m={m}: delta = {:.6} (rho = {})", delta.value(), m * m);
    }
    Ok(())
}
