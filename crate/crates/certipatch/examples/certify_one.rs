//! Trains a small model on synthetic digits, then walks through the
//! derandomized certification of a single image: the per-class vote counts,
//! the margin arithmetic, and the largest certifiable patch size.
//!
//! Run with: cargo run --release --example certify_one

use certipatch::ablation::GeometrySpec;
use certipatch::model::{default_arch, train, TrainConfig, VoteConfig};
use certipatch::smoothing::{build_vote_matrix, certify, counts, VoteMode};
use certipatch::synth::{generate, SynthConfig};

fn main() -> certipatch::Result<()> {
    let data = generate(&SynthConfig::default(), 5000)?;
    let shape = data.images[0].shape();
    let spec = GeometrySpec::band(certipatch::ablation::PatternKind::ColumnBand, 2);
    let geometry = spec.with_shape(shape)?;

    let train_cfg = TrainConfig::desk_scale(spec, 0);
    let vote_cfg = VoteConfig { geometry: spec, mode: VoteMode::Threshold(0.3) };
    let arch = default_arch(2, shape.height, shape.width, data.num_classes);
    println!("training on {} ablated images...", data.len());
    let params = train(&data, arch, train_cfg, vote_cfg, |epoch, loss| {
        if epoch % 5 == 0 {
            println!("  epoch {epoch}: loss {loss:.4}");
        }
    })?;

    // show the first image whose vote margin actually certifies something
    let mut chosen = 0;
    let mut class_counts = None;
    for idx in 0..30.min(data.len()) {
        let matrix = build_vote_matrix(&params, &data.images[idx], &geometry, VoteMode::Threshold(0.3))?;
        let c = counts(&matrix);
        let cert = certify(&c, &geometry, 3)?;
        let keep = cert.certified || class_counts.is_none();
        if keep {
            chosen = idx;
            class_counts = Some(c);
        }
        if cert.certified {
            break;
        }
    }
    let class_counts = class_counts.unwrap();
    let label = data.labels[chosen];
    println!("\nimage {chosen}, true label: {label}");
    println!("votes over {} positions: {:?}", class_counts.total_positions, class_counts.n);
    for m in [3, 5, 7] {
        let cert = certify(&class_counts, &geometry, m)?;
        println!(
            "m={m}: predicted {} certified {} (max certifiable m = {})",
            cert.predicted, cert.certified, cert.max_certified_m
        );
    }
    Ok(())
}
