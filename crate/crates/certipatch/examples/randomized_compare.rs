//! Compares derandomized certification against the sampling-based
//! randomized baseline on the same model and images. The randomized
//! certificate uses a 95%-confidence binomial lower bound and a strictly
//! harsher condition (p_lower > 0.5 + delta), so everything it certifies
//! the exhaustive top-1 pipeline certifies too.
//!
//! Run with: cargo run --release --example randomized_compare

use certipatch::ablation::{GeometrySpec, PatternKind};
use certipatch::model::{default_arch, train, TrainConfig, VoteConfig};
use certipatch::randomized::{randomized_certify, EstimateConfig};
use certipatch::smoothing::{build_vote_matrix, certify, counts, VoteMode};
use certipatch::synth::{generate, SynthConfig};

fn main() -> certipatch::Result<()> {
    let data = generate(&SynthConfig::default(), 5000)?;
    let shape = data.images[0].shape();
    let spec = GeometrySpec::band(PatternKind::ColumnBand, 2);
    let geometry = spec.with_shape(shape)?;

    let train_cfg = TrainConfig::desk_scale(spec, 7);
    let vote_cfg = VoteConfig { geometry: spec, mode: VoteMode::Top1 };
    let arch = default_arch(2, shape.height, shape.width, data.num_classes);
    println!("training...");
    let params = train(&data, arch, train_cfg, vote_cfg, |_, _| {})?;

    let m = 5;
    let delta = geometry.delta(m)?;
    let estimate = EstimateConfig { selection_samples: 300, bound_samples: 2000, alpha: 0.05 };
    println!("m={m}, delta={:.5}", delta.value());
    println!("{:>5} {:>5} {:>10} {:>8} {:>11} {:>11}", "image", "label", "votes", "p_lower", "derand", "randomized");
    for idx in 0..15 {
        let image = &data.images[idx];
        let matrix = build_vote_matrix(&params, image, &geometry, VoteMode::Top1)?;
        let class_counts = counts(&matrix);
        let cert = certify(&class_counts, &geometry, m)?;
        let rand = randomized_certify(&params, image, &geometry, &delta, &estimate, idx as u64)?;
        println!(
            "{:>5} {:>5} {:>6}/{:<3} {:>8.4} {:>11} {:>11}",
            idx,
            data.labels[idx],
            class_counts.n[cert.predicted],
            class_counts.total_positions,
            rand.p_lower,
            cert.certified,
            rand.certified
        );
        assert!(!rand.certified || cert.certified || rand.predicted != cert.predicted);
    }
    Ok(())
}
