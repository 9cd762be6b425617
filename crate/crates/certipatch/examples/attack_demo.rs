//! Attacks a smoothed model with the signed-gradient patch attack and
//! verifies that no certified image flips: certificates are lower bounds,
//! so empirical accuracy under attack can only sit above certified
//! accuracy.
//!
//! Run with: cargo run --release --example attack_demo

use certipatch::ablation::{GeometrySpec, PatternKind};
use certipatch::attack::{patch_ifgsm, AttackConfig};
use certipatch::model::{default_arch, train, TrainConfig, VoteConfig};
use certipatch::smoothing::{build_vote_matrix, certify, counts, VoteMode};
use certipatch::synth::{generate, SynthConfig};

fn main() -> certipatch::Result<()> {
    let data = generate(&SynthConfig::default(), 5000)?;
    let shape = data.images[0].shape();
    let spec = GeometrySpec::band(PatternKind::ColumnBand, 2);
    let geometry = spec.with_shape(shape)?;
    let mode = VoteMode::Threshold(0.3);

    let train_cfg = TrainConfig::desk_scale(spec, 3);
    let vote_cfg = VoteConfig { geometry: spec, mode };
    let arch = default_arch(2, shape.height, shape.width, data.num_classes);
    println!("training...");
    let params = train(&data, arch, train_cfg, vote_cfg, |_, _| {})?;

    let m = 5;
    let config = AttackConfig { restarts: 3, iterations: 20, ..AttackConfig::desk_scale(m, 42) };
    let mut correct = 0;
    let mut certified = 0;
    let mut robust = 0;
    let n = 20;
    for idx in 0..n {
        let image = &data.images[idx];
        let label = data.labels[idx] as usize;
        let matrix = build_vote_matrix(&params, image, &geometry, mode)?;
        let cert = certify(&counts(&matrix), &geometry, m)?;
        if cert.predicted != label {
            println!("image {idx}: misclassified");
            continue;
        }
        correct += 1;
        if cert.certified {
            certified += 1;
        }
        let flipped = patch_ifgsm(&params, image, label, &geometry, &config)?;
        match flipped {
            Some(s) => {
                assert!(!cert.certified, "a certified image flipped: soundness violation");
                println!(
                    "image {idx}: flipped by patch at {:?} (objective {:.3})",
                    s.patch_position.unwrap(),
                    s.objective
                );
            }
            None => {
                robust += 1;
                println!("image {idx}: robust (certified: {})", cert.certified);
            }
        }
    }
    println!(
        "\nclean {}/{n}, certified {}/{n}, robust under attack {}/{n}",
        correct, certified, robust
    );
    println!("certified <= robust holds: {}", certified <= robust);
    Ok(())
}
