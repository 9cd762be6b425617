//! Empirical attacks on the smoothed classifier.
//!
//! The zero/one base classifications are not differentiable, so gradients
//! come from a soft surrogate: the mean of the per-position softmax scores.
//! Success is always judged against the hard smoothed classifier.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::Geometry;
use crate::dataset::{encode_with_mask, Image};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, ModelParams};
use crate::smoothing::{classify, counts, vote, VoteMatrix, VoteMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub restarts: usize,
    pub iterations: usize,
    pub step: f64,
    /// Patch side length.
    pub m: usize,
    /// L-infinity budget for the IFGSM baseline.
    pub epsilon: f64,
    pub linf_iterations: usize,
    pub linf_step: f64,
    pub seed: u64,
}

impl AttackConfig {
    /// Desk-scale defaults: 5 restarts x 30 iterations at step 0.05 for the
    /// patch attack; 50 iterations at step 0.5/255 for the L-infinity attack.
    pub fn desk_scale(m: usize, seed: u64) -> Self {
        AttackConfig {
            restarts: 5,
            iterations: 30,
            step: 0.05,
            m,
            epsilon: 0.1,
            linf_iterations: 50,
            linf_step: 0.5 / 255.0,
            seed,
        }
    }
}

/// A successful attack: the perturbed image and where it was placed.
#[derive(Debug, Clone)]
pub struct AttackSuccess {
    pub adversarial: Image,
    pub patch_position: Option<(usize, usize)>,
    pub objective: f64,
    pub restarts_used: usize,
}

/// One soft/hard evaluation of the smoothed classifier.
struct Evaluation {
    soft: Vec<f64>,
    hard: usize,
    traces: Vec<ForwardTrace>,
    masks_used: usize,
}

fn evaluate(
    params: &ModelParams,
    image: &Image,
    masks: &[Vec<bool>],
    mode: VoteMode,
) -> Result<Evaluation> {
    let mut traces = Vec::with_capacity(masks.len());
    let mut soft = vec![0.0; params.num_classes];
    let mut rows = Vec::with_capacity(masks.len());
    for mask in masks {
        let trace = params.forward_trace(&encode_with_mask(image, mask))?;
        for (acc, &p) in soft.iter_mut().zip(&trace.output.softmax) {
            *acc += p;
        }
        rows.push(vote(&trace.output, mode));
        traces.push(trace);
    }
    let inv = 1.0 / masks.len() as f64;
    soft.iter_mut().for_each(|v| *v *= inv);
    let matrix = VoteMatrix { rows, num_classes: params.num_classes, mode };
    let hard = classify(&counts(&matrix));
    Ok(Evaluation { soft, hard, traces, masks_used: masks.len() })
}

/// Gradient of -log N_y with respect to the raw image pixels, reusing the
/// forward traces of an evaluation.
fn objective_gradient(
    params: &ModelParams,
    eval: &Evaluation,
    masks: &[Vec<bool>],
    image: &Image,
    label: usize,
) -> Vec<f64> {
    let n_y = eval.soft[label].max(f64::MIN_POSITIVE);
    let scale = -1.0 / (eval.masks_used as f64 * n_y);
    let (h, w, c) = (image.height, image.width, image.channels);
    let mut grad = vec![0.0; c * h * w];
    for (trace, mask) in eval.traces.iter().zip(masks) {
        let p = &trace.output.softmax;
        let d_logits: Vec<f64> = (0..params.num_classes)
            .map(|j| {
                let kron = if j == label { 1.0 } else { 0.0 };
                scale * p[label] * (kron - p[j])
            })
            .collect();
        let g_enc = params.backward_input(trace, &d_logits);
        // encoded pair (v, 1-v): d/dv = g_a - g_b on retained pixels only
        for ch in 0..c {
            let plane_a = 2 * ch * h * w;
            let plane_b = (2 * ch + 1) * h * w;
            let plane_raw = ch * h * w;
            for idx in 0..h * w {
                if mask[idx] {
                    grad[plane_raw + idx] += g_enc[plane_a + idx] - g_enc[plane_b + idx];
                }
            }
        }
    }
    grad
}

fn position_masks(geometry: &Geometry) -> Result<Vec<Vec<bool>>> {
    geometry
        .enumerate_positions()?
        .iter()
        .map(|p| geometry.retained_mask(p))
        .collect()
}

/// Mean of the per-position softmax scores: the soft smoothed classifier.
pub fn soft_counts(params: &ModelParams, image: &Image, geometry: &Geometry) -> Result<Vec<f64>> {
    let masks = position_masks(geometry)?;
    let eval = evaluate(params, image, &masks, params.vote.mode)?;
    Ok(eval.soft)
}

/// Iterated signed-gradient patch attack with random starts. The patch
/// interior is unconstrained inside [0, 1]; success means the hard smoothed
/// classification differs from `label`. Among successful restarts the
/// highest-objective image is returned.
pub fn patch_ifgsm(
    params: &ModelParams,
    image: &Image,
    label: usize,
    geometry: &Geometry,
    config: &AttackConfig,
) -> Result<Option<AttackSuccess>> {
    let (h, w) = (image.height, image.width);
    if config.m > h.min(w) {
        return Err(Error::Argument(format!("patch m={} exceeds image", config.m)));
    }
    let masks = position_masks(geometry)?;
    let mode = params.vote.mode;
    let mut best: Option<AttackSuccess> = None;
    for restart in 0..config.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(restart as u64);
        let pi = rng.gen_range(0..=h - config.m);
        let pj = rng.gen_range(0..=w - config.m);
        let mut x = image.clone();
        // uniform random init of the attacked region
        for ch in 0..x.channels {
            for y in pi..pi + config.m {
                for col in pj..pj + config.m {
                    x.pixels[(ch * h + y) * w + col] = rng.gen_range(0.0..1.0);
                }
            }
        }
        let mut success_here: Option<(f64, Image)> = None;
        for iter in 0..=config.iterations {
            let eval = evaluate(params, &x, &masks, mode)?;
            let objective = -eval.soft[label].max(f64::MIN_POSITIVE).ln();
            if eval.hard != label {
                success_here = Some((objective, x.clone()));
                break;
            }
            if iter == config.iterations {
                break;
            }
            let grad = objective_gradient(params, &eval, &masks, &x, label);
            for ch in 0..x.channels {
                for y in pi..pi + config.m {
                    for col in pj..pj + config.m {
                        let idx = (ch * h + y) * w + col;
                        let v = x.pixels[idx] + config.step * grad[idx].signum();
                        x.pixels[idx] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
        if let Some((objective, adversarial)) = success_here {
            let better = best.as_ref().map(|b| objective > b.objective).unwrap_or(true);
            if better {
                best = Some(AttackSuccess {
                    adversarial,
                    patch_position: Some((pi, pj)),
                    objective,
                    restarts_used: restart + 1,
                });
            }
        }
    }
    Ok(best)
}

/// L-infinity IFGSM baseline over all pixels, starting at the clean image
/// and projected to the epsilon ball after every step.
pub fn linf_ifgsm(
    params: &ModelParams,
    image: &Image,
    label: usize,
    geometry: &Geometry,
    config: &AttackConfig,
) -> Result<Option<AttackSuccess>> {
    if config.epsilon > 1.0 || config.epsilon < 0.0 {
        return Err(Error::Argument(format!("epsilon {} outside [0, 1]", config.epsilon)));
    }
    if config.epsilon == 0.0 {
        return Ok(None);
    }
    let masks = position_masks(geometry)?;
    let mode = params.vote.mode;
    let mut x = image.clone();
    for iter in 0..=config.linf_iterations {
        let eval = evaluate(params, &x, &masks, mode)?;
        let objective = -eval.soft[label].max(f64::MIN_POSITIVE).ln();
        if eval.hard != label {
            return Ok(Some(AttackSuccess {
                adversarial: x,
                patch_position: None,
                objective,
                restarts_used: 1,
            }));
        }
        if iter == config.linf_iterations {
            break;
        }
        let grad = objective_gradient(params, &eval, &masks, &x, label);
        for (idx, v) in x.pixels.iter_mut().enumerate() {
            let stepped = *v + config.linf_step * grad[idx].signum();
            let lo = (image.pixels[idx] - config.epsilon).max(0.0);
            let hi = (image.pixels[idx] + config.epsilon).min(1.0);
            *v = stepped.clamp(lo, hi);
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ablation::{GeometrySpec, PatternKind, Shape};
    use crate::model::{Arch, LayerSpec, LrPhase, ModelParams, TrainConfig, VoteConfig};

    fn column_geometry(h: usize, w: usize, s: usize) -> Geometry {
        Geometry::column(Shape::new(h, w), s).unwrap()
    }

    fn toy_model(h: usize, w: usize, s: usize, seed: u64) -> ModelParams {
        let geometry = GeometrySpec::band(PatternKind::ColumnBand, s);
        let arch = Arch {
            layers: vec![
                LayerSpec::Fc { inputs: 2 * h * w, outputs: 8 },
                LayerSpec::Fc { inputs: 8, outputs: 3 },
            ],
        };
        ModelParams::init(
            arch,
            h,
            w,
            2,
            3,
            TrainConfig {
                schedule: vec![LrPhase { epochs: 1, lr: 0.01 }],
                batch_size: 4,
                momentum: 0.9,
                weight_decay: 0.0,
                seed,
                geometry,
            },
            VoteConfig { geometry, mode: VoteMode::Threshold(0.3) },
        )
        .unwrap()
    }

    fn constant_model(h: usize, w: usize, s: usize) -> ModelParams {
        let mut m = toy_model(h, w, s, 0);
        for t in m.tensors.iter_mut().flatten() {
            t.0.iter_mut().for_each(|v| *v = 0.0);
            t.1.iter_mut().for_each(|v| *v = 0.0);
        }
        // bias the last layer so class 2 always wins with margin
        m.tensors.last_mut().unwrap().as_mut().unwrap().1[2] = 5.0;
        m
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, 1, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn soft_counts_sum_to_one_and_match_constant_model() {
        let m = constant_model(6, 6, 2);
        let g = column_geometry(6, 6, 2);
        let image = random_image(6, 6, 1);
        let n = soft_counts(&m, &image, &g).unwrap();
        let sum: f64 = n.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        // constant classifier: N equals its (single) softmax
        let expected = (5.0f64.exp() + 2.0) / 1.0;
        let p2 = 5.0f64.exp() / expected;
        assert!((n[2] - p2).abs() < 1e-9);
    }

    #[test]
    fn two_position_mean() {
        // hand-rolled: two masks, softmaxes averaged
        let m = toy_model(4, 4, 2, 3);
        let g = column_geometry(4, 4, 2);
        let image = random_image(4, 4, 2);
        let n = soft_counts(&m, &image, &g).unwrap();
        let positions = g.enumerate_positions().unwrap();
        let mut manual = vec![0.0; 3];
        for p in &positions {
            let mask = g.retained_mask(p).unwrap();
            let out = m.forward(&encode_with_mask(&image, &mask)).unwrap();
            for (a, b) in manual.iter_mut().zip(&out.softmax) {
                *a += b / positions.len() as f64;
            }
        }
        for (a, b) in n.iter().zip(&manual) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let m = toy_model(5, 5, 2, 11);
        let g = column_geometry(5, 5, 2);
        let masks = position_masks(&g).unwrap();
        let label = 1usize;
        let mut image = random_image(5, 5, 7);
        let eval = evaluate(&m, &image, &masks, VoteMode::Top1).unwrap();
        let grad = objective_gradient(&m, &eval, &masks, &image, label);
        let step = 1e-6;
        let mut checked = 0;
        for idx in (0..image.pixels.len()).step_by(3) {
            let orig = image.pixels[idx];
            if orig < 2.0 * step || orig > 1.0 - 2.0 * step {
                continue;
            }
            let mut at = |v: f64| {
                image.pixels[idx] = v;
                let e = evaluate(&m, &image, &masks, VoteMode::Top1).unwrap();
                -e.soft[label].ln()
            };
            let fd = (at(orig + step) - at(orig - step)) / (2.0 * step);
            image.pixels[idx] = orig;
            let denom = fd.abs().max(grad[idx].abs()).max(1e-8);
            assert!(
                (fd - grad[idx]).abs() / denom < 1e-3,
                "pixel {idx}: fd {fd} vs analytic {}",
                grad[idx]
            );
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn constant_classifier_cannot_be_attacked() {
        let m = constant_model(6, 6, 2);
        let g = column_geometry(6, 6, 2);
        let image = random_image(6, 6, 3);
        let cfg = AttackConfig { m: 2, ..AttackConfig::desk_scale(2, 9) };
        assert!(patch_ifgsm(&m, &image, 2, &g, &cfg).unwrap().is_none());
        assert!(linf_ifgsm(&m, &image, 2, &g, &cfg).unwrap().is_none());
    }

    #[test]
    fn patch_attack_only_touches_the_patch() {
        let m = toy_model(6, 6, 2, 5);
        let g = column_geometry(6, 6, 2);
        let image = random_image(6, 6, 13);
        let cfg = AttackConfig { restarts: 8, iterations: 10, ..AttackConfig::desk_scale(3, 21) };
        // attack the model's own prediction so gradients have something to flip
        for label in 0..3 {
            if let Some(s) = patch_ifgsm(&m, &image, label, &g, &cfg).unwrap() {
                let (pi, pj) = s.patch_position.unwrap();
                let mut outside_changed = 0;
                for y in 0..6 {
                    for x in 0..6 {
                        let inside = y >= pi && y < pi + 3 && x >= pj && x < pj + 3;
                        let changed = s.adversarial.pixels[y * 6 + x] != image.pixels[y * 6 + x];
                        if changed && !inside {
                            outside_changed += 1;
                        }
                        let v = s.adversarial.pixels[y * 6 + x];
                        assert!((0.0..=1.0).contains(&v));
                    }
                }
                assert_eq!(outside_changed, 0);
                return;
            }
        }
        panic!("no label could be attacked on a random toy model");
    }

    #[test]
    fn linf_attack_respects_budget() {
        let m = toy_model(6, 6, 2, 15);
        let g = column_geometry(6, 6, 2);
        let image = random_image(6, 6, 17);
        let mut cfg = AttackConfig::desk_scale(3, 31);
        cfg.epsilon = 0.2;
        cfg.linf_step = 0.05;
        for label in 0..3 {
            if let Some(s) = linf_ifgsm(&m, &image, label, &g, &cfg).unwrap() {
                for (a, b) in s.adversarial.pixels.iter().zip(&image.pixels) {
                    assert!((a - b).abs() <= cfg.epsilon + 1e-12);
                    assert!((0.0..=1.0).contains(a));
                }
                return;
            }
        }
        panic!("no label could be attacked within the budget");
    }

    #[test]
    fn attacks_are_deterministic_given_seed() {
        let m = toy_model(6, 6, 2, 19);
        let g = column_geometry(6, 6, 2);
        let image = random_image(6, 6, 23);
        let cfg = AttackConfig { restarts: 4, iterations: 8, ..AttackConfig::desk_scale(3, 77) };
        for label in 0..3 {
            let a = patch_ifgsm(&m, &image, label, &g, &cfg).unwrap();
            let b = patch_ifgsm(&m, &image, label, &g, &cfg).unwrap();
            match (a, b) {
                (None, None) => {}
                (Some(x), Some(y)) => {
                    assert_eq!(x.adversarial.pixels, y.adversarial.pixels);
                    assert_eq!(x.patch_position, y.patch_position);
                }
                _ => panic!("nondeterministic outcome"),
            }
        }
    }
}
