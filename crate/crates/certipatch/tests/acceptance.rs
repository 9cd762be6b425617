//! Acceptance gate: one test per criterion, each printing a PASS/FAIL line.
//!
//! Exact combinatorial checks run against independent brute-force oracles;
//! the end-to-end criteria train a desk-scale model on the synthetic digit
//! dataset once and share it across tests.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;

use num_bigint::BigUint;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use certipatch::ablation::{binomial, Geometry, GeometrySpec, PatternKind, Shape};
use certipatch::attack::{patch_ifgsm, AttackConfig};
use certipatch::dataset::{encode_with_mask, RawDataset};
use certipatch::model::{default_arch, train, ModelParams, TrainConfig, VoteConfig};
use certipatch::randomized::{binom_lower_bound, randomized_certify, EstimateConfig};
use certipatch::smoothing::{certify, classify, counts, vote, ClassCounts, VoteMatrix, VoteMode};
use certipatch::synth::{generate, SynthConfig};

fn criterion(name: &str, body: impl FnOnce()) {
    let outcome = catch_unwind(AssertUnwindSafe(body));
    match &outcome {
        Ok(()) => println!("ACCEPTANCE {name}: PASS"),
        Err(_) => println!("ACCEPTANCE {name}: FAIL"),
    }
    if let Err(payload) = outcome {
        std::panic::resume_unwind(payload);
    }
}

// ---- soundness oracle ------------------------------------------------------

/// Deduplicated affected-row sets: for each patch placement, the indices of
/// ablation positions whose retained pixels overlap the patch, found by
/// scanning masks directly.
fn affected_sets(geometry: &Geometry, m: usize) -> Vec<Vec<usize>> {
    let (h, w) = (geometry.shape.height, geometry.shape.width);
    let masks: Vec<Vec<bool>> = geometry
        .enumerate_positions()
        .unwrap()
        .iter()
        .map(|p| geometry.retained_mask(p).unwrap())
        .collect();
    let mut seen = HashSet::new();
    let mut sets = Vec::new();
    for i in 0..=h - m {
        for j in 0..=w - m {
            let mut rows = Vec::new();
            for (idx, mask) in masks.iter().enumerate() {
                let hit = (i..i + m).any(|y| (j..j + m).any(|x| mask[y * w + x]));
                if hit {
                    rows.push(idx);
                }
            }
            if seen.insert(rows.clone()) {
                sets.push(rows);
            }
        }
    }
    sets
}

/// Worst-case row-flip oracle: can any patch placement change the smoothed
/// prediction by rewriting every affected row's votes?
fn breakable(
    matrix: &VoteMatrix,
    n: &[usize],
    predicted: usize,
    sets: &[Vec<usize>],
) -> bool {
    let classes = matrix.num_classes;
    for set in sets {
        let mut a = vec![0usize; classes];
        for &r in set {
            for (c, acc) in a.iter_mut().enumerate() {
                *acc += matrix.rows[r][c] as usize;
            }
        }
        for rival in 0..classes {
            if rival == predicted {
                continue;
            }
            let altered: Vec<usize> = (0..classes)
                .map(|c| {
                    if c == rival {
                        n[c] - a[c] + set.len()
                    } else {
                        n[c] - a[c]
                    }
                })
                .collect();
            let total = matrix.rows.len();
            if classify(&ClassCounts { n: altered, total_positions: total }) != predicted {
                return true;
            }
        }
    }
    false
}

fn random_matrix(rng: &mut ChaCha8Rng, positions: usize, classes: usize) -> VoteMatrix {
    let favored = rng.gen_range(0..classes);
    let strength: f64 = rng.gen_range(0.55..1.0);
    let rows = (0..positions)
        .map(|_| {
            (0..classes)
                .map(|c| {
                    let p = if c == favored { strength } else { 0.06 };
                    u8::from(rng.gen_bool(p))
                })
                .collect()
        })
        .collect();
    VoteMatrix { rows, num_classes: classes, mode: VoteMode::Threshold(0.3) }
}

/// A vote matrix with an exact margin of `n_pred - n_rival = 2A - slack`
/// against one rival, arranged so the first affected set can realize the
/// worst case: its rows all vote only for the predicted class.
fn margin_matrix(
    positions: usize,
    classes: usize,
    predicted: usize,
    rival: usize,
    set: &[usize],
    slack: usize,
) -> Option<VoteMatrix> {
    let a = set.len();
    let indicator = usize::from(predicted > rival);
    // n_pred = positions, n_rival = x; certified iff pred >= rival + ind + 2a
    let needed = 2 * a + indicator;
    if needed < slack || positions + slack < needed {
        return None;
    }
    let x = positions + slack - needed;
    let in_set: HashSet<usize> = set.iter().copied().collect();
    let outside: Vec<usize> = (0..positions).filter(|i| !in_set.contains(i)).collect();
    if x > outside.len() {
        return None;
    }
    let mut rows = vec![vec![0u8; classes]; positions];
    for row in rows.iter_mut() {
        row[predicted] = 1;
    }
    for &i in outside.iter().take(x) {
        rows[i][rival] = 1;
    }
    Some(VoteMatrix { rows, num_classes: classes, mode: VoteMode::Threshold(0.3) })
}

#[test]
fn certificate_soundness_oracle() {
    criterion("certificate soundness vs row-flip oracle", || {
        let classes = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut certified_seen = 0usize;
        for kind in [PatternKind::ColumnBand, PatternKind::RowBand, PatternKind::Block] {
            let shape = if kind == PatternKind::Block {
                Shape::new(14, 14)
            } else {
                Shape::new(28, 28)
            };
            for s in 1..=6 {
                let geometry = Geometry::new(kind, shape, s, 0, 0).unwrap();
                let positions = geometry.enumerate_positions().unwrap().len();
                for m in 1..=7 {
                    let sets = affected_sets(&geometry, m);
                    for _ in 0..200 {
                        let matrix = random_matrix(&mut rng, positions, classes);
                        let c = counts(&matrix);
                        let cert = certify(&c, &geometry, m).unwrap();
                        if cert.certified {
                            certified_seen += 1;
                            assert!(
                                !breakable(&matrix, &c.n, cert.predicted, &sets),
                                "{} s={s} m={m}: certified matrix broken",
                                kind.name()
                            );
                        }
                    }
                    // margin-short-by-one admits a breaking witness; the
                    // exact margin does not (both indicator directions)
                    for (predicted, rival) in [(0usize, 1usize), (1, 0)] {
                        let set = &sets[sets.len() / 2];
                        if let Some(matrix) =
                            margin_matrix(positions, classes, predicted, rival, set, 1)
                        {
                            let c = counts(&matrix);
                            let cert = certify(&c, &geometry, m).unwrap();
                            assert_eq!(cert.predicted, predicted);
                            assert!(!cert.certified, "short-by-one certified");
                            assert!(
                                breakable(&matrix, &c.n, predicted, &sets),
                                "{} s={s} m={m} pred={predicted}: no witness",
                                kind.name()
                            );
                        }
                        if let Some(matrix) =
                            margin_matrix(positions, classes, predicted, rival, set, 0)
                        {
                            let c = counts(&matrix);
                            let cert = certify(&c, &geometry, m).unwrap();
                            assert!(cert.certified, "exact margin not certified");
                            assert!(
                                !breakable(&matrix, &c.n, predicted, &sets),
                                "{} s={s} m={m}: exact margin broken",
                                kind.name()
                            );
                        }
                    }
                }
            }
        }
        assert!(certified_seen > 1000, "only {certified_seen} certified random matrices");
    });
}

// ---- geometry oracle -------------------------------------------------------

#[test]
fn geometry_intersection_oracle() {
    criterion("geometry oracle (brute-force intersection counts)", || {
        for kind in [PatternKind::ColumnBand, PatternKind::RowBand, PatternKind::Block] {
            let shape = if kind == PatternKind::Block {
                Shape::new(14, 14)
            } else {
                Shape::new(28, 28)
            };
            let (h, w) = (shape.height, shape.width);
            for s in 1..=6usize {
                let geometry = Geometry::new(kind, shape, s, 0, 0).unwrap();
                let masks: Vec<Vec<bool>> = geometry
                    .enumerate_positions()
                    .unwrap()
                    .iter()
                    .map(|p| geometry.retained_mask(p).unwrap())
                    .collect();
                for m in 1..=7usize {
                    let expected = if kind == PatternKind::Block {
                        (m + s - 1) * (m + s - 1)
                    } else {
                        m + s - 1
                    };
                    assert_eq!(geometry.affected_count_usize(m).unwrap(), expected);
                    for i in 0..=h - m {
                        for j in 0..=w - m {
                            let count = masks
                                .iter()
                                .filter(|mask| {
                                    (i..i + m).any(|y| (j..j + m).any(|x| mask[y * w + x]))
                                })
                                .count();
                            assert_eq!(
                                count, expected,
                                "{} s={s} m={m} patch ({i},{j})",
                                kind.name()
                            );
                        }
                    }
                }
            }
        }

        // multi kinds: brute-force count <= bound, equality when the patch
        // always touches exactly b grid cells (s=4, m=5 -> 4 blocks)
        let shape = Shape::new(28, 28);
        for (s, kappa, m, expect_equality) in
            [(4usize, 2usize, 5usize, true), (7, 2, 3, false), (7, 2, 8, true), (4, 3, 5, true)]
        {
            let geometry = Geometry::new(PatternKind::MultiBlock, shape, s, kappa, 0).unwrap();
            let masks: Vec<Vec<bool>> = geometry
                .enumerate_positions()
                .unwrap()
                .iter()
                .map(|p| geometry.retained_mask(p).unwrap())
                .collect();
            let bound = geometry.affected_count_usize(m).unwrap();
            let mut always_equal = true;
            for i in 0..=shape.height - m {
                for j in 0..=shape.width - m {
                    let count = masks
                        .iter()
                        .filter(|mask| {
                            (i..i + m).any(|y| (j..j + m).any(|x| mask[y * shape.width + x]))
                        })
                        .count();
                    assert!(count <= bound, "multi-block s={s} kappa={kappa} m={m}");
                    if count != bound {
                        always_equal = false;
                    }
                    if s == 4 && m == 5 {
                        // patch spans exactly 2x2 grid cells at every position
                        let cells_y = (i + m - 1) / s - i / s + 1;
                        let cells_x = (j + m - 1) / s - j / s + 1;
                        assert_eq!(cells_y * cells_x, 4);
                    }
                }
            }
            if expect_equality {
                assert!(always_equal, "expected tight bound for s={s} kappa={kappa} m={m}");
            }
        }
    });
}

// ---- exact delta values ----------------------------------------------------

#[test]
fn delta_values_exact() {
    criterion("delta values (exact fractions)", || {
        let sparse = Geometry::sparse(Shape::new(8, 8), 4).unwrap();
        let d = sparse.delta(3).unwrap(); // patch 3x3 -> rho = 9
        let lhs = &d.numerator * binomial(64, 4);
        let rhs = (binomial(64, 4) - binomial(55, 4)) * &d.denominator;
        assert_eq!(lhs, rhs, "sparse delta is not 1 - C(55,4)/C(64,4)");
        assert!((d.value() - 0.463).abs() < 5e-4, "sparse delta {:.6}", d.value());

        let block = Geometry::block(Shape::new(8, 8), 2).unwrap();
        let d = block.delta(3).unwrap(); // (3+2-1)^2 / 64 = 16/64
        assert_eq!(&d.numerator * BigUint::from(64u32), BigUint::from(16u32) * &d.denominator);
        assert!((d.value() - 0.25).abs() < 1e-12);

        let big = binomial(784, 45);
        let text = big.to_string();
        assert_eq!(text.len(), 74, "C(784,45) has {} digits", text.len());
        assert!(text.starts_with("40"), "C(784,45) leading digits {}", &text[..4]);
    });
}

// ---- confidence bound ------------------------------------------------------

#[test]
fn confidence_bound_and_coverage() {
    criterion("binomial lower bound and coverage", || {
        let all = binom_lower_bound(10000, 10000, 0.05).unwrap();
        let closed = 0.05f64.powf(1.0 / 10000.0);
        assert!((all - closed).abs() < 1e-8, "{all} vs {closed}");

        let n = 200;
        let trials = 10000;
        let mut bounds: Vec<Option<f64>> = vec![None; n + 1];
        for &p in &[0.3f64, 0.6, 0.9] {
            let mut rng = ChaCha8Rng::seed_from_u64(777);
            let mut covered = 0usize;
            for _ in 0..trials {
                let successes = (0..n).filter(|_| rng.gen_bool(p)).count();
                let b = *bounds[successes]
                    .get_or_insert_with(|| binom_lower_bound(successes, n, 0.05).unwrap());
                if b <= p {
                    covered += 1;
                }
            }
            let rate = covered as f64 / trials as f64;
            let sigma = (0.05 * 0.95 / trials as f64).sqrt();
            assert!(rate >= 0.95 - 3.0 * sigma, "p={p}: coverage {rate}");
        }
    });
}

// ---- gradient check --------------------------------------------------------

#[test]
fn gradient_check_two_layer() {
    criterion("gradient check (2-layer toy)", || {
        use certipatch::model::{Arch, LayerSpec, LrPhase};
        let (h, w) = (6usize, 6usize);
        let spec = GeometrySpec::band(PatternKind::ColumnBand, 2);
        let arch = Arch {
            layers: vec![
                LayerSpec::Fc { inputs: 2 * h * w, outputs: 10 },
                LayerSpec::Fc { inputs: 10, outputs: 4 },
            ],
        };
        let train_cfg = TrainConfig {
            schedule: vec![LrPhase { epochs: 1, lr: 0.01 }],
            batch_size: 2,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 5,
            geometry: spec,
        };
        let vote_cfg = VoteConfig { geometry: spec, mode: VoteMode::Top1 };
        let mut model = ModelParams::init(arch, h, w, 2, 4, train_cfg, vote_cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let geometry = spec.with_shape(Shape::new(h, w)).unwrap();
        let mask = geometry
            .retained_mask(&geometry.enumerate_positions().unwrap()[1])
            .unwrap();
        let batch: Vec<_> = (0..3)
            .map(|_| {
                let image = certipatch::dataset::Image::new(
                    h,
                    w,
                    1,
                    (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
                )
                .unwrap();
                encode_with_mask(&image, &mask)
            })
            .collect();
        let labels = [0u8, 2, 3];
        let (_, grads) = model.loss_and_grad(&batch, &labels).unwrap();
        let step = 1e-4;
        let mut max_rel = 0.0f64;
        for li in 0..model.tensors.len() {
            let (nw, nb) = {
                let t = model.tensors[li].as_ref().unwrap();
                (t.0.len(), t.1.len())
            };
            for part in 0..2usize {
                for i in 0..if part == 0 { nw } else { nb } {
                    let orig = {
                        let t = model.tensors[li].as_ref().unwrap();
                        if part == 0 { t.0[i] } else { t.1[i] }
                    };
                    let mut eval = |v: f64| {
                        {
                            let t = model.tensors[li].as_mut().unwrap();
                            if part == 0 { t.0[i] = v } else { t.1[i] = v }
                        }
                        model.loss_and_grad(&batch, &labels).unwrap().0
                    };
                    let fd = (eval(orig + step) - eval(orig - step)) / (2.0 * step);
                    eval(orig);
                    let g = {
                        let t = grads.tensors[li].as_ref().unwrap();
                        if part == 0 { t.0[i] } else { t.1[i] }
                    };
                    let denom = g.abs().max(fd.abs()).max(1e-6);
                    max_rel = max_rel.max((g - fd).abs() / denom);
                }
            }
        }
        assert!(max_rel < 1e-3, "max relative gradient error {max_rel}");
    });
}

// ---- desk-scale end-to-end -------------------------------------------------

struct Desk {
    params: ModelParams,
    geometry: Geometry,
    eval: RawDataset,
    /// ClassCounts per eval image under threshold voting and top-1 voting.
    threshold_counts: Vec<ClassCounts>,
    top1_counts: Vec<ClassCounts>,
}

static DESK: OnceLock<Desk> = OnceLock::new();

fn eval_counts(
    params: &ModelParams,
    data: &RawDataset,
    masks: &[Vec<bool>],
    mode: VoteMode,
) -> Vec<ClassCounts> {
    data.images
        .iter()
        .map(|image| {
            let rows: Vec<Vec<u8>> = masks
                .iter()
                .map(|mask| vote(&params.forward(&encode_with_mask(image, mask)).unwrap(), mode))
                .collect();
            counts(&VoteMatrix { rows, num_classes: params.num_classes, mode })
        })
        .collect()
}

fn desk() -> &'static Desk {
    DESK.get_or_init(|| {
        let all = generate(&SynthConfig::default(), 11000).unwrap();
        let mut train_set = all.clone();
        train_set.images.truncate(10000);
        train_set.labels.truncate(10000);
        let eval = RawDataset::new(
            all.images[10000..].to_vec(),
            all.labels[10000..].to_vec(),
            10,
        )
        .unwrap();
        let shape = train_set.images[0].shape();
        let spec = GeometrySpec::band(PatternKind::ColumnBand, 2);
        let geometry = spec.with_shape(shape).unwrap();
        let train_cfg = TrainConfig::desk_scale(spec, 0);
        let vote_cfg = VoteConfig { geometry: spec, mode: VoteMode::Threshold(0.3) };
        let arch = default_arch(2, shape.height, shape.width, 10);
        let params = train(&train_set, arch, train_cfg, vote_cfg, |_, _| {}).unwrap();
        let masks: Vec<Vec<bool>> = geometry
            .enumerate_positions()
            .unwrap()
            .iter()
            .map(|p| geometry.retained_mask(p).unwrap())
            .collect();
        let threshold_counts = eval_counts(&params, &eval, &masks, VoteMode::Threshold(0.3));
        let top1_counts = eval_counts(&params, &eval, &masks, VoteMode::Top1);
        Desk { params, geometry, eval, threshold_counts, top1_counts }
    })
}

fn certified_fraction(desk: &Desk, counts_list: &[ClassCounts], m: usize) -> (f64, f64) {
    let n = desk.eval.len() as f64;
    let mut clean = 0usize;
    let mut certified = 0usize;
    for (c, &label) in counts_list.iter().zip(&desk.eval.labels) {
        let cert = certify(c, &desk.geometry, m).unwrap();
        if cert.predicted == label as usize {
            clean += 1;
            if cert.certified {
                certified += 1;
            }
        }
    }
    (clean as f64 / n, certified as f64 / n)
}

#[test]
fn desk_scale_end_to_end() {
    criterion("desk-scale end-to-end (column s=2, theta=0.3, m=5)", || {
        let d = desk();
        let (clean, certified) = certified_fraction(d, &d.threshold_counts, 5);
        let (_, certified_top1) = certified_fraction(d, &d.top1_counts, 5);
        println!("  clean {clean:.4} certified {certified:.4} top1-certified {certified_top1:.4}");
        assert!(clean >= 0.85, "clean accuracy {clean}");
        assert!(certified >= 0.20, "certified accuracy {certified}");
        assert!(
            certified > certified_top1,
            "threshold certified {certified} not above top-1 {certified_top1}"
        );
    });
}

#[test]
fn randomized_below_derandomized() {
    criterion("randomized certifies <= derandomized top-1", || {
        let d = desk();
        let m = 5;
        let delta = d.geometry.delta(m).unwrap();
        let estimate = EstimateConfig::default(); // 1000 / 10000 at 95%
        let subset = 20usize;
        let mut derand = 0usize;
        let mut rand_certified = 0usize;
        for idx in 0..subset {
            let label = d.eval.labels[idx] as usize;
            let cert = certify(&d.top1_counts[idx], &d.geometry, m).unwrap();
            if cert.predicted == label && cert.certified {
                derand += 1;
            }
            let outcome = randomized_certify(
                &d.params,
                &d.eval.images[idx],
                &d.geometry,
                &delta,
                &estimate,
                idx as u64,
            )
            .unwrap();
            if outcome.predicted == label && outcome.certified {
                rand_certified += 1;
            }
        }
        println!("  randomized {rand_certified}/{subset} vs derandomized top-1 {derand}/{subset}");
        assert!(rand_certified <= derand);
    });
}

#[test]
fn attack_consistency() {
    criterion("attack breaks zero certified images", || {
        let d = desk();
        let m = 5;
        let config = AttackConfig {
            restarts: 5,
            iterations: 30,
            step: 0.05,
            ..AttackConfig::desk_scale(m, 11)
        };
        let subset = 200usize;
        let mut correct = 0usize;
        let mut certified = 0usize;
        let mut robust = 0usize;
        let mut certified_broken = 0usize;
        for idx in 0..subset {
            let label = d.eval.labels[idx] as usize;
            let cert = certify(&d.threshold_counts[idx], &d.geometry, m).unwrap();
            if cert.predicted != label {
                continue;
            }
            correct += 1;
            let flipped = patch_ifgsm(&d.params, &d.eval.images[idx], label, &d.geometry, &config)
                .unwrap()
                .is_some();
            if !flipped {
                robust += 1;
            }
            if cert.certified {
                certified += 1;
                if flipped {
                    certified_broken += 1;
                }
            }
        }
        println!(
            "  correct {correct}/{subset}, certified {certified}, robust {robust}, broken {certified_broken}"
        );
        assert_eq!(certified_broken, 0, "{certified_broken} certified images flipped");
        assert!(robust >= certified, "empirical {robust} below certified {certified}");
    });
}

#[test]
fn monotonicity_in_patch_size() {
    criterion("certified accuracy non-increasing in m", || {
        let d = desk();
        let mut previous = f64::INFINITY;
        for m in [3usize, 5, 7, 9] {
            let (_, certified) = certified_fraction(d, &d.threshold_counts, m);
            println!("  m={m}: certified {certified:.4}");
            assert!(
                certified <= previous + 1e-12,
                "certified accuracy increased from {previous} at m={m}"
            );
            previous = certified;
        }
        // per-image exactness: certified at m iff m <= max_certified_m
        for (c, _) in d.threshold_counts.iter().zip(&d.eval.labels).take(50) {
            let frontier = certify(c, &d.geometry, 1).unwrap().max_certified_m;
            for m in [3usize, 5, 7, 9] {
                let cert = certify(c, &d.geometry, m).unwrap();
                assert_eq!(cert.certified, m <= frontier);
            }
        }
    });
}
