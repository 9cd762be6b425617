//! Randomized smoothing baselines: sampling-based structured smoothing with
//! an exact one-sided binomial lower bound, and the sparse randomized
//! ablation certificate.
//!
//! Sampling is counter-based per sample index so parallel and serial runs
//! make identical decisions.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::{DeltaResult, Geometry, PatternKind};
use crate::dataset::{null_encode, Image, RawDataset};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::parallel::ordered_map;
use crate::smoothing::{classify, ClassCounts};

/// Two-stage estimation settings (selection draw, then a fresh bound draw).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub selection_samples: usize,
    pub bound_samples: usize,
    /// Confidence complement: certificates hold with confidence 1 - alpha.
    pub alpha: f64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig { selection_samples: 1000, bound_samples: 10000, alpha: 0.05 }
    }
}

/// Outcome of one randomized certification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomizedOutcome {
    pub predicted: usize,
    pub successes: usize,
    pub bound_samples: usize,
    pub p_lower: f64,
    pub delta: f64,
    pub certified: bool,
}

/// Exact one-sided Clopper-Pearson lower bound: the p solving
/// P[X >= successes | Binomial(n, p)] = alpha, found by bisection on the
/// binomial tail to absolute tolerance 1e-10. Zero successes give 0.
pub fn binom_lower_bound(successes: usize, n: usize, alpha: f64) -> Result<f64> {
    if successes > n {
        return Err(Error::Argument(format!("{successes} successes out of {n}")));
    }
    if !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
        return Err(Error::Argument(format!("alpha {alpha} outside (0, 1)")));
    }
    if successes == 0 {
        return Ok(0.0);
    }
    // ln C(n, k) for k in successes..=n via a running ln-factorial table
    let mut ln_fact = vec![0.0f64; n + 1];
    for i in 1..=n {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let ln_choose = |k: usize| ln_fact[n] - ln_fact[k] - ln_fact[n - k];
    // P[X >= s] is increasing in p
    let tail = |p: f64| -> f64 {
        if p <= 0.0 {
            return 0.0;
        }
        if p >= 1.0 {
            return 1.0;
        }
        let (lp, lq) = (p.ln(), (1.0 - p).ln());
        (successes..=n)
            .map(|k| (ln_choose(k) + k as f64 * lp + (n - k) as f64 * lq).exp())
            .sum()
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Independent per-sample random stream: phase 0 selects the putative
/// class, phase 1 draws the bound samples.
fn sample_rng(seed: u64, phase: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((phase << 48) | index);
    rng
}

/// Top-1 base classification of one uniformly drawn ablation position.
fn sampled_top1(
    params: &ModelParams,
    image: &Image,
    geometry: &Geometry,
    positions: &[crate::ablation::AblationPattern],
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let pattern = if geometry.kind == PatternKind::Sparse {
        geometry.sample_sparse(rng)?
    } else {
        positions[rng.gen_range(0..positions.len())].clone()
    };
    let encoded = null_encode(image, geometry, &pattern)?;
    Ok(params.forward(&encoded)?.argmax())
}

/// Two-stage randomized certification: select a putative class from
/// `selection_samples` draws, lower-bound its probability with
/// `bound_samples` fresh draws, and certify iff p_lower > 0.5 + delta.
pub fn randomized_certify(
    params: &ModelParams,
    image: &Image,
    geometry: &Geometry,
    delta: &DeltaResult,
    config: &EstimateConfig,
    seed: u64,
) -> Result<RandomizedOutcome> {
    let positions = if geometry.kind == PatternKind::Sparse {
        Vec::new()
    } else {
        geometry.enumerate_positions()?
    };
    let selection: Vec<u64> = (0..config.selection_samples as u64).collect();
    let votes = ordered_map(&selection, |&i| {
        let mut rng = sample_rng(seed, 0, i);
        sampled_top1(params, image, geometry, &positions, &mut rng)
    });
    let mut n = vec![0usize; params.num_classes];
    for v in votes {
        n[v?] += 1;
    }
    let predicted = classify(&ClassCounts { n, total_positions: config.selection_samples });
    let bound: Vec<u64> = (0..config.bound_samples as u64).collect();
    let hits = ordered_map(&bound, |&i| {
        let mut rng = sample_rng(seed, 1, i);
        sampled_top1(params, image, geometry, &positions, &mut rng)
    });
    let mut successes = 0usize;
    for h in hits {
        if h? == predicted {
            successes += 1;
        }
    }
    let p_lower = binom_lower_bound(successes, config.bound_samples, config.alpha)?;
    let delta_value = delta.value();
    Ok(RandomizedOutcome {
        predicted,
        successes,
        bound_samples: config.bound_samples,
        p_lower,
        delta: delta_value,
        certified: p_lower > 0.5 + delta_value,
    })
}

/// The same certification condition with sampling replaced by exhaustive
/// enumeration: p_c is exact, so the only slack left is the majority-vote
/// condition itself.
pub fn exhaustive_certify(
    params: &ModelParams,
    image: &Image,
    geometry: &Geometry,
    delta: &DeltaResult,
) -> Result<RandomizedOutcome> {
    let positions = geometry.enumerate_positions()?;
    let votes = ordered_map(&positions, |pattern| -> Result<usize> {
        let encoded = null_encode(image, geometry, pattern)?;
        Ok(params.forward(&encoded)?.argmax())
    });
    let mut n = vec![0usize; params.num_classes];
    for v in votes {
        n[v?] += 1;
    }
    let total = positions.len();
    let predicted = classify(&ClassCounts { n: n.clone(), total_positions: total });
    let p_exact = n[predicted] as f64 / total as f64;
    let delta_value = delta.value();
    Ok(RandomizedOutcome {
        predicted,
        successes: n[predicted],
        bound_samples: total,
        p_lower: p_exact,
        delta: delta_value,
        certified: p_exact > 0.5 + delta_value,
    })
}

/// Sparse randomized-ablation accuracy over a dataset: the patch is treated
/// as an L0 adversary on rho pixels. Certificates are probabilistic with
/// confidence 1 - alpha.
pub fn sparse_certified_accuracy(
    params: &ModelParams,
    dataset: &RawDataset,
    k: usize,
    rho: usize,
    config: &EstimateConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::Argument("empty dataset".into()));
    }
    let shape = dataset.images[0].shape();
    let geometry = Geometry::sparse(shape, k)?;
    let delta = geometry.delta_l0(rho)?;
    let mut correct = 0usize;
    let mut certified = 0usize;
    for (idx, (image, &label)) in dataset.images.iter().zip(&dataset.labels).enumerate() {
        let outcome = randomized_certify(
            params,
            image,
            &geometry,
            &delta,
            config,
            seed.wrapping_add(idx as u64),
        )?;
        if outcome.predicted == label as usize {
            correct += 1;
            if outcome.certified {
                certified += 1;
            }
        }
    }
    let n = dataset.len() as f64;
    Ok((correct as f64 / n, certified as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::distributions::Bernoulli;
    use rand::prelude::Distribution;

    #[test]
    fn lower_bound_edge_cases() {
        assert_eq!(binom_lower_bound(0, 10000, 0.05).unwrap(), 0.0);
        let all = binom_lower_bound(10000, 10000, 0.05).unwrap();
        let closed_form = 0.05f64.powf(1.0 / 10000.0);
        assert!((all - closed_form).abs() < 1e-8, "{all} vs {closed_form}");
        let half = binom_lower_bound(5000, 10000, 0.05).unwrap();
        assert!(half < 0.5 && half > 0.48, "{half}");
        assert!(binom_lower_bound(11, 10, 0.05).is_err());
        assert!(binom_lower_bound(5, 10, 0.0).is_err());
    }

    #[test]
    fn lower_bound_monotonicity() {
        let mut prev = -1.0;
        for s in [0, 50, 100, 150, 190, 200] {
            let b = binom_lower_bound(s, 200, 0.05).unwrap();
            assert!(b >= prev);
            prev = b;
        }
        // larger alpha moves the bound toward the point estimate
        let strict = binom_lower_bound(150, 200, 0.01).unwrap();
        let loose = binom_lower_bound(150, 200, 0.2).unwrap();
        assert!(loose >= strict);
        assert!(loose <= 150.0 / 200.0);
    }

    #[test]
    fn lower_bound_never_exceeds_point_estimate() {
        for s in [1, 7, 60, 199] {
            let b = binom_lower_bound(s, 200, 0.05).unwrap();
            assert!(b <= s as f64 / 200.0, "s={s}: {b}");
        }
    }

    #[test]
    fn coverage_holds_at_95_percent() {
        // p_lower <= p must happen in >= 95% of trials (3-sigma band)
        let n = 200;
        let trials = 2000;
        let mut bounds = vec![None; n + 1];
        for &p in &[0.3, 0.6, 0.9] {
            let mut rng = ChaCha8Rng::seed_from_u64(4242);
            let dist = Bernoulli::new(p).unwrap();
            let mut covered = 0;
            for _ in 0..trials {
                let successes = (0..n).filter(|_| dist.sample(&mut rng)).count();
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
    }
}
