//! The derandomized core: evaluate the base classifier on every ablation
//! position, aggregate exact vote counts, classify with deterministic
//! tie-breaking, and certify patch robustness from the count margins.

use serde::{Deserialize, Serialize};

use crate::ablation::Geometry;
use crate::dataset::{null_encode, Image};
use crate::error::{Error, Result};
use crate::model::{LogitVector, ModelParams};
use crate::parallel::ordered_map;

/// How a logit vector turns into zero/one class votes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    /// Vote for every class whose softmax score strictly exceeds theta;
    /// may abstain (all zero) or vote for several classes.
    Threshold(f64),
    /// Exactly one vote, for the argmax (lowest index on exact ties).
    Top1,
}

/// Zero/one votes of one logit vector.
pub fn vote(logits: &LogitVector, mode: VoteMode) -> Vec<u8> {
    match mode {
        VoteMode::Threshold(theta) => logits
            .softmax
            .iter()
            .map(|&p| u8::from(p > theta))
            .collect(),
        VoteMode::Top1 => {
            let mut row = vec![0u8; logits.logits.len()];
            row[logits.argmax()] = 1;
            row
        }
    }
}

/// Per-position votes for one image: rows follow `enumerate_positions`
/// order, columns are classes.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteMatrix {
    pub rows: Vec<Vec<u8>>,
    pub num_classes: usize,
    pub mode: VoteMode,
}

/// Exact per-class vote totals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub n: Vec<usize>,
    pub total_positions: usize,
}

/// Column sums of a vote matrix.
pub fn counts(matrix: &VoteMatrix) -> ClassCounts {
    let mut n = vec![0usize; matrix.num_classes];
    for row in &matrix.rows {
        for (c, &v) in row.iter().enumerate() {
            n[c] += v as usize;
        }
    }
    ClassCounts { n, total_positions: matrix.rows.len() }
}

/// Plurality class with smallest-index tie-breaking. All-zero counts
/// classify as class 0.
pub fn classify(counts: &ClassCounts) -> usize {
    let mut best = 0;
    for (c, &n) in counts.n.iter().enumerate() {
        if n > counts.n[best] {
            best = c;
        }
    }
    best
}

/// A per-image robustness guarantee derived from exact count margins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub predicted: usize,
    /// n_c - n_c' - 1_{c > c'} per rival; `None` at the predicted index.
    pub margins: Vec<Option<i64>>,
    /// Patch size this certificate was requested at.
    pub m: usize,
    pub certified: bool,
    /// Largest patch size with the margin condition satisfied; 0 if none.
    pub max_certified_m: usize,
}

fn certified_at(counts: &ClassCounts, predicted: usize, geometry: &Geometry, m: usize) -> Result<bool> {
    let affected = geometry.affected_count_usize(m)?;
    let n_c = counts.n[predicted];
    let rival = counts
        .n
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != predicted)
        .map(|(c, &n)| n + usize::from(predicted > c))
        .max();
    match rival {
        Some(r) => Ok(n_c >= r + 2 * affected),
        None => Ok(true), // single-class problem has no rival to flip to
    }
}

/// Certify the tie-broken plurality class against every m-by-m patch.
pub fn certify(counts: &ClassCounts, geometry: &Geometry, m: usize) -> Result<Certificate> {
    if counts.n.is_empty() {
        return Err(Error::Argument("empty class counts".into()));
    }
    let expected = geometry.position_count();
    if num_bigint::BigUint::from(counts.total_positions) != expected {
        return Err(Error::Argument(format!(
            "counts cover {} positions but geometry has {expected}",
            counts.total_positions
        )));
    }
    let predicted = classify(counts);
    let margins = counts
        .n
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            (c != predicted).then(|| {
                counts.n[predicted] as i64 - n as i64 - i64::from(predicted > c)
            })
        })
        .collect();
    let certified = certified_at(counts, predicted, geometry, m)?;
    // affected_count is monotone in m, so a linear scan finds the frontier
    let mut max_certified_m = 0;
    let limit = geometry.shape.height.min(geometry.shape.width);
    for mm in 1..=limit {
        if certified_at(counts, predicted, geometry, mm)? {
            max_certified_m = mm;
        } else {
            break;
        }
    }
    Ok(Certificate { predicted, margins, m, certified, max_certified_m })
}

/// Run the base classifier on every ablation position of `image`.
/// Row order equals `enumerate_positions` order regardless of parallelism.
pub fn build_vote_matrix(
    params: &ModelParams,
    image: &Image,
    geometry: &Geometry,
    mode: VoteMode,
) -> Result<VoteMatrix> {
    let trained = &params.vote.geometry;
    if trained.kind != geometry.kind || trained.s != geometry.s || trained.kappa != geometry.kappa {
        return Err(Error::Argument(format!(
            "checkpoint was trained for {} s={} kappa={}, requested {} s={} kappa={}",
            trained.kind.name(),
            trained.s,
            trained.kappa,
            geometry.kind.name(),
            geometry.s,
            geometry.kappa
        )));
    }
    let positions = geometry.enumerate_positions()?;
    let rows = ordered_map(&positions, |pattern| -> Result<Vec<u8>> {
        let encoded = null_encode(image, geometry, pattern)?;
        let logits = params.forward(&encoded).map_err(|e| {
            Error::Numeric(format!("position {:?}: {e}", pattern.anchor))
        })?;
        Ok(vote(&logits, mode))
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(VoteMatrix { rows, num_classes: params.num_classes, mode })
}
