//! Ablation geometries: which pixels the base classifier is allowed to see.
//!
//! A pattern retains a band, block, grid-aligned multi-set, or sparse pixel
//! set and ablates everything else. Bands and blocks wrap around the image
//! borders; the adversarial patch never wraps. All counting here is exact
//! integer arithmetic so certificates do not depend on rounding.

use itertools::Itertools;
use num_bigint::BigUint;
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize) -> Self {
        Shape { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// The family of retained-pixel layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    ColumnBand,
    RowBand,
    Block,
    MultiColumn,
    MultiBlock,
    Sparse,
}

impl PatternKind {
    pub fn name(&self) -> &'static str {
        match self {
            PatternKind::ColumnBand => "column",
            PatternKind::RowBand => "row",
            PatternKind::Block => "block",
            PatternKind::MultiColumn => "multi-column",
            PatternKind::MultiBlock => "multi-block",
            PatternKind::Sparse => "sparse",
        }
    }
}

/// Concrete placement of one ablation pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Leftmost column of a column band.
    Col(usize),
    /// Topmost row of a row band.
    Row(usize),
    /// Upper-left corner of a block.
    Cell { y: usize, x: usize },
    /// Grid-group indices for multi kinds, strictly increasing.
    Groups(Vec<usize>),
    /// Flat pixel indices for the sparse kind, strictly increasing.
    Pixels(Vec<usize>),
}

/// A declarative description of which pixels are retained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationPattern {
    pub kind: PatternKind,
    pub s: usize,
    pub kappa: usize,
    pub k: usize,
    pub anchor: Anchor,
}

/// A square adversarial patch of side `m`, optionally placed at an
/// upper-left corner `(i, j)`. Patches never wrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub m: usize,
    pub position: Option<(usize, usize)>,
}

impl PatchSpec {
    pub fn at(m: usize, i: usize, j: usize) -> Self {
        PatchSpec { m, position: Some((i, j)) }
    }

    fn covers(&self, y: usize, x: usize) -> bool {
        match self.position {
            Some((i, j)) => y >= i && y < i + self.m && x >= j && x < j + self.m,
            None => false,
        }
    }
}

/// Exact fraction of ablation positions the adversary can affect.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaResult {
    pub numerator: BigUint,
    pub denominator: BigUint,
}

impl DeltaResult {
    fn new(numerator: BigUint, denominator: BigUint) -> Self {
        DeltaResult { numerator, denominator }
    }

    /// Floating approximation of the exact rational.
    pub fn value(&self) -> f64 {
        Ratio::new(self.numerator.clone(), self.denominator.clone())
            .to_f64()
            .unwrap_or(f64::NAN)
    }
}

/// Exact binomial coefficient C(n, k).
pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Geometry parameters without a concrete image shape, as stored in model
/// checkpoints and run configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub kind: PatternKind,
    #[serde(default)]
    pub s: usize,
    #[serde(default = "one")]
    pub kappa: usize,
    #[serde(default)]
    pub k: usize,
}

fn one() -> usize {
    1
}

impl GeometrySpec {
    pub fn band(kind: PatternKind, s: usize) -> Self {
        GeometrySpec { kind, s, kappa: 1, k: 0 }
    }

    pub fn with_shape(&self, shape: Shape) -> Result<Geometry> {
        Geometry::new(self.kind, shape, self.s, self.kappa, self.k)
    }
}

/// A smoothing geometry: pattern family plus its parameters for one image
/// shape. All pattern enumeration and adversary counting goes through this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub kind: PatternKind,
    pub shape: Shape,
    /// Band width or block side; unused for sparse.
    pub s: usize,
    /// Number of retained groups for multi kinds; 1 otherwise.
    pub kappa: usize,
    /// Retained pixel count for the sparse kind; 0 otherwise.
    pub k: usize,
}

impl Geometry {
    pub fn column(shape: Shape, s: usize) -> Result<Self> {
        Geometry { kind: PatternKind::ColumnBand, shape, s, kappa: 1, k: 0 }.validated()
    }

    pub fn row(shape: Shape, s: usize) -> Result<Self> {
        Geometry { kind: PatternKind::RowBand, shape, s, kappa: 1, k: 0 }.validated()
    }

    pub fn block(shape: Shape, s: usize) -> Result<Self> {
        Geometry { kind: PatternKind::Block, shape, s, kappa: 1, k: 0 }.validated()
    }

    pub fn multi_column(shape: Shape, s: usize, kappa: usize) -> Result<Self> {
        Geometry { kind: PatternKind::MultiColumn, shape, s, kappa, k: 0 }.validated()
    }

    pub fn multi_block(shape: Shape, s: usize, kappa: usize) -> Result<Self> {
        Geometry { kind: PatternKind::MultiBlock, shape, s, kappa, k: 0 }.validated()
    }

    pub fn sparse(shape: Shape, k: usize) -> Result<Self> {
        Geometry { kind: PatternKind::Sparse, shape, s: 0, kappa: 1, k }.validated()
    }

    pub fn new(kind: PatternKind, shape: Shape, s: usize, kappa: usize, k: usize) -> Result<Self> {
        Geometry { kind, shape, s, kappa, k }.validated()
    }

    fn validated(self) -> Result<Self> {
        let Shape { height: h, width: w } = self.shape;
        if h == 0 || w == 0 {
            return Err(Error::Geometry("empty image shape".into()));
        }
        match self.kind {
            PatternKind::ColumnBand => {
                if self.s < 1 || self.s > w {
                    return Err(Error::Geometry(format!(
                        "column band width s={} out of range 1..={}",
                        self.s, w
                    )));
                }
            }
            PatternKind::RowBand => {
                if self.s < 1 || self.s > h {
                    return Err(Error::Geometry(format!(
                        "row band width s={} out of range 1..={}",
                        self.s, h
                    )));
                }
            }
            PatternKind::Block => {
                if self.s < 1 || self.s > h.min(w) {
                    return Err(Error::Geometry(format!(
                        "block side s={} out of range 1..={}",
                        self.s,
                        h.min(w)
                    )));
                }
            }
            PatternKind::MultiColumn | PatternKind::MultiBlock => {
                if self.s < 1 || self.s > h.min(w) {
                    return Err(Error::Geometry(format!("group size s={} out of range", self.s)));
                }
                let groups = self.group_count();
                if self.kappa < 1 || self.kappa > groups {
                    return Err(Error::Geometry(format!(
                        "kappa={} out of range 1..={groups}",
                        self.kappa
                    )));
                }
            }
            PatternKind::Sparse => {
                if self.k < 1 || self.k > h * w {
                    return Err(Error::Geometry(format!("sparse k={} out of range", self.k)));
                }
            }
        }
        Ok(self)
    }

    /// Number of grid groups for multi kinds.
    fn group_count(&self) -> usize {
        let gh = self.shape.height.div_ceil(self.s);
        let gw = self.shape.width.div_ceil(self.s);
        match self.kind {
            PatternKind::MultiColumn => gw,
            PatternKind::MultiBlock => gh * gw,
            _ => unreachable!(),
        }
    }

    /// Total number of ablation positions, as an exact integer.
    pub fn position_count(&self) -> BigUint {
        let Shape { height: h, width: w } = self.shape;
        match self.kind {
            PatternKind::ColumnBand => BigUint::from(w),
            PatternKind::RowBand => BigUint::from(h),
            PatternKind::Block => BigUint::from(h * w),
            PatternKind::MultiColumn | PatternKind::MultiBlock => {
                binomial(self.group_count(), self.kappa)
            }
            PatternKind::Sparse => binomial(h * w, self.k),
        }
    }

    /// Enumerate every ablation position in deterministic (lexicographic)
    /// order. Sparse patterns are sampled, not enumerated.
    pub fn enumerate_positions(&self) -> Result<Vec<AblationPattern>> {
        let Shape { height: h, width: w } = self.shape;
        let pat = |anchor| AblationPattern {
            kind: self.kind,
            s: self.s,
            kappa: self.kappa,
            k: self.k,
            anchor,
        };
        let out = match self.kind {
            PatternKind::ColumnBand => (0..w).map(|x| pat(Anchor::Col(x))).collect(),
            PatternKind::RowBand => (0..h).map(|y| pat(Anchor::Row(y))).collect(),
            PatternKind::Block => (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .map(|(y, x)| pat(Anchor::Cell { y, x }))
                .collect(),
            PatternKind::MultiColumn | PatternKind::MultiBlock => {
                let groups = self.group_count();
                (0..groups)
                    .combinations(self.kappa)
                    .map(|g| pat(Anchor::Groups(g)))
                    .collect()
            }
            PatternKind::Sparse => {
                return Err(Error::Geometry(
                    "sparse patterns are sampled, not enumerable".into(),
                ))
            }
        };
        Ok(out)
    }

    /// Draw one sparse pattern: `k` distinct pixels, uniform without
    /// replacement.
    pub fn sample_sparse<R: Rng>(&self, rng: &mut R) -> Result<AblationPattern> {
        if self.kind != PatternKind::Sparse {
            return Err(Error::Geometry("sample_sparse requires the sparse kind".into()));
        }
        let mut idx: Vec<usize> = (0..self.shape.pixels()).collect();
        idx.shuffle(rng);
        let mut pixels: Vec<usize> = idx.into_iter().take(self.k).collect();
        pixels.sort_unstable();
        Ok(AblationPattern {
            kind: self.kind,
            s: self.s,
            kappa: self.kappa,
            k: self.k,
            anchor: Anchor::Pixels(pixels),
        })
    }

    /// Pixel extent of grid group `g` as (y0, y1, x0, x1), half-open, for
    /// multi kinds. Edge groups are truncated to the image.
    fn group_rect(&self, g: usize) -> (usize, usize, usize, usize) {
        let Shape { height: h, width: w } = self.shape;
        match self.kind {
            PatternKind::MultiColumn => {
                let x0 = g * self.s;
                (0, h, x0, (x0 + self.s).min(w))
            }
            PatternKind::MultiBlock => {
                let gw = w.div_ceil(self.s);
                let (gy, gx) = (g / gw, g % gw);
                let (y0, x0) = (gy * self.s, gx * self.s);
                (y0, (y0 + self.s).min(h), x0, (x0 + self.s).min(w))
            }
            _ => unreachable!(),
        }
    }

    /// Boolean grid marking exactly the retained pixels of `pattern`,
    /// row-major. Bands and blocks wrap modulo the image dimensions.
    pub fn retained_mask(&self, pattern: &AblationPattern) -> Result<Vec<bool>> {
        self.check_pattern(pattern)?;
        let Shape { height: h, width: w } = self.shape;
        let mut mask = vec![false; h * w];
        match &pattern.anchor {
            Anchor::Col(x0) => {
                for d in 0..self.s {
                    let x = (x0 + d) % w;
                    for y in 0..h {
                        mask[y * w + x] = true;
                    }
                }
            }
            Anchor::Row(y0) => {
                for d in 0..self.s {
                    let y = (y0 + d) % h;
                    for x in 0..w {
                        mask[y * w + x] = true;
                    }
                }
            }
            Anchor::Cell { y: y0, x: x0 } => {
                for dy in 0..self.s {
                    let y = (y0 + dy) % h;
                    for dx in 0..self.s {
                        let x = (x0 + dx) % w;
                        mask[y * w + x] = true;
                    }
                }
            }
            Anchor::Groups(groups) => {
                for &g in groups {
                    let (y0, y1, x0, x1) = self.group_rect(g);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            mask[y * w + x] = true;
                        }
                    }
                }
            }
            Anchor::Pixels(pixels) => {
                for &p in pixels {
                    mask[p] = true;
                }
            }
        }
        Ok(mask)
    }

    fn check_pattern(&self, pattern: &AblationPattern) -> Result<()> {
        let Shape { height: h, width: w } = self.shape;
        if pattern.kind != self.kind || pattern.s != self.s {
            return Err(Error::Geometry("pattern does not match geometry".into()));
        }
        let ok = match &pattern.anchor {
            Anchor::Col(x) => *x < w,
            Anchor::Row(y) => *y < h,
            Anchor::Cell { y, x } => *y < h && *x < w,
            Anchor::Groups(groups) => {
                groups.len() == self.kappa && groups.iter().all(|&g| g < self.group_count())
            }
            Anchor::Pixels(pixels) => {
                pixels.len() == self.k && pixels.iter().all(|&p| p < h * w)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Geometry("pattern anchor out of range for shape".into()))
        }
    }

    /// True iff the retained set and the patch pixel set share a pixel.
    pub fn intersects(&self, pattern: &AblationPattern, patch: &PatchSpec) -> bool {
        let Shape { height: h, width: w } = self.shape;
        let (i, j) = match patch.position {
            Some(p) => p,
            None => return false,
        };
        debug_assert!(i + patch.m <= h && j + patch.m <= w);
        let col_hit = |x0: usize| (0..self.s).any(|d| {
            let x = (x0 + d) % w;
            x >= j && x < j + patch.m
        });
        let row_hit = |y0: usize| (0..self.s).any(|d| {
            let y = (y0 + d) % h;
            y >= i && y < i + patch.m
        });
        match &pattern.anchor {
            Anchor::Col(x0) => col_hit(*x0),
            Anchor::Row(y0) => row_hit(*y0),
            Anchor::Cell { y: y0, x: x0 } => row_hit(*y0) && col_hit(*x0),
            Anchor::Groups(groups) => groups.iter().any(|&g| {
                let (y0, y1, x0, x1) = self.group_rect(g);
                y0 < i + patch.m && y1 > i && x0 < j + patch.m && x1 > j
            }),
            Anchor::Pixels(pixels) => pixels
                .iter()
                .any(|&p| patch.covers(p / w, p % w)),
        }
    }

    /// Worst-case number of ablation positions whose base classification an
    /// `m`-by-`m` patch can change, over all patch placements.
    pub fn affected_count(&self, m: usize) -> Result<BigUint> {
        if m < 1 {
            return Err(Error::Argument("patch size m must be positive".into()));
        }
        let count = match self.kind {
            PatternKind::ColumnBand | PatternKind::RowBand => BigUint::from(m + self.s - 1),
            PatternKind::Block => {
                let per_axis = m + self.s - 1;
                BigUint::from(per_axis * per_axis)
            }
            PatternKind::MultiColumn | PatternKind::MultiBlock => {
                let total = self.group_count();
                let per_axis = (m - 1).div_ceil(self.s) + 1;
                let overlapped = match self.kind {
                    PatternKind::MultiColumn => per_axis,
                    _ => per_axis * per_axis,
                };
                if overlapped > total {
                    binomial(total, self.kappa)
                } else {
                    binomial(total, self.kappa) - binomial(total - overlapped, self.kappa)
                }
            }
            PatternKind::Sparse => {
                return Err(Error::Geometry(
                    "sparse certificates are probabilistic; use delta instead".into(),
                ))
            }
        };
        Ok(count)
    }

    /// Like [`affected_count`](Self::affected_count) but converted to
    /// `usize`; errors if the count exceeds the machine word.
    pub fn affected_count_usize(&self, m: usize) -> Result<usize> {
        self.affected_count(m)?
            .to_usize()
            .ok_or_else(|| Error::Numeric("affected count exceeds usize".into()))
    }

    /// The probability that the retained pixels meet an m-by-m patch, as an
    /// exact rational. For the sparse kind the patch is modeled as an L0
    /// attack on rho = m^2 pixels.
    pub fn delta(&self, m: usize) -> Result<DeltaResult> {
        if self.kind == PatternKind::Sparse {
            return self.delta_l0(m * m);
        }
        Ok(DeltaResult::new(self.affected_count(m)?, self.position_count()))
    }

    /// Sparse-ablation delta for an L0 adversary touching `rho` pixels:
    /// 1 - C(hw - rho, k) / C(hw, k).
    pub fn delta_l0(&self, rho: usize) -> Result<DeltaResult> {
        if self.kind != PatternKind::Sparse {
            return Err(Error::Geometry("delta_l0 requires the sparse kind".into()));
        }
        let hw = self.shape.pixels();
        if rho > hw {
            return Err(Error::Argument(format!("rho={rho} exceeds pixel count {hw}")));
        }
        let total = binomial(hw, self.k);
        let miss = binomial(hw - rho, self.k);
        Ok(DeltaResult::new(&total - miss, total))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(h: usize, w: usize) -> Shape {
        Shape::new(h, w)
    }

    #[test]
    fn enumerate_counts_per_kind() {
        let g = Geometry::column(shape(32, 32), 4).unwrap();
        assert_eq!(g.enumerate_positions().unwrap().len(), 32);
        let g = Geometry::block(shape(28, 28), 3).unwrap();
        assert_eq!(g.enumerate_positions().unwrap().len(), 784);
        let g = Geometry::multi_block(shape(28, 28), 4, 2).unwrap();
        // C(49, 2) grid-anchor pairs
        assert_eq!(g.enumerate_positions().unwrap().len(), 1176);
        let g = Geometry::multi_column(shape(28, 28), 4, 2).unwrap();
        assert_eq!(g.enumerate_positions().unwrap().len(), 21);
    }

    #[test]
    fn enumerate_order_is_lexicographic() {
        let g = Geometry::block(shape(3, 2), 1).unwrap();
        let anchors: Vec<_> = g
            .enumerate_positions()
            .unwrap()
            .into_iter()
            .map(|p| p.anchor)
            .collect();
        assert_eq!(anchors[0], Anchor::Cell { y: 0, x: 0 });
        assert_eq!(anchors[1], Anchor::Cell { y: 0, x: 1 });
        assert_eq!(anchors[2], Anchor::Cell { y: 1, x: 0 });
    }

    #[test]
    fn column_band_wraps() {
        let g = Geometry::column(shape(2, 4), 2).unwrap();
        let p = AblationPattern {
            kind: PatternKind::ColumnBand,
            s: 2,
            kappa: 1,
            k: 0,
            anchor: Anchor::Col(3),
        };
        let mask = g.retained_mask(&p).unwrap();
        // columns {3, 0} retained
        for y in 0..2 {
            assert!(mask[y * 4 + 3]);
            assert!(mask[y * 4]);
            assert!(!mask[y * 4 + 1]);
            assert!(!mask[y * 4 + 2]);
        }
    }

    #[test]
    fn block_wraps_both_axes() {
        let h = 5;
        let w = 6;
        let g = Geometry::block(shape(h, w), 3).unwrap();
        let p = AblationPattern {
            kind: PatternKind::Block,
            s: 3,
            kappa: 1,
            k: 0,
            anchor: Anchor::Cell { y: h - 1, x: w - 1 },
        };
        let mask = g.retained_mask(&p).unwrap();
        assert_eq!(mask.iter().filter(|&&b| b).count(), 9);
        assert!(mask[(h - 1) * w + (w - 1)]);
        assert!(mask[0]); // wrapped corner
        assert!(mask[w + 1]); // (1, 1)
    }

    #[test]
    fn sparse_sample_has_k_pixels() {
        let g = Geometry::sparse(shape(8, 8), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = g.sample_sparse(&mut rng).unwrap();
        let mask = g.retained_mask(&p).unwrap();
        assert_eq!(mask.iter().filter(|&&b| b).count(), 4);
    }

    #[test]
    fn retained_counts_match_kind() {
        let g = Geometry::multi_block(shape(28, 28), 4, 2).unwrap();
        for p in g.enumerate_positions().unwrap().iter().take(50) {
            let mask = g.retained_mask(p).unwrap();
            // 28 divisible by 4, so every group is a full 4x4 block
            assert_eq!(mask.iter().filter(|&&b| b).count(), 2 * 16);
        }
    }

    #[test]
    fn intersects_basic_cases() {
        let g = Geometry::column(shape(28, 28), 1).unwrap();
        let band = |x| AblationPattern {
            kind: PatternKind::ColumnBand,
            s: 1,
            kappa: 1,
            k: 0,
            anchor: Anchor::Col(x),
        };
        assert!(g.intersects(&band(0), &PatchSpec::at(1, 0, 0)));
        assert!(!g.intersects(&band(10), &PatchSpec::at(5, 0, 0)));
        // patch covering the whole image hits every pattern
        for p in g.enumerate_positions().unwrap() {
            assert!(g.intersects(&p, &PatchSpec::at(28, 0, 0)));
        }
    }

    /// Brute-force pixel-set overlap, the independent route checked against
    /// the arithmetic in `intersects`.
    fn mask_overlap(g: &Geometry, p: &AblationPattern, patch: &PatchSpec) -> bool {
        let mask = g.retained_mask(p).unwrap();
        let w = g.shape.width;
        mask.iter()
            .enumerate()
            .any(|(idx, &r)| r && patch.covers(idx / w, idx % w))
    }

    #[test]
    fn intersects_agrees_with_mask_overlap() {
        let geoms = [
            Geometry::column(shape(9, 11), 3).unwrap(),
            Geometry::row(shape(9, 11), 2).unwrap(),
            Geometry::block(shape(9, 11), 3).unwrap(),
            Geometry::multi_block(shape(9, 11), 3, 2).unwrap(),
        ];
        for g in &geoms {
            for p in g.enumerate_positions().unwrap() {
                for m in [1, 3] {
                    for i in 0..=(9 - m) {
                        for j in 0..=(11 - m) {
                            let patch = PatchSpec::at(m, i, j);
                            assert_eq!(
                                g.intersects(&p, &patch),
                                mask_overlap(g, &p, &patch),
                                "kind={:?} anchor={:?} m={m} i={i} j={j}",
                                g.kind,
                                p.anchor
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn affected_count_formulas() {
        let g = Geometry::column(shape(28, 28), 4).unwrap();
        assert_eq!(g.affected_count_usize(5).unwrap(), 8);
        let g = Geometry::block(shape(28, 28), 4).unwrap();
        assert_eq!(g.affected_count_usize(5).unwrap(), 64);
        // C(49,2) - C(45,2) = 1176 - 990
        let g = Geometry::multi_block(shape(28, 28), 4, 2).unwrap();
        assert_eq!(g.affected_count_usize(5).unwrap(), 186);
    }

    #[test]
    fn multi_block_affected_dominates_brute_force() {
        // Brute-force max over all 24x24 patch positions of selections
        // intersecting the patch; the closed form must dominate.
        let g = Geometry::multi_block(shape(28, 28), 4, 2).unwrap();
        let positions = g.enumerate_positions().unwrap();
        let m = 5;
        let mut max_hit = 0usize;
        for i in 0..=(28 - m) {
            for j in 0..=(28 - m) {
                let patch = PatchSpec::at(m, i, j);
                let hit = positions.iter().filter(|p| g.intersects(p, &patch)).count();
                max_hit = max_hit.max(hit);
            }
        }
        let bound = g.affected_count_usize(m).unwrap();
        assert!(max_hit <= bound, "max {max_hit} > bound {bound}");
        assert_eq!(max_hit, 186); // 5x5 patches overlap exactly 4 grid blocks here
    }

    #[test]
    fn delta_reference_values() {
        // sparse 8x8, rho=9, k=4
        let g = Geometry::sparse(shape(8, 8), 4).unwrap();
        let d = g.delta_l0(9).unwrap();
        assert!((d.value() - 0.463).abs() < 5e-4, "got {}", d.value());
        // block 8x8, m=3, s=2 -> 16/64
        let g = Geometry::block(shape(8, 8), 2).unwrap();
        let d = g.delta(3).unwrap();
        assert_eq!(d.numerator, BigUint::from(16u32));
        assert_eq!(d.denominator, BigUint::from(64u32));
        // column w=28, m=5, s=2 -> 6/28
        let g = Geometry::column(shape(28, 28), 2).unwrap();
        let d = g.delta(5).unwrap();
        assert_eq!(d.numerator, BigUint::from(6u32));
        assert_eq!(d.denominator, BigUint::from(28u32));
    }

    #[test]
    fn block_delta_below_sparse_delta_at_equal_budget() {
        let sparse = Geometry::sparse(shape(8, 8), 4).unwrap().delta_l0(9).unwrap();
        let block = Geometry::block(shape(8, 8), 2).unwrap().delta(3).unwrap();
        assert!(block.value() < sparse.value());
    }

    #[test]
    fn big_binomial_magnitude() {
        // C(784, 45) ~ 4e73
        let c = binomial(784, 45);
        let digits = c.to_string();
        assert_eq!(digits.len(), 74);
        assert!(digits.starts_with('4'));
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(Geometry::column(shape(8, 8), 0).is_err());
        assert!(Geometry::column(shape(8, 8), 9).is_err());
        assert!(Geometry::block(shape(8, 8), 9).is_err());
        assert!(Geometry::multi_block(shape(8, 8), 2, 17).is_err());
        assert!(Geometry::sparse(shape(8, 8), 65).is_err());
    }

    #[test]
    fn delta_monotone_in_m_and_s() {
        for s in 1..=6 {
            let mut prev = 0.0;
            for m in 1..=7 {
                let d = Geometry::block(shape(28, 28), s).unwrap().delta(m).unwrap();
                let v = d.value();
                assert!((0.0..=1.0).contains(&v));
                assert!(v >= prev);
                prev = v;
            }
        }
        for m in 1..=7 {
            let mut prev = 0.0;
            for s in 1..=6 {
                let v = Geometry::column(shape(28, 28), s).unwrap().delta(m).unwrap().value();
                assert!(v >= prev);
                prev = v;
            }
        }
    }
}
