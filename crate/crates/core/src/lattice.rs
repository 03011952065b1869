//! Diagonal lattices `L(B) = { B v : v in Z^D }`.
//!
//! The basis is stored as its diagonal only. Because every off-diagonal
//! entry is zero the lattice factorizes per coordinate, which makes Babai
//! rounding an exact closest-point search rather than an approximation.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Smallest magnitude a basis entry may take.
pub const DEFAULT_MIN_ABS: f64 = 1e-6;

/// Enumeration cap for [`count_unit_cube_points`].
pub const UNIT_CUBE_BUDGET: u64 = 10_000_000;

/// Dimension cap for [`cvp_bruteforce`].
pub const CVP_MAX_DIM: usize = 6;
/// Window cap for [`cvp_bruteforce`].
pub const CVP_MAX_WINDOW: u32 = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LatticeError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite value at component {index}")]
    NonFinite { index: usize },
    #[error("a lattice needs at least one dimension")]
    EmptyBasis,
    #[error("clamp floor must be positive and finite, got {0}")]
    InvalidFloor(f64),
    #[error("target K = {k} is infeasible for D = {dim} (K^(1/D) - 1 = {gap:e})")]
    InfeasibleTarget { k: f64, dim: usize, gap: f64 },
    #[error("enumeration budget exceeded: {requested} > {budget}")]
    BudgetExceeded { requested: u128, budget: u128 },
}

/// Learnable diagonal basis.
///
/// Every entry satisfies `|b_ii| >= min_abs`, so the basis is never singular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBasis", into = "RawBasis")]
pub struct LatticeBasis {
    diag: Vec<f64>,
    min_abs: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBasis {
    diag: Vec<f64>,
    min_abs: f64,
}

impl TryFrom<RawBasis> for LatticeBasis {
    type Error = LatticeError;

    fn try_from(raw: RawBasis) -> Result<Self, Self::Error> {
        LatticeBasis::with_floor(raw.diag, raw.min_abs)
    }
}

impl From<LatticeBasis> for RawBasis {
    fn from(b: LatticeBasis) -> Self {
        RawBasis {
            diag: b.diag,
            min_abs: b.min_abs,
        }
    }
}

#[inline]
fn clamp_away_from_zero(x: f64, floor: f64) -> f64 {
    if x.abs() >= floor {
        x
    } else if x < 0.0 {
        -floor
    } else {
        floor
    }
}

impl LatticeBasis {
    /// Builds a basis with the default clamp floor. Entries closer to zero
    /// than the floor are pushed out to it, keeping their sign.
    pub fn new(diag: Vec<f64>) -> Result<Self, LatticeError> {
        Self::with_floor(diag, DEFAULT_MIN_ABS)
    }

    pub fn with_floor(mut diag: Vec<f64>, min_abs: f64) -> Result<Self, LatticeError> {
        if !(min_abs.is_finite() && min_abs > 0.0) {
            return Err(LatticeError::InvalidFloor(min_abs));
        }
        if diag.is_empty() {
            return Err(LatticeError::EmptyBasis);
        }
        check_finite(&diag)?;
        for d in &mut diag {
            *d = clamp_away_from_zero(*d, min_abs);
        }
        Ok(Self { diag, min_abs })
    }

    pub fn identity(dim: usize) -> Result<Self, LatticeError> {
        Self::new(vec![1.0; dim])
    }

    /// Samples every entry from `U(-range, range)` and clamps.
    pub fn uniform<R: Rng + ?Sized>(
        dim: usize,
        range: f64,
        rng: &mut R,
    ) -> Result<Self, LatticeError> {
        if !(range.is_finite() && range > 0.0) {
            return Err(LatticeError::NonFinite { index: 0 });
        }
        let diag = (0..dim).map(|_| rng.gen_range(-range..range)).collect();
        Self::new(diag)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    #[inline]
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    #[inline]
    pub fn min_abs(&self) -> f64 {
        self.min_abs
    }

    /// `||diag(B)||_1`
    pub fn l1_norm(&self) -> f64 {
        self.diag.iter().map(|d| d.abs()).sum()
    }

    /// Applies `update` to the diagonal in place, then re-applies the clamp.
    /// Non-finite results are rejected and the basis is left unchanged.
    pub fn update<F: FnOnce(&mut [f64])>(&mut self, update: F) -> Result<(), LatticeError> {
        let mut next = self.diag.clone();
        update(&mut next);
        check_finite(&next)?;
        for d in &mut next {
            *d = clamp_away_from_zero(*d, self.min_abs);
        }
        self.diag = next;
        Ok(())
    }

    fn check_dim(&self, len: usize) -> Result<(), LatticeError> {
        if len != self.dim() {
            return Err(LatticeError::DimensionMismatch {
                expected: self.dim(),
                actual: len,
            });
        }
        Ok(())
    }

    /// Rounds one embedding to its lattice point without allocating.
    ///
    /// Callers must pass slices of length `dim` holding finite values.
    #[inline]
    pub fn quantize_into(&self, z_e: &[f64], index: &mut [i64], point: &mut [f64]) {
        debug_assert_eq!(z_e.len(), self.dim());
        debug_assert_eq!(index.len(), self.dim());
        debug_assert_eq!(point.len(), self.dim());
        for (((&z, &b), v), e) in z_e
            .iter()
            .zip(&self.diag)
            .zip(index.iter_mut())
            .zip(point.iter_mut())
        {
            let r = round_half_even(z / b);
            *v = r as i64;
            *e = b * r;
        }
    }

    /// Babai rounding: `v = round(B^-1 z_e)`, `e = B v`.
    pub fn babai_round(&self, z_e: &[f64]) -> Result<QuantizationResult, LatticeError> {
        self.check_dim(z_e.len())?;
        check_finite(z_e)?;
        let mut index = vec![0i64; self.dim()];
        let mut point = vec![0.0; self.dim()];
        self.quantize_into(z_e, &mut index, &mut point);
        Ok(QuantizationResult {
            z_e: z_e.to_vec(),
            index: LatticeIndex(index),
            z_q: point.clone(),
            embedding: point,
        })
    }

    pub fn index_of(&self, z_e: &[f64]) -> Result<LatticeIndex, LatticeError> {
        self.babai_round(z_e).map(|q| q.index)
    }

    /// `B v`
    pub fn embed_index(&self, v: &LatticeIndex) -> Result<Vec<f64>, LatticeError> {
        self.check_dim(v.0.len())?;
        Ok(self
            .diag
            .iter()
            .zip(&v.0)
            .map(|(&b, &i)| b * i as f64)
            .collect())
    }

    /// Squared distance from `z` to the lattice point with index `v`.
    pub fn distance_sq(&self, z: &[f64], v: &[i64]) -> f64 {
        z.iter()
            .zip(&self.diag)
            .zip(v)
            .map(|((&z, &b), &i)| {
                let d = z - b * i as f64;
                d * d
            })
            .sum()
    }
}

/// Round to nearest integer, ties to even.
#[inline]
pub fn round_half_even(x: f64) -> f64 {
    // Adding and removing 1.5 * 2^52 leaves no fraction bits, and the FPU's
    // default mode rounds ties to even. Larger magnitudes are integers.
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    if libm::fabs(x) < 4_503_599_627_370_496.0 {
        libm::copysign((x + SHIFT) - SHIFT, x)
    } else {
        x
    }
}

fn check_finite(values: &[f64]) -> Result<(), LatticeError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(LatticeError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Integer coordinates of a lattice point.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LatticeIndex(pub Vec<i64>);

impl LatticeIndex {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[i64] {
        &self.0
    }
}

impl From<Vec<i64>> for LatticeIndex {
    fn from(v: Vec<i64>) -> Self {
        Self(v)
    }
}

/// One quantized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    /// The encoder embedding that was quantized.
    pub z_e: Vec<f64>,
    pub index: LatticeIndex,
    /// `B v`, the selected lattice point.
    pub embedding: Vec<f64>,
    /// Decoder input. Its forward value is exactly `embedding`; its
    /// gradient with respect to `z_e` is the identity.
    pub z_q: Vec<f64>,
}

/// Half-width of the uniform initialization that places roughly `k` lattice
/// points in the unit cube `[0, 1]^dim`.
///
/// With spacing `b` a unit interval holds `1/b + 1` points, so `k` points in
/// total needs `b = 1 / (k^(1/dim) - 1)`.
pub fn init_range(k: f64, dim: usize) -> Result<f64, LatticeError> {
    let infeasible = |gap: f64| LatticeError::InfeasibleTarget { k, dim, gap };
    if dim == 0 {
        return Err(LatticeError::EmptyBasis);
    }
    if !(k.is_finite() && k >= 2.0) {
        return Err(infeasible(f64::NAN));
    }
    let gap = libm::pow(k, 1.0 / dim as f64) - 1.0;
    if gap.is_nan() || gap <= 1e-12 {
        return Err(infeasible(gap));
    }
    Ok(1.0 / gap)
}

/// Counts lattice points with every coordinate in `[0, 1]` by walking the
/// full bounding box of candidate indices.
pub fn count_unit_cube_points(basis: &LatticeBasis) -> Result<u64, LatticeError> {
    const TOL: f64 = 1e-9;
    let ranges: Vec<(i64, i64)> = basis
        .diag()
        .iter()
        .map(|&b| {
            let reach = libm::ceil(1.0 / b.abs()) as i64 + 1;
            (-reach, reach)
        })
        .collect();
    let requested = ranges
        .iter()
        .try_fold(1u128, |acc, &(lo, hi)| acc.checked_mul((hi - lo + 1) as u128))
        .unwrap_or(u128::MAX);
    if requested > UNIT_CUBE_BUDGET as u128 {
        return Err(LatticeError::BudgetExceeded {
            requested,
            budget: UNIT_CUBE_BUDGET as u128,
        });
    }

    let mut v: Vec<i64> = ranges.iter().map(|r| r.0).collect();
    let mut count = 0u64;
    loop {
        let inside = basis.diag().iter().zip(&v).all(|(&b, &i)| {
            let x = b * i as f64;
            (-TOL..=1.0 + TOL).contains(&x)
        });
        if inside {
            count += 1;
        }
        // odometer increment
        let mut axis = 0;
        loop {
            if axis == v.len() {
                return Ok(count);
            }
            if v[axis] < ranges[axis].1 {
                v[axis] += 1;
                break;
            }
            v[axis] = ranges[axis].0;
            axis += 1;
        }
    }
}

/// `-gamma * ||diag(B)||_1`
pub fn size_loss(basis: &LatticeBasis, gamma: f64) -> f64 {
    -gamma * basis.l1_norm()
}

/// Gradient of [`size_loss`] with respect to each diagonal entry.
pub fn size_loss_grad(basis: &LatticeBasis, gamma: f64) -> Vec<f64> {
    basis.diag().iter().map(|d| -gamma * d.signum()).collect()
}

/// Exact closest lattice point over the box `round(z/b) ± window` in every
/// coordinate, by exhaustive branch-and-bound enumeration.
///
/// Ties are resolved to the lexicographically smallest index. This does not
/// use the per-coordinate structure of the basis beyond evaluating
/// distances, so it serves as an independent check on [`LatticeBasis::babai_round`].
pub fn cvp_bruteforce(
    basis: &LatticeBasis,
    z_e: &[f64],
    window: u32,
) -> Result<QuantizationResult, LatticeError> {
    basis.check_dim(z_e.len())?;
    check_finite(z_e)?;
    let dim = basis.dim();
    if dim > CVP_MAX_DIM || window > CVP_MAX_WINDOW {
        let side = 2 * window as u128 + 1;
        return Err(LatticeError::BudgetExceeded {
            requested: side.pow(dim as u32),
            budget: (2 * CVP_MAX_WINDOW as u128 + 1).pow(CVP_MAX_DIM as u32),
        });
    }

    let w = window as i64;
    let centers: Vec<i64> = z_e
        .iter()
        .zip(basis.diag())
        .map(|(&z, &b)| round_half_even(z / b) as i64)
        .collect();

    let mut search = Search {
        basis,
        z: z_e,
        lo: centers.iter().map(|c| c - w).collect(),
        hi: centers.iter().map(|c| c + w).collect(),
        current: vec![0; dim],
        best: Vec::new(),
        best_dist: f64::INFINITY,
    };
    search.descend(0, 0.0);

    let index = LatticeIndex(search.best);
    let point = basis.embed_index(&index)?;
    Ok(QuantizationResult {
        z_e: z_e.to_vec(),
        index,
        z_q: point.clone(),
        embedding: point,
    })
}

struct Search<'a> {
    basis: &'a LatticeBasis,
    z: &'a [f64],
    lo: Vec<i64>,
    hi: Vec<i64>,
    current: Vec<i64>,
    best: Vec<i64>,
    best_dist: f64,
}

impl Search<'_> {
    fn descend(&mut self, depth: usize, partial: f64) {
        if depth == self.current.len() {
            if partial < self.best_dist
                || (partial == self.best_dist && self.current < self.best)
            {
                self.best_dist = partial;
                self.best.clone_from(&self.current);
            }
            return;
        }
        let b = self.basis.diag()[depth];
        for v in self.lo[depth]..=self.hi[depth] {
            let d = self.z[depth] - b * v as f64;
            let next = partial + d * d;
            // Every remaining term is non-negative, so a partial sum already
            // above the incumbent cannot win. Equal sums are kept for ties.
            if next > self.best_dist {
                continue;
            }
            self.current[depth] = v;
            self.descend(depth + 1, next);
        }
    }
}
