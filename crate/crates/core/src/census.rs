//! Exact codebook usage counts and the collapsed/nominal/exploded verdict.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::lattice::LatticeIndex;
use crate::nn::Tensor;
use crate::quantize::{CodeIdentity, Quantizer};
use crate::real::Real;
use crate::train::{Model, TrainError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CensusError {
    #[error("quantizer expects {quantizer}-dim codes but the encoder emits {encoder}")]
    DimMismatch { quantizer: usize, encoder: usize },
    #[error("K target must be at least 2, got {0}")]
    InvalidTarget(u64),
}

/// Byte encoding of a code identity. Lattice indices are stored as zigzag
/// varints, so small coordinates take one byte each.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct CodeKey(Vec<u8>);

const TAG_LATTICE: u8 = 0;
const TAG_ROW: u8 = 1;

fn push_varint(out: &mut Vec<u8>, mut x: u64) {
    while x >= 0x80 {
        out.push((x as u8) | 0x80);
        x >>= 7;
    }
    out.push(x as u8);
}

fn read_varint(bytes: &[u8], pos: &mut usize) -> u64 {
    let mut x = 0u64;
    let mut shift = 0;
    loop {
        let b = bytes[*pos];
        *pos += 1;
        x |= u64::from(b & 0x7f) << shift;
        if b < 0x80 {
            return x;
        }
        shift += 7;
    }
}

impl CodeKey {
    fn encode(code: &CodeIdentity) -> Self {
        let mut out = Vec::new();
        match code {
            CodeIdentity::Lattice(v) => {
                out.push(TAG_LATTICE);
                for &i in &v.0 {
                    push_varint(&mut out, ((i << 1) ^ (i >> 63)) as u64);
                }
            }
            CodeIdentity::Row(r) => {
                out.push(TAG_ROW);
                push_varint(&mut out, *r as u64);
            }
        }
        Self(out)
    }

    fn decode(&self) -> CodeIdentity {
        let mut pos = 1;
        match self.0[0] {
            TAG_LATTICE => {
                let mut v = Vec::new();
                while pos < self.0.len() {
                    let u = read_varint(&self.0, &mut pos);
                    v.push(((u >> 1) as i64) ^ -((u & 1) as i64));
                }
                CodeIdentity::Lattice(LatticeIndex(v))
            }
            _ => CodeIdentity::Row(read_varint(&self.0, &mut pos) as usize),
        }
    }
}

/// Occurrence count of every code identity seen.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CodebookCensus {
    counts: BTreeMap<CodeKey, u64>,
    total: u64,
}

impl CodebookCensus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, code: &CodeIdentity) {
        *self.counts.entry(CodeKey::encode(code)).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn observe_all<'a>(&mut self, codes: impl IntoIterator<Item = &'a CodeIdentity>) {
        for c in codes {
            self.observe(c);
        }
    }

    /// Folds another census into this one.
    pub fn merge(&mut self, other: &CodebookCensus) {
        for (k, &n) in &other.counts {
            *self.counts.entry(k.clone()).or_insert(0) += n;
        }
        self.total += other.total;
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn total_sites(&self) -> u64 {
        self.total
    }

    pub fn count(&self, code: &CodeIdentity) -> u64 {
        self.counts.get(&CodeKey::encode(code)).copied().unwrap_or(0)
    }

    /// Every code with its count, in a fixed order.
    pub fn entries(&self) -> impl Iterator<Item = (CodeIdentity, u64)> + '_ {
        self.counts.iter().map(|(k, &n)| (k.decode(), n))
    }
}

/// Quantizes every spatial latent of every batch and counts the codes.
pub fn census<T: Real, I>(model: &Model<T>, batches: I) -> Result<CodebookCensus, TrainError>
where
    I: IntoIterator<Item = Tensor<T>>,
{
    let mut out = CodebookCensus::new();
    for images in batches {
        let z = model.net.encode_tensor(&images)?;
        if z.shape().c != model.quantizer.dim() {
            return Err(TrainError::Census(CensusError::DimMismatch {
                quantizer: model.quantizer.dim(),
                encoder: z.shape().c,
            }));
        }
        let q = model.quantizer.quantize(&z.to_f64_vec())?;
        out.observe_all(&q.codes);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Usage {
    Collapsed,
    Nominal,
    Exploded,
}

impl Usage {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Collapsed => "collapsed",
            Self::Nominal => "nominal",
            Self::Exploded => "exploded",
        }
    }
}

/// Collapsed below `collapse_fraction * K`, exploded above `explode_factor * K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageThresholds {
    pub collapse_fraction: f64,
    pub explode_factor: f64,
}

impl Default for UsageThresholds {
    fn default() -> Self {
        Self {
            collapse_fraction: 0.25,
            explode_factor: 16.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageVerdict {
    pub usage: Usage,
    pub distinct: u64,
    pub k_target: u64,
    pub collapsed_below: f64,
    pub exploded_above: f64,
}

pub fn classify_distinct(distinct: u64, k_target: u64, thresholds: UsageThresholds) -> Result<UsageVerdict, CensusError> {
    if k_target < 2 {
        return Err(CensusError::InvalidTarget(k_target));
    }
    let collapsed_below = thresholds.collapse_fraction * k_target as f64;
    let exploded_above = thresholds.explode_factor * k_target as f64;
    let d = distinct as f64;
    let usage = if d < collapsed_below {
        Usage::Collapsed
    } else if d > exploded_above {
        Usage::Exploded
    } else {
        Usage::Nominal
    };
    Ok(UsageVerdict {
        usage,
        distinct,
        k_target,
        collapsed_below,
        exploded_above,
    })
}

/// Verdict with the default thresholds.
pub fn classify_usage(census: &CodebookCensus, k_target: u64) -> Result<UsageVerdict, CensusError> {
    classify_distinct(census.distinct() as u64, k_target, UsageThresholds::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeBasis;
    use crate::quantize::LatticeQuantizer;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn identity_basis_example() {
        let q = LatticeQuantizer::new(LatticeBasis::identity(2).unwrap(), 1.0);
        let out = q.quantize(&[0.1, 0.2, 0.9, 1.1, 0.12, 0.18]).unwrap();
        let mut c = CodebookCensus::new();
        c.observe_all(&out.codes);
        assert_eq!(c.distinct(), 2);
        assert_eq!(c.total_sites(), 3);
        assert_eq!(c.count(&CodeIdentity::Lattice(LatticeIndex(vec![0, 0]))), 2);
    }

    #[test]
    fn verdict_thresholds() {
        let v = |d| classify_distinct(d, 512, UsageThresholds::default()).unwrap().usage;
        assert_eq!(v(36), Usage::Collapsed);
        assert_eq!(v(32), Usage::Collapsed);
        assert_eq!(v(1405), Usage::Nominal);
        assert_eq!(v(1781), Usage::Nominal);
        assert_eq!(v(87_982), Usage::Exploded);
        assert_eq!(v(63_566), Usage::Exploded);
        assert_eq!(v(128), Usage::Nominal);
        assert_eq!(v(8192), Usage::Nominal);
        assert_eq!(v(8193), Usage::Exploded);
        assert_eq!(classify_distinct(1, 1, UsageThresholds::default()), Err(CensusError::InvalidTarget(1)));
    }

    fn code() -> impl Strategy<Value = CodeIdentity> {
        prop_oneof![
            (0usize..1_000_000).prop_map(CodeIdentity::Row),
            proptest::collection::vec(any::<i64>(), 0..8).prop_map(|v| CodeIdentity::Lattice(LatticeIndex(v))),
            proptest::collection::vec(-3i64..3, 3).prop_map(|v| CodeIdentity::Lattice(LatticeIndex(v))),
        ]
    }

    proptest! {
        #[test]
        fn keys_round_trip(c in code()) {
            prop_assert_eq!(CodeKey::encode(&c).decode(), c);
        }

        #[test]
        fn census_is_additive(a in proptest::collection::vec(code(), 0..40), b in proptest::collection::vec(code(), 0..40)) {
            let mut ca = CodebookCensus::new();
            ca.observe_all(&a);
            let mut cb = CodebookCensus::new();
            cb.observe_all(&b);
            let mut all = CodebookCensus::new();
            all.observe_all(a.iter().chain(&b));
            prop_assert!(all.distinct() <= ca.distinct() + cb.distinct());
            prop_assert_eq!(all.total_sites(), ca.total_sites() + cb.total_sites());
            let mut merged = ca.clone();
            merged.merge(&cb);
            prop_assert_eq!(&merged, &all);
            prop_assert_eq!(all.entries().map(|(_, n)| n).sum::<u64>(), all.total_sites());
        }
    }
}
