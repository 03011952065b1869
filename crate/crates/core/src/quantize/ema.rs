use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{check_batch, Codebook, CodeIdentity, Quantized, QuantizerError, QuantizerKind, Quantizer};

pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Codebook maintained by exponential moving averages of assignment counts
/// and assigned-vector sums. Rows never receive gradient updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEma", into = "RawEma")]
pub struct EmaQuantizer {
    codebook: Codebook,
    counts: Vec<f64>,
    sums: Vec<f64>,
    decay: f64,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawEma {
    codebook: Codebook,
    counts: Vec<f64>,
    sums: Vec<f64>,
    decay: f64,
    epsilon: f64,
}

impl TryFrom<RawEma> for EmaQuantizer {
    type Error = QuantizerError;

    fn try_from(raw: RawEma) -> Result<Self, Self::Error> {
        let mut q = Self::new(raw.codebook, raw.decay, raw.epsilon)?;
        if raw.counts.len() != q.counts.len() {
            return Err(QuantizerError::ShapeMismatch {
                expected: q.counts.len(),
                actual: raw.counts.len(),
            });
        }
        if raw.sums.len() != q.sums.len() {
            return Err(QuantizerError::ShapeMismatch {
                expected: q.sums.len(),
                actual: raw.sums.len(),
            });
        }
        if let Some(index) = raw.counts.iter().chain(&raw.sums).position(|v| !v.is_finite()) {
            return Err(QuantizerError::NonFinite { index });
        }
        q.counts = raw.counts;
        q.sums = raw.sums;
        Ok(q)
    }
}

impl From<EmaQuantizer> for RawEma {
    fn from(q: EmaQuantizer) -> Self {
        Self {
            codebook: q.codebook,
            counts: q.counts,
            sums: q.sums,
            decay: q.decay,
            epsilon: q.epsilon,
        }
    }
}

impl EmaQuantizer {
    /// Starts every count at one and every running sum at its codebook row,
    /// so the first smoothed ratio reproduces the initial table.
    pub fn new(codebook: Codebook, decay: f64, epsilon: f64) -> Result<Self, QuantizerError> {
        if !(0.0..1.0).contains(&decay) {
            return Err(QuantizerError::InvalidDecay(decay));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(QuantizerError::InvalidEpsilon(epsilon));
        }
        Ok(Self {
            counts: vec![1.0; codebook.k()],
            sums: codebook.table().to_vec(),
            codebook,
            decay,
            epsilon,
        })
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Folds one batch and its row assignments into the running averages
    /// and recomputes the table.
    ///
    /// `n_i <- d n_i + (1 - d) c_i`, `m_i <- d m_i + (1 - d) sum z`, and
    /// `e_i = m_i / ((n_i + eps) / (n + K eps) * n)` with `n = sum n_i`.
    pub fn ema_update(&mut self, latents: &[f64], rows: &[usize]) -> Result<(), QuantizerError> {
        let dim = self.codebook.dim();
        let k = self.codebook.k();
        let n = check_batch(latents, dim)?;
        if rows.len() != n {
            return Err(QuantizerError::ShapeMismatch {
                expected: n,
                actual: rows.len(),
            });
        }
        if rows.iter().any(|&r| r >= k) {
            return Err(QuantizerError::ForeignCodes);
        }
        let mut batch_counts = vec![0.0; k];
        let mut batch_sums = vec![0.0; k * dim];
        for (z, &r) in latents.chunks_exact(dim).zip(rows) {
            batch_counts[r] += 1.0;
            for (s, z) in batch_sums[r * dim..(r + 1) * dim].iter_mut().zip(z) {
                *s += z;
            }
        }
        let keep = self.decay;
        let take = 1.0 - self.decay;
        for (c, b) in self.counts.iter_mut().zip(&batch_counts) {
            *c = keep * *c + take * b;
        }
        for (s, b) in self.sums.iter_mut().zip(&batch_sums) {
            *s = keep * *s + take * b;
        }
        let total: f64 = self.counts.iter().sum();
        let denom = total + k as f64 * self.epsilon;
        let table = self.codebook.table_mut();
        for i in 0..k {
            let smoothed = (self.counts[i] + self.epsilon) / denom * total;
            for j in 0..dim {
                table[i * dim + j] = self.sums[i * dim + j] / smoothed;
            }
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(QuantizerError::NonFiniteUpdate);
        }
        Ok(())
    }
}

impl Quantizer for EmaQuantizer {
    fn kind(&self) -> QuantizerKind {
        QuantizerKind::VqEma
    }

    fn dim(&self) -> usize {
        self.codebook.dim()
    }

    /// Table plus running sums; the `K` counts are not included.
    fn layer_size(&self) -> usize {
        self.codebook.table().len() + self.sums.len()
    }

    fn trainable_parameters(&self) -> &[f64] {
        &[]
    }

    fn quantize(&self, latents: &[f64]) -> Result<Quantized, QuantizerError> {
        self.codebook.quantize(latents, true)
    }

    fn parameter_gradient(&self, _latents: &[f64], _q: &Quantized, _embedding_weight: f64) -> Vec<f64> {
        Vec::new()
    }

    fn apply_update(&mut self, _update: &mut dyn FnMut(&mut [f64])) -> Result<(), QuantizerError> {
        Ok(())
    }

    fn observe(&mut self, latents: &[f64], q: &Quantized) -> Result<(), QuantizerError> {
        let rows = q
            .codes
            .iter()
            .map(|c| match c {
                CodeIdentity::Row(i) => Ok(*i),
                CodeIdentity::Lattice(_) => Err(QuantizerError::ForeignCodes),
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.ema_update(latents, &rows)
    }
}
