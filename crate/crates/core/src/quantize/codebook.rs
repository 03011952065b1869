use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_batch, mean_sq_diff, CodeIdentity, Quantized, QuantizerError, QuantizerKind, QuantizerLosses, Quantizer};

/// `K x D` table of code vectors, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCodebook", into = "RawCodebook")]
pub struct Codebook {
    k: usize,
    dim: usize,
    table: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawCodebook {
    k: usize,
    dim: usize,
    table: Vec<f64>,
}

impl TryFrom<RawCodebook> for Codebook {
    type Error = QuantizerError;

    fn try_from(raw: RawCodebook) -> Result<Self, Self::Error> {
        Self::from_table(raw.k, raw.dim, raw.table)
    }
}

impl From<Codebook> for RawCodebook {
    fn from(c: Codebook) -> Self {
        Self {
            k: c.k,
            dim: c.dim,
            table: c.table,
        }
    }
}

impl Codebook {
    pub fn from_table(k: usize, dim: usize, table: Vec<f64>) -> Result<Self, QuantizerError> {
        if k == 0 || dim == 0 {
            return Err(QuantizerError::EmptyCodebook);
        }
        if table.len() != k * dim {
            return Err(QuantizerError::ShapeMismatch {
                expected: k * dim,
                actual: table.len(),
            });
        }
        if let Some(index) = table.iter().position(|v| !v.is_finite()) {
            return Err(QuantizerError::NonFinite { index });
        }
        Ok(Self { k, dim, table })
    }

    /// Entries drawn from `U(-range, range)`.
    pub fn uniform<R: Rng + ?Sized>(
        k: usize,
        dim: usize,
        range: f64,
        rng: &mut R,
    ) -> Result<Self, QuantizerError> {
        if !(range.is_finite() && range > 0.0) {
            return Err(QuantizerError::NonFinite { index: 0 });
        }
        let table = (0..k * dim).map(|_| rng.gen_range(-range..range)).collect();
        Self::from_table(k, dim, table)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.table[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn table_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    /// Index of the closest row in squared distance; the lowest index wins ties.
    pub fn nearest(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, row) in self.table.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(z, row);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Nearest-row assignment for an `N x D` batch.
    pub fn assign(&self, latents: &[f64]) -> Result<(Vec<usize>, Vec<f64>), QuantizerError> {
        check_batch(latents, self.dim)?;
        let mut rows = Vec::with_capacity(latents.len() / self.dim);
        let mut embedding = vec![0.0; latents.len()];
        for (z, e) in latents.chunks_exact(self.dim).zip(embedding.chunks_exact_mut(self.dim)) {
            let i = self.nearest(z);
            e.copy_from_slice(self.row(i));
            rows.push(i);
        }
        Ok((rows, embedding))
    }

    pub(crate) fn quantize(&self, latents: &[f64], ema: bool) -> Result<Quantized, QuantizerError> {
        let (rows, embedding) = self.assign(latents)?;
        let mse = mean_sq_diff(latents, &embedding);
        Ok(Quantized {
            dim: self.dim,
            embedding,
            codes: rows.into_iter().map(CodeIdentity::Row).collect(),
            losses: QuantizerLosses {
                embedding: if ema { 0.0 } else { mse },
                commitment: mse,
                size: 0.0,
            },
        })
    }
}

/// Four independent accumulators so the loop vectorizes.
#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += (x - y) * (x - y);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Codebook quantizer trained by the embedding loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqQuantizer {
    codebook: Codebook,
}

impl VqQuantizer {
    pub fn new(codebook: Codebook) -> Self {
        Self { codebook }
    }

    /// `K x D` codebook with entries from `U(-1/K, 1/K)`.
    pub fn with_default_init<R: Rng + ?Sized>(k: usize, dim: usize, rng: &mut R) -> Result<Self, QuantizerError> {
        if k == 0 {
            return Err(QuantizerError::EmptyCodebook);
        }
        Ok(Self::new(Codebook::uniform(k, dim, 1.0 / k as f64, rng)?))
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }
}

impl Quantizer for VqQuantizer {
    fn kind(&self) -> QuantizerKind {
        QuantizerKind::Vq
    }

    fn dim(&self) -> usize {
        self.codebook.dim
    }

    fn layer_size(&self) -> usize {
        self.codebook.table.len()
    }

    fn trainable_parameters(&self) -> &[f64] {
        &self.codebook.table
    }

    fn quantize(&self, latents: &[f64]) -> Result<Quantized, QuantizerError> {
        self.codebook.quantize(latents, false)
    }

    fn parameter_gradient(&self, latents: &[f64], q: &Quantized, embedding_weight: f64) -> Vec<f64> {
        let dim = self.codebook.dim;
        let mut grad = vec![0.0; self.codebook.table.len()];
        if embedding_weight == 0.0 || latents.is_empty() {
            return grad;
        }
        let scale = 2.0 * embedding_weight / latents.len() as f64;
        for ((z, e), code) in latents
            .chunks_exact(dim)
            .zip(q.embedding.chunks_exact(dim))
            .zip(&q.codes)
        {
            let CodeIdentity::Row(i) = *code else {
                continue;
            };
            for ((g, z), e) in grad[i * dim..(i + 1) * dim].iter_mut().zip(z).zip(e) {
                *g += scale * (e - z);
            }
        }
        grad
    }

    fn apply_update(&mut self, update: &mut dyn FnMut(&mut [f64])) -> Result<(), QuantizerError> {
        let mut next = self.codebook.table.clone();
        update(&mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(QuantizerError::NonFiniteUpdate);
        }
        self.codebook.table = next;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_nearest(table: &[f64], dim: usize, z: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, row) in table.chunks(dim).enumerate() {
            let d: f64 = row.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    #[test]
    fn nearest_agrees_with_naive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cb = Codebook::uniform(37, 7, 1.0, &mut rng).unwrap();
        for _ in 0..200 {
            let z: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.5..1.5)).collect();
            assert_eq!(cb.nearest(&z), naive_nearest(cb.table(), 7, &z));
        }
    }

    #[test]
    fn ties_go_to_lowest_row() {
        let cb = Codebook::from_table(3, 1, vec![1.0, -1.0, 1.0]).unwrap();
        assert_eq!(cb.nearest(&[0.0]), 0);
        assert_eq!(cb.nearest(&[1.0]), 0);
    }

    #[test]
    fn default_init_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vq = VqQuantizer::with_default_init(64, 4, &mut rng).unwrap();
        assert!(vq.codebook().table().iter().all(|v| v.abs() < 1.0 / 64.0));
    }

    #[test]
    fn codebook_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vq = VqQuantizer::new(Codebook::uniform(5, 3, 1.0, &mut rng).unwrap());
        let latents: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = vq.quantize(&latents).unwrap();
        let grad = vq.parameter_gradient(&latents, &out, 0.8);
        let rows: Vec<usize> = out
            .codes
            .iter()
            .map(|c| match c {
                CodeIdentity::Row(i) => *i,
                _ => unreachable!(),
            })
            .collect();
        let objective = |table: &[f64]| -> f64 {
            let e: Vec<f64> = rows.iter().flat_map(|&i| table[i * 3..i * 3 + 3].to_vec()).collect();
            0.8 * mean_sq_diff(&latents, &e)
        };
        let base = vq.codebook().table().to_vec();
        for j in 0..base.len() {
            let h = 1e-6;
            let mut p = base.clone();
            let mut m = base.clone();
            p[j] += h;
            m[j] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_tables() {
        assert_eq!(Codebook::from_table(0, 2, vec![]), Err(QuantizerError::EmptyCodebook));
        assert!(matches!(
            Codebook::from_table(2, 2, vec![0.0; 3]),
            Err(QuantizerError::ShapeMismatch { .. })
        ));
        assert_eq!(
            Codebook::from_table(1, 2, vec![0.0, f64::NAN]),
            Err(QuantizerError::NonFinite { index: 1 })
        );
    }
}
