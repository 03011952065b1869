use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_batch, mean_sq_diff, CodeIdentity, Quantized, QuantizerError, QuantizerKind, QuantizerLosses, Quantizer};
use crate::lattice::{init_range, size_loss, size_loss_grad, LatticeBasis, LatticeIndex};

/// Quantizer whose codebook is the diagonal lattice `B Z^D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeQuantizer {
    basis: LatticeBasis,
    /// Weight of the size term.
    gamma: f64,
}

impl LatticeQuantizer {
    pub fn new(basis: LatticeBasis, gamma: f64) -> Self {
        Self { basis, gamma }
    }

    /// Initializes the diagonal from `U(-r, r)` with `r` chosen so that
    /// about `k` lattice points fall in the unit cube.
    pub fn from_target<R: Rng + ?Sized>(
        dim: usize,
        k: f64,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self, QuantizerError> {
        let range = init_range(k, dim)?;
        Self::with_range(dim, range, gamma, rng)
    }

    pub fn with_range<R: Rng + ?Sized>(
        dim: usize,
        range: f64,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self, QuantizerError> {
        Ok(Self::new(LatticeBasis::uniform(dim, range, rng)?, gamma))
    }

    pub fn basis(&self) -> &LatticeBasis {
        &self.basis
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Quantizer for LatticeQuantizer {
    fn kind(&self) -> QuantizerKind {
        QuantizerKind::Ll
    }

    fn dim(&self) -> usize {
        self.basis.dim()
    }

    fn layer_size(&self) -> usize {
        self.basis.dim()
    }

    fn trainable_parameters(&self) -> &[f64] {
        self.basis.diag()
    }

    fn quantize(&self, latents: &[f64]) -> Result<Quantized, QuantizerError> {
        let dim = self.dim();
        let rows = check_batch(latents, dim)?;
        let mut embedding = vec![0.0; latents.len()];
        let mut codes = Vec::with_capacity(rows);
        let mut index = vec![0i64; dim];
        for (z, e) in latents.chunks_exact(dim).zip(embedding.chunks_exact_mut(dim)) {
            self.basis.quantize_into(z, &mut index, e);
            codes.push(CodeIdentity::Lattice(LatticeIndex(index.clone())));
        }
        let mse = mean_sq_diff(latents, &embedding);
        Ok(Quantized {
            dim,
            embedding,
            codes,
            losses: QuantizerLosses {
                embedding: mse,
                commitment: mse,
                size: size_loss(&self.basis, self.gamma),
            },
        })
    }

    fn parameter_gradient(&self, latents: &[f64], q: &Quantized, embedding_weight: f64) -> Vec<f64> {
        let dim = self.dim();
        let mut grad = size_loss_grad(&self.basis, self.gamma);
        if embedding_weight == 0.0 || latents.is_empty() {
            return grad;
        }
        // e_j = b_j v_j, so d/db_j mean (e - z)^2 = sum 2 (e_j - z_j) v_j / n.
        let scale = 2.0 * embedding_weight / latents.len() as f64;
        for ((z, e), code) in latents
            .chunks_exact(dim)
            .zip(q.embedding.chunks_exact(dim))
            .zip(&q.codes)
        {
            let CodeIdentity::Lattice(v) = code else {
                continue;
            };
            for j in 0..dim {
                grad[j] += scale * (e[j] - z[j]) * v.0[j] as f64;
            }
        }
        grad
    }

    fn apply_update(&mut self, update: &mut dyn FnMut(&mut [f64])) -> Result<(), QuantizerError> {
        self.basis.update(|d| update(d))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn size_term_and_codes() {
        let basis = LatticeBasis::new(vec![0.5, -2.0]).unwrap();
        let q = LatticeQuantizer::new(basis, 0.5);
        let out = q.quantize(&[0.74, 3.1, -0.25, -0.9]).unwrap();
        assert_eq!(out.losses.size, -0.5 * 2.5);
        assert_eq!(out.embedding, vec![0.5, 4.0, -0.0, -0.0]);
        assert_eq!(
            out.codes,
            vec![
                CodeIdentity::Lattice(LatticeIndex(vec![1, -2])),
                CodeIdentity::Lattice(LatticeIndex(vec![0, 0]))
            ]
        );
    }

    #[test]
    fn diagonal_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = LatticeQuantizer::with_range(3, 1.0, 0.7, &mut rng).unwrap();
        let latents: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let out = q.quantize(&latents).unwrap();
        let grad = q.parameter_gradient(&latents, &out, 1.3);
        // Codes frozen at the base point: the loss is smooth in the diagonal.
        let objective = |diag: &[f64]| -> f64 {
            let mut e = Vec::with_capacity(latents.len());
            for code in &out.codes {
                let CodeIdentity::Lattice(v) = code else { unreachable!() };
                for (b, i) in diag.iter().zip(&v.0) {
                    e.push(b * *i as f64);
                }
            }
            1.3 * mean_sq_diff(&latents, &e) - 0.7 * diag.iter().map(|d| d.abs()).sum::<f64>()
        };
        let base = q.basis().diag().to_vec();
        for j in 0..3 {
            let h = 1e-6;
            let mut p = base.clone();
            let mut m = base.clone();
            p[j] += h;
            m[j] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-6, "{j}: {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let q = LatticeQuantizer::new(LatticeBasis::new(vec![0.3, 0.2]).unwrap(), 0.0);
        let z = [0.1, 0.9, -1.0, 0.05];
        let out = q.quantize(&z).unwrap();
        assert_eq!(q.parameter_gradient(&z, &out, 0.0), vec![0.0, 0.0]);
    }

    #[test]
    fn update_keeps_entries_off_zero() {
        let mut q = LatticeQuantizer::new(LatticeBasis::new(vec![0.3, -0.2]).unwrap(), 1.0);
        q.apply_update(&mut |d| {
            d[0] -= 0.3;
            d[1] += 0.2;
        })
        .unwrap();
        assert!(q.basis().diag().iter().all(|d| d.abs() >= q.basis().min_abs()));
        assert!(q.apply_update(&mut |d| d[0] = f64::INFINITY).is_err());
    }
}
