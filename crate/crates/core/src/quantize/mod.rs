//! Interchangeable quantization layers.
//!
//! All three layers take a batch of encoder embeddings laid out as `N x D`
//! row-major `f64` and return the quantized embeddings, one code identity
//! per row, and the per-term losses. Every squared-error loss is a mean over
//! all `N * D` elements.

mod codebook;
mod ema;
mod lattice;

pub use codebook::{Codebook, VqQuantizer};
pub use ema::{EmaQuantizer, DEFAULT_DECAY, DEFAULT_EPSILON};
pub use lattice::LatticeQuantizer;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::lattice::{LatticeError, LatticeIndex};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuantizerError {
    #[error("batch of {len} values is not a whole number of {dim}-dim rows")]
    RaggedBatch { len: usize, dim: usize },
    #[error("shape mismatch: expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("non-finite input at element {index}")]
    NonFinite { index: usize },
    #[error("codebook must have at least one row and one column")]
    EmptyCodebook,
    #[error("EMA decay must lie in [0, 1), got {0}")]
    InvalidDecay(f64),
    #[error("EMA epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("code identities do not belong to this quantizer")]
    ForeignCodes,
    #[error("parameter update produced non-finite values")]
    NonFiniteUpdate,
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantizerKind {
    /// Learnable lattice.
    Ll,
    /// Learned codebook trained by the embedding loss.
    Vq,
    /// Codebook maintained by exponential moving averages.
    VqEma,
}

impl QuantizerKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Ll => "LL-VQ-VAE",
            Self::Vq => "VQ-VAE",
            Self::VqEma => "VQ-VAE (EMA)",
        }
    }
}

/// Which discrete code a quantized vector was mapped to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CodeIdentity {
    Lattice(LatticeIndex),
    Row(usize),
}

/// Loss terms produced by a quantization layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantizerLosses {
    /// `mean ||sg(z_e) - e||^2`; zero for the EMA layer.
    pub embedding: f64,
    /// `mean ||z_e - sg(e)||^2`, before scaling by beta.
    pub commitment: f64,
    /// `-gamma * ||diag(B)||_1` for the lattice layer, zero otherwise.
    pub size: f64,
}

/// Output of a quantization forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub dim: usize,
    /// Selected embeddings `e`, `N x D`.
    pub embedding: Vec<f64>,
    pub codes: Vec<CodeIdentity>,
    pub losses: QuantizerLosses,
}

impl Quantized {
    /// Decoder input. Its forward value is `e`; see [`straight_through`].
    pub fn z_q(&self) -> &[f64] {
        &self.embedding
    }

    pub fn rows(&self) -> usize {
        self.codes.len()
    }
}

/// Common contract of the quantization layers.
pub trait Quantizer {
    fn kind(&self) -> QuantizerKind;

    fn dim(&self) -> usize;

    /// Number of values the layer stores for its codes: `D` for the lattice,
    /// `K * D` for a learned codebook, `2 * K * D` for the EMA codebook
    /// (table plus running sums).
    fn layer_size(&self) -> usize;

    /// Values updated by gradient descent.
    fn trainable_parameters(&self) -> &[f64];

    fn quantize(&self, latents: &[f64]) -> Result<Quantized, QuantizerError>;

    /// Gradient of `embedding_weight * embedding + size` with respect to
    /// [`Quantizer::trainable_parameters`].
    fn parameter_gradient(&self, latents: &[f64], q: &Quantized, embedding_weight: f64) -> Vec<f64>;

    /// Applies an in-place update to the trainable parameters and restores
    /// the layer's invariants.
    fn apply_update(&mut self, update: &mut dyn FnMut(&mut [f64])) -> Result<(), QuantizerError>;

    /// State maintenance that happens outside back-propagation.
    fn observe(&mut self, _latents: &[f64], _q: &Quantized) -> Result<(), QuantizerError> {
        Ok(())
    }
}

pub(crate) fn check_batch(latents: &[f64], dim: usize) -> Result<usize, QuantizerError> {
    if dim == 0 || latents.len() % dim != 0 {
        return Err(QuantizerError::RaggedBatch {
            len: latents.len(),
            dim,
        });
    }
    if let Some(index) = latents.iter().position(|v| !v.is_finite()) {
        return Err(QuantizerError::NonFinite { index });
    }
    Ok(latents.len() / dim)
}

pub(crate) fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Forward value of `z_e + sg(e - z_e)`.
///
/// The value returned is `e` itself rather than the floating-point sum, so
/// the decoder sees exactly the selected code.
pub fn straight_through(z_e: &[f64], e: &[f64]) -> Result<Vec<f64>, QuantizerError> {
    if z_e.len() != e.len() {
        return Err(QuantizerError::ShapeMismatch {
            expected: z_e.len(),
            actual: e.len(),
        });
    }
    Ok(e.to_vec())
}

/// Backward pass of [`straight_through`]: the upstream gradient flows to
/// `z_e` unchanged and nothing flows to `e`.
pub fn straight_through_backward(upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (upstream.to_vec(), alloc::vec![0.0; upstream.len()])
}

/// Gradient reaching the encoder output: the straight-through upstream
/// gradient plus `beta` times the commitment-loss gradient.
pub fn encoder_gradient(
    upstream: &[f64],
    latents: &[f64],
    q: &Quantized,
    beta: f64,
) -> Result<Vec<f64>, QuantizerError> {
    if upstream.len() != latents.len() || latents.len() != q.embedding.len() {
        return Err(QuantizerError::ShapeMismatch {
            expected: latents.len(),
            actual: upstream.len(),
        });
    }
    let scale = 2.0 * beta / latents.len().max(1) as f64;
    let (mut grad, _) = straight_through_backward(upstream);
    for ((g, z), e) in grad.iter_mut().zip(latents).zip(&q.embedding) {
        *g += scale * (z - e);
    }
    Ok(grad)
}

/// Serializable wrapper over the three layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum QuantizerState {
    Ll(LatticeQuantizer),
    Vq(VqQuantizer),
    VqEma(EmaQuantizer),
}

macro_rules! delegate {
    ($self:ident, $q:ident => $e:expr) => {
        match $self {
            QuantizerState::Ll($q) => $e,
            QuantizerState::Vq($q) => $e,
            QuantizerState::VqEma($q) => $e,
        }
    };
}

impl Quantizer for QuantizerState {
    fn kind(&self) -> QuantizerKind {
        delegate!(self, q => q.kind())
    }

    fn dim(&self) -> usize {
        delegate!(self, q => q.dim())
    }

    fn layer_size(&self) -> usize {
        delegate!(self, q => q.layer_size())
    }

    fn trainable_parameters(&self) -> &[f64] {
        delegate!(self, q => q.trainable_parameters())
    }

    fn quantize(&self, latents: &[f64]) -> Result<Quantized, QuantizerError> {
        delegate!(self, q => q.quantize(latents))
    }

    fn parameter_gradient(&self, latents: &[f64], qz: &Quantized, embedding_weight: f64) -> Vec<f64> {
        delegate!(self, q => q.parameter_gradient(latents, qz, embedding_weight))
    }

    fn apply_update(&mut self, update: &mut dyn FnMut(&mut [f64])) -> Result<(), QuantizerError> {
        delegate!(self, q => q.apply_update(update))
    }

    fn observe(&mut self, latents: &[f64], qz: &Quantized) -> Result<(), QuantizerError> {
        delegate!(self, q => q.observe(latents, qz))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeBasis;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_layers(dim: usize) -> Vec<QuantizerState> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        vec![
            QuantizerState::Ll(LatticeQuantizer::new(LatticeBasis::uniform(dim, 1.0, &mut rng).unwrap(), 1.0)),
            QuantizerState::Vq(VqQuantizer::new(Codebook::uniform(8, dim, 0.5, &mut rng).unwrap())),
            QuantizerState::VqEma(
                EmaQuantizer::new(Codebook::uniform(8, dim, 0.5, &mut rng).unwrap(), DEFAULT_DECAY, DEFAULT_EPSILON)
                    .unwrap(),
            ),
        ]
    }

    /// Shared forward contract for every layer.
    #[test]
    fn quantizers_share_forward_contract() {
        let dim = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let latents: Vec<f64> = (0..10 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for layer in all_layers(dim) {
            let q = layer.quantize(&latents).unwrap();
            assert_eq!(q.dim, dim);
            assert_eq!(q.embedding.len(), latents.len());
            assert_eq!(q.z_q(), &q.embedding[..]);
            assert_eq!(q.codes.len(), 10);
            assert!(q.losses.embedding >= 0.0 && q.losses.commitment >= 0.0);
            let mse = mean_sq_diff(&latents, &q.embedding);
            assert!((q.losses.commitment - mse).abs() < 1e-15);
            match layer.kind() {
                QuantizerKind::VqEma => assert_eq!(q.losses.embedding, 0.0),
                _ => assert_eq!(q.losses.embedding, q.losses.commitment),
            }
            if layer.kind() != QuantizerKind::Ll {
                assert_eq!(q.losses.size, 0.0);
            }
            let again = layer.quantize(&latents).unwrap();
            assert_eq!(q, again);
            assert_eq!(
                layer.parameter_gradient(&latents, &q, 1.0).len(),
                layer.trainable_parameters().len()
            );
            assert!(matches!(layer.quantize(&latents[..5]), Err(QuantizerError::RaggedBatch { .. })));
            let mut bad = latents.clone();
            bad[3] = f64::NAN;
            assert_eq!(layer.quantize(&bad), Err(QuantizerError::NonFinite { index: 3 }));
        }
    }

    #[test]
    fn parameter_counts_follow_layer_type() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ll = LatticeQuantizer::from_target(64, 512.0, 1.0, &mut rng).unwrap();
        assert_eq!(ll.trainable_parameters().len(), 64);
        let vq = VqQuantizer::new(Codebook::uniform(512, 64, 1.0 / 512.0, &mut rng).unwrap());
        assert_eq!(vq.trainable_parameters().len(), 32_768);
        let ema = EmaQuantizer::new(vq.codebook().clone(), DEFAULT_DECAY, DEFAULT_EPSILON).unwrap();
        assert_eq!(ema.trainable_parameters().len(), 0);
        assert_eq!(ema.layer_size(), 65_536);
    }

    #[test]
    fn straight_through_forward_and_backward() {
        assert_eq!(straight_through(&[1.0, 2.0], &[0.0, 3.0]).unwrap(), vec![0.0, 3.0]);
        assert!(straight_through(&[1.0], &[0.0, 3.0]).is_err());
        let g = [0.25, -1.5, 3.0];
        let (dz, de) = straight_through_backward(&g);
        assert_eq!(dz, g.to_vec());
        assert_eq!(de, vec![0.0; 3]);
    }

    #[test]
    fn straight_through_surrogate_matches_central_differences() {
        // z_q = z_e + c with c = sg(e - z_e) frozen at the base point.
        // Downstream loss L(z_q) = sum w_i z_q_i^2.
        let basis = LatticeBasis::new(vec![0.5, 0.5, 0.5]).unwrap();
        let ll = LatticeQuantizer::new(basis, 0.0);
        let z = [0.1, 0.62, -0.3];
        let q = ll.quantize(&z).unwrap();
        let w = [1.0, -2.0, 0.5];
        let offset: Vec<f64> = q.embedding.iter().zip(&z).map(|(e, z)| e - z).collect();
        let loss = |z: &[f64]| -> f64 {
            z.iter().zip(&offset).zip(&w).map(|((z, c), w)| w * (z + c) * (z + c)).sum()
        };
        let upstream: Vec<f64> = q.embedding.iter().zip(&w).map(|(e, w)| 2.0 * w * e).collect();
        let (grad, _) = straight_through_backward(&upstream);
        let delta = 1e-4;
        for i in 0..3 {
            let (mut p, mut m) = (z, z);
            p[i] += delta;
            m[i] -= delta;
            // the perturbation stays inside the quantization cell
            assert_eq!(ll.quantize(&p).unwrap().codes, q.codes);
            assert_eq!(ll.quantize(&m).unwrap().codes, q.codes);
            let fd = (loss(&p) - loss(&m)) / (2.0 * delta);
            assert!((fd - grad[i]).abs() < 1e-8, "{fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn encoder_gradient_adds_commitment_term() {
        let ll = LatticeQuantizer::new(LatticeBasis::identity(2).unwrap(), 0.0);
        let z = [0.4, -1.6];
        let q = ll.quantize(&z).unwrap();
        let g = encoder_gradient(&[1.0, 1.0], &z, &q, 0.25).unwrap();
        // 2 * 0.25 / 2 * (z - e)
        assert!((g[0] - (1.0 + 0.25 * 0.4)).abs() < 1e-15);
        assert!((g[1] - (1.0 + 0.25 * 0.4)).abs() < 1e-15);
        assert_eq!(encoder_gradient(&[1.0, 1.0], &z, &q, 0.0).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn state_round_trips_through_serde_tagging() {
        for layer in all_layers(3) {
            let kind = layer.kind();
            match (&layer, kind) {
                (QuantizerState::Ll(_), QuantizerKind::Ll)
                | (QuantizerState::Vq(_), QuantizerKind::Vq)
                | (QuantizerState::VqEma(_), QuantizerKind::VqEma) => {}
                _ => panic!("kind tag mismatch"),
            }
        }
    }
}
