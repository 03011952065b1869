//! Quantization timing as a function of the target codebook size.

use std::time::{Duration, Instant};

use llvq_core::quantize::{
    Codebook, EmaQuantizer, LatticeQuantizer, Quantizer, QuantizerError, QuantizerKind, QuantizerState, VqQuantizer,
    DEFAULT_DECAY, DEFAULT_EPSILON,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Default cap on `n_vectors * K * D` distance terms per sample.
pub const DEFAULT_BUDGET: u64 = 1 << 34;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{kind:?} at K={k}: {work} distance terms per sample exceeds the budget of {budget}")]
    BudgetExceeded { kind: QuantizerKind, k: u64, work: u128, budget: u64 },
    #[error("repeats must be at least 1")]
    NoRepeats,
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub kind: QuantizerKind,
    pub ks: Vec<u64>,
    pub dim: usize,
    pub n_vectors: usize,
    pub repeats: usize,
    /// Each sample re-runs the batch until at least this much time passed.
    pub min_sample: Duration,
    pub seed: u64,
    pub budget: u64,
}

impl BenchConfig {
    pub fn new(kind: QuantizerKind, ks: Vec<u64>) -> Self {
        Self {
            kind,
            ks,
            dim: 64,
            n_vectors: 256,
            repeats: 7,
            min_sample: Duration::from_millis(20),
            seed: 0,
            budget: DEFAULT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub quantizer: QuantizerKind,
    pub k: u64,
    pub dim: usize,
    pub n_vectors: usize,
    pub repeats: usize,
    /// Median over repeats of the mean time per quantized vector.
    pub median_ns_per_vector: f64,
    pub min_ns_per_vector: f64,
    pub max_ns_per_vector: f64,
}

/// Builds the layer the timing refers to.
pub fn make_quantizer(kind: QuantizerKind, k: u64, dim: usize, seed: u64) -> Result<QuantizerState, QuantizerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match kind {
        QuantizerKind::Ll => QuantizerState::Ll(LatticeQuantizer::from_target(dim, k as f64, 1.0, &mut rng)?),
        QuantizerKind::Vq => QuantizerState::Vq(VqQuantizer::with_default_init(k as usize, dim, &mut rng)?),
        QuantizerKind::VqEma => QuantizerState::VqEma(EmaQuantizer::new(
            Codebook::uniform(k as usize, dim, 1.0 / k as f64, &mut rng)?,
            DEFAULT_DECAY,
            DEFAULT_EPSILON,
        )?),
    })
}

fn work(kind: QuantizerKind, k: u64, dim: usize, n: usize) -> u128 {
    let per_vector = match kind {
        QuantizerKind::Ll => dim as u128,
        _ => k as u128 * dim as u128,
    };
    per_vector * n as u128
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Times quantization of `n_vectors` standard-normal vectors at each `K`.
/// An empty batch yields an empty table.
pub fn bench_quantize(cfg: &BenchConfig) -> Result<Vec<BenchRow>, BenchError> {
    if cfg.n_vectors == 0 {
        return Ok(Vec::new());
    }
    if cfg.repeats == 0 {
        return Err(BenchError::NoRepeats);
    }
    for &k in &cfg.ks {
        let w = work(cfg.kind, k, cfg.dim, cfg.n_vectors);
        if w > cfg.budget as u128 {
            return Err(BenchError::BudgetExceeded {
                kind: cfg.kind,
                k,
                work: w,
                budget: cfg.budget,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let latents: Vec<f64> = (0..cfg.n_vectors * cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut rows = Vec::with_capacity(cfg.ks.len());
    for &k in &cfg.ks {
        let q = make_quantizer(cfg.kind, k, cfg.dim, cfg.seed)?;
        // warm-up
        std::hint::black_box(q.quantize(&latents)?);
        let mut samples = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            let mut iters = 0u64;
            while iters == 0 || start.elapsed() < cfg.min_sample {
                std::hint::black_box(q.quantize(std::hint::black_box(&latents))?);
                iters += 1;
            }
            let ns = start.elapsed().as_nanos() as f64;
            samples.push(ns / (iters as f64 * cfg.n_vectors as f64));
        }
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(0.0, f64::max);
        rows.push(BenchRow {
            quantizer: cfg.kind,
            k,
            dim: cfg.dim,
            n_vectors: cfg.n_vectors,
            repeats: cfg.repeats,
            median_ns_per_vector: median(samples),
            min_ns_per_vector: min,
            max_ns_per_vector: max,
        });
    }
    Ok(rows)
}

/// Ratio of per-vector medians between the largest and smallest `K` rows.
pub fn scaling_ratio(rows: &[BenchRow]) -> Option<f64> {
    let lo = rows.iter().min_by_key(|r| r.k)?;
    let hi = rows.iter().max_by_key(|r| r.k)?;
    Some(hi.median_ns_per_vector / lo.median_ns_per_vector)
}
