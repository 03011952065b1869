//! The epoch loop: seeded shuffling, per-epoch reports and timing.

use std::collections::HashSet;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::time::Instant;

use llvq_core::census::{census, CodebookCensus};
use llvq_core::quantize::{CodeIdentity, QuantizerState};
use llvq_core::train::{LossBreakdown, Model, TrainConfig, TrainError, Trainer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;

/// Deterministic part of an epoch report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    /// Item-weighted means of the per-batch loss terms.
    pub losses: LossBreakdown,
    /// Distinct codes emitted since the start of training.
    pub unique_codes: u64,
    /// Sum of `|diag(B)|` after the epoch; lattice runs only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_l1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub seconds: f64,
    pub cumulative_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub metrics: EpochMetrics,
    pub timing: EpochTiming,
}

impl EpochReport {
    pub fn reconstruction(&self) -> f64 {
        self.metrics.losses.reconstruction
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Model<f32>,
    pub reports: Vec<EpochReport>,
    /// `|diag(B)|_1` right after initialization; lattice runs only.
    pub initial_basis_l1: Option<f64>,
    pub train_seconds: f64,
}

impl TrainRun {
    pub fn metrics(&self) -> Vec<EpochMetrics> {
        self.reports.iter().map(|r| r.metrics).collect()
    }

    pub fn final_basis_l1(&self) -> Option<f64> {
        basis_l1(&self.model.quantizer)
    }
}

fn basis_l1(q: &QuantizerState) -> Option<f64> {
    match q {
        QuantizerState::Ll(l) => Some(l.basis().l1_norm()),
        _ => None,
    }
}

/// Running distinct-code count over 64-bit fingerprints. The exact census
/// after training uses full keys.
#[derive(Debug, Default)]
struct SeenCodes(HashSet<u64>);

impl SeenCodes {
    fn add(&mut self, codes: &[CodeIdentity]) {
        for c in codes {
            let mut h = DefaultHasher::new();
            c.hash(&mut h);
            self.0.insert(h.finish());
        }
    }
}

#[derive(Debug, Default)]
struct Accumulator {
    items: f64,
    sums: [f64; 5],
}

impl Accumulator {
    fn add(&mut self, l: &LossBreakdown, n: usize) {
        let w = n as f64;
        self.items += w;
        for (s, v) in self.sums.iter_mut().zip([l.reconstruction, l.embedding, l.commitment, l.size, l.total]) {
            *s += w * v;
        }
    }

    fn mean(&self, beta: f64, gamma: f64) -> LossBreakdown {
        let m = |i: usize| self.sums[i] / self.items.max(1.0);
        LossBreakdown {
            reconstruction: m(0),
            embedding: m(1),
            commitment: m(2),
            size: m(3),
            beta,
            gamma,
            total: m(4),
        }
    }
}

/// Trains a model as configured. The network and quantizer are initialized
/// from ChaCha8 stream 0 of `config.seed`; batches are shuffled from stream 1.
pub fn train<F>(config: &TrainConfig, data: &Dataset, mut on_epoch: F) -> Result<TrainRun, TrainError>
where
    F: FnMut(&EpochReport),
{
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Model::<f32>::init(config, data.channels(), &mut init_rng)?;
    let initial_basis_l1 = basis_l1(&model.quantizer);
    let mut trainer = Trainer::new(model, config.beta);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut seen = SeenCodes::default();
    let mut reports = Vec::with_capacity(config.epochs);
    let mut cumulative = 0.0;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = config.lr_schedule.rate(config.lr, epoch);
        order.shuffle(&mut shuffle_rng);
        let mut acc = Accumulator::default();
        for chunk in order.chunks(config.batch_size) {
            let images = data.batch::<f32>(chunk);
            let out = trainer.step(&images, lr)?;
            acc.add(&out.losses, chunk.len());
            seen.add(&out.codes);
        }
        let seconds = start.elapsed().as_secs_f64();
        cumulative += seconds;
        let report = EpochReport {
            metrics: EpochMetrics {
                epoch,
                steps: trainer.steps(),
                lr,
                losses: acc.mean(config.beta, config.gamma),
                unique_codes: seen.0.len() as u64,
                basis_l1: basis_l1(&trainer.model().quantizer),
            },
            timing: EpochTiming {
                seconds,
                cumulative_seconds: cumulative,
            },
        };
        on_epoch(&report);
        reports.push(report);
    }
    Ok(TrainRun {
        model: trainer.into_model(),
        reports,
        initial_basis_l1,
        train_seconds: cumulative,
    })
}

/// Exact census over every item of `data`.
pub fn census_dataset(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<CodebookCensus, TrainError> {
    census(model, data.batches::<f32>(batch_size))
}

/// Mean squared reconstruction error over `data` with the model frozen.
pub fn evaluate_reconstruction(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    let mut items = 0usize;
    for images in data.batches::<f32>(batch_size) {
        let (x_hat, _) = model.reconstruct(&images)?;
        let n = images.shape().n;
        sum += llvq_core::nn::reconstruction_loss(&images, &x_hat)? * n as f64;
        items += n;
    }
    Ok(sum / items.max(1) as f64)
}
