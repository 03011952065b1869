//! The four-model FashionMNIST comparison.

use std::time::Instant;

use llvq_core::census::{classify_usage, UsageVerdict};
use llvq_core::nn::ArchVariant;
use llvq_core::quantize::QuantizerKind;
use llvq_core::train::{DatasetRef, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::run::{census_dataset, evaluate_reconstruction, train, EpochReport, TrainRun};

/// One row of the comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub quantizer: QuantizerKind,
    pub gamma: f64,
    /// Lattice init half-width; `None` derives it from `K`.
    pub init_range: Option<f64>,
}

/// VQ-VAE, VQ-VAE (EMA), LL-VQ-VAE and LL-VQ-VAE (dense).
pub fn comparison_variants() -> Vec<Variant> {
    let v = |label: &str, quantizer, gamma, init_range| Variant {
        label: label.into(),
        quantizer,
        gamma,
        init_range,
    };
    vec![
        v("VQ-VAE", QuantizerKind::Vq, 0.0, None),
        v("VQ-VAE (EMA)", QuantizerKind::VqEma, 0.0, None),
        v("LL-VQ-VAE", QuantizerKind::Ll, 1.0, None),
        v("LL-VQ-VAE (dense)", QuantizerKind::Ll, -1.0, Some(1.0)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub k: u64,
    pub dim: usize,
    pub arch: ArchVariant,
    pub seeds: Vec<u64>,
    /// Recorded in each run's config; the data itself is passed separately.
    pub dataset: DatasetRef,
}

impl ReproOptions {
    /// Five epochs, batch 64, K 512, D 64 and the five-layer network.
    pub fn fashion_mnist(dataset: DatasetRef, seeds: Vec<u64>) -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            k: 512,
            dim: 64,
            arch: ArchVariant::AppendixFiveLayer,
            seeds,
            dataset,
        }
    }

    pub fn config(&self, variant: &Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            quantizer: variant.quantizer,
            k: self.k,
            dim: self.dim,
            gamma: variant.gamma,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            arch: self.arch,
            init_range: variant.init_range,
            ..TrainConfig::paper_defaults(self.dataset.clone())
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReproRun {
    pub variant: Variant,
    pub seed: u64,
    pub config: TrainConfig,
    pub run: TrainRun,
    /// Mean squared error over the whole dataset after training.
    pub recon_error: f64,
    pub distinct: u64,
    pub total_sites: u64,
    pub verdict: UsageVerdict,
    pub census_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub seeds: usize,
    pub recon_error: f64,
    pub distinct: f64,
    pub verdict: String,
    pub train_seconds: f64,
    pub census_seconds: f64,
}

pub fn run_variant<F>(opts: &ReproOptions, variant: &Variant, seed: u64, data: &Dataset, on_epoch: F) -> Result<ReproRun, TrainError>
where
    F: FnMut(&EpochReport),
{
    let config = opts.config(variant, seed);
    let run = train(&config, data, on_epoch)?;
    let start = Instant::now();
    let census = census_dataset(&run.model, data, opts.batch_size)?;
    let census_seconds = start.elapsed().as_secs_f64();
    let recon_error = evaluate_reconstruction(&run.model, data, opts.batch_size)?;
    let verdict = classify_usage(&census, opts.k)?;
    Ok(ReproRun {
        variant: variant.clone(),
        seed,
        config,
        recon_error,
        distinct: census.distinct() as u64,
        total_sites: census.total_sites(),
        verdict,
        census_seconds,
        run,
    })
}

/// Every variant for every seed, in variant-major order.
pub fn repro_fmnist<F>(opts: &ReproOptions, data: &Dataset, mut progress: F) -> Result<Vec<ReproRun>, TrainError>
where
    F: FnMut(&Variant, u64, &EpochReport),
{
    let mut out = Vec::new();
    for variant in comparison_variants() {
        for &seed in &opts.seeds {
            out.push(run_variant(opts, &variant, seed, data, |r| progress(&variant, seed, r))?);
        }
    }
    Ok(out)
}

/// Per-variant means over seeds. The verdict is the one for the mean count.
pub fn summarize(runs: &[ReproRun], k: u64) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    for variant in comparison_variants() {
        let mine: Vec<&ReproRun> = runs.iter().filter(|r| r.variant.label == variant.label).collect();
        if mine.is_empty() {
            continue;
        }
        let n = mine.len() as f64;
        let mean = |f: &dyn Fn(&ReproRun) -> f64| mine.iter().map(|r| f(r)).sum::<f64>() / n;
        let distinct = mean(&|r| r.distinct as f64);
        let verdict = llvq_core::census::classify_distinct(distinct.round() as u64, k, Default::default())
            .map(|v| v.usage.as_str().to_string())
            .unwrap_or_else(|e| e.to_string());
        rows.push(SummaryRow {
            model: variant.label,
            seeds: mine.len(),
            recon_error: mean(&|r| r.recon_error),
            distinct,
            verdict,
            train_seconds: mean(&|r| r.run.train_seconds),
            census_seconds: mean(&|r| r.census_seconds),
        });
    }
    rows
}

pub fn summary_markdown(rows: &[SummaryRow]) -> String {
    let mut s = String::from(
        "| Model | Recon. error | No. embeddings/dataset | Usage | Train (s) | Census (s) | Seeds |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.4} | {:.0} | {} | {:.1} | {:.1} | {} |\n",
            r.model, r.recon_error, r.distinct, r.verdict, r.train_seconds, r.census_seconds, r.seeds
        ));
    }
    s
}
