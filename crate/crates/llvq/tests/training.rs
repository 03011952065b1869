//! Training-loop properties on the tiny network and synthetic blobs.

use std::collections::HashSet;

use llvq::core::nn::ArchVariant;
use llvq::core::quantize::{QuantizerKind, QuantizerState};
use llvq::core::train::{BlobParams, DatasetRef, DatasetSource, TrainConfig};
use llvq::data::{synth_blobs, Dataset};
use llvq::run::{census_dataset, evaluate_reconstruction, train, TrainRun};

const PARAMS: BlobParams = BlobParams {
    clusters: 4,
    samples: 96,
    noise: 0.05,
    size: 12,
    channels: 1,
};

fn data() -> Dataset {
    synth_blobs(&PARAMS, 2).unwrap()
}

fn config(kind: QuantizerKind, gamma: f64) -> TrainConfig {
    TrainConfig {
        quantizer: kind,
        k: 64,
        dim: 4,
        gamma,
        batch_size: 16,
        lr: 3e-3,
        epochs: 6,
        seed: 9,
        arch: ArchVariant::TinyTest,
        ..TrainConfig::paper_defaults(DatasetRef {
            source: DatasetSource::SyntheticBlobs(PARAMS),
            subset: None,
            subset_seed: 2,
        })
    }
}

fn run(cfg: &TrainConfig) -> TrainRun {
    train(cfg, &data(), |_| {}).unwrap()
}

#[test]
fn reports_are_well_formed() {
    let cfg = config(QuantizerKind::Ll, 1.0);
    let mut seen = Vec::new();
    let out = train(&cfg, &data(), |r| seen.push(*r)).unwrap();
    assert_eq!(seen, out.reports);
    assert_eq!(out.reports.len(), cfg.epochs);
    let steps_per_epoch = (PARAMS.samples as u64).div_ceil(cfg.batch_size as u64);
    let mut last = (0.0, 0);
    for (e, r) in out.reports.iter().enumerate() {
        let m = &r.metrics;
        assert_eq!(m.epoch, e);
        assert_eq!(m.steps, steps_per_epoch * (e as u64 + 1));
        let l = &m.losses;
        for v in [l.reconstruction, l.embedding, l.commitment, l.size, l.total] {
            assert!(v.is_finite());
        }
        assert!(r.timing.cumulative_seconds >= last.0);
        assert!(m.unique_codes >= last.1);
        last = (r.timing.cumulative_seconds, m.unique_codes);
    }
    assert!((out.train_seconds - last.0).abs() < 1e-12);
}

#[test]
fn reconstruction_improves_for_every_quantizer() {
    for kind in [QuantizerKind::Ll, QuantizerKind::Vq, QuantizerKind::VqEma] {
        let out = run(&config(kind, if kind == QuantizerKind::Ll { -1.0 } else { 0.0 }));
        let first = out.reports.first().unwrap().reconstruction();
        let last = out.reports.last().unwrap().reconstruction();
        assert!(last < first, "{kind:?}: {first} -> {last}");
    }
}

#[test]
fn sparsity_pressure_moves_the_basis() {
    let up = run(&config(QuantizerKind::Ll, 1.0));
    let down = run(&config(QuantizerKind::Ll, -1.0));
    let (u0, u1) = (up.initial_basis_l1.unwrap(), up.final_basis_l1().unwrap());
    let (d0, d1) = (down.initial_basis_l1.unwrap(), down.final_basis_l1().unwrap());
    assert_eq!(u0, d0, "same seed, same initial basis");
    assert!(u1 > u0, "gamma 1: {u0} -> {u1}");
    assert!(d1 < d0, "gamma -1: {d0} -> {d1}");

    let ds = data();
    let cu = census_dataset(&up.model, &ds, 32).unwrap().distinct();
    let cd = census_dataset(&down.model, &ds, 32).unwrap().distinct();
    assert!(cd > cu, "denser lattice should use more codes: {cd} vs {cu}");
}

#[test]
fn training_is_deterministic() {
    for kind in [QuantizerKind::Ll, QuantizerKind::VqEma] {
        let cfg = config(kind, 1.0);
        let (a, b) = (run(&cfg), run(&cfg));
        assert_eq!(a.metrics(), b.metrics());
        assert_eq!(a.model, b.model);
        let other = run(&TrainConfig { seed: 10, ..cfg });
        assert_ne!(a.metrics(), other.metrics());
    }
}

/// Recounts codes from the encoder outputs with plain rounding or a plain
/// nearest-row scan.
fn recount(out: &TrainRun, ds: &Dataset) -> (usize, u64) {
    let mut codes: HashSet<Vec<i64>> = HashSet::new();
    let mut sites = 0;
    for batch in ds.batches::<f32>(32) {
        let z = out.model.latents(&batch).unwrap();
        for v in z.chunks(4) {
            sites += 1;
            let key = match &out.model.quantizer {
                QuantizerState::Ll(l) => v
                    .iter()
                    .zip(l.basis().diag())
                    .map(|(x, b)| (x / b).round_ties_even() as i64)
                    .collect(),
                QuantizerState::Vq(q) => {
                    let cb = q.codebook();
                    let dist = |i: usize| cb.row(i).iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    let mut best = 0;
                    for i in 1..cb.k() {
                        if dist(i) < dist(best) {
                            best = i;
                        }
                    }
                    vec![best as i64]
                }
                QuantizerState::VqEma(_) => unreachable!(),
            };
            codes.insert(key);
        }
    }
    (codes.len(), sites)
}

#[test]
fn census_matches_independent_recount() {
    let ds = data();
    for (kind, gamma) in [(QuantizerKind::Ll, -1.0), (QuantizerKind::Vq, 0.0)] {
        let out = run(&config(kind, gamma));
        let census = census_dataset(&out.model, &ds, 7).unwrap();
        let (distinct, sites) = recount(&out, &ds);
        assert_eq!(census.distinct(), distinct, "{kind:?}");
        assert_eq!(census.total_sites(), sites);
        assert_eq!(sites, (PARAMS.samples * 6 * 6) as u64);
        assert_eq!(census.entries().map(|(_, c)| c).sum::<u64>(), sites);
    }
}

#[test]
fn evaluation_error_is_batch_size_independent() {
    let ds = data();
    let out = run(&config(QuantizerKind::Vq, 0.0));
    let a = evaluate_reconstruction(&out.model, &ds, 5).unwrap();
    let b = evaluate_reconstruction(&out.model, &ds, 96).unwrap();
    assert!((a - b).abs() <= 1e-6 * b, "{a} vs {b}");
}

#[test]
fn empty_dataset_and_bad_config_are_rejected() {
    let cfg = TrainConfig {
        epochs: 0,
        ..config(QuantizerKind::Ll, 1.0)
    };
    assert!(train(&cfg, &data(), |_| {}).is_err());
}
