use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use llvq::bench::{bench_quantize, scaling_ratio, BenchConfig};
use llvq::data::{resolve, resolve_data_path, Dataset, DATA_DIR_ENV};
use llvq::io::{load_checkpoint, load_config, save_checkpoint, save_config, Checkpoint};
use llvq::repro::{repro_fmnist, summarize, summary_markdown, ReproOptions};
use llvq::report::{
    bench_csv, census_csv, recon_grid_png, write_bytes, write_epochs_csv, write_json, CensusSummary, Timings,
};
use llvq::run::{census_dataset, train};
use llvq_core::census::classify_usage;
use llvq_core::quantize::QuantizerKind;
use llvq_core::train::{DatasetRef, DatasetSource, TrainConfig};

/// Learnable-lattice vector quantization: training, codebook census,
/// timing benchmarks and the FashionMNIST comparison.
///
/// Relative dataset paths are resolved against $LLVQ_DATA_DIR when set.
#[derive(Parser)]
#[command(name = "llvq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config, with optional flag overrides.
    Train(TrainArgs),
    /// Count the distinct codes a checkpoint emits over its dataset.
    Census(CensusArgs),
    /// Time quantization at several codebook sizes and print CSV.
    Bench(BenchArgs),
    /// Write a PNG grid of originals (top) and reconstructions (bottom).
    ExportRecons(ExportArgs),
    /// Train VQ-VAE, VQ-VAE (EMA), LL-VQ-VAE and LL-VQ-VAE (dense) on
    /// FashionMNIST and summarize.
    ReproFmnist(ReproArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Ll,
    Vq,
    VqEma,
}

impl From<Kind> for QuantizerKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Ll => QuantizerKind::Ll,
            Kind::Vq => QuantizerKind::Vq,
            Kind::VqEma => QuantizerKind::VqEma,
        }
    }
}

#[derive(Args)]
struct Overrides {
    /// Random seed for initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Size-loss coefficient (lattice only); -1 pushes toward a dense lattice.
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    /// Commitment cost.
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    /// Target codebook size.
    #[arg(long)]
    k: Option<u64>,
    /// Quantization layer.
    #[arg(long, value_enum)]
    quantizer: Option<Kind>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.quantizer {
            cfg.quantizer = v.into();
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory for checkpoint.json, epochs.csv and config.toml.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args)]
struct CensusArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Take the dataset from this config instead of the checkpoint's.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Output directory for census.json and census.csv.
    #[arg(long, default_value = "runs/census")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated codebook sizes.
    #[arg(long, value_delimiter = ',', default_values_t = vec![512u64, 65536])]
    ks: Vec<u64>,
    #[arg(long, value_enum, default_value = "ll")]
    quantizer: Kind,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 256)]
    n_vectors: usize,
    #[arg(long, default_value_t = 7)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of images (columns).
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value = "recons.png")]
    out: PathBuf,
}

#[derive(Args)]
struct ReproArgs {
    /// Directory holding train-images-idx3-ubyte; defaults to $LLVQ_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Random subset size.
    #[arg(long)]
    subset: Option<usize>,
    /// Number of seeds (0, 1, ...).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value = "runs/repro-fmnist")]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        let mut msg = e.to_string();
        let mut src = e.source();
        while let Some(s) = src {
            let s_msg = s.to_string();
            if !msg.contains(&s_msg) {
                msg.push_str(": ");
                msg.push_str(&s_msg);
            }
            src = s.source();
        }
        Failure::Runtime(msg)
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} file not found: {}", path.display())))
    }
}

fn dataset_for(ckpt: &Checkpoint, config: Option<&Path>) -> Result<Dataset, Failure> {
    let dataset = match config {
        Some(p) => {
            require_file(p, "config")?;
            load_config(p)?.dataset
        }
        None => match &ckpt.config {
            Some(c) => c.dataset.clone(),
            None => return Err(Failure::Usage("checkpoint carries no dataset; pass --config".into())),
        },
    };
    Ok(resolve(&dataset)?)
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    require_file(&a.config, "config")?;
    let mut cfg = load_config(&a.config)?;
    a.overrides.apply(&mut cfg);
    cfg.validate()?;
    let data = resolve(&cfg.dataset)?;
    std::fs::create_dir_all(&a.out).map_err(Failure::from)?;
    save_config(&a.out.join("config.toml"), &cfg)?;
    let csv_path = a.out.join("epochs.csv");
    let mut reports = Vec::new();
    let mut log_err = None;
    let run = train(&cfg, &data, |r| {
        eprintln!(
            "epoch {} recon {:.5} total {:.5} codes {} ({:.1}s)",
            r.metrics.epoch, r.metrics.losses.reconstruction, r.metrics.losses.total, r.metrics.unique_codes, r.timing.seconds
        );
        reports.push(*r);
        if let Err(e) = write_epochs_csv(&csv_path, &reports) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let ckpt = Checkpoint::from_model(&run.model, cfg.k, Some(cfg.clone()));
    save_checkpoint(&a.out.join("checkpoint.json"), &ckpt)?;
    println!("{}", a.out.join("checkpoint.json").display());
    Ok(())
}

fn cmd_census(a: CensusArgs) -> Result<(), Failure> {
    require_file(&a.checkpoint, "checkpoint")?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = ckpt.to_model::<f32>()?;
    let data = dataset_for(&ckpt, a.config.as_deref())?;
    let start = Instant::now();
    let census = census_dataset(&model, &data, a.batch_size)?;
    let census_seconds = start.elapsed().as_secs_f64();
    let verdict = classify_usage(&census, ckpt.k)?;
    let summary = CensusSummary::new(
        ckpt.kind.label(),
        &census,
        verdict,
        Timings {
            train_seconds: None,
            census_seconds,
        },
    );
    write_json(&a.out.join("census.json"), &summary)?;
    write_bytes(&a.out.join("census.csv"), &census_csv(std::slice::from_ref(&summary))?)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), Failure> {
    let cfg = BenchConfig {
        dim: a.dim,
        n_vectors: a.n_vectors,
        repeats: a.repeats,
        seed: a.seed,
        ..BenchConfig::new(a.quantizer.into(), a.ks)
    };
    let rows = bench_quantize(&cfg)?;
    let csv = bench_csv(&rows)?;
    match a.out {
        Some(p) => write_bytes(&p, &csv)?,
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    if let Some(r) = scaling_ratio(&rows) {
        eprintln!("largest/smallest K time ratio: {r:.2}");
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<(), Failure> {
    require_file(&a.checkpoint, "checkpoint")?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = ckpt.to_model::<f32>()?;
    let data = dataset_for(&ckpt, a.config.as_deref())?;
    let idx: Vec<usize> = (0..a.count.clamp(1, data.len())).collect();
    let originals = data.batch::<f32>(&idx);
    let (recons, _) = model.reconstruct(&originals)?;
    write_bytes(&a.out, &recon_grid_png(&originals, &recons)?)?;
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_repro(a: ReproArgs) -> Result<(), Failure> {
    let images = match (&a.data_dir, std::env::var_os(DATA_DIR_ENV)) {
        (Some(dir), _) => dir.join("train-images-idx3-ubyte"),
        (None, Some(_)) => resolve_data_path("train-images-idx3-ubyte"),
        (None, None) => {
            return Err(Failure::Usage(format!(
                "no FashionMNIST location: pass --data-dir or set {DATA_DIR_ENV}"
            )))
        }
    };
    require_file(&images, "FashionMNIST images")?;
    let dataset = DatasetRef {
        source: DatasetSource::Idx {
            images: images.to_string_lossy().into_owned(),
        },
        subset: a.subset,
        subset_seed: 0,
    };
    let data = resolve(&dataset)?;
    let opts = ReproOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        ..ReproOptions::fashion_mnist(dataset, (0..a.seeds.max(1)).collect())
    };
    let runs = repro_fmnist(&opts, &data, |v, seed, r| {
        eprintln!(
            "{} seed {seed} epoch {} recon {:.5} codes {} ({:.1}s)",
            v.label, r.metrics.epoch, r.metrics.losses.reconstruction, r.metrics.unique_codes, r.timing.seconds
        );
    })?;
    for r in &runs {
        let slug = r.variant.label.to_lowercase().replace(['(', ')'], "").replace(' ', "-");
        write_epochs_csv(&a.out.join(format!("{slug}-seed{}-epochs.csv", r.seed)), &r.run.reports)?;
    }
    let rows = summarize(&runs, opts.k);
    let md = summary_markdown(&rows);
    write_bytes(&a.out.join("summary.md"), md.as_bytes())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row)?;
    }
    write_bytes(&a.out.join("summary.csv"), &w.into_inner().map_err(|e| Failure::Runtime(e.to_string()))?)?;
    write_json(&a.out.join("summary.json"), &rows)?;
    print!("{md}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Census(a) => cmd_census(a),
        Command::Bench(a) => cmd_bench(a),
        Command::ExportRecons(a) => cmd_export(a),
        Command::ReproFmnist(a) => cmd_repro(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
