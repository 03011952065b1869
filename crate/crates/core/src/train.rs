//! Objective assembly, configuration and the single optimization step.
//!
//! The epoch loop, shuffling and timing live in the `std` companion crate.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::lattice::init_range;
use crate::nn::{reconstruction_grad, reconstruction_loss, ArchSpec, ArchVariant, Autoencoder, Init, NnError, Shape, Tensor, Graph};
use crate::optim::{Adam, AdamConfig};
use crate::quantize::{
    encoder_gradient, Codebook, CodeIdentity, EmaQuantizer, LatticeQuantizer, Quantized, Quantizer, QuantizerError,
    QuantizerKind, QuantizerLosses, QuantizerState, VqQuantizer, DEFAULT_DECAY, DEFAULT_EPSILON,
};
use crate::real::Real;

/// Largest `K * D` a dense codebook may allocate.
pub const MAX_CODEBOOK_VALUES: u64 = 1 << 28;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{field} must be {rule}, got {value}")]
    OutOfRange {
        field: &'static str,
        rule: &'static str,
        value: f64,
    },
    #[error("codebook of {k} x {dim} values is too large to allocate")]
    CodebookTooLarge { k: u64, dim: usize },
    #[error("unknown learning-rate schedule `{0}`")]
    UnknownSchedule(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error("non-finite {term} loss ({value}) at step {step}")]
    Diverged { term: &'static str, value: f64, step: u64 },
    #[error(transparent)]
    Census(#[from] crate::census::CensusError),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Every loss term of one step. `size` already carries the `-gamma` factor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub embedding: f64,
    pub commitment: f64,
    pub size: f64,
    pub beta: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(reconstruction: f64, q: &QuantizerLosses, beta: f64, gamma: f64) -> Result<Self, (&'static str, f64)> {
        let total = total_objective(reconstruction, q.embedding, q.commitment, q.size, beta)?;
        Ok(Self {
            reconstruction,
            embedding: q.embedding,
            commitment: q.commitment,
            size: q.size,
            beta,
            gamma,
            total,
        })
    }
}

/// `recon + embed + beta * commit + size`.
///
/// A non-finite input is reported by name.
pub fn total_objective(recon: f64, embed: f64, commit: f64, size: f64, beta: f64) -> Result<f64, (&'static str, f64)> {
    for (name, v) in [
        ("reconstruction", recon),
        ("embedding", embed),
        ("commitment", commit),
        ("size", size),
        ("beta", beta),
    ] {
        if !v.is_finite() {
            return Err((name, v));
        }
    }
    Ok(recon + embed + beta * commit + size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Exponential decay with factor zero: the base rate in epoch 0 and
    /// zero afterwards.
    PaperLiteral,
}

impl LrSchedule {
    pub fn rate(self, base_lr: f64, epoch: usize) -> f64 {
        match self {
            Self::Constant => base_lr,
            Self::PaperLiteral => base_lr * libm::pow(0.0, epoch as f64),
        }
    }
}

impl core::str::FromStr for LrSchedule {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(Self::Constant),
            "paper-literal" => Ok(Self::PaperLiteral),
            other => Err(ConfigError::UnknownSchedule(other.into())),
        }
    }
}

/// Parses `mode` and evaluates it.
pub fn lr_schedule(mode: &str, base_lr: f64, epoch: usize) -> Result<f64, ConfigError> {
    Ok(mode.parse::<LrSchedule>()?.rate(base_lr, epoch))
}

/// Parameters of the synthetic Gaussian-bump dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub clusters: usize,
    pub samples: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Side length of the square images.
    pub size: usize,
    #[serde(default = "one")]
    pub channels: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    /// An IDX image file; pixels are divided by 255.
    Idx { images: String },
    /// Every decodable image in a directory, resized to `resolution` squared.
    ImageFolder {
        path: String,
        resolution: usize,
        #[serde(default = "one")]
        channels: usize,
    },
    SyntheticBlobs(BlobParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub source: DatasetSource,
    /// Keep a seeded random subset of this many items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<usize>,
    #[serde(default)]
    pub subset_seed: u64,
}

fn default_decay() -> f64 {
    DEFAULT_DECAY
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub quantizer: QuantizerKind,
    /// Target codebook size. For the lattice it only sets the init range.
    pub k: u64,
    pub dim: usize,
    pub beta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub arch: ArchVariant,
    pub dataset: DatasetRef,
    /// Replaces the lattice init range derived from `k`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_range: Option<f64>,
    #[serde(default = "default_decay")]
    pub ema_decay: f64,
    #[serde(default = "default_epsilon")]
    pub ema_epsilon: f64,
}

impl TrainConfig {
    /// Batch 32, lr 0.001, beta 0.25, D 64, K 512, 5 epochs, gamma 1, the
    /// six-layer network and a learnable lattice.
    pub fn paper_defaults(dataset: DatasetRef) -> Self {
        Self {
            quantizer: QuantizerKind::Ll,
            k: 512,
            dim: 64,
            beta: 0.25,
            gamma: 1.0,
            batch_size: 32,
            lr: 0.001,
            epochs: 5,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            arch: ArchVariant::PaperSixLayer,
            dataset,
            init_range: None,
            ema_decay: DEFAULT_DECAY,
            ema_epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |field, ok: bool, rule, value: f64| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange { field, rule, value })
            }
        };
        check("beta", self.beta.is_finite() && self.beta >= 0.0, "finite and >= 0", self.beta)?;
        check("gamma", self.gamma.is_finite(), "finite", self.gamma)?;
        check("lr", self.lr.is_finite() && self.lr >= 0.0, "finite and >= 0", self.lr)?;
        check("epochs", self.epochs >= 1, ">= 1", self.epochs as f64)?;
        check("batch_size", self.batch_size >= 1, ">= 1", self.batch_size as f64)?;
        check("dim", self.dim >= 1, ">= 1", self.dim as f64)?;
        check("k", self.k >= 2, ">= 2", self.k as f64)?;
        if let Some(r) = self.init_range {
            check("init_range", r.is_finite() && r > 0.0, "finite and > 0", r)?;
        }
        if self.quantizer == QuantizerKind::VqEma {
            check("ema_decay", (0.0..1.0).contains(&self.ema_decay), "in [0, 1)", self.ema_decay)?;
            check(
                "ema_epsilon",
                self.ema_epsilon.is_finite() && self.ema_epsilon > 0.0,
                "finite and > 0",
                self.ema_epsilon,
            )?;
        }
        if self.quantizer != QuantizerKind::Ll
            && self.k.checked_mul(self.dim as u64).map_or(true, |n| n > MAX_CODEBOOK_VALUES)
        {
            return Err(ConfigError::CodebookTooLarge { k: self.k, dim: self.dim });
        }
        if let DatasetSource::SyntheticBlobs(b) = &self.dataset.source {
            check("noise", b.noise.is_finite() && b.noise >= 0.0, "finite and >= 0", b.noise)?;
        }
        Ok(())
    }

    /// Lattice init half-width: the override if set, else derived from `k`.
    pub fn lattice_init_range(&self) -> Result<f64, QuantizerError> {
        match self.init_range {
            Some(r) => Ok(r),
            None => Ok(init_range(self.k as f64, self.dim)?),
        }
    }

    pub fn build_quantizer<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<QuantizerState, TrainError> {
        self.validate()?;
        let k = self.k as usize;
        Ok(match self.quantizer {
            QuantizerKind::Ll => QuantizerState::Ll(LatticeQuantizer::with_range(
                self.dim,
                self.lattice_init_range()?,
                self.gamma,
                rng,
            )?),
            QuantizerKind::Vq => QuantizerState::Vq(VqQuantizer::with_default_init(k, self.dim, rng)?),
            QuantizerKind::VqEma => QuantizerState::VqEma(EmaQuantizer::new(
                Codebook::uniform(k, self.dim, 1.0 / k as f64, rng)?,
                self.ema_decay,
                self.ema_epsilon,
            )?),
        })
    }
}

/// Autoencoder plus quantization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real> {
    pub net: Autoencoder<T>,
    pub quantizer: QuantizerState,
}

/// Loss terms and gradients of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Backward<T> {
    pub losses: LossBreakdown,
    pub quantized: Quantized,
    /// Encoder outputs flattened to `sites x D`.
    pub latents: Vec<f64>,
    pub net_grads: Vec<Vec<T>>,
    pub quantizer_grad: Vec<f64>,
}

impl<T: Real> Model<T> {
    /// Network first, then quantizer, both drawn from `rng`.
    pub fn init<R: Rng + ?Sized>(cfg: &TrainConfig, in_channels: usize, rng: &mut R) -> Result<Self, TrainError> {
        cfg.validate()?;
        let spec = ArchSpec::new(cfg.arch, in_channels, cfg.dim);
        let net = Autoencoder::new(spec, Init::KaimingUniform, rng)?;
        let quantizer = cfg.build_quantizer(rng)?;
        Ok(Self { net, quantizer })
    }

    pub fn latent_shape(&self, input: Shape) -> Result<Shape, NnError> {
        self.net.spec().latent_shape(input)
    }

    /// Encoder outputs as `f64` rows of length `D`.
    pub fn latents(&self, images: &Tensor<T>) -> Result<Vec<f64>, TrainError> {
        Ok(self.net.encode_tensor(images)?.to_f64_vec())
    }

    /// Quantizes and decodes without recording gradients.
    pub fn reconstruct(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Quantized), TrainError> {
        let z = self.net.encode_tensor(images)?;
        let q = self.quantizer.quantize(&z.to_f64_vec())?;
        let zq = Tensor::from_vec(z.shape(), q.z_q().iter().map(|&v| T::from_f64(v)).collect())?;
        Ok((self.net.decode_tensor(&zq)?, q))
    }

    /// Full objective and its gradients for one batch.
    pub fn forward_backward(&self, images: &Tensor<T>, beta: f64) -> Result<Backward<T>, TrainError> {
        let mut g = Graph::new(self.net.params());
        let x = g.input(images.clone());
        let z = self.net.encode(&mut g, x)?;
        let z_shape = g.value(z).shape();
        let latents = g.value(z).to_f64_vec();
        let quantized = self.quantizer.quantize(&latents)?;

        let zq = g.input(Tensor::from_vec(
            z_shape,
            quantized.z_q().iter().map(|&v| T::from_f64(v)).collect(),
        )?);
        let y = self.net.decode(&mut g, zq)?;
        let recon = reconstruction_loss(images, g.value(y))?;
        let gamma = match &self.quantizer {
            QuantizerState::Ll(q) => q.gamma(),
            _ => 0.0,
        };
        let losses = LossBreakdown::new(recon, &quantized.losses, beta, gamma)
            .map_err(|(term, value)| TrainError::Diverged { term, value, step: 0 })?;

        let seed = reconstruction_grad(images, g.value(y))?;
        let mut decoder = g.backward(y, &seed)?;
        let upstream = decoder.take_wrt(zq).map(|t| t.to_f64_vec()).unwrap_or_else(|| alloc::vec![0.0; latents.len()]);
        let enc_seed = encoder_gradient(&upstream, &latents, &quantized, beta)?;
        let enc_seed = Tensor::from_vec(z_shape, enc_seed.iter().map(|&v| T::from_f64(v)).collect())?;
        let encoder = g.backward(z, &enc_seed)?;
        decoder.merge_params(&encoder);
        let quantizer_grad = self.quantizer.parameter_gradient(&latents, &quantized, 1.0);
        Ok(Backward {
            losses,
            quantized,
            latents,
            net_grads: decoder.params().to_vec(),
            quantizer_grad,
        })
    }
}

/// Result of [`Trainer::step`].
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    pub codes: Vec<CodeIdentity>,
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    model: Model<T>,
    beta: f64,
    adam: AdamConfig,
    net_opt: Vec<Adam<T>>,
    quantizer_opt: Adam<f64>,
    steps: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, beta: f64) -> Self {
        let net_opt = model.net.params().iter().map(|p| Adam::new(p.value.len())).collect();
        let quantizer_opt = Adam::new(model.quantizer.trainable_parameters().len());
        Self {
            model,
            beta,
            adam: AdamConfig::default(),
            net_opt,
            quantizer_opt,
            steps: 0,
        }
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Forward, backward, Adam update of network and quantizer parameters,
    /// basis clamp, then any non-gradient quantizer maintenance.
    pub fn step(&mut self, images: &Tensor<T>, lr: f64) -> Result<StepOutcome, TrainError> {
        let step = self.steps;
        let b = self
            .model
            .forward_backward(images, self.beta)
            .map_err(|e| match e {
                TrainError::Diverged { term, value, .. } => TrainError::Diverged { term, value, step },
                other => other,
            })?;
        for ((p, g), opt) in self.model.net.params_mut().iter_mut().zip(&b.net_grads).zip(&mut self.net_opt) {
            opt.step(&self.adam, lr, &mut p.value, g);
        }
        if !b.quantizer_grad.is_empty() {
            let (adam, opt, grad) = (&self.adam, &mut self.quantizer_opt, &b.quantizer_grad);
            self.model
                .quantizer
                .apply_update(&mut |params| opt.step(adam, lr, params, grad))?;
        }
        self.model.quantizer.observe(&b.latents, &b.quantized)?;
        self.steps += 1;
        Ok(StepOutcome {
            losses: b.losses,
            codes: b.quantized.codes,
        })
    }
}
