//! The frozen generative backbone: noise schedule, denoiser, diffusion loss,
//! guided ancestral sampler, and the pretraining procedure that creates the
//! frozen parameter set.
//!
//! Diffusion runs in pixel space at toy resolution; the autoencoder pair of a
//! latent diffusion stack is realized as the identity, so "latents" here are
//! images mapped linearly to [-1, 1].

mod loss;
mod pretrain;
mod sampler;
mod schedule;

pub use loss::{batch_loss_f64, batch_step, model_input, sample_loss_with, StepGrads, TrainItem};
pub use pretrain::{pretrain_backbone, PretrainConfig, PretrainReport};
pub use sampler::{encode_cond, guided_sample, SampleOpts};
pub use schedule::{forward_noise, q_sample_with_alpha_bar, NoiseSchedule};

use crate::ckpt;
use crate::nn::{DenoiserConfig, ParamSet, TextEncoder, UNet};
use crate::rng::Rng;
use crate::synthworld::Image;
use crate::tensor::Arr;
use crate::textencode::{Vocabulary, L_MAX};
use crate::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Everything that stays frozen after pretraining.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub denoiser: DenoiserConfig,
    pub image_size: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub text_heads: usize,
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            denoiser: DenoiserConfig::default(),
            image_size: 32,
            timesteps: 250,
            beta_start: 1e-4,
            beta_end: 0.02,
            text_heads: 2,
            frozen: false,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct BackboneMeta {
    config: BackboneConfig,
    vocab_words: Vec<String>,
}

/// Denoiser + text encoder + content vocabulary + schedule.
#[derive(Clone)]
pub struct Backbone {
    pub params: ParamSet,
    pub config: BackboneConfig,
    pub schedule: NoiseSchedule,
    pub unet: UNet,
    pub encoder: TextEncoder,
    pub vocab: Vocabulary,
    /// Digest of the last save/load; identifies this exact parameter state.
    pub digest: Option<String>,
}

impl Backbone {
    /// Fresh backbone with randomly initialized parameters.
    pub fn new(config: BackboneConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.denoiser.validate()?;
        let schedule = NoiseSchedule::linear(config.timesteps, config.beta_start, config.beta_end)?;
        let mut params = ParamSet::new();
        let mut rng = Rng::stream(seed, "backbone-init", 0);
        vocab.init_table(&mut params, &mut rng, config.denoiser.cond_dim);
        let encoder = TextEncoder::init(&mut params, &mut rng, config.denoiser.cond_dim, config.text_heads, L_MAX);
        let unet = UNet::init(&mut params, &config.denoiser, &mut rng, config.timesteps);
        Ok(Backbone { params, config, schedule, unet, encoder, vocab, digest: None })
    }

    /// Map an image in [0,1] to the diffusion working range [-1,1].
    pub fn to_latent(image: &Image) -> Arr {
        image.mapv(|v| 2.0 * v - 1.0).into_dyn()
    }

    /// Inverse of [`Backbone::to_latent`], clamped to [0,1].
    pub fn from_latent(z: &Arr) -> Image {
        let v = z.view().into_dimensionality::<ndarray::Ix3>().expect("latent must be [3,H,W]");
        Array3::from_shape_fn(v.dim(), |ix| ((v[ix] + 1.0) * 0.5).clamp(0.0, 1.0))
    }

    pub fn save(&mut self, path: &std::path::Path) -> Result<String> {
        let meta = BackboneMeta { config: self.config.clone(), vocab_words: self.vocab.words.clone() };
        let config_json = serde_json::to_string(&meta)?;
        let tensors: std::collections::BTreeMap<String, Arr> =
            self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let digest = ckpt::save(path, "backbone", &config_json, &tensors)?;
        self.digest = Some(digest.clone());
        Ok(digest)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (meta, tensors) = ckpt::load(path)?;
        if meta.kind != "backbone" {
            return Err(Error::CorruptCheckpoint(format!(
                "expected a backbone checkpoint, found kind '{}'",
                meta.kind
            )));
        }
        let bm: BackboneMeta = serde_json::from_str(&meta.config_json)?;
        let schedule = NoiseSchedule::linear(bm.config.timesteps, bm.config.beta_start, bm.config.beta_end)?;
        let mut params = ParamSet::new();
        for (name, arr) in tensors {
            if !arr.iter().all(|v| v.is_finite()) {
                return Err(Error::CorruptCheckpoint(format!("tensor {name} non-finite")));
            }
            params.insert(&name, arr);
        }
        let vocab = Vocabulary { words: bm.vocab_words.clone() };
        // rebuild model structs around the loaded parameters
        let mut scratch = ParamSet::new();
        let mut rng = Rng::new(0);
        let encoder =
            TextEncoder::init(&mut scratch, &mut rng, bm.config.denoiser.cond_dim, bm.config.text_heads, L_MAX);
        let unet = UNet::init(&mut scratch, &bm.config.denoiser, &mut rng, bm.config.timesteps);
        for (name, _) in scratch.iter() {
            if !params.contains(name) {
                return Err(Error::CorruptCheckpoint(format!("missing tensor {name}")));
            }
        }
        Ok(Backbone {
            params,
            config: bm.config,
            schedule,
            unet,
            encoder,
            vocab,
            digest: Some(meta.digest),
        })
    }
}
