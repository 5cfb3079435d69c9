//! Backbone pretraining: denoiser, text encoder and content vocabulary are
//! trained jointly on content-only captions, then frozen.
//!
//! Captions never contain factor tokens; with a small probability the caption
//! is replaced by the null (all-pad) prompt so classifier-free guidance works
//! at sampling time, and with the control channel enabled the clean image's
//! edge map is supplied half the time (zeros otherwise).

use super::loss::{batch_step, TrainItem};
use super::{Backbone, BackboneConfig};
use crate::multitrain::lr_schedule;
use crate::nn::{adamw_step, Moments};
use crate::rng::Rng;
use crate::synthworld::{extract_edges, LabeledSample};
use crate::tensor::Arr;
use crate::textencode::{FactorTrainMask, NoFactors, PromptSpec, Stage, Vocabulary};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f32,
    pub warmup_frac: f64,
    /// Probability of replacing the caption with the null prompt.
    pub null_prob: f64,
    /// Probability of supplying the clean image's edge map as control.
    pub control_prob: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 14,
            batch_size: 4,
            max_lr: 2e-3,
            weight_decay: 0.0,
            warmup_frac: 0.05,
            null_prob: 0.1,
            control_prob: 0.5,
            val_frac: 0.08,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub train_losses: Vec<f32>,
    pub val_losses: Vec<f32>,
    pub val_initial: f32,
    pub val_final: f32,
    pub steps: usize,
}

fn caption_prompt(sample: &LabeledSample) -> PromptSpec {
    PromptSpec { slots: vec![], caption: sample.caption_ids.clone(), stage: Stage::Inference, n: 0 }
}

fn val_loss(backbone: &Backbone, val: &[&LabeledSample], seed: u64) -> Result<f32> {
    if val.is_empty() {
        return Ok(f32::NAN);
    }
    let mut rng = Rng::stream(seed, "pretrain-val", 0);
    let mut items = Vec::with_capacity(val.len());
    let mut draws: Vec<(usize, Arr)> = Vec::with_capacity(val.len());
    for s in val {
        let control = if backbone.config.denoiser.control { Some(extract_edges(&s.image)) } else { None };
        items.push(TrainItem { image: s.image.clone(), prompt: caption_prompt(s), control });
        let t = rng.below(backbone.schedule.len());
        let size = backbone.config.image_size;
        let eps = Arr::from_shape_fn(ndarray::IxDyn(&[3, size, size]), |_| rng.normal());
        draws.push((t, eps));
    }
    let mut total = 0.0f64;
    for (chunk_items, chunk_draws) in items.chunks(8).zip(draws.chunks(8)) {
        let step = batch_step(backbone, &NoFactors, chunk_items, chunk_draws, FactorTrainMask::Frozen, false)?;
        total += step.loss as f64 * chunk_items.len() as f64;
    }
    Ok((total / items.len() as f64) as f32)
}

/// Train a fresh backbone on labeled samples and freeze it.
pub fn pretrain_backbone(
    samples: &[LabeledSample],
    bcfg: BackboneConfig,
    vocab: Vocabulary,
    pcfg: &PretrainConfig,
) -> Result<(Backbone, PretrainReport)> {
    if samples.is_empty() {
        return Err(Error::Precondition("pretraining needs samples".into()));
    }
    let mut backbone = Backbone::new(bcfg, vocab, pcfg.seed)?;
    let mut moments = Moments::default();

    // deterministic train/validation split
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    let mut split_rng = Rng::stream(pcfg.seed, "pretrain-split", 0);
    split_rng.shuffle(&mut indices);
    let val_count = ((samples.len() as f64 * pcfg.val_frac) as usize).max(1);
    let (val_idx, train_idx) = indices.split_at(val_count);
    let val: Vec<&LabeledSample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let train: Vec<&LabeledSample> = train_idx.iter().map(|&i| &samples[i]).collect();

    let steps_per_epoch = (train.len() / pcfg.batch_size).max(1);
    let total_steps = steps_per_epoch * pcfg.epochs;
    let val_initial = val_loss(&backbone, &val, pcfg.seed)?;

    let mut train_losses = Vec::with_capacity(pcfg.epochs);
    let mut val_losses = Vec::with_capacity(pcfg.epochs);
    let mut rng = Rng::stream(pcfg.seed, "pretrain-steps", 0);
    let mut step = 0usize;
    let size = backbone.config.image_size;
    for _epoch in 0..pcfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(pcfg.batch_size) {
            if chunk.len() < pcfg.batch_size {
                break;
            }
            let mut items = Vec::with_capacity(chunk.len());
            let mut draws = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = train[i];
                let prompt = if rng.uniform() < pcfg.null_prob {
                    PromptSpec::null(0)
                } else {
                    caption_prompt(s)
                };
                let control = if backbone.config.denoiser.control && rng.uniform() < pcfg.control_prob {
                    Some(extract_edges(&s.image))
                } else {
                    None
                };
                let t = rng.below(backbone.schedule.len());
                let eps = Arr::from_shape_fn(ndarray::IxDyn(&[3, size, size]), |_| rng.normal());
                items.push(TrainItem { image: s.image.clone(), prompt, control });
                draws.push((t, eps));
            }
            let out = batch_step(&backbone, &NoFactors, &items, &draws, FactorTrainMask::Frozen, true)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged(format!("pretraining step {step}: loss {}", out.loss)));
            }
            let lr = lr_schedule(step, total_steps, pcfg.warmup_frac, pcfg.max_lr) as f32;
            adamw_step(&mut backbone.params, &out.param_grads, &mut moments, lr, pcfg.weight_decay);
            epoch_loss += out.loss as f64;
            step += 1;
        }
        train_losses.push((epoch_loss / steps_per_epoch as f64) as f32);
        val_losses.push(val_loss(&backbone, &val, pcfg.seed)?);
    }
    let val_final = *val_losses.last().unwrap_or(&f32::NAN);
    backbone.config.frozen = true;
    Ok((
        backbone,
        PretrainReport { train_losses, val_losses, val_initial, val_final, steps: step },
    ))
}
