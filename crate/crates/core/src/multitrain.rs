//! Two-stage factor inversion against the frozen backbone.
//!
//! Stage 1 learns one general multi-vector embedding per (category, value)
//! over batches assembled to share a factor value while spanning different
//! source datasets, which forces each embedding toward the characteristics
//! common to that value rather than to any one dataset. Stage 2 refines
//! per-dataset specific embeddings, initialized from their general
//! counterparts, with a stochastic mask that lets exactly one category's
//! specific token receive gradients per step. The backbone is read but never
//! written in both stages.

use crate::ckpt;
use crate::diffusion::{batch_step, Backbone, TrainItem};
use crate::factorspace::{Category, FactorRegistry, CATEGORY_COUNT};
use crate::nn::{adamw_step, Moments, ParamSet};
use crate::rng::Rng;
use crate::synthworld::LabeledSample;
use crate::tensor::Arr;
use crate::textencode::{
    assemble_prompt, init_factor_token, FactorKey, FactorLookup, FactorTrainMask, Stage,
};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Inversion training preset. The documented defaults: 10 epochs, batch 4,
/// decoupled weight decay 1e-2, max learning rate 1e-4 with warmup and cosine
/// decay, 15 vectors per factor token.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f32,
    pub warmup_frac: f64,
    pub n_vectors: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            max_lr: 1e-4,
            weight_decay: 1e-2,
            warmup_frac: 0.1,
            n_vectors: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate_stage1(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Precondition(
                "stage-1 batches need >= 2 samples (factor overlap spans datasets)".into(),
            ));
        }
        self.validate_common()
    }
    pub fn validate_common(&self) -> Result<()> {
        if self.max_lr <= 0.0 || self.warmup_frac < 0.0 || self.warmup_frac >= 1.0 {
            return Err(Error::Precondition("rates must be positive, warmup fraction in [0,1)".into()));
        }
        if self.n_vectors == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Precondition("epochs, batch size and n must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear warmup to the maximum rate over the first `warmup_frac` of steps,
/// then cosine decay to zero at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_frac: f64, max_lr: f64) -> f64 {
    debug_assert!(step <= total_steps);
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = (total_steps as f64 * warmup_frac).round() as usize;
    if step < warmup {
        return max_lr * step as f64 / warmup as f64;
    }
    let remain = (total_steps - warmup).max(1);
    let t = (step - warmup) as f64 / remain as f64;
    max_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// All trainable inversion state: general and specific factor embeddings plus
/// optimizer moments.
#[derive(Clone)]
pub struct InversionState {
    pub n: usize,
    pub dim: usize,
    pub general: BTreeMap<FactorKey, Arr>,
    pub specific: BTreeMap<FactorKey, Arr>,
    pub moments: Moments,
    pub step: u64,
    pub backbone_digest: Option<String>,
    pub stage2_done: BTreeSet<String>,
}

impl FactorLookup for InversionState {
    fn embedding(&self, key: &FactorKey) -> Option<&Arr> {
        if key.dataset.is_none() {
            self.general.get(key)
        } else {
            self.specific.get(key)
        }
    }
}

impl InversionState {
    /// Initialize general tokens: n copies of each value's content-word row.
    pub fn init(registry: &FactorRegistry, backbone: &Backbone, n: usize) -> Result<Self> {
        let mut general = BTreeMap::new();
        for cat in Category::ALL {
            for value in &registry.category(cat).value_names {
                let emb = init_factor_token(value, n, &backbone.vocab, &backbone.params)?;
                general.insert(FactorKey::general(cat, value), emb);
            }
        }
        Ok(InversionState {
            n,
            dim: backbone.config.denoiser.cond_dim,
            general,
            specific: BTreeMap::new(),
            moments: Moments::default(),
            step: 0,
            backbone_digest: backbone.digest.clone(),
            stage2_done: BTreeSet::new(),
        })
    }

    fn embeddings_as_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (key, arr) in self.general.iter().chain(self.specific.iter()) {
            ps.insert(&key.record_name(), arr.clone());
        }
        ps
    }

    fn write_back(&mut self, ps: &ParamSet) {
        for (key, arr) in self.general.iter_mut() {
            *arr = ps.get(&key.record_name()).clone();
        }
        for (key, arr) in self.specific.iter_mut() {
            *arr = ps.get(&key.record_name()).clone();
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<String> {
        #[derive(Serialize)]
        struct Meta<'a> {
            n: usize,
            dim: usize,
            step: u64,
            backbone_digest: &'a Option<String>,
            stage2_done: &'a BTreeSet<String>,
            moment_counts: &'a BTreeMap<String, u64>,
        }
        let meta = Meta {
            n: self.n,
            dim: self.dim,
            step: self.step,
            backbone_digest: &self.backbone_digest,
            stage2_done: &self.stage2_done,
            moment_counts: &self.moments.counts,
        };
        let mut tensors = BTreeMap::new();
        for (key, arr) in self.general.iter().chain(self.specific.iter()) {
            tensors.insert(key.record_name(), arr.clone());
        }
        for (name, arr) in &self.moments.m {
            tensors.insert(format!("opt.m/{name}"), arr.clone());
        }
        for (name, arr) in &self.moments.v {
            tensors.insert(format!("opt.v/{name}"), arr.clone());
        }
        ckpt::save(path, "inversion", &serde_json::to_string(&meta)?, &tensors)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            n: usize,
            dim: usize,
            step: u64,
            backbone_digest: Option<String>,
            stage2_done: BTreeSet<String>,
            moment_counts: BTreeMap<String, u64>,
        }
        let (meta, tensors) = ckpt::load(path)?;
        if meta.kind != "inversion" {
            return Err(Error::CorruptCheckpoint(format!(
                "expected an inversion checkpoint, found kind '{}'",
                meta.kind
            )));
        }
        let m: Meta = serde_json::from_str(&meta.config_json)?;
        let mut state = InversionState {
            n: m.n,
            dim: m.dim,
            general: BTreeMap::new(),
            specific: BTreeMap::new(),
            moments: Moments { m: BTreeMap::new(), v: BTreeMap::new(), counts: m.moment_counts },
            step: m.step,
            backbone_digest: m.backbone_digest,
            stage2_done: m.stage2_done,
        };
        for (name, arr) in tensors {
            if let Some(rest) = name.strip_prefix("opt.m/") {
                state.moments.m.insert(rest.to_string(), arr);
            } else if let Some(rest) = name.strip_prefix("opt.v/") {
                state.moments.v.insert(rest.to_string(), arr);
            } else if let Some(key) = parse_record_name(&name) {
                if key.dataset.is_none() {
                    state.general.insert(key, arr);
                } else {
                    state.specific.insert(key, arr);
                }
            } else {
                return Err(Error::CorruptCheckpoint(format!("unrecognized record {name}")));
            }
        }
        Ok(state)
    }
}

fn parse_record_name(name: &str) -> Option<FactorKey> {
    let parts: Vec<&str> = name.split('/').collect();
    match parts.as_slice() {
        ["gen", cat, value] => {
            Category::from_name(cat).map(|c| FactorKey::general(c, value))
        }
        ["spec", cat, value, ds] => {
            Category::from_name(cat).map(|c| FactorKey::specific(c, value, ds))
        }
        _ => None,
    }
}

/// A factor-overlap batch: samples sharing one (category, value), drawn
/// round-robin across the distinct datasets carrying that value.
#[derive(Clone, Debug)]
pub struct OverlapBatch {
    pub category: Category,
    pub value: String,
    /// (dataset_id, index into that dataset's sample list)
    pub picks: Vec<(String, usize)>,
    pub fallback: bool,
}

/// (category, value) pairs carried by at least two datasets holding samples.
fn eligible_pairs<'r>(
    registry: &'r FactorRegistry,
    datasets: &BTreeMap<String, Vec<LabeledSample>>,
) -> Vec<(Category, &'r str, Vec<&'r str>)> {
    let mut out = Vec::new();
    for cat in Category::ALL {
        for value in &registry.category(cat).value_names {
            let carriers: Vec<&str> = registry
                .carriers(cat, value)
                .into_iter()
                .filter(|d| {
                    datasets
                        .get(&d.id)
                        .map(|ss| ss.iter().any(|s| s.tuple.value(cat) == value))
                        .unwrap_or(false)
                })
                .map(|d| d.id.as_str())
                .collect();
            if carriers.len() >= 2 {
                out.push((cat, value.as_str(), carriers));
            }
        }
    }
    out
}

/// Draw one factor-overlap batch. The (category, value) pair is uniform over
/// pairs carried by >= 2 datasets; samples are drawn round-robin over a
/// shuffled ordering of the carrier datasets. Registries where no pair has
/// two carriers fall back to a single-dataset batch with the flag set.
pub fn sample_overlap_batch(
    registry: &FactorRegistry,
    datasets: &BTreeMap<String, Vec<LabeledSample>>,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<OverlapBatch> {
    if datasets.is_empty() || datasets.values().all(|v| v.is_empty()) {
        return Err(Error::Precondition("no samples to batch".into()));
    }
    let eligible = eligible_pairs(registry, datasets);
    let (category, value, mut carriers, fallback) = if eligible.is_empty() {
        // degenerate registry: pick any pair with one carrier
        let mut singles = Vec::new();
        for cat in Category::ALL {
            for value in &registry.category(cat).value_names {
                for (id, ss) in datasets {
                    if ss.iter().any(|s| s.tuple.value(cat) == value) {
                        singles.push((cat, value.as_str(), vec![id.as_str()]));
                        break;
                    }
                }
            }
        }
        if singles.is_empty() {
            return Err(Error::Precondition("no factor value has any samples".into()));
        }
        let pick = rng.below(singles.len());
        let (c, v, ds) = singles.swap_remove(pick);
        (c, v, ds, true)
    } else {
        let pick = rng.below(eligible.len());
        let (c, v, ds) = eligible[pick].clone();
        (c, v, ds, false)
    };
    rng.shuffle(&mut carriers);
    let mut picks = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let ds_id = carriers[i % carriers.len()];
        let pool: Vec<usize> = datasets[ds_id]
            .iter()
            .enumerate()
            .filter(|(_, s)| s.tuple.value(category) == value)
            .map(|(j, _)| j)
            .collect();
        picks.push((ds_id.to_string(), pool[rng.below(pool.len())]));
    }
    Ok(OverlapBatch { category, value: value.to_string(), picks, fallback })
}

/// Per-epoch training log entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    pub lr: f64,
}

fn draws_for(rng: &mut Rng, count: usize, t_max: usize, size: usize) -> Vec<(usize, Arr)> {
    (0..count)
        .map(|_| {
            let t = rng.below(t_max);
            let eps = Arr::from_shape_fn(ndarray::IxDyn(&[3, size, size]), |_| rng.normal());
            (t, eps)
        })
        .collect()
}

/// Validation diffusion loss of a lookup's embeddings on held-out samples
/// with deterministic draws; comparable across calls with the same seed.
pub fn inversion_val_loss(
    backbone: &Backbone,
    lookup: &(dyn FactorLookup + Sync),
    samples: &[&LabeledSample],
    n: usize,
    seed: u64,
) -> Result<f32> {
    let mut rng = Rng::stream(seed, "inversion-val", 0);
    let mut items = Vec::with_capacity(samples.len());
    for s in samples {
        let prompt = assemble_prompt(&s.tuple, &s.caption_ids, Stage::S1, None, n)?;
        items.push(TrainItem { image: s.image.clone(), prompt, control: None });
    }
    let draws = draws_for(&mut rng, items.len(), backbone.schedule.len(), backbone.config.image_size);
    let mut total = 0.0f64;
    for (ci, cd) in items.chunks(8).zip(draws.chunks(8)) {
        let out = batch_step(backbone, lookup, ci, cd, FactorTrainMask::Frozen, false)?;
        total += out.loss as f64 * ci.len() as f64;
    }
    Ok((total / items.len() as f64) as f32)
}

fn apply_factor_grads(
    state: &mut InversionState,
    factor_grads: &BTreeMap<FactorKey, Arr>,
    lr: f64,
    weight_decay: f32,
) {
    let mut ps = state.embeddings_as_params();
    let named: BTreeMap<String, Arr> = factor_grads
        .iter()
        .map(|(k, g)| (k.record_name(), g.clone()))
        .collect();
    adamw_step(&mut ps, &named, &mut state.moments, lr as f32, weight_decay);
    state.write_back(&ps);
}

/// Stage 1: learn general embeddings over factor-overlap batches. The
/// backbone is frozen; gradients flow through it into the general tokens only.
pub fn stage1_train(
    state: &mut InversionState,
    backbone: &Backbone,
    registry: &FactorRegistry,
    datasets: &BTreeMap<String, Vec<LabeledSample>>,
    config: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    config.validate_stage1()?;
    if !backbone.config.frozen {
        return Err(Error::Precondition("backbone must be frozen before inversion".into()));
    }
    let total_samples: usize = datasets.values().map(|v| v.len()).sum();
    let steps_per_epoch = (total_samples / config.batch_size).max(1);
    let total_steps = steps_per_epoch * config.epochs;
    // held-out pool for the per-epoch validation loss
    let mut val: Vec<&LabeledSample> = Vec::new();
    for samples in datasets.values() {
        let k = (samples.len() / 10).max(1).min(samples.len());
        val.extend(samples.iter().take(k));
    }
    let mut rng = Rng::stream(config.seed, "stage1", 0);
    let mut stats = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0f64;
        for _ in 0..steps_per_epoch {
            let batch = sample_overlap_batch(registry, datasets, config.batch_size, &mut rng)?;
            let mut items = Vec::with_capacity(batch.picks.len());
            for (ds_id, idx) in &batch.picks {
                let s = &datasets[ds_id][*idx];
                let prompt = assemble_prompt(&s.tuple, &s.caption_ids, Stage::S1, None, config.n_vectors)?;
                items.push(TrainItem { image: s.image.clone(), prompt, control: None });
            }
            let draws = draws_for(&mut rng, items.len(), backbone.schedule.len(), backbone.config.image_size);
            let out = batch_step(backbone, state, &items, &draws, FactorTrainMask::General, false)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged(format!("stage-1 step {step}")));
            }
            let lr = lr_schedule(step, total_steps, config.warmup_frac, config.max_lr);
            apply_factor_grads(state, &out.factor_grads, lr, config.weight_decay);
            epoch_loss += out.loss as f64;
            state.step += 1;
            step += 1;
        }
        let val_loss = inversion_val_loss(backbone, state, &val, config.n_vectors, config.seed)?;
        stats.push(EpochStats {
            epoch,
            train_loss: (epoch_loss / steps_per_epoch as f64) as f32,
            val_loss,
            lr: lr_schedule(step.min(total_steps), total_steps, config.warmup_frac, config.max_lr),
        });
    }
    Ok(stats)
}

/// One stage-2 step record: the masked category and the touched embeddings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskLogEntry {
    pub step: u64,
    pub category: Category,
    pub touched: Vec<String>,
}

/// Stage 2 for one dataset: initialize specific tokens as copies of their
/// general counterparts, then per step select one category uniformly and
/// update only that category's specific embedding for this dataset.
pub fn stage2_train(
    state: &mut InversionState,
    backbone: &Backbone,
    dataset_id: &str,
    samples: &[LabeledSample],
    config: &TrainConfig,
) -> Result<Vec<MaskLogEntry>> {
    config.validate_common()?;
    if !backbone.config.frozen {
        return Err(Error::Precondition("backbone must be frozen before inversion".into()));
    }
    if state.general.is_empty() {
        return Err(Error::Precondition("stage-1 state missing".into()));
    }
    if samples.is_empty() {
        return Err(Error::UnknownDataset(dataset_id.into()));
    }
    // specific tokens for every (category, value) this dataset exhibits,
    // initialized from stage-1 weights
    for cat in Category::ALL {
        let mut values: BTreeSet<&str> = BTreeSet::new();
        for s in samples {
            values.insert(s.tuple.value(cat));
        }
        for value in values {
            let gkey = FactorKey::general(cat, value);
            let gen = state
                .general
                .get(&gkey)
                .ok_or_else(|| Error::Precondition(format!("no general embedding for {gkey:?}")))?
                .clone();
            state
                .specific
                .entry(FactorKey::specific(cat, value, dataset_id))
                .or_insert(gen);
        }
    }
    let steps_per_epoch = (samples.len() / config.batch_size).max(1);
    let total_steps = steps_per_epoch * config.epochs;
    let mut rng = Rng::stream(config.seed, "stage2", fnv(dataset_id));
    let mut log = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        let k_star = draw_mask_category(&mut rng);
        let mut items = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let s = &samples[rng.below(samples.len())];
            let mut map = BTreeMap::new();
            map.insert(k_star, dataset_id.to_string());
            let prompt = assemble_prompt(
                &s.tuple,
                &s.caption_ids,
                Stage::S2 { category: k_star, dataset: dataset_id.to_string() },
                Some(&map),
                config.n_vectors,
            )?;
            items.push(TrainItem { image: s.image.clone(), prompt, control: None });
        }
        let draws = draws_for(&mut rng, items.len(), backbone.schedule.len(), backbone.config.image_size);
        let out = batch_step(backbone, state, &items, &draws, FactorTrainMask::SpecificOnly, false)?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged(format!("stage-2 step {step} on {dataset_id}")));
        }
        let lr = lr_schedule(step, total_steps, config.warmup_frac, config.max_lr);
        let touched: Vec<String> = out.factor_grads.keys().map(|k| k.record_name()).collect();
        debug_assert!(out
            .factor_grads
            .keys()
            .all(|k| k.category == k_star && k.dataset.as_deref() == Some(dataset_id)));
        apply_factor_grads(state, &out.factor_grads, lr, config.weight_decay);
        log.push(MaskLogEntry { step: state.step, category: k_star, touched });
        state.step += 1;
    }
    state.stage2_done.insert(dataset_id.to_string());
    Ok(log)
}

/// Uniform draw of the stochastically masked category for one stage-2 step.
pub fn draw_mask_category(rng: &mut Rng) -> Category {
    Category::ALL[rng.below(CATEGORY_COUNT)]
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_analytic_points() {
        let total = 1000;
        let warmup = 100;
        let max = 1e-4;
        assert!((lr_schedule(warmup, total, 0.1, max) - max).abs() < 1e-12);
        assert!(lr_schedule(total, total, 0.1, max).abs() < 1e-12);
        let mid = warmup + (total - warmup) / 2;
        assert!((lr_schedule(mid, total, 0.1, max) - 0.5 * max).abs() < 1e-9);
        assert_eq!(lr_schedule(0, total, 0.1, max), 0.0);
    }

    #[test]
    fn lr_schedule_monotone_sections() {
        let total = 500;
        let max = 3e-4;
        let mut prev = -1.0;
        for step in 0..=50 {
            let lr = lr_schedule(step, total, 0.1, max);
            assert!(lr >= prev);
            prev = lr;
        }
        let mut prev = max + 1.0;
        for step in 50..=total {
            let lr = lr_schedule(step, total, 0.1, max);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn record_name_roundtrip() {
        for key in [
            FactorKey::general(Category::Lens, "fisheye"),
            FactorKey::specific(Category::Domain, "real", "night_front"),
        ] {
            assert_eq!(parse_record_name(&key.record_name()), Some(key.clone()));
        }
    }
}
