//! Factor-alignment accuracy: a frozen convolutional trunk with four
//! independent linear heads, one per factor category.
//!
//! The trunk is trained on one split of rendered samples and then frozen; the
//! heads are trained on a disjoint split with summed per-head cross-entropy.
//! Heads share nothing but the frozen trunk features, so retraining one never
//! moves another's logits.

use crate::ckpt;
use crate::factorspace::{Category, FactorRegistry, FactorTuple, CATEGORY_COUNT};
use crate::nn::{adamw_step, conv, group_norm, Ctx, Moments, ParamSet};
use crate::rng::Rng;
use crate::synthworld::{Image, LabeledSample};
use crate::tensor::{Arr, NodeId, Tape};
use crate::{Error, Result};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const FEATURE_DIM: usize = 64;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FaaConfig {
    /// Ordered value names per category; head output dims match these.
    pub value_names: [Vec<String>; CATEGORY_COUNT],
    pub image_size: usize,
}

impl FaaConfig {
    pub fn from_registry(registry: &FactorRegistry, image_size: usize) -> Self {
        let v = |c: Category| registry.category(c).value_names.clone();
        FaaConfig {
            value_names: [v(Category::Lens), v(Category::Sensor), v(Category::Viewpoint), v(Category::Domain)],
            image_size,
        }
    }
    fn value_index(&self, cat: Category, value: &str) -> Option<usize> {
        self.value_names[cat.index()].iter().position(|v| v == value)
    }
}

/// Frozen trunk + four linear heads.
pub struct FaaClassifier {
    pub params: ParamSet,
    pub config: FaaConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FaaTrainReport {
    /// Held-out accuracy per category (lens, sensor, view, domain).
    pub holdout_accuracy: [f64; 4],
    pub trunk_loss: f32,
    pub head_loss: f32,
}

/// Per-category accuracies plus their mean.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FaaScores {
    pub per_category: [f64; 4],
    pub average: f64,
}

fn init_trunk(ps: &mut ParamSet, rng: &mut Rng) {
    let dims = [(3, 16), (16, 32), (32, FEATURE_DIM)];
    for (i, (cin, cout)) in dims.iter().enumerate() {
        let std = (2.0 / (cin * 9) as f32).sqrt();
        ps.insert(&format!("trunk.c{i}.w"), crate::nn::randn(rng, &[*cout, *cin, 3, 3], std));
        ps.insert(&format!("trunk.c{i}.b"), crate::nn::zeros(&[*cout]));
        ps.insert(&format!("trunk.n{i}.g"), crate::nn::ones(&[*cout]));
        ps.insert(&format!("trunk.n{i}.b"), crate::nn::zeros(&[*cout]));
    }
}

fn init_heads(ps: &mut ParamSet, rng: &mut Rng, config: &FaaConfig, prefix: &str) {
    for cat in Category::ALL {
        let k = config.value_names[cat.index()].len();
        ps.insert(
            &format!("{prefix}.{}.w", cat.name()),
            crate::nn::randn(rng, &[FEATURE_DIM, k], 0.01),
        );
        ps.insert(&format!("{prefix}.{}.b", cat.name()), crate::nn::zeros(&[k]));
    }
}

fn trunk_forward(ctx: &mut Ctx, img: NodeId) -> NodeId {
    let mut x = img;
    for i in 0..3 {
        x = conv(ctx, &format!("trunk.c{i}"), x, 3);
        x = group_norm(ctx, &format!("trunk.n{i}"), x, 8);
        x = ctx.tape.silu(x);
        x = ctx.tape.avg_pool2(x);
    }
    let f = ctx.tape.mean_spatial(x);
    ctx.tape.reshape(f, &[1, FEATURE_DIM])
}

impl FaaClassifier {
    /// Global-pooled trunk features for a set of images, [N, FEATURE_DIM].
    pub fn features(&self, images: &[Image]) -> Array2<f32> {
        let rows: Vec<Vec<f32>> = images
            .par_iter()
            .map(|img| {
                let mut tape = Tape::new();
                let mut ctx = Ctx::new(&mut tape, &self.params, false);
                let x = ctx.tape.constant(img.clone().into_dyn());
                let f = trunk_forward(&mut ctx, x);
                tape.value(f).iter().copied().collect()
            })
            .collect();
        let mut out = Array2::zeros((images.len(), FEATURE_DIM));
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out[[i, j]] = *v;
            }
        }
        out
    }

    /// Head logits for precomputed features.
    pub fn head_logits(&self, features: &Array2<f32>, cat: Category) -> Array2<f32> {
        let w = self.params.get(&format!("heads.{}.w", cat.name()));
        let b = self.params.get(&format!("heads.{}.b", cat.name()));
        let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut logits = features.dot(&w2);
        for mut row in logits.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += b[[j]];
            }
        }
        logits
    }

    /// Argmax value predictions for a set of images, one tuple per image.
    pub fn predict(&self, images: &[Image]) -> Vec<FactorTuple> {
        let feats = self.features(images);
        let mut values: Vec<[String; 4]> = vec![Default::default(); images.len()];
        for cat in Category::ALL {
            let logits = self.head_logits(&feats, cat);
            for (i, row) in logits.rows().into_iter().enumerate() {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                values[i][cat.index()] = self.config.value_names[cat.index()][best].clone();
            }
        }
        values.into_iter().map(|v| FactorTuple { values: v }).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<String> {
        let tensors: BTreeMap<String, Arr> =
            self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        ckpt::save(path, "faa", &serde_json::to_string(&self.config)?, &tensors)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (meta, tensors) = ckpt::load(path)?;
        if meta.kind != "faa" {
            return Err(Error::CorruptCheckpoint(format!("expected faa checkpoint, got '{}'", meta.kind)));
        }
        let config: FaaConfig = serde_json::from_str(&meta.config_json)?;
        let mut params = ParamSet::new();
        for (name, arr) in tensors {
            params.insert(&name, arr);
        }
        Ok(FaaClassifier { params, config })
    }
}

struct Phase<'a> {
    samples: &'a [(usize, &'a LabeledSample)],
    epochs: usize,
    lr: f32,
    weight_decay: f32,
    train_trunk: bool,
    head_prefix: &'a str,
}

fn train_phase(
    params: &mut ParamSet,
    config: &FaaConfig,
    phase: Phase,
    rng: &mut Rng,
) -> Result<f32> {
    const BATCH: usize = 16;
    let mut moments = Moments::default();
    let mut last_loss = f32::NAN;
    for _epoch in 0..phase.epochs {
        let mut order: Vec<usize> = (0..phase.samples.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(BATCH) {
            // per-batch noise augmentation decisions, drawn sequentially
            let noised: Vec<(usize, f32, u64)> = chunk
                .iter()
                .map(|&i| {
                    let sigma = if rng.uniform() < 0.5 { 0.015 } else { 0.0 };
                    (i, sigma, rng.next_u64())
                })
                .collect();
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, params, true);
            let mut feats = Vec::with_capacity(chunk.len());
            let mut targets: [Vec<usize>; 4] = Default::default();
            for (i, sigma, nseed) in &noised {
                let (_, s) = phase.samples[*i];
                let img = if *sigma > 0.0 {
                    let mut nrng = Rng::new(*nseed);
                    s.image.mapv(|v| (v + sigma * nrng.normal()).clamp(0.0, 1.0))
                } else {
                    s.image.clone()
                };
                let x = ctx.tape.constant(img.into_dyn());
                feats.push(trunk_forward(&mut ctx, x));
                for cat in Category::ALL {
                    let idx = config
                        .value_index(cat, s.tuple.value(cat))
                        .ok_or_else(|| Error::Precondition(format!("unknown label {}", s.tuple.value(cat))))?;
                    targets[cat.index()].push(idx);
                }
            }
            let fmat = ctx.tape.concat_rows(&feats);
            let mut losses = Vec::with_capacity(CATEGORY_COUNT);
            for cat in Category::ALL {
                let name = format!("{}.{}", phase.head_prefix, cat.name());
                let logits = crate::nn::linear(&mut ctx, &name, fmat);
                losses.push(ctx.tape.cross_entropy_rows(logits, &targets[cat.index()]));
            }
            let loss = ctx.tape.add_n(&losses);
            let used: Vec<(String, NodeId)> = ctx.used().map(|(n, id)| (n.clone(), *id)).collect();
            drop(ctx);
            let loss_v = tape.scalar(loss);
            if !loss_v.is_finite() {
                return Err(Error::Diverged("classifier training".into()));
            }
            let mut grads = tape.backward(loss);
            let mut named = BTreeMap::new();
            for (name, id) in used {
                let head_param = name.starts_with(phase.head_prefix);
                let trunk_param = name.starts_with("trunk.");
                if head_param || (trunk_param && phase.train_trunk) {
                    if let Some(g) = grads.take(id) {
                        named.insert(name, g);
                    }
                }
            }
            adamw_step(params, &named, &mut moments, phase.lr, phase.weight_decay);
            epoch_loss += loss_v as f64;
            batches += 1;
        }
        last_loss = (epoch_loss / batches.max(1) as f64) as f32;
    }
    Ok(last_loss)
}

/// Train the classifier: trunk (with throwaway heads) on one split, then
/// frozen-trunk heads on a disjoint split with the documented preset
/// (learning rate 1e-4, weight decay 1e-2, 10 epochs, summed cross-entropy).
pub fn train_faa_classifier(
    samples: &[LabeledSample],
    registry: &FactorRegistry,
    image_size: usize,
    seed: u64,
) -> Result<(FaaClassifier, FaaTrainReport)> {
    let config = FaaConfig::from_registry(registry, image_size);
    // label coverage: every value of every category at least 20 times
    for cat in Category::ALL {
        for value in &config.value_names[cat.index()] {
            let count = samples.iter().filter(|s| s.tuple.value(cat) == value).count();
            if count < 20 {
                return Err(Error::Precondition(format!(
                    "label coverage: value '{value}' of {} appears {count} < 20 times",
                    cat.name()
                )));
            }
        }
    }
    let mut rng = Rng::stream(seed, "faa-train", 0);
    let mut indexed: Vec<(usize, &LabeledSample)> = samples.iter().enumerate().collect();
    let mut order: Vec<usize> = (0..indexed.len()).collect();
    rng.shuffle(&mut order);
    indexed = order.iter().map(|&i| (i, samples.get(i).unwrap())).collect();
    let holdout_n = (indexed.len() / 8).max(8);
    let (holdout, rest) = indexed.split_at(holdout_n);
    let half = rest.len() / 2;
    let (trunk_split, head_split) = rest.split_at(half);

    let mut params = ParamSet::new();
    init_trunk(&mut params, &mut rng);
    init_heads(&mut params, &mut rng, &config, "tmpheads");
    init_heads(&mut params, &mut rng, &config, "heads");

    let trunk_loss = train_phase(
        &mut params,
        &config,
        Phase { samples: trunk_split, epochs: 7, lr: 1e-3, weight_decay: 0.0, train_trunk: true, head_prefix: "tmpheads" },
        &mut rng,
    )?;
    // trunk now frozen: heads trained with the documented preset
    let head_loss = train_phase(
        &mut params,
        &config,
        Phase { samples: head_split, epochs: 10, lr: 1e-4, weight_decay: 1e-2, train_trunk: false, head_prefix: "heads" },
        &mut rng,
    )?;

    let classifier = FaaClassifier { params, config };
    let images: Vec<Image> = holdout.iter().map(|(_, s)| s.image.clone()).collect();
    let intended: Vec<FactorTuple> = holdout.iter().map(|(_, s)| s.tuple.clone()).collect();
    let scores = compute_faa(&images, &intended, &classifier)?;
    Ok((
        classifier,
        FaaTrainReport { holdout_accuracy: scores.per_category, trunk_loss, head_loss },
    ))
}

/// Fraction of images whose argmax prediction matches the intended value,
/// per category, plus the mean of the four.
pub fn compute_faa(
    images: &[Image],
    intended: &[FactorTuple],
    classifier: &FaaClassifier,
) -> Result<FaaScores> {
    if images.is_empty() || images.len() != intended.len() {
        return Err(Error::Precondition("need >= 1 image with one intended tuple each".into()));
    }
    let predictions = classifier.predict(images);
    let mut per_category = [0.0f64; 4];
    for (pred, want) in predictions.iter().zip(intended.iter()) {
        for cat in Category::ALL {
            if pred.value(cat) == want.value(cat) {
                per_category[cat.index()] += 1.0;
            }
        }
    }
    for v in per_category.iter_mut() {
        *v /= images.len() as f64;
    }
    let average = per_category.iter().sum::<f64>() / 4.0;
    Ok(FaaScores { per_category, average })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorspace::smoke_registry;
    use crate::synthworld::{build_dataset, RenderConfig};

    #[test]
    fn label_coverage_precondition() {
        let reg = smoke_registry(2);
        let cfg = RenderConfig { height: 8, width: 8, supersample: 2 };
        let mut samples = Vec::new();
        for ds in &reg.datasets {
            samples.extend(build_dataset(ds, &cfg, 1).unwrap());
        }
        assert!(matches!(
            train_faa_classifier(&samples, &reg, 8, 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn initial_summed_ce_is_log_cardinalities() {
        // with near-zero random heads the summed CE at step 0 is ~ sum(ln K)
        let reg = crate::factorspace::default_registry(1);
        let config = FaaConfig::from_registry(&reg, 32);
        let mut params = ParamSet::new();
        let mut rng = Rng::new(1);
        init_trunk(&mut params, &mut rng);
        init_heads(&mut params, &mut rng, &config, "heads");
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &params, false);
        let img = crate::nn::randn(&mut rng, &[3, 32, 32], 0.3);
        let x = ctx.tape.constant(img);
        let f = trunk_forward(&mut ctx, x);
        let mut losses = Vec::new();
        for cat in Category::ALL {
            let logits = crate::nn::linear(&mut ctx, &format!("heads.{}", cat.name()), f);
            losses.push(ctx.tape.cross_entropy_rows(logits, &[0]));
        }
        let total = ctx.tape.add_n(&losses);
        let v = tape.scalar(total) as f64;
        let expected = (2f64).ln() + (5f64).ln() + (5f64).ln() + (3f64).ln();
        assert!(
            (v - expected).abs() / expected < 0.10,
            "initial loss {v} vs analytic {expected}"
        );
    }

    #[test]
    fn heads_are_independent_given_trunk() {
        // retraining one head leaves another head's logits bit-identical
        let reg = smoke_registry(24);
        let cfg = RenderConfig { height: 8, width: 8, supersample: 2 };
        let mut samples = Vec::new();
        for ds in &reg.datasets {
            samples.extend(build_dataset(ds, &cfg, 5).unwrap());
        }
        let (clf, _) = train_faa_classifier(&samples, &reg, 8, 3).unwrap();
        let probe = samples[0].image.clone();
        let feats = clf.features(&[probe]);
        let lens_before = clf.head_logits(&feats, Category::Lens);
        // retrain a different head set over the frozen trunk; the lens head
        // shares only trunk features and must not move
        let mut params2 = clf.params.clone();
        let indexed: Vec<(usize, &LabeledSample)> = samples.iter().enumerate().collect();
        let mut rng = Rng::new(9);
        train_phase(
            &mut params2,
            &clf.config,
            Phase { samples: &indexed, epochs: 1, lr: 1e-3, weight_decay: 0.0, train_trunk: false, head_prefix: "tmpheads" },
            &mut rng,
        )
        .unwrap();
        let clf2 = FaaClassifier { params: params2, config: clf.config.clone() };
        let lens_after = clf2.head_logits(&feats, Category::Lens);
        assert_eq!(lens_before, lens_after);
    }

    #[test]
    fn perfect_predictions_give_unit_scores() {
        let reg = smoke_registry(30);
        let cfg = RenderConfig { height: 8, width: 8, supersample: 2 };
        let mut samples = Vec::new();
        for ds in &reg.datasets {
            samples.extend(build_dataset(ds, &cfg, 7).unwrap());
        }
        let (clf, _) = train_faa_classifier(&samples, &reg, 8, 5).unwrap();
        let images: Vec<Image> = samples.iter().take(16).map(|s| s.image.clone()).collect();
        let intended = clf.predict(&images);
        // scoring the classifier's own predictions is exactly 1.0 everywhere
        let scores = compute_faa(&images, &intended, &clf).unwrap();
        assert_eq!(scores.per_category, [1.0; 4]);
        assert_eq!(scores.average, 1.0);
    }
}
