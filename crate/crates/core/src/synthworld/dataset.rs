//! Dataset synthesis and on-disk layout.
//!
//! Each dataset is a directory of lossless 8-bit RGB PNGs plus a
//! `metadata.jsonl` file with one record per sample:
//! `{"dataset_id", "index", "tuple", "caption_ids", "seed"}` where `tuple` is
//! the canonical string form `lens=..,sensor=..,view=..,domain=..`.

use super::render::render_scene;
use super::scene::SceneSpec;
use super::{LabeledSample, RenderConfig};
use crate::factorspace::{Category, DatasetDescriptor, FactorTuple};
use crate::imageio;
use crate::rng::Rng;
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// JSONL metadata record for one sample.
#[derive(Serialize, Deserialize, Debug)]
pub struct SampleRecord {
    pub dataset_id: String,
    pub index: usize,
    pub tuple: String,
    pub caption_ids: Vec<usize>,
    pub seed: u64,
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Render every sample of a dataset. Fixed factors stay constant, per-image
/// factors are drawn uniformly from their allowed sets, scenes are independent
/// given the seed, and the whole construction is deterministic in
/// (descriptor, config, seed).
pub fn build_dataset(
    descriptor: &DatasetDescriptor,
    config: &RenderConfig,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    let ds_hash = fnv(&descriptor.id);
    // draw tuples and scene seeds sequentially so parallel rendering cannot
    // change the sampled sequence
    let mut draws = Vec::with_capacity(descriptor.sample_count);
    let mut rng = Rng::stream(seed, "dataset-factors", ds_hash);
    for index in 0..descriptor.sample_count {
        let mut values: [String; 4] = Default::default();
        for cat in Category::ALL {
            let v = if let Some(fixed) = descriptor.fixed_factors.get(&cat) {
                fixed.clone()
            } else {
                let set = &descriptor.per_image_factors[&cat];
                set[rng.below(set.len())].clone()
            };
            values[cat.index()] = v;
        }
        let scene_seed = seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(ds_hash)
            .wrapping_add(index as u64);
        draws.push((FactorTuple { values }, scene_seed));
    }
    draws
        .into_par_iter()
        .map(|(tuple, scene_seed)| {
            let scene = SceneSpec::sample(scene_seed);
            let image = render_scene(&scene, &tuple, config)?;
            Ok(LabeledSample {
                image,
                tuple,
                caption_ids: scene.caption_ids.clone(),
                dataset_id: descriptor.id.clone(),
                scene_seed,
            })
        })
        .collect()
}

/// Write a dataset directory: `img_<index>.png` per sample plus `metadata.jsonl`.
pub fn write_dataset(root: &Path, samples: &[LabeledSample]) -> Result<()> {
    if samples.is_empty() {
        return Ok(());
    }
    let dir = root.join(&samples[0].dataset_id);
    std::fs::create_dir_all(&dir)?;
    let meta_path = dir.join("metadata.jsonl");
    let mut meta = std::io::BufWriter::new(std::fs::File::create(meta_path)?);
    for (index, s) in samples.iter().enumerate() {
        let img_path = dir.join(format!("img_{index:05}.png"));
        imageio::save_png(&img_path, &s.image)?;
        let record = SampleRecord {
            dataset_id: s.dataset_id.clone(),
            index,
            tuple: s.tuple.to_string(),
            caption_ids: s.caption_ids.clone(),
            seed: s.scene_seed,
        };
        serde_json::to_writer(&mut meta, &record)?;
        meta.write_all(b"\n")?;
    }
    meta.flush()?;
    Ok(())
}

/// Load a dataset directory written by [`write_dataset`].
pub fn load_dataset(root: &Path, dataset_id: &str) -> Result<Vec<LabeledSample>> {
    let dir = root.join(dataset_id);
    let meta_path = dir.join("metadata.jsonl");
    let file = std::fs::File::open(&meta_path)
        .map_err(|_| Error::UnknownDataset(format!("{dataset_id} (no {meta_path:?})")))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)?;
        let img_path = dir.join(format!("img_{:05}.png", record.index));
        let image = imageio::load_png(&img_path)?;
        out.push(LabeledSample {
            image,
            tuple: FactorTuple::parse(&record.tuple)?,
            caption_ids: record.caption_ids,
            dataset_id: record.dataset_id,
            scene_seed: record.seed,
        });
    }
    Ok(out)
}
