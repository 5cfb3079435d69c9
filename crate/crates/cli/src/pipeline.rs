//! Pipeline drivers behind the CLI subcommands. The acceptance suite calls
//! these directly, so every driver is a plain function over typed arguments.

use crate::manifest::ManifestBuilder;
use factorlab::diffusion::{
    encode_cond, guided_sample, pretrain_backbone, Backbone, BackboneConfig, PretrainConfig,
    SampleOpts,
};
use factorlab::evalsuite::{
    compute_faa, diversity_score, frechet_feature_distance, project_embeddings,
    train_faa_classifier, FaaClassifier, MetricReport,
};
use factorlab::factorspace::{
    novel_tuples, observed_tuples, parse_registry, registry_to_toml, validate_tuple, Category,
    FactorRegistry, FactorTuple, Membership,
};
use factorlab::multitrain::{
    stage1_train, stage2_train, InversionState, TrainConfig,
};
use factorlab::synthworld::{
    build_dataset, extract_edges, load_dataset, oracle_classify, write_dataset, EdgeMap, Image,
    LabeledSample, RenderConfig, SceneSpec,
};
use factorlab::textencode::{
    assemble_prompt, zeroshot_prompt, PromptSpec, Stage, DEFAULT_N,
};
use factorlab::{imageio, Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const DEFAULT_SAMPLES_PER_DATASET: usize = 64;
pub const DEFAULT_IMAGE_SIZE: usize = 32;

// ---- shared loading -----------------------------------------------------

pub fn registry_file(data_root: &Path) -> PathBuf {
    data_root.join("registry.toml")
}

pub fn load_registry(data_root: &Path) -> Result<FactorRegistry> {
    let path = registry_file(data_root);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| Error::Precondition(format!("no registry at {path:?}; run `synth` first")))?;
    parse_registry(&text)
}

pub fn load_world(data_root: &Path) -> Result<(FactorRegistry, BTreeMap<String, Vec<LabeledSample>>)> {
    let registry = load_registry(data_root)?;
    let mut data = BTreeMap::new();
    for ds in &registry.datasets {
        data.insert(ds.id.clone(), load_dataset(data_root, &ds.id)?);
    }
    Ok((registry, data))
}

fn load_backbone(path: &Path) -> Result<Backbone> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    Backbone::load(path)
}

fn check_digest(backbone: &Backbone, state: &InversionState) -> Result<()> {
    match (&backbone.digest, &state.backbone_digest) {
        (Some(b), Some(s)) if b == s => Ok(()),
        (Some(b), Some(s)) => Err(Error::DigestMismatch(format!(
            "inversion state was trained against backbone {s}, loaded {b}"
        ))),
        _ => Err(Error::DigestMismatch("missing backbone digest".into())),
    }
}

// ---- synth ----------------------------------------------------------------

pub struct SynthArgs {
    pub data_root: PathBuf,
    pub registry: Option<PathBuf>,
    pub samples: Option<usize>,
    pub size: usize,
    pub seed: u64,
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut registry = match &args.registry {
        Some(path) => parse_registry(&std::fs::read_to_string(path)?)?,
        None => factorlab::factorspace::default_registry(
            args.samples.unwrap_or(DEFAULT_SAMPLES_PER_DATASET),
        ),
    };
    if let Some(n) = args.samples {
        for ds in registry.datasets.iter_mut() {
            ds.sample_count = n;
        }
    }
    registry.validate()?;
    let config = RenderConfig::new(args.size)?;
    let mut mb = ManifestBuilder::new(
        "synth",
        &format!("{{\"size\":{},\"seed\":{}}}", args.size, args.seed),
    );
    std::fs::create_dir_all(&args.data_root)?;
    for ds in &registry.datasets {
        let samples = build_dataset(ds, &config, args.seed)?;
        write_dataset(&args.data_root, &samples)?;
        mb.artifact(&args.data_root.join(&ds.id));
    }
    let reg_path = registry_file(&args.data_root);
    std::fs::write(&reg_path, registry_to_toml(&registry))?;
    mb.artifact(&reg_path);
    mb.write(&args.data_root)?;
    Ok(())
}

// ---- pretrain ----------------------------------------------------------

pub struct PretrainArgs {
    pub data_root: PathBuf,
    pub out: PathBuf,
    pub epochs: usize,
    pub control: bool,
    pub size: usize,
    pub seed: u64,
}

pub fn pretrain(args: &PretrainArgs) -> Result<String> {
    let (_, data) = load_world(&args.data_root)?;
    let all: Vec<LabeledSample> = data.into_values().flatten().collect();
    let bcfg = BackboneConfig {
        image_size: args.size,
        denoiser: factorlab::nn::DenoiserConfig { control: args.control, ..Default::default() },
        ..Default::default()
    };
    let pcfg = PretrainConfig { epochs: args.epochs, seed: args.seed, ..Default::default() };
    let mb_cfg = serde_json::to_string(&pcfg)?;
    let mut mb = ManifestBuilder::new("pretrain", &mb_cfg);
    mb.input(&registry_file(&args.data_root));
    let (mut backbone, report) =
        pretrain_backbone(&all, bcfg, factorlab::textencode::base_vocabulary().clone(), &pcfg)?;
    let digest = backbone.save(&args.out)?;
    mb.artifact(&args.out);
    let log_path = args.out.with_extension("log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    for (epoch, (tr, va)) in report.train_losses.iter().zip(report.val_losses.iter()).enumerate() {
        writeln!(
            log,
            "{}",
            serde_json::json!({"epoch": epoch, "train_loss": tr, "val_loss": va})
        )?;
    }
    writeln!(
        log,
        "{}",
        serde_json::json!({"val_initial": report.val_initial, "val_final": report.val_final, "steps": report.steps})
    )?;
    log.flush()?;
    mb.artifact(&log_path);
    mb.write(args.out.parent().unwrap_or(Path::new(".")))?;
    Ok(digest)
}

// ---- inversion stages ----------------------------------------------------

pub struct InvertArgs {
    pub data_root: PathBuf,
    pub backbone: PathBuf,
    pub state_in: Option<PathBuf>,
    pub out: PathBuf,
    pub config: TrainConfig,
    /// For stage 2: dataset ids (empty means every dataset).
    pub datasets: Vec<String>,
}

pub fn invert_s1(args: &InvertArgs) -> Result<()> {
    let backbone = load_backbone(&args.backbone)?;
    let (registry, data) = load_world(&args.data_root)?;
    let mut state = InversionState::init(&registry, &backbone, args.config.n_vectors)?;
    let mut mb = ManifestBuilder::new("invert-s1", &serde_json::to_string(&args.config)?);
    mb.input(&args.backbone);
    let stats = stage1_train(&mut state, &backbone, &registry, &data, &args.config)?;
    state.save(&args.out)?;
    mb.artifact(&args.out);
    let log_path = args.out.with_extension("log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    for s in &stats {
        writeln!(log, "{}", serde_json::to_string(s)?)?;
    }
    log.flush()?;
    mb.artifact(&log_path);
    mb.write(args.out.parent().unwrap_or(Path::new(".")))?;
    Ok(())
}

pub fn invert_s2(args: &InvertArgs) -> Result<()> {
    let backbone = load_backbone(&args.backbone)?;
    let (registry, data) = load_world(&args.data_root)?;
    let state_path = args.state_in.as_ref().unwrap_or(&args.out);
    let mut state = InversionState::load(state_path)?;
    check_digest(&backbone, &state)?;
    // stage 2 always continues with the stage-1 state's vector count
    let mut config = args.config.clone();
    config.n_vectors = state.n;
    let ids: Vec<String> = if args.datasets.is_empty() {
        registry.datasets.iter().map(|d| d.id.clone()).collect()
    } else {
        args.datasets.clone()
    };
    let mut mb = ManifestBuilder::new("invert-s2", &serde_json::to_string(&args.config)?);
    mb.input(&args.backbone);
    mb.input(state_path);
    let log_path = args.out.with_extension("mask.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    for id in &ids {
        let samples = data
            .get(id)
            .ok_or_else(|| Error::UnknownDataset(id.clone()))?;
        let entries = stage2_train(&mut state, &backbone, id, samples, &config)?;
        for e in &entries {
            writeln!(log, "{}", serde_json::json!({"dataset": id, "step": e.step, "category": e.category.name(), "touched": e.touched}))?;
        }
    }
    log.flush()?;
    state.save(&args.out)?;
    mb.artifact(&args.out);
    mb.artifact(&log_path);
    mb.write(args.out.parent().unwrap_or(Path::new(".")))?;
    Ok(())
}

// ---- generation ----------------------------------------------------------

/// Which conditioning a generated image uses.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum Method {
    /// Learned factor tokens (general, optionally specific per category).
    Inversion,
    /// Frozen backbone with factor names as plain caption words.
    Zeroshot,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Inversion => "inversion",
            Method::Zeroshot => "zeroshot",
        }
    }
}

pub struct GenerateArgs {
    pub data_root: PathBuf,
    pub backbone: PathBuf,
    pub inversion: Option<PathBuf>,
    pub tuple: String,
    pub count: usize,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f32,
    pub control_from: Option<PathBuf>,
    /// category=dataset bindings for specific tokens.
    pub specific: Vec<String>,
    pub zeroshot: bool,
    pub out_dir: PathBuf,
}

fn parse_specific(entries: &[String]) -> Result<BTreeMap<Category, String>> {
    let mut map = BTreeMap::new();
    for e in entries {
        let (k, v) = e
            .split_once('=')
            .ok_or_else(|| Error::Precondition(format!("--specific expects category=dataset, got '{e}'")))?;
        let cat = Category::from_name(k.trim())
            .ok_or_else(|| Error::Precondition(format!("unknown category '{k}'")))?;
        map.insert(cat, v.trim().to_string());
    }
    Ok(map)
}

/// Build the per-image prompt for a tuple: a fresh scene caption plus either
/// learned factor slots or plain factor words.
fn prompt_for(
    tuple: &FactorTuple,
    scene_seed: u64,
    method: Method,
    specific: &BTreeMap<Category, String>,
    n: usize,
    vocab: &factorlab::textencode::Vocabulary,
) -> Result<PromptSpec> {
    let scene = SceneSpec::sample(scene_seed);
    match method {
        Method::Inversion => assemble_prompt(
            tuple,
            &scene.caption_ids,
            Stage::Inference,
            if specific.is_empty() { None } else { Some(specific) },
            n,
        ),
        Method::Zeroshot => zeroshot_prompt(tuple, &scene.caption_ids, vocab),
    }
}

/// Sample `count` images for one tuple; pure given the seed.
#[allow(clippy::too_many_arguments)]
pub fn sample_images(
    backbone: &Backbone,
    state: Option<&InversionState>,
    tuple: &FactorTuple,
    method: Method,
    specific: &BTreeMap<Category, String>,
    count: usize,
    seed: u64,
    opts: &SampleOpts,
    controls: Option<&[EdgeMap]>,
) -> Result<Vec<Image>> {
    let n = state.map(|s| s.n).unwrap_or(DEFAULT_N);
    let null_cond = encode_cond(backbone, &PromptSpec::null(n), &factorlab::textencode::NoFactors)?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let scene_seed = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(i as u64)
                .wrapping_add(fnv(&tuple.to_string()));
            let prompt = prompt_for(tuple, scene_seed, method, specific, n, &backbone.vocab)?;
            let cond = match (method, state) {
                (Method::Inversion, Some(st)) => encode_cond(backbone, &prompt, st)?,
                (Method::Inversion, None) => {
                    return Err(Error::Precondition(
                        "inversion sampling needs an inversion checkpoint".into(),
                    ))
                }
                (Method::Zeroshot, _) => {
                    encode_cond(backbone, &prompt, &factorlab::textencode::NoFactors)?
                }
            };
            let control = controls.map(|c| &c[i % c.len()]);
            guided_sample(
                backbone,
                &cond,
                &null_cond,
                &SampleOpts { seed: scene_seed ^ 0x5bd1_e995, ..*opts },
                control,
            )
        })
        .collect()
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

pub fn generate(args: &GenerateArgs) -> Result<Vec<PathBuf>> {
    let registry = load_registry(&args.data_root)?;
    let tuple = FactorTuple::parse(&args.tuple)?;
    match validate_tuple(&tuple, &registry) {
        Membership::Invalid => {
            return Err(Error::InvalidTuple(format!("'{}' has unknown values", args.tuple)))
        }
        Membership::Observed | Membership::Novel => {}
    }
    let backbone = load_backbone(&args.backbone)?;
    let state = match &args.inversion {
        Some(path) => {
            let st = InversionState::load(path)?;
            check_digest(&backbone, &st)?;
            Some(st)
        }
        None => None,
    };
    let method = if args.zeroshot { Method::Zeroshot } else { Method::Inversion };
    if method == Method::Inversion && state.is_none() {
        return Err(Error::Precondition(
            "generation with learned tokens needs --inversion (or pass --zeroshot)".into(),
        ));
    }
    let specific = parse_specific(&args.specific)?;
    let controls: Option<Vec<EdgeMap>> = match &args.control_from {
        Some(path) => {
            let img = imageio::load_png(path)?;
            Some(vec![extract_edges(&img)])
        }
        None => None,
    };
    let opts = SampleOpts { steps: args.steps, guidance: args.guidance, seed: args.seed };
    let mut mb = ManifestBuilder::new(
        "generate",
        &serde_json::json!({"tuple": args.tuple, "count": args.count, "seed": args.seed,
                            "steps": args.steps, "guidance": args.guidance, "method": method.tag()})
            .to_string(),
    );
    mb.input(&args.backbone);
    if let Some(p) = &args.inversion {
        mb.input(p);
    }
    let images = sample_images(
        &backbone,
        state.as_ref(),
        &tuple,
        method,
        &specific,
        args.count,
        args.seed,
        &opts,
        controls.as_deref(),
    )?;
    std::fs::create_dir_all(&args.out_dir)?;
    let mut paths = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let path = args.out_dir.join(format!("gen_{i:04}.png"));
        imageio::save_png(&path, img)?;
        mb.artifact(&path);
        paths.push(path);
    }
    mb.write(&args.out_dir)?;
    Ok(paths)
}

// ---- evaluation ----------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum EvalMode {
    T2i,
    Edge,
}

impl EvalMode {
    pub fn tag(self) -> &'static str {
        match self {
            EvalMode::T2i => "t2i",
            EvalMode::Edge => "edge",
        }
    }
}

pub struct EvaluateArgs {
    pub data_root: PathBuf,
    pub backbone: PathBuf,
    pub inversion: PathBuf,
    pub faa: Option<PathBuf>,
    pub suite: String,
    pub images_per_tuple_existing: usize,
    pub images_per_tuple_novel: usize,
    pub novel_tuple_count: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Evenly spaced selection over the lexicographically ordered novel set.
pub fn pick_novel_tuples(registry: &FactorRegistry, count: usize) -> Vec<FactorTuple> {
    let novel: Vec<FactorTuple> = novel_tuples(registry).into_iter().collect();
    if novel.len() <= count {
        return novel;
    }
    (0..count)
        .map(|i| novel[i * novel.len() / count].clone())
        .collect()
}

/// Train (or load) the factor-alignment classifier on freshly rendered
/// samples, disjoint by seed from the training world.
pub fn faa_classifier(
    registry: &FactorRegistry,
    size: usize,
    path: &Path,
    seed: u64,
) -> Result<FaaClassifier> {
    if path.exists() {
        return FaaClassifier::load(path);
    }
    let config = RenderConfig::new(size)?;
    let mut samples = Vec::new();
    for ds in &registry.datasets {
        let mut d = ds.clone();
        d.sample_count = d.sample_count.max(48);
        samples.extend(build_dataset(&d, &config, seed ^ 0xFAA_C1A5)?);
    }
    let (clf, report) = train_faa_classifier(&samples, registry, size, seed)?;
    clf.save(path)?;
    std::fs::write(
        path.with_extension("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(clf)
}

/// Fresh reference renders for a tuple set (held-out seeds).
fn reference_renders(
    tuples: &[FactorTuple],
    per_tuple: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<(FactorTuple, Image)>> {
    let config = RenderConfig::new(size)?;
    tuples
        .par_iter()
        .flat_map(|t| {
            (0..per_tuple)
                .map(|i| (t.clone(), i))
                .collect::<Vec<_>>()
                .into_par_iter()
        })
        .map(|(t, i)| {
            let scene_seed = seed
                .wrapping_mul(0xA5A5_5A5A_DEAD_BEEF)
                .wrapping_add(fnv(&t.to_string()))
                .wrapping_add(i as u64);
            let scene = SceneSpec::sample(scene_seed);
            let img = factorlab::synthworld::render_scene(&scene, &t, &config)?;
            Ok((t, img))
        })
        .collect()
}

pub struct SuiteOutcome {
    pub report: MetricReport,
    pub images: Vec<(FactorTuple, Image)>,
}

/// Generate and score one (suite, method, mode) configuration.
#[allow(clippy::too_many_arguments)]
pub fn run_config(
    backbone: &Backbone,
    state: &InversionState,
    clf: &FaaClassifier,
    tuples: &[FactorTuple],
    per_tuple: usize,
    method: Method,
    mode: EvalMode,
    suite: &str,
    seed: u64,
    references: &[(FactorTuple, Image)],
) -> Result<SuiteOutcome> {
    let opts = SampleOpts::default();
    let mut images: Vec<(FactorTuple, Image)> = Vec::with_capacity(tuples.len() * per_tuple);
    for tuple in tuples {
        let controls: Option<Vec<EdgeMap>> = match mode {
            EvalMode::T2i => None,
            EvalMode::Edge => {
                // edge maps from held-out reference renders of the same tuple
                let refs: Vec<&Image> = references
                    .iter()
                    .filter(|(t, _)| t == tuple)
                    .map(|(_, img)| img)
                    .collect();
                Some(refs.iter().map(|img| extract_edges(img)).collect())
            }
        };
        let imgs = sample_images(
            backbone,
            Some(state),
            tuple,
            method,
            &BTreeMap::new(),
            per_tuple,
            seed ^ fnv(method.tag()) ^ fnv(mode.tag()),
            &opts,
            controls.as_deref(),
        )?;
        images.extend(imgs.into_iter().map(|img| (tuple.clone(), img)));
    }
    let imgs: Vec<Image> = images.iter().map(|(_, img)| img.clone()).collect();
    let intended: Vec<FactorTuple> = images.iter().map(|(t, _)| t.clone()).collect();
    let faa = compute_faa(&imgs, &intended, clf)?;
    let ref_imgs: Vec<Image> = references.iter().map(|(_, img)| img.clone()).collect();
    let ffd = if ref_imgs.len() > 64 && imgs.len() > 64 {
        Some(frechet_feature_distance(&imgs, &ref_imgs, clf)?)
    } else {
        None
    };
    let diversity = diversity_score(&imgs, clf)?;
    let report = MetricReport {
        suite: suite.to_string(),
        method: method.tag().to_string(),
        mode: mode.tag().to_string(),
        faa: faa.per_category,
        faa_average: faa.average,
        ffd,
        diversity,
        sample_count: imgs.len(),
        tuple_count: tuples.len(),
    };
    report.validate()?;
    Ok(SuiteOutcome { report, images })
}

#[derive(Serialize, Deserialize)]
pub struct OracleCheck {
    pub total: usize,
    pub lens_confident: usize,
    pub lens_confident_agree: usize,
    pub lens_agreement_on_confident: f64,
}

/// Oracle cross-check: lens agreement on confidently flagged generations.
pub fn oracle_lens_check(images: &[(FactorTuple, Image)]) -> OracleCheck {
    let reports: Vec<(bool, bool)> = images
        .par_iter()
        .map(|(tuple, img)| {
            let rep = oracle_classify(img);
            (rep.confident[0], rep.tuple.value(Category::Lens) == tuple.value(Category::Lens))
        })
        .collect();
    let confident = reports.iter().filter(|(c, _)| *c).count();
    let agree = reports.iter().filter(|(c, a)| *c && *a).count();
    OracleCheck {
        total: images.len(),
        lens_confident: confident,
        lens_confident_agree: agree,
        lens_agreement_on_confident: agree as f64 / confident.max(1) as f64,
    }
}

pub struct EvalOutput {
    pub reports: Vec<MetricReport>,
    pub oracle: Option<OracleCheck>,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<EvalOutput> {
    let registry = load_registry(&args.data_root)?;
    let backbone = load_backbone(&args.backbone)?;
    let state = InversionState::load(&args.inversion)?;
    check_digest(&backbone, &state)?;
    let size = backbone.config.image_size;
    let faa_path = args
        .faa
        .clone()
        .unwrap_or_else(|| args.out_dir.join("faa.ckpt"));
    std::fs::create_dir_all(&args.out_dir)?;
    let clf = faa_classifier(&registry, size, &faa_path, args.seed)?;

    let mut suites: Vec<(&str, Vec<FactorTuple>, usize)> = Vec::new();
    if args.suite == "existing" || args.suite == "all" {
        let observed: Vec<FactorTuple> = observed_tuples(&registry).into_iter().collect();
        suites.push(("existing", observed, args.images_per_tuple_existing));
    }
    if args.suite == "novel" || args.suite == "all" {
        suites.push((
            "novel",
            pick_novel_tuples(&registry, args.novel_tuple_count),
            args.images_per_tuple_novel,
        ));
    }
    if suites.is_empty() {
        return Err(Error::Precondition(format!(
            "unknown suite '{}'; expected existing, novel or all",
            args.suite
        )));
    }

    let mut mb = ManifestBuilder::new(
        "evaluate",
        &serde_json::json!({"suite": args.suite, "seed": args.seed}).to_string(),
    );
    mb.input(&args.backbone);
    mb.input(&args.inversion);
    let mut reports = Vec::new();
    let mut oracle = None;
    for (suite, tuples, per_tuple) in &suites {
        let references = reference_renders(tuples, (*per_tuple).max(8), size, args.seed ^ 0x0EF5)?;
        for mode in [EvalMode::T2i, EvalMode::Edge] {
            let mut montage_rows: Vec<Vec<Image>> = Vec::new();
            montage_rows.push(
                tuples
                    .iter()
                    .take(10)
                    .filter_map(|t| {
                        references.iter().find(|(rt, _)| rt == t).map(|(_, img)| img.clone())
                    })
                    .collect(),
            );
            for method in [Method::Zeroshot, Method::Inversion] {
                let outcome = run_config(
                    &backbone, &state, &clf, tuples, *per_tuple, method, mode, suite, args.seed,
                    &references,
                )?;
                let path = args
                    .out_dir
                    .join(format!("metrics_{suite}_{}_{}.json", mode.tag(), method.tag()));
                std::fs::write(&path, serde_json::to_string_pretty(&outcome.report)?)?;
                mb.artifact(&path);
                reports.push(outcome.report);
                montage_rows.push(
                    tuples
                        .iter()
                        .take(10)
                        .filter_map(|t| {
                            outcome.images.iter().find(|(it, _)| it == t).map(|(_, img)| img.clone())
                        })
                        .collect(),
                );
                if *suite == "existing" && mode == EvalMode::T2i && method == Method::Inversion {
                    let check = oracle_lens_check(&outcome.images);
                    let path = args.out_dir.join("oracle_check.json");
                    std::fs::write(&path, serde_json::to_string_pretty(&check)?)?;
                    mb.artifact(&path);
                    oracle = Some(check);
                }
            }
            let montage = imageio::montage(&montage_rows)?;
            let mpath = args.out_dir.join(format!("montage_{suite}_{}.png", mode.tag()));
            imageio::save_png(&mpath, &montage)?;
            mb.artifact(&mpath);
        }
    }
    mb.write(&args.out_dir)?;
    Ok(EvalOutput { reports, oracle })
}

// ---- ablation sweep --------------------------------------------------------

pub struct SweepArgs {
    pub data_root: PathBuf,
    pub backbone: PathBuf,
    pub ns: Vec<usize>,
    pub epochs: usize,
    pub images_per_tuple: usize,
    pub tuple_count: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct SweepEntry {
    pub n: usize,
    pub faa_average: f64,
    pub faa: [f64; 4],
    pub ffd: Option<f64>,
}

/// Sweep the learnable-vector count: rerun stage 1 per n and score FAA/FFD on
/// a fixed observed-tuple subset. An n that overflows the token budget is a
/// hard error before any training starts.
pub fn sweep_n(args: &SweepArgs) -> Result<Vec<SweepEntry>> {
    let registry = load_registry(&args.data_root)?;
    // validate the whole sweep upfront: 4n plus the longest caption must fit
    for &n in &args.ns {
        let len = 4 * n + 15;
        if len > factorlab::textencode::L_MAX {
            return Err(Error::PromptOverflow { len, max: factorlab::textencode::L_MAX });
        }
    }
    let backbone = load_backbone(&args.backbone)?;
    let (_, data) = load_world(&args.data_root)?;
    let size = backbone.config.image_size;
    std::fs::create_dir_all(&args.out_dir)?;
    let clf = faa_classifier(&registry, size, &args.out_dir.join("faa.ckpt"), args.seed)?;
    let observed: Vec<FactorTuple> = observed_tuples(&registry).into_iter().collect();
    let tuples: Vec<FactorTuple> = observed
        .iter()
        .step_by((observed.len() / args.tuple_count.max(1)).max(1))
        .take(args.tuple_count)
        .cloned()
        .collect();
    let references = reference_renders(&tuples, args.images_per_tuple.max(8), size, args.seed ^ 0x0EF5)?;
    let mut entries = Vec::new();
    for &n in &args.ns {
        let config = TrainConfig { n_vectors: n, epochs: args.epochs, seed: args.seed, ..Default::default() };
        let mut state = InversionState::init(&registry, &backbone, n)?;
        stage1_train(&mut state, &backbone, &registry, &data, &config)?;
        let outcome = run_config(
            &backbone,
            &state,
            &clf,
            &tuples,
            args.images_per_tuple,
            Method::Inversion,
            EvalMode::T2i,
            "ablation",
            args.seed,
            &references,
        )?;
        entries.push(SweepEntry {
            n,
            faa_average: outcome.report.faa_average,
            faa: outcome.report.faa,
            ffd: outcome.report.ffd,
        });
    }
    let path = args.out_dir.join("ablation.json");
    std::fs::write(&path, serde_json::to_string_pretty(&entries)?)?;
    Ok(entries)
}

// ---- projection + report ---------------------------------------------------

pub fn project(inversion: &Path, out: &Path) -> Result<f64> {
    let state = InversionState::load(inversion)?;
    let proj = project_embeddings(&state)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, serde_json::to_string_pretty(&proj)?)?;
    Ok(proj.own_match_rate)
}

pub fn report(dir: &Path, out: &Path) -> Result<()> {
    let mut reports: Vec<MetricReport> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("metrics_") && name.ends_with(".json") {
            let text = std::fs::read_to_string(&path)?;
            if let Ok(r) = serde_json::from_str::<MetricReport>(&text) {
                reports.push(r);
            }
        }
    }
    reports.sort_by(|a, b| (a.suite.clone(), a.mode.clone(), a.method.clone())
        .cmp(&(b.suite.clone(), b.mode.clone(), b.method.clone())));
    let mut md = String::from(
        "| suite | mode | method | FAA lens | FAA sensor | FAA view | FAA domain | FAA avg | FFD | DS | images |\n|---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in &reports {
        md.push_str(&format!(
            "| {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {} | {:.3} | {} |\n",
            r.suite,
            r.mode,
            r.method,
            r.faa[0],
            r.faa[1],
            r.faa[2],
            r.faa[3],
            r.faa_average,
            r.ffd.map(|f| format!("{f:.2}")).unwrap_or_else(|| "-".into()),
            r.diversity,
            r.sample_count,
        ));
    }
    std::fs::write(out.with_extension("md"), md)?;
    std::fs::write(out, serde_json::to_string_pretty(&reports)?)?;
    Ok(())
}
