//! factorlab: synthesize the factor world, pretrain the frozen backbone,
//! run two-stage factor inversion, generate recombined images and evaluate.

use clap::{Parser, Subcommand};
use factorlab::multitrain::TrainConfig;
use factorlab::Error;
use factorlab_cli::pipeline::*;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "factorlab", version, about = "imaging-factor disentanglement laboratory")]
struct Cli {
    /// Root directory for datasets and the registry (env: FACTORLAB_DATA_ROOT)
    #[arg(long, global = true, env = "FACTORLAB_DATA_ROOT", default_value = "data")]
    data_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic factor world to disk
    Synth {
        /// Registry config file (TOML); the built-in default world otherwise
        #[arg(long)]
        registry: Option<PathBuf>,
        /// Samples per dataset (overrides the registry's counts)
        #[arg(long)]
        samples: Option<usize>,
        /// Image side in pixels (32 or 64)
        #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the frozen diffusion backbone on the synthesized world
    Pretrain {
        #[arg(long, default_value = "backbone.ckpt")]
        out: PathBuf,
        #[arg(long, default_value_t = 14)]
        epochs: usize,
        /// Train with the edge control channel
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        control: bool,
        #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stage 1: learn general factor embeddings over factor-overlap batches
    InvertS1 {
        #[arg(long, default_value = "backbone.ckpt")]
        backbone: PathBuf,
        #[arg(long, default_value = "inversion.ckpt")]
        out: PathBuf,
        /// Learnable vectors per factor token
        #[arg(long, default_value_t = factorlab::textencode::DEFAULT_N)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        max_lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stage 2: per-dataset specific tokens with stochastic masking
    InvertS2 {
        #[arg(long, default_value = "backbone.ckpt")]
        backbone: PathBuf,
        /// Stage-1 state to refine (defaults to --out)
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long, default_value = "inversion.ckpt")]
        out: PathBuf,
        /// Dataset ids to adapt (every dataset when omitted)
        #[arg(long)]
        dataset: Vec<String>,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        max_lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate images for a factor tuple
    Generate {
        /// Tuple in the form lens=...,sensor=...,view=...,domain=...
        tuple: String,
        #[arg(long, default_value = "backbone.ckpt")]
        backbone: PathBuf,
        #[arg(long)]
        inversion: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 2.5)]
        guidance: f32,
        /// Condition on the edge map of this image
        #[arg(long)]
        control_from: Option<PathBuf>,
        /// Bind a category to a dataset-specific token, e.g. sensor=heatcam_front
        #[arg(long)]
        specific: Vec<String>,
        /// Use factor names as plain caption words (frozen-backbone baseline)
        #[arg(long, default_value_t = false)]
        zeroshot: bool,
        #[arg(long, default_value = "generated")]
        out_dir: PathBuf,
    },
    /// Score generated images: factor alignment, feature distance, diversity
    Evaluate {
        #[arg(long, default_value = "backbone.ckpt")]
        backbone: PathBuf,
        #[arg(long, default_value = "inversion.ckpt")]
        inversion: PathBuf,
        /// Factor classifier checkpoint (trained on fresh renders if absent)
        #[arg(long)]
        faa: Option<PathBuf>,
        /// existing | novel | all
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 16)]
        images_per_tuple: usize,
        #[arg(long, default_value_t = 32)]
        images_per_novel_tuple: usize,
        #[arg(long, default_value_t = 20)]
        novel_tuples: usize,
        /// Sweep the learnable-vector count instead of the suite matrix
        #[arg(long, value_delimiter = ',')]
        sweep_n: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        sweep_epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "eval")]
        out_dir: PathBuf,
    },
    /// Project factor embeddings to 2-D and report nearest general neighbors
    Project {
        #[arg(long, default_value = "inversion.ckpt")]
        inversion: PathBuf,
        #[arg(long, default_value = "projection.json")]
        out: PathBuf,
    },
    /// Aggregate metric reports in a directory into one table
    Report {
        #[arg(long, default_value = "eval")]
        dir: PathBuf,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidTuple(_) => 3,
        Error::MissingCheckpoint(_) => 9,
        Error::CorruptCheckpoint(_) | Error::VersionMismatch { .. } => 4,
        Error::DigestMismatch(_) => 5,
        Error::PromptOverflow { .. } => 6,
        Error::Precondition(_) | Error::InvalidRegistry(_) | Error::ConfigParse(_) => 7,
        Error::Diverged(_) => 8,
        _ => 1,
    }
}

fn run(cli: Cli) -> factorlab::Result<()> {
    let data_root = cli.data_root;
    match cli.command {
        Command::Synth { registry, samples, size, seed } => {
            synth(&SynthArgs { data_root, registry, samples, size, seed })
        }
        Command::Pretrain { out, epochs, control, size, seed } => {
            pretrain(&PretrainArgs { data_root, out, epochs, control, size, seed }).map(|digest| {
                println!("backbone digest {digest}");
            })
        }
        Command::InvertS1 { backbone, out, n, epochs, batch, max_lr, seed } => invert_s1(&InvertArgs {
            data_root,
            backbone,
            state_in: None,
            out,
            config: TrainConfig {
                epochs,
                batch_size: batch,
                max_lr,
                n_vectors: n,
                seed,
                ..Default::default()
            },
            datasets: vec![],
        }),
        Command::InvertS2 { backbone, state, out, dataset, epochs, batch, max_lr, seed } => {
            invert_s2(&InvertArgs {
                data_root,
                backbone,
                state_in: state,
                out,
                config: TrainConfig {
                    epochs,
                    batch_size: batch,
                    max_lr,
                    seed,
                    ..Default::default()
                },
                datasets: dataset,
            })
        }
        Command::Generate {
            tuple,
            backbone,
            inversion,
            count,
            seed,
            steps,
            guidance,
            control_from,
            specific,
            zeroshot,
            out_dir,
        } => generate(&GenerateArgs {
            data_root,
            backbone,
            inversion,
            tuple,
            count,
            seed,
            steps,
            guidance,
            control_from,
            specific,
            zeroshot,
            out_dir,
        })
        .map(|paths| println!("wrote {} images", paths.len())),
        Command::Evaluate {
            backbone,
            inversion,
            faa,
            suite,
            images_per_tuple,
            images_per_novel_tuple,
            novel_tuples,
            sweep_n: ns,
            sweep_epochs,
            seed,
            out_dir,
        } => {
            if !ns.is_empty() {
                let entries = sweep_n(&SweepArgs {
                    data_root,
                    backbone,
                    ns,
                    epochs: sweep_epochs,
                    images_per_tuple: 8,
                    tuple_count: 6,
                    seed,
                    out_dir,
                })?;
                for e in &entries {
                    println!("n={:2}  FAA avg {:.3}  FFD {:?}", e.n, e.faa_average, e.ffd);
                }
                return Ok(());
            }
            let out = evaluate(&EvaluateArgs {
                data_root,
                backbone,
                inversion,
                faa,
                suite,
                images_per_tuple_existing: images_per_tuple,
                images_per_tuple_novel: images_per_novel_tuple,
                novel_tuple_count: novel_tuples,
                seed,
                out_dir,
            })?;
            for r in &out.reports {
                println!(
                    "{:8} {:4} {:9}  FAA avg {:.3}  (lens {:.3} sensor {:.3} view {:.3} domain {:.3})",
                    r.suite, r.mode, r.method, r.faa_average, r.faa[0], r.faa[1], r.faa[2], r.faa[3]
                );
            }
            if let Some(o) = &out.oracle {
                println!(
                    "oracle lens agreement on confident generations: {:.3} ({}/{})",
                    o.lens_agreement_on_confident, o.lens_confident_agree, o.lens_confident
                );
            }
            Ok(())
        }
        Command::Project { inversion, out } => project(&inversion, &out).map(|rate| {
            println!("own-general nearest-neighbor rate: {rate:.3}");
        }),
        Command::Report { dir, out } => report(&dir, &out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
