//! Argument definitions and dispatch for the `melgraph` binary.
//!
//! Each subcommand maps onto one library stage; `grid` drives the whole
//! pipeline from a config file, either as a single run or as the full
//! experiment grid when the file carries a `[grid]` section.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::dataset::{self, Manifest, Split};
use crate::embedding;
use crate::eval;
use crate::features::{self, FeatureSet};
use crate::graph::{self, GraphConfig};
use crate::nn::{self, FuseMode};
use crate::pipeline::{self, EvalSummary};
use crate::synth::{self, SynthConfig};
use crate::train::{self, Tap, TrainConfig, TrainMode};

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Error, Debug)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Feature(#[from] features::FeatureError),
    #[error(transparent)]
    Embedding(#[from] embedding::EmbeddingError),
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "melgraph",
    version,
    about = "Log-Mel features, cosine neighbor graphs, and graph-regularized training for small audio classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate or summarize a dataset manifest.
    #[command(subcommand)]
    Manifest(ManifestCmd),
    /// Turn audio into fixed-size log-Mel spectrograms.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Produce per-sample upstream embeddings.
    #[command(subcommand)]
    Embed(EmbedCmd),
    /// Connect similar samples into a neighbor graph.
    #[command(subcommand)]
    Graph(GraphCmd),
    /// Train a classifier, optionally with the neighbor loss or fusion.
    Train(TrainArgs),
    /// Score a checkpoint on one manifest split.
    Eval(EvalArgs),
    /// Compare two scored runs with a one-tailed z-test.
    Compare(CompareArgs),
    /// Run a config-driven pipeline, or the experiment grid when the
    /// config has a [grid] section.
    Grid(GridArgs),
    /// Generate the bundled synthetic benchmark corpus.
    Synth(SynthArgs),
}

#[derive(Subcommand, Debug)]
pub enum ManifestCmd {
    /// Parse the manifest and report its shape.
    Validate { manifest: PathBuf },
    /// Print per-split and per-class sample counts.
    Stats { manifest: PathBuf },
}

#[derive(Subcommand, Debug)]
pub enum FeaturesCmd {
    /// Extract one spectrogram file per manifest row.
    Extract(ExtractArgs),
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Feature settings file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory audio paths resolve against (default: the manifest's).
    #[arg(long)]
    pub audio_root: Option<PathBuf>,
    #[arg(long)]
    pub sample_rate: Option<u32>,
    #[arg(long)]
    pub win_length: Option<usize>,
    #[arg(long)]
    pub hop_length: Option<usize>,
    #[arg(long)]
    pub n_mels: Option<usize>,
    #[arg(long)]
    pub f_min: Option<f64>,
    #[arg(long)]
    pub f_max: Option<f64>,
    #[arg(long)]
    pub log_floor: Option<f64>,
    /// Unify clips to this many samples; 0 means the corpus maximum.
    #[arg(long)]
    pub target_length: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum EmbedCmd {
    /// Deterministic toy embeddings derived from the spectrograms.
    Toy(ToyArgs),
}

#[derive(Args, Debug)]
pub struct ToyArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum GraphCmd {
    /// Build the epsilon-thresholded capped neighbor graph.
    Build(GraphBuildArgs),
}

#[derive(Args, Debug)]
pub struct GraphBuildArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = 0.99)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 6)]
    pub max_neighbors: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Needed to filter by split.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Which split's samples join the graph: train, val, test, or all.
    #[arg(long, default_value = "train")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = TrainMode::Base)]
    pub mode: TrainMode,
    /// Neighbor graph, required for nsl mode.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Upstream embeddings, required for the transfer modes.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = Tap::Fc2)]
    pub tap: Tap,
    /// Cap on neighbors per sample at batch assembly.
    #[arg(long)]
    pub max_neighbors: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr0: f64,
    #[arg(long, default_value_t = 0.9)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 5)]
    pub lr_period: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Log literal loss sums instead of member/pair averages.
    #[arg(long)]
    pub raw_sums: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = Split::Test)]
    pub split: Split,
    /// Upstream embeddings for transfer-fusion checkpoints.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Fusion mode the checkpoint was trained with: add, max, or avg.
    #[arg(long)]
    pub fuse: Option<FuseMode>,
    /// Where the summary and confusion files land (default: the
    /// checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub run_a: PathBuf,
    #[arg(long)]
    pub run_b: PathBuf,
    #[arg(long, default_value_t = Split::Test)]
    pub split: Split,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override [paths] out.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the train seed; for a grid, replaces the seed list.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tap: Option<Tap>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_neighbors: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub classes: usize,
    #[arg(long, default_value_t = 20)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 8)]
    pub val_per_class: usize,
    #[arg(long, default_value_t = 30)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub speakers: usize,
    /// Fraction of train labels to flip to a random other class.
    #[arg(long, default_value_t = 0.0)]
    pub label_noise: f64,
    #[arg(long, default_value_t = 256)]
    pub embedding_dim: usize,
    #[arg(long, default_value_t = 16_000)]
    pub sample_rate: u32,
    #[arg(long, default_value_t = 0.656)]
    pub max_duration: f64,
    #[arg(long, default_value_t = 0.35)]
    pub min_duration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Execute one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Manifest(cmd) => run_manifest(cmd),
        Command::Features(FeaturesCmd::Extract(args)) => run_extract(args),
        Command::Embed(EmbedCmd::Toy(args)) => run_embed_toy(args),
        Command::Graph(GraphCmd::Build(args)) => run_graph_build(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Compare(args) => run_compare(args),
        Command::Grid(args) => run_grid_cmd(args),
        Command::Synth(args) => run_synth(args),
    }
}

fn run_manifest(cmd: ManifestCmd) -> Result<()> {
    match cmd {
        ManifestCmd::Validate { manifest } => {
            let m = dataset::load_manifest(&manifest)?;
            println!("ok: {} samples, {} classes", m.len(), m.vocab().len());
        }
        ManifestCmd::Stats { manifest } => {
            let m = dataset::load_manifest(&manifest)?;
            print!("{}", manifest_stats_text(&m));
        }
    }
    Ok(())
}

fn manifest_stats_text(m: &Manifest) -> String {
    let counts = dataset::split_counts(m);
    let mut text = String::from("split\tsamples\n");
    for split in Split::ALL {
        text.push_str(&format!("{split}\t{}\n", counts.split_total(split)));
    }
    text.push_str(&format!("total\t{}\n\nlabel\tsamples\n", counts.total()));
    for class in m.vocab().classes() {
        let n: usize = Split::ALL.iter().map(|&s| counts.get(s, class)).sum();
        text.push_str(&format!("{class}\t{n}\n"));
    }
    text
}

fn run_extract(args: ExtractArgs) -> Result<()> {
    let mut mel = match &args.config {
        Some(path) => pipeline::load_mel_config(path)?,
        None => Default::default(),
    };
    if let Some(v) = args.sample_rate {
        mel.sample_rate = v;
    }
    if let Some(v) = args.win_length {
        mel.win_length = v;
    }
    if let Some(v) = args.hop_length {
        mel.hop_length = v;
    }
    if let Some(v) = args.n_mels {
        mel.n_mels = v;
    }
    if let Some(v) = args.f_min {
        mel.f_min = v;
    }
    if let Some(v) = args.f_max {
        mel.f_max = v;
    }
    if let Some(v) = args.log_floor {
        mel.log_floor = v;
    }
    if let Some(v) = args.target_length {
        mel.target_length = v;
    }
    let manifest = dataset::load_manifest(&args.manifest)?;
    let audio_root = args.audio_root.clone().unwrap_or_else(|| {
        args.manifest
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf()
    });
    let report = features::extract_features(&manifest, &audio_root, &args.out, &mel)?;
    println!(
        "extracted {} spectrograms ({} x {}) to {}",
        report.samples,
        report.frames,
        report.n_mels,
        args.out.display()
    );
    Ok(())
}

fn run_embed_toy(args: ToyArgs) -> Result<()> {
    let emb = pipeline::toy_embed_dir(&args.features, args.dim, args.seed)?;
    embedding::save_embeddings(&args.out, &emb)?;
    println!(
        "wrote {} embeddings (dim {}) to {}",
        emb.len(),
        emb.dim(),
        args.out.display()
    );
    Ok(())
}

fn run_graph_build(args: GraphBuildArgs) -> Result<()> {
    let mut emb = embedding::load_embeddings(&args.embeddings)?;
    if args.split != "all" {
        let split = Split::from_str(&args.split).map_err(CliError::Usage)?;
        let manifest_path = args.manifest.as_ref().ok_or_else(|| {
            CliError::Usage(format!(
                "filtering to the {split} split needs --manifest; pass --split all to keep every embedding"
            ))
        })?;
        let manifest = dataset::load_manifest(manifest_path)?;
        let ids: Vec<String> = manifest
            .split_records(split)
            .iter()
            .map(|r| r.id.clone())
            .collect();
        emb = emb.subset(&ids)?;
    }
    let g = graph::build_graph(
        &emb,
        &GraphConfig {
            epsilon: args.epsilon,
            max_neighbors: args.max_neighbors,
        },
    )?;
    graph::save_graph(&args.out, &g)?;
    println!(
        "graph: {} nodes, {} edges -> {}",
        g.len(),
        g.edge_count(),
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        mode: args.mode,
        alpha: args.alpha,
        tap: args.tap,
        batch_size: args.batch_size,
        epochs: args.epochs,
        lr0: args.lr0,
        lr_decay: args.lr_decay,
        lr_period: args.lr_period,
        seed: args.seed,
        raw_sums: args.raw_sums,
        max_neighbors: args.max_neighbors,
    };
    let manifest = dataset::load_manifest(&args.manifest)?;
    let mut set = FeatureSet::open(&args.features)?;
    let model_cfg = nn::load_model_config(&args.model)?;
    let graph_obj = match &args.graph {
        Some(path) => Some(graph::load_graph(path)?),
        None => None,
    };
    let emb_obj = match &args.embeddings {
        Some(path) => Some(embedding::load_embeddings(path)?),
        None => None,
    };
    let report = train::train(
        &manifest,
        &mut set,
        graph_obj.as_ref(),
        emb_obj.as_ref(),
        &model_cfg,
        &cfg,
        Some(&args.out),
    )?;
    println!(
        "best epoch {} (val UAR {}), final train accuracy {}",
        report.best_epoch, report.best_val_uar, report.final_train_accuracy
    );
    println!("checkpoint: {}", args.out.join("best.nnck").display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    if args.embeddings.is_some() != args.fuse.is_some() {
        return Err(CliError::Usage(
            "--embeddings and --fuse go together: both or neither".into(),
        ));
    }
    let model_cfg = nn::load_model_config(&args.model)?;
    let state = nn::checkpoint::load_checkpoint(&args.checkpoint, &model_cfg)?;
    let manifest = dataset::load_manifest(&args.manifest)?;
    let mut set = FeatureSet::open(&args.features)?;
    let emb_obj = match &args.embeddings {
        Some(path) => Some(embedding::load_embeddings(path)?),
        None => None,
    };
    let fusion = args
        .fuse
        .and_then(|mode| emb_obj.as_ref().map(|e| (mode, e)));
    let report = eval::evaluate(&state, &model_cfg, &manifest, args.split, &mut set, fusion)?;
    let summary = EvalSummary {
        accuracy: report.accuracy,
        uar: report.uar,
        samples: report.samples,
    };
    print!("{}", eval_text(&summary));

    let out_dir = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf()
    });
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    pipeline::write_eval_summary(out_dir.join(format!("eval_{}.tsv", args.split)), &summary)?;
    eval::save_confusion(
        out_dir.join("confusion.tsv"),
        &report.confusion,
        manifest.vocab().classes(),
    )?;
    Ok(())
}

fn eval_text(s: &EvalSummary) -> String {
    format!(
        "accuracy\tuar\tsamples\n{}\t{}\t{}\n",
        s.accuracy, s.uar, s.samples
    )
}

// A run directory is accepted as either the stage root (out/, containing
// run/) or the run directory itself.
fn find_summary(dir: &Path, split: Split) -> Result<EvalSummary> {
    let name = format!("eval_{split}.tsv");
    for candidate in [dir.join(&name), dir.join("run").join(&name)] {
        if candidate.exists() {
            return Ok(pipeline::read_eval_summary(candidate)?);
        }
    }
    Err(CliError::Usage(format!(
        "no {name} under {}; score the run with `eval` first",
        dir.display()
    )))
}

fn run_compare(args: CompareArgs) -> Result<()> {
    let a = find_summary(&args.run_a, args.split)?;
    let b = find_summary(&args.run_b, args.split)?;
    print!("{}", compare_text(&a, &b)?);
    Ok(())
}

fn compare_text(a: &EvalSummary, b: &EvalSummary) -> Result<String> {
    let z = eval::two_proportion_z(a.uar, b.uar, a.samples, b.samples)?;
    let p = eval::one_tailed_z_test(a.uar, b.uar, a.samples, b.samples)?;
    Ok(format!(
        "uar_a\tuar_b\tz\tp\n{}\t{}\t{}\t{}\n",
        a.uar, b.uar, z, p
    ))
}

fn run_grid_cmd(args: GridArgs) -> Result<()> {
    let mut cfg = pipeline::load_pipeline_config(&args.config)?;
    if let Some(v) = &args.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.mode {
        cfg.train.mode = v;
    }
    if let Some(v) = args.alpha {
        cfg.train.alpha = v;
    }
    if let Some(v) = args.tap {
        cfg.train.tap = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr0 {
        cfg.train.lr0 = v;
    }
    if let Some(stage) = cfg.graph.as_mut() {
        if let Some(v) = args.epsilon {
            stage.epsilon = v;
        }
        if let Some(v) = args.max_neighbors {
            stage.max_neighbors = v;
        }
    }
    if let Some(v) = args.max_neighbors {
        cfg.train.max_neighbors = Some(v);
    }

    let report_path = match pipeline::load_grid_spec(&args.config)? {
        Some(mut spec) => {
            if let Some(seed) = args.seed {
                spec.seeds = vec![seed];
            }
            let report = pipeline::run_grid(&cfg, &spec)?;
            log::info!("{} grid cells complete", report.cells.len());
            report.report_path
        }
        None => {
            let report = pipeline::run_pipeline(&cfg)?;
            log::info!(
                "stages run: [{}], skipped: [{}]",
                report.stages.ran.join(", "),
                report.stages.skipped.join(", ")
            );
            cfg.out_dir.join("report.tsv")
        }
    };
    let text = fs::read_to_string(&report_path).map_err(io_err(&report_path))?;
    print!("{text}");
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        classes: args.classes,
        train_per_class: args.train_per_class,
        val_per_class: args.val_per_class,
        test_per_class: args.test_per_class,
        speakers: args.speakers,
        label_noise: args.label_noise,
        embedding_dim: args.embedding_dim,
        sample_rate: args.sample_rate,
        max_duration_s: args.max_duration,
        min_duration_s: args.min_duration,
        seed: args.seed,
    };
    let report = synth::generate(&args.out, &cfg)?;
    println!(
        "generated {} samples ({} noisy labels) under {}",
        report.samples,
        report.noisy_labels,
        args.out.display()
    );
    println!("manifest: {}", report.manifest_path.display());
    println!("embeddings: {}", report.embeddings_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_tree_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn the_documented_invocations_parse() {
        let cli = Cli::try_parse_from([
            "melgraph",
            "train",
            "--manifest",
            "M",
            "--features",
            "D",
            "--mode",
            "nsl",
            "--graph",
            "g.tsv",
            "--alpha",
            "0.1",
            "--max-neighbors",
            "6",
            "--tap",
            "FC2",
            "--model",
            "cnn6-toy.cfg",
            "--seed",
            "7",
            "--out",
            "run/",
        ])
        .unwrap();
        match cli.command {
            Command::Train(a) => {
                assert_eq!(a.mode, TrainMode::Nsl);
                assert_eq!(a.alpha, 0.1);
                assert_eq!(a.max_neighbors, Some(6));
                assert_eq!(a.tap, Tap::Fc2);
                assert_eq!(a.seed, 7);
                assert_eq!(a.graph.as_deref(), Some(Path::new("g.tsv")));
            }
            other => panic!("parsed {other:?}"),
        }

        let cli = Cli::try_parse_from([
            "melgraph",
            "graph",
            "build",
            "--embeddings",
            "emb.bin",
            "--epsilon",
            "0.99",
            "--max-neighbors",
            "6",
            "--out",
            "g.tsv",
        ])
        .unwrap();
        match cli.command {
            Command::Graph(GraphCmd::Build(a)) => {
                assert_eq!(a.epsilon, 0.99);
                assert_eq!(a.max_neighbors, 6);
                assert_eq!(a.split, "train");
            }
            other => panic!("parsed {other:?}"),
        }

        let cli = Cli::try_parse_from([
            "melgraph",
            "embed",
            "toy",
            "--features",
            "D",
            "--dim",
            "256",
            "--seed",
            "3",
            "--out",
            "emb.bin",
        ])
        .unwrap();
        match cli.command {
            Command::Embed(EmbedCmd::Toy(a)) => {
                assert_eq!(a.dim, 256);
                assert_eq!(a.seed, 3);
            }
            other => panic!("parsed {other:?}"),
        }

        let cli = Cli::try_parse_from([
            "melgraph",
            "eval",
            "--checkpoint",
            "best.nnck",
            "--split",
            "test",
            "--manifest",
            "M",
            "--features",
            "D",
            "--model",
            "c.cfg",
            "--embeddings",
            "emb.bin",
            "--fuse",
            "avg",
        ])
        .unwrap();
        match cli.command {
            Command::Eval(a) => {
                assert_eq!(a.split, Split::Test);
                assert_eq!(a.fuse, Some(FuseMode::Avg));
            }
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn train_flag_defaults_match_the_library_defaults() {
        let cli = Cli::try_parse_from([
            "melgraph", "train", "--manifest", "M", "--features", "D", "--model", "c", "--out",
            "o",
        ])
        .unwrap();
        let args = match cli.command {
            Command::Train(a) => a,
            other => panic!("parsed {other:?}"),
        };
        let want = TrainConfig::default();
        assert_eq!(args.mode, want.mode);
        assert_eq!(args.alpha, want.alpha);
        assert_eq!(args.tap, want.tap);
        assert_eq!(args.batch_size, want.batch_size);
        assert_eq!(args.epochs, want.epochs);
        assert_eq!(args.lr0, want.lr0);
        assert_eq!(args.lr_decay, want.lr_decay);
        assert_eq!(args.lr_period, want.lr_period);
        assert_eq!(args.seed, want.seed);
        assert_eq!(args.raw_sums, want.raw_sums);
        assert_eq!(args.max_neighbors, want.max_neighbors);
    }

    #[test]
    fn synth_flag_defaults_match_the_library_defaults() {
        let cli = Cli::try_parse_from(["melgraph", "synth", "--out", "x"]).unwrap();
        let args = match cli.command {
            Command::Synth(a) => a,
            other => panic!("parsed {other:?}"),
        };
        let want = SynthConfig::default();
        assert_eq!(args.classes, want.classes);
        assert_eq!(args.train_per_class, want.train_per_class);
        assert_eq!(args.val_per_class, want.val_per_class);
        assert_eq!(args.test_per_class, want.test_per_class);
        assert_eq!(args.speakers, want.speakers);
        assert_eq!(args.label_noise, want.label_noise);
        assert_eq!(args.embedding_dim, want.embedding_dim);
        assert_eq!(args.sample_rate, want.sample_rate);
        assert_eq!(args.max_duration, want.max_duration_s);
        assert_eq!(args.min_duration, want.min_duration_s);
        assert_eq!(args.seed, want.seed);
    }

    #[test]
    fn manifest_stats_lists_split_and_class_counts() {
        let text = "id\taudio_path\tlabel\tsplit\tspeaker\tduration_s\n\
                    a\tw/a.wav\tdog\ttrain\ts1\t0.5\n\
                    b\tw/b.wav\tcat\ttrain\ts1\t0.5\n\
                    c\tw/c.wav\tdog\tval\ts2\t0.5\n\
                    d\tw/d.wav\tdog\ttest\ts3\t0.5\n";
        let m = dataset::parse_manifest(text).unwrap();
        let stats = manifest_stats_text(&m);
        assert!(stats.starts_with("split\tsamples\ntrain\t2\nval\t1\ntest\t1\ntotal\t4\n"));
        assert!(stats.contains("label\tsamples\ncat\t1\ndog\t3\n"));
    }

    #[test]
    fn compare_text_reproduces_the_analytic_example() {
        let a = EvalSummary {
            accuracy: 0.79,
            uar: 0.789,
            samples: 2326,
        };
        let b = EvalSummary {
            accuracy: 0.78,
            uar: 0.772,
            samples: 2326,
        };
        let text = compare_text(&a, &b).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("uar_a\tuar_b\tz\tp"));
        let fields: Vec<&str> = lines.next().unwrap().split('\t').collect();
        let z: f64 = fields[2].parse().unwrap();
        let p: f64 = fields[3].parse().unwrap();
        assert!((z - 1.40).abs() < 0.01, "z = {z}");
        assert!((p - 0.081).abs() < 0.005, "p = {p}");
    }

    #[test]
    fn eval_requires_fusion_flags_in_pairs() {
        let cli = Cli::try_parse_from([
            "melgraph",
            "eval",
            "--checkpoint",
            "missing.nnck",
            "--manifest",
            "M",
            "--features",
            "D",
            "--model",
            "c",
            "--fuse",
            "add",
        ])
        .unwrap();
        match run(cli) {
            Err(CliError::Usage(msg)) => assert!(msg.contains("--embeddings")),
            other => panic!("got {other:?}"),
        }
    }
}
