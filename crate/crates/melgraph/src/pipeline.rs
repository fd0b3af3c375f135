//! End-to-end orchestration: manifest, features, embeddings, graph,
//! training, evaluation, and the experiment grid.
//!
//! Stages are gated by content hashes, not timestamps: each stage's key is
//! the SHA-256 of its own configuration plus the bytes (or upstream stage
//! keys) it consumes. A stage reruns only when that key changes or an
//! output file is missing, so re-running an unchanged pipeline is a no-op
//! and the gate behaves the same on any machine.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::Value;

use crate::audio::MelConfig;
use crate::dataset::{self, Manifest, Split};
use crate::embedding::{self, EmbeddingMatrix};
use crate::eval;
use crate::features::{self, FeatureSet};
use crate::graph::{self, GraphConfig};
use crate::nn;
use crate::train::{self, Tap, TrainConfig, TrainMode};

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error("bad pipeline config {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad report input {path}: {msg}")]
    Report { path: String, msg: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn stage_err<E: std::error::Error + Send + Sync + 'static>(
    stage: &'static str,
) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: Box::new(e),
    }
}

/// Where upstream embeddings come from, if anywhere.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbedSource {
    /// Copy an existing EMB1 file (e.g. real upstream-model exports).
    File(PathBuf),
    /// Derive toy embeddings from the extracted features.
    Toy { dim: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphStage {
    pub epsilon: f64,
    pub max_neighbors: usize,
    /// Which manifest split feeds the graph; `None` keeps every embedding.
    pub split: Option<Split>,
}

/// Everything one pipeline run needs. Paths are absolute by the time this
/// struct exists (the loader anchors relative paths at the config file).
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub audio_root: PathBuf,
    pub out_dir: PathBuf,
    pub model: PathBuf,
    pub mel: MelConfig,
    pub embed: Option<EmbedSource>,
    pub graph: Option<GraphStage>,
    pub train: TrainConfig,
    pub eval_split: Split,
}

fn mel_canonical(mel: &MelConfig) -> String {
    format!(
        "sr{} win{} hop{} mels{} fmin{} fmax{} floor{} target{}",
        mel.sample_rate,
        mel.win_length,
        mel.hop_length,
        mel.n_mels,
        mel.f_min,
        mel.f_max,
        mel.log_floor,
        mel.target_length
    )
}

fn train_canonical(t: &TrainConfig) -> String {
    format!(
        "mode {} alpha {} tap {} batch {} epochs {} lr0 {} decay {} period {} seed {} raw {} cap {:?}",
        t.mode,
        t.alpha,
        t.tap,
        t.batch_size,
        t.epochs,
        t.lr0,
        t.lr_decay,
        t.lr_period,
        t.seed,
        t.raw_sums,
        t.max_neighbors
    )
}

fn graph_canonical(g: &GraphStage) -> String {
    let split = g
        .split
        .map(|v| v.as_str().to_string())
        .unwrap_or_else(|| "all".into());
    format!("eps{} n{} split {split}", g.epsilon, g.max_neighbors)
}

impl PipelineConfig {
    /// Canonical text for `config.lock`. Field order is fixed; every value
    /// that influences the run appears.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "manifest={}", self.manifest.display());
        let _ = writeln!(s, "audio_root={}", self.audio_root.display());
        let _ = writeln!(s, "model={}", self.model.display());
        let _ = writeln!(s, "mel={}", mel_canonical(&self.mel));
        match &self.embed {
            None => {
                let _ = writeln!(s, "embed=none");
            }
            Some(EmbedSource::File(p)) => {
                let _ = writeln!(s, "embed=file {}", p.display());
            }
            Some(EmbedSource::Toy { dim, seed }) => {
                let _ = writeln!(s, "embed=toy dim{dim} seed{seed}");
            }
        }
        match &self.graph {
            None => {
                let _ = writeln!(s, "graph=none");
            }
            Some(g) => {
                let _ = writeln!(s, "graph={}", graph_canonical(g));
            }
        }
        let _ = writeln!(s, "train={}", train_canonical(&self.train));
        let _ = writeln!(s, "eval_split={}", self.eval_split);
        s
    }
}

fn bad_config(path: &Path, msg: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn check_known_keys(
    path: &Path,
    section: &str,
    table: &toml::Table,
    known: &[&str],
) -> Result<()> {
    for key in table.keys() {
        if !known.contains(&key.as_str()) {
            return Err(bad_config(
                path,
                format!("unknown key {key:?} in [{section}]"),
            ));
        }
    }
    Ok(())
}

fn get_usize(path: &Path, section: &str, table: &toml::Table, key: &str) -> Result<Option<usize>> {
    match table.get(key) {
        None => Ok(None),
        Some(Value::Integer(v)) if *v >= 0 => Ok(Some(*v as usize)),
        Some(other) => Err(bad_config(
            path,
            format!("[{section}] {key} must be a non-negative integer, got {other}"),
        )),
    }
}

fn get_f64(path: &Path, section: &str, table: &toml::Table, key: &str) -> Result<Option<f64>> {
    match table.get(key) {
        None => Ok(None),
        Some(Value::Float(v)) => Ok(Some(*v)),
        Some(Value::Integer(v)) => Ok(Some(*v as f64)),
        Some(other) => Err(bad_config(
            path,
            format!("[{section}] {key} must be a number, got {other}"),
        )),
    }
}

fn get_str<'t>(
    path: &Path,
    section: &str,
    table: &'t toml::Table,
    key: &str,
) -> Result<Option<&'t str>> {
    match table.get(key) {
        None => Ok(None),
        Some(Value::String(v)) => Ok(Some(v)),
        Some(other) => Err(bad_config(
            path,
            format!("[{section}] {key} must be a string, got {other}"),
        )),
    }
}

fn get_bool(path: &Path, section: &str, table: &toml::Table, key: &str) -> Result<Option<bool>> {
    match table.get(key) {
        None => Ok(None),
        Some(Value::Boolean(v)) => Ok(Some(*v)),
        Some(other) => Err(bad_config(
            path,
            format!("[{section}] {key} must be a boolean, got {other}"),
        )),
    }
}

fn section<'t>(
    path: &Path,
    root: &'t toml::Table,
    name: &str,
) -> Result<Option<&'t toml::Table>> {
    match root.get(name) {
        None => Ok(None),
        Some(Value::Table(t)) => Ok(Some(t)),
        Some(_) => Err(bad_config(path, format!("[{name}] must be a table"))),
    }
}

fn apply_mel_keys(path: &Path, t: &toml::Table, mel: &mut MelConfig) -> Result<()> {
    check_known_keys(
        path,
        "features",
        t,
        &[
            "sample_rate",
            "win_length",
            "hop_length",
            "n_mels",
            "f_min",
            "f_max",
            "log_floor",
            "target_length",
        ],
    )?;
    if let Some(v) = get_usize(path, "features", t, "sample_rate")? {
        mel.sample_rate = v as u32;
    }
    if let Some(v) = get_usize(path, "features", t, "win_length")? {
        mel.win_length = v;
    }
    if let Some(v) = get_usize(path, "features", t, "hop_length")? {
        mel.hop_length = v;
    }
    if let Some(v) = get_usize(path, "features", t, "n_mels")? {
        mel.n_mels = v;
    }
    if let Some(v) = get_f64(path, "features", t, "f_min")? {
        mel.f_min = v;
    }
    if let Some(v) = get_f64(path, "features", t, "f_max")? {
        mel.f_max = v;
    }
    if let Some(v) = get_f64(path, "features", t, "log_floor")? {
        mel.log_floor = v;
    }
    if let Some(v) = get_usize(path, "features", t, "target_length")? {
        mel.target_length = v;
    }
    Ok(())
}

/// Parse a standalone feature-extraction config: either bare keys
/// (`n_mels = 64`) or the same keys inside a `[features]` table.
pub fn load_mel_config(path: impl AsRef<Path>) -> Result<MelConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let root: toml::Table = text
        .parse()
        .map_err(|e| bad_config(path, format!("not valid TOML: {e}")))?;
    let mut mel = MelConfig::default();
    match section(path, &root, "features")? {
        Some(t) => apply_mel_keys(path, t, &mut mel)?,
        None => apply_mel_keys(path, &root, &mut mel)?,
    }
    Ok(mel)
}

/// Parse a pipeline config file. Relative paths resolve against the file's
/// directory; unknown keys are rejected so typos fail loudly.
pub fn load_pipeline_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let root: toml::Table = text
        .parse()
        .map_err(|e| bad_config(path, format!("not valid TOML: {e}")))?;
    for key in root.keys() {
        if !["paths", "features", "embed", "graph", "train", "eval", "grid"]
            .contains(&key.as_str())
        {
            return Err(bad_config(path, format!("unknown section [{key}]")));
        }
    }
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let anchor = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };

    let paths = section(path, &root, "paths")?
        .ok_or_else(|| bad_config(path, "missing [paths] section"))?;
    check_known_keys(path, "paths", paths, &["manifest", "audio_root", "out", "model"])?;
    let need = |key: &str| -> Result<&str> {
        get_str(path, "paths", paths, key)?
            .ok_or_else(|| bad_config(path, format!("[paths] {key} is required")))
    };
    let manifest = anchor(need("manifest")?);
    let model = anchor(need("model")?);
    let out_dir = anchor(need("out")?);
    let audio_root = get_str(path, "paths", paths, "audio_root")?
        .map(&anchor)
        .unwrap_or_else(|| base.clone());

    let mut mel = MelConfig::default();
    if let Some(t) = section(path, &root, "features")? {
        apply_mel_keys(path, t, &mut mel)?;
    }

    let embed = match section(path, &root, "embed")? {
        None => None,
        Some(t) => {
            check_known_keys(path, "embed", t, &["source", "path", "dim", "seed"])?;
            let source = get_str(path, "embed", t, "source")?.unwrap_or("toy");
            match source {
                "file" => {
                    let p = get_str(path, "embed", t, "path")?.ok_or_else(|| {
                        bad_config(path, "[embed] source \"file\" needs a path")
                    })?;
                    Some(EmbedSource::File(anchor(p)))
                }
                "toy" => Some(EmbedSource::Toy {
                    dim: get_usize(path, "embed", t, "dim")?.unwrap_or(256),
                    seed: get_usize(path, "embed", t, "seed")?.unwrap_or(0) as u64,
                }),
                other => {
                    return Err(bad_config(
                        path,
                        format!("[embed] source must be \"file\" or \"toy\", got {other:?}"),
                    ))
                }
            }
        }
    };

    let graph = match section(path, &root, "graph")? {
        None => None,
        Some(t) => {
            check_known_keys(path, "graph", t, &["epsilon", "max_neighbors", "split"])?;
            let split = match get_str(path, "graph", t, "split")?.unwrap_or("train") {
                "all" => None,
                s => Some(
                    Split::from_str(s)
                        .map_err(|msg| bad_config(path, format!("[graph] split: {msg}")))?,
                ),
            };
            Some(GraphStage {
                epsilon: get_f64(path, "graph", t, "epsilon")?.unwrap_or(0.99),
                max_neighbors: get_usize(path, "graph", t, "max_neighbors")?.unwrap_or(6),
                split,
            })
        }
    };

    let mut train = TrainConfig::default();
    if let Some(t) = section(path, &root, "train")? {
        check_known_keys(
            path,
            "train",
            t,
            &[
                "mode",
                "alpha",
                "tap",
                "batch_size",
                "epochs",
                "lr0",
                "lr_decay",
                "lr_period",
                "seed",
                "raw_sums",
                "max_neighbors",
            ],
        )?;
        if let Some(v) = get_str(path, "train", t, "mode")? {
            train.mode = TrainMode::from_str(v)
                .map_err(|msg| bad_config(path, format!("[train] mode: {msg}")))?;
        }
        if let Some(v) = get_f64(path, "train", t, "alpha")? {
            train.alpha = v;
        }
        if let Some(v) = get_str(path, "train", t, "tap")? {
            train.tap = Tap::from_str(v)
                .map_err(|msg| bad_config(path, format!("[train] tap: {msg}")))?;
        }
        if let Some(v) = get_usize(path, "train", t, "batch_size")? {
            train.batch_size = v;
        }
        if let Some(v) = get_usize(path, "train", t, "epochs")? {
            train.epochs = v;
        }
        if let Some(v) = get_f64(path, "train", t, "lr0")? {
            train.lr0 = v;
        }
        if let Some(v) = get_f64(path, "train", t, "lr_decay")? {
            train.lr_decay = v;
        }
        if let Some(v) = get_usize(path, "train", t, "lr_period")? {
            train.lr_period = v;
        }
        if let Some(v) = get_usize(path, "train", t, "seed")? {
            train.seed = v as u64;
        }
        if let Some(v) = get_bool(path, "train", t, "raw_sums")? {
            train.raw_sums = v;
        }
        if let Some(v) = get_usize(path, "train", t, "max_neighbors")? {
            train.max_neighbors = Some(v);
        }
    }

    let mut eval_split = Split::Test;
    if let Some(t) = section(path, &root, "eval")? {
        check_known_keys(path, "eval", t, &["split"])?;
        if let Some(v) = get_str(path, "eval", t, "split")? {
            eval_split = Split::from_str(v)
                .map_err(|msg| bad_config(path, format!("[eval] split: {msg}")))?;
        }
    }

    Ok(PipelineConfig {
        manifest,
        audio_root,
        out_dir,
        model,
        mel,
        embed,
        graph,
        train,
        eval_split,
    })
}

/// Parse the `[grid]` section of a pipeline config file. `Ok(None)` when
/// the file has no such section.
pub fn load_grid_spec(path: impl AsRef<Path>) -> Result<Option<GridSpec>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let root: toml::Table = text
        .parse()
        .map_err(|e| bad_config(path, format!("not valid TOML: {e}")))?;
    let t = match section(path, &root, "grid")? {
        Some(t) => t,
        None => return Ok(None),
    };
    check_known_keys(path, "grid", t, &["modes", "ns", "alphas", "taps", "seeds"])?;
    let str_list = |key: &str, default: Vec<String>| -> Result<Vec<String>> {
        match t.get(key) {
            None => Ok(default),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s.clone()),
                    other => Err(bad_config(
                        path,
                        format!("[grid] {key} must hold strings, got {other}"),
                    )),
                })
                .collect(),
            Some(other) => Err(bad_config(
                path,
                format!("[grid] {key} must be an array, got {other}"),
            )),
        }
    };
    let num_list = |key: &str| -> Result<Vec<f64>> {
        match t.get(key) {
            None => Ok(Vec::new()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Float(f) => Ok(*f),
                    Value::Integer(i) => Ok(*i as f64),
                    other => Err(bad_config(
                        path,
                        format!("[grid] {key} must hold numbers, got {other}"),
                    )),
                })
                .collect(),
            Some(other) => Err(bad_config(
                path,
                format!("[grid] {key} must be an array, got {other}"),
            )),
        }
    };

    let modes = str_list("modes", vec!["base".into(), "nsl".into()])?
        .iter()
        .map(|m| TrainMode::from_str(m).map_err(|msg| bad_config(path, msg)))
        .collect::<Result<Vec<_>>>()?;
    let taps = str_list("taps", vec!["FC2".into()])?
        .iter()
        .map(|m| Tap::from_str(m).map_err(|msg| bad_config(path, msg)))
        .collect::<Result<Vec<_>>>()?;
    let ns = num_list("ns")?.iter().map(|&v| v as usize).collect::<Vec<_>>();
    let alphas = num_list("alphas")?;
    let seeds = num_list("seeds")?
        .iter()
        .map(|&v| v as u64)
        .collect::<Vec<_>>();
    GridSpec::new(modes, ns, alphas, taps, seeds)
        .map(Some)
        .map_err(|msg| bad_config(path, msg))
}

const STAGE_DIR: &str = ".stage";

struct StageGate {
    root: PathBuf,
}

impl StageGate {
    fn new(root: &Path) -> StageGate {
        StageGate {
            root: root.to_path_buf(),
        }
    }

    fn key_path(&self, stage: &str) -> PathBuf {
        self.root.join(STAGE_DIR).join(format!("{stage}.hash"))
    }

    /// Run `work` unless the stored key matches and every output exists.
    /// Returns true when the stage was skipped.
    fn run(
        &self,
        stage: &str,
        key: &str,
        outputs: &[PathBuf],
        work: impl FnOnce() -> Result<()>,
    ) -> Result<bool> {
        let key_path = self.key_path(stage);
        let fresh = fs::read_to_string(&key_path)
            .map(|stored| stored == key)
            .unwrap_or(false)
            && outputs.iter().all(|p| p.exists());
        if fresh {
            log::info!("stage {stage}: up to date, skipping");
            return Ok(true);
        }
        work()?;
        let dir = self.root.join(STAGE_DIR);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        fs::write(&key_path, key).map_err(io_err(&key_path))?;
        Ok(false)
    }
}

fn hash_hex(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        // Length-prefix each part so concatenation cannot alias.
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    let digest = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn file_bytes(stage: &'static str, path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| PipelineError::Stage {
        stage,
        source: Box::new(std::io::Error::new(
            source.kind(),
            format!("{}: {source}", path.display()),
        )),
    })
}

/// Toy-embed every spectrogram in a feature directory, in sorted id order.
pub fn toy_embed_dir(features_dir: &Path, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    let ids = FeatureSet::list_ids(features_dir).map_err(stage_err("embed"))?;
    let mut set = FeatureSet::open(features_dir).map_err(stage_err("embed"))?;
    let mut data = Vec::new();
    for id in &ids {
        let spec = set.raw(id).map_err(stage_err("embed"))?;
        data.extend(embedding::toy_embed(spec, dim, seed));
    }
    EmbeddingMatrix::new(ids, dim, data).map_err(stage_err("embed"))
}

/// Accuracy/UAR/sample-count triple of one scored split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub uar: f64,
    pub samples: u64,
}

pub fn write_eval_summary(path: impl AsRef<Path>, s: &EvalSummary) -> Result<()> {
    let path = path.as_ref();
    let text = format!(
        "accuracy\tuar\tsamples\n{}\t{}\t{}\n",
        s.accuracy, s.uar, s.samples
    );
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_eval_summary(path: impl AsRef<Path>) -> Result<EvalSummary> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |msg: &str| PipelineError::Report {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let mut lines = text.lines();
    if lines.next() != Some("accuracy\tuar\tsamples") {
        return Err(bad("unexpected header"));
    }
    let row = lines.next().ok_or_else(|| bad("missing data row"))?;
    let fields: Vec<&str> = row.split('\t').collect();
    if fields.len() != 3 {
        return Err(bad("expected 3 fields"));
    }
    Ok(EvalSummary {
        accuracy: fields[0].parse().map_err(|_| bad("bad accuracy"))?,
        uar: fields[1].parse().map_err(|_| bad("bad uar"))?,
        samples: fields[2].parse().map_err(|_| bad("bad samples"))?,
    })
}

/// Names of stages that ran and stages the gate skipped, in order.
#[derive(Debug, Clone, Default)]
pub struct StageLog {
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
}

impl StageLog {
    fn note(&mut self, stage: &str, was_skipped: bool) {
        if was_skipped {
            self.skipped.push(stage.to_string());
        } else {
            self.ran.push(stage.to_string());
        }
    }
}

/// Outcome of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub stages: StageLog,
    pub run_dir: PathBuf,
    pub val: EvalSummary,
    pub evaluated: EvalSummary,
    pub eval_split: Split,
}

// Shared artifacts the corpus-level stages produce. Later stages key off
// the artifact bytes, so nothing else needs to carry hashes around.
struct SharedArtifacts {
    manifest: Manifest,
    manifest_bytes: Vec<u8>,
    features_dir: PathBuf,
    emb_path: PathBuf,
    graph_path: PathBuf,
}

fn shared_graph_path(out_dir: &Path, n: Option<usize>) -> PathBuf {
    match n {
        Some(n) => out_dir.join(format!("g_n{n}.tsv")),
        None => out_dir.join("g.tsv"),
    }
}

// Features, embeddings, and graph, gated in cfg.out_dir. `graph_n` picks
// the per-cap graph file name so grid cells with different caps coexist.
fn run_shared_prefix(
    cfg: &PipelineConfig,
    graph_n: Option<usize>,
    stages: &mut StageLog,
) -> Result<SharedArtifacts> {
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let gate = StageGate::new(&cfg.out_dir);

    let manifest_bytes = file_bytes("manifest", &cfg.manifest)?;
    let manifest = dataset::load_manifest(&cfg.manifest).map_err(stage_err("manifest"))?;

    let features_dir = cfg.out_dir.join("features");
    let features_key = {
        let mut parts: Vec<Vec<u8>> =
            vec![mel_canonical(&cfg.mel).into_bytes(), manifest_bytes.clone()];
        for record in manifest.records() {
            let p = resolve_audio(&cfg.audio_root, &record.audio_path);
            parts.push(file_bytes("features", &p)?);
        }
        let refs: Vec<&[u8]> = parts.iter().map(|v| v.as_slice()).collect();
        hash_hex(&refs)
    };
    let was = gate.run(
        "features",
        &features_key,
        &[
            features_dir.join("norm.stats"),
            features_dir.join("features.meta"),
        ],
        || {
            features::extract_features(&manifest, &cfg.audio_root, &features_dir, &cfg.mel)
                .map(|_| ())
                .map_err(stage_err("features"))
        },
    )?;
    stages.note("features", was);

    let emb_path = cfg.out_dir.join("emb.bin");
    let mut emb_key = String::from("none");
    if let Some(source) = &cfg.embed {
        emb_key = match source {
            EmbedSource::File(p) => hash_hex(&[b"copy", &file_bytes("embed", p)?]),
            EmbedSource::Toy { dim, seed } => hash_hex(&[
                format!("toy dim{dim} seed{seed}").as_bytes(),
                features_key.as_bytes(),
            ]),
        };
        let was = gate.run("embed", &emb_key, &[emb_path.clone()], || match source {
            EmbedSource::File(p) => {
                fs::copy(p, &emb_path).map_err(io_err(&emb_path))?;
                Ok(())
            }
            EmbedSource::Toy { dim, seed } => {
                let emb = toy_embed_dir(&features_dir, *dim, *seed)?;
                embedding::save_embeddings(&emb_path, &emb).map_err(stage_err("embed"))
            }
        })?;
        stages.note("embed", was);
    }

    let graph_path = shared_graph_path(&cfg.out_dir, graph_n);
    if let Some(stage) = &cfg.graph {
        if cfg.embed.is_none() {
            return Err(PipelineError::Stage {
                stage: "graph",
                source: "graph stage needs an [embed] source".into(),
            });
        }
        let gate_name = match graph_n {
            Some(n) => format!("graph_n{n}"),
            None => "graph".to_string(),
        };
        let graph_key = hash_hex(&[
            graph_canonical(stage).as_bytes(),
            emb_key.as_bytes(),
            &manifest_bytes,
        ]);
        let was = gate.run(&gate_name, &graph_key, &[graph_path.clone()], || {
            let emb = embedding::load_embeddings(&emb_path).map_err(stage_err("graph"))?;
            let emb = match stage.split {
                None => emb,
                Some(split) => {
                    let ids: Vec<String> = manifest
                        .split_records(split)
                        .iter()
                        .map(|r| r.id.clone())
                        .collect();
                    emb.subset(&ids).map_err(stage_err("graph"))?
                }
            };
            let g = graph::build_graph(
                &emb,
                &GraphConfig {
                    epsilon: stage.epsilon,
                    max_neighbors: stage.max_neighbors,
                },
            )
            .map_err(stage_err("graph"))?;
            graph::save_graph(&graph_path, &g).map_err(stage_err("graph"))
        })?;
        stages.note(&gate_name, was);
    }

    Ok(SharedArtifacts {
        manifest,
        manifest_bytes,
        features_dir,
        emb_path,
        graph_path,
    })
}

// Train and eval, gated in their own root: the out dir for plain runs, the
// cell dir for grid cells. Returns the run directory.
fn run_train_eval(
    cfg: &PipelineConfig,
    shared: &SharedArtifacts,
    root: &Path,
    stages: &mut StageLog,
) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let gate = StageGate::new(root);
    let run_dir = root.join("run");

    let model_text = file_bytes("train", &cfg.model)?;
    let model_cfg = nn::load_model_config(&cfg.model).map_err(stage_err("train"))?;
    let needs_graph = cfg.train.mode == TrainMode::Nsl;
    let needs_emb = cfg.train.mode.fuse_mode().is_some();
    let train_key = {
        let graph_bytes = if needs_graph {
            file_bytes("train", &shared.graph_path)?
        } else {
            Vec::new()
        };
        let emb_bytes = if needs_emb {
            file_bytes("train", &shared.emb_path)?
        } else {
            Vec::new()
        };
        hash_hex(&[
            &shared.manifest_bytes,
            &model_text,
            train_canonical(&cfg.train).as_bytes(),
            &graph_bytes,
            &emb_bytes,
        ])
    };
    let was = gate.run(
        "train",
        &train_key,
        &[
            run_dir.join("metrics.tsv"),
            run_dir.join("best.nnck"),
            run_dir.join("config.lock"),
        ],
        || {
            let mut set = FeatureSet::open(&shared.features_dir).map_err(stage_err("train"))?;
            let graph_obj = if needs_graph {
                Some(graph::load_graph(&shared.graph_path).map_err(stage_err("train"))?)
            } else {
                None
            };
            let emb_obj = if needs_emb {
                Some(embedding::load_embeddings(&shared.emb_path).map_err(stage_err("train"))?)
            } else {
                None
            };
            train::train(
                &shared.manifest,
                &mut set,
                graph_obj.as_ref(),
                emb_obj.as_ref(),
                &model_cfg,
                &cfg.train,
                Some(&run_dir),
            )
            .map_err(stage_err("train"))?;
            let lock = format!(
                "{}model_config:\n{}",
                cfg.canonical_string(),
                model_cfg.canonical_string()
            );
            let lock_path = run_dir.join("config.lock");
            fs::write(&lock_path, lock).map_err(io_err(&lock_path))
        },
    )?;
    stages.note("train", was);

    let eval_key = hash_hex(&[
        train_key.as_bytes(),
        cfg.eval_split.as_str().as_bytes(),
        &file_bytes("eval", &run_dir.join("best.nnck"))?,
    ]);
    let val_path = run_dir.join("eval_val.tsv");
    let eval_path = run_dir.join(format!("eval_{}.tsv", cfg.eval_split));
    let confusion_path = run_dir.join(format!("confusion_{}.tsv", cfg.eval_split));
    let was = gate.run(
        "eval",
        &eval_key,
        &[val_path.clone(), eval_path.clone(), confusion_path.clone()],
        || {
            let mut set = FeatureSet::open(&shared.features_dir).map_err(stage_err("eval"))?;
            let state = nn::checkpoint::load_checkpoint(run_dir.join("best.nnck"), &model_cfg)
                .map_err(stage_err("eval"))?;
            let emb_obj = if needs_emb {
                Some(embedding::load_embeddings(&shared.emb_path).map_err(stage_err("eval"))?)
            } else {
                None
            };
            let fusion = cfg
                .train
                .mode
                .fuse_mode()
                .and_then(|m| emb_obj.as_ref().map(|e| (m, e)));
            let val = eval::evaluate(
                &state,
                &model_cfg,
                &shared.manifest,
                Split::Val,
                &mut set,
                fusion,
            )
            .map_err(stage_err("eval"))?;
            let scored = eval::evaluate(
                &state,
                &model_cfg,
                &shared.manifest,
                cfg.eval_split,
                &mut set,
                fusion,
            )
            .map_err(stage_err("eval"))?;
            write_eval_summary(
                &val_path,
                &EvalSummary {
                    accuracy: val.accuracy,
                    uar: val.uar,
                    samples: val.samples,
                },
            )?;
            write_eval_summary(
                &eval_path,
                &EvalSummary {
                    accuracy: scored.accuracy,
                    uar: scored.uar,
                    samples: scored.samples,
                },
            )?;
            eval::save_confusion(
                &confusion_path,
                &scored.confusion,
                shared.manifest.vocab().classes(),
            )
            .map_err(stage_err("eval"))
        },
    )?;
    stages.note("eval", was);
    Ok(run_dir)
}

/// Execute manifest, features, embeddings, graph, train, and eval in order,
/// hash-gated per stage, then summarize into `report.tsv`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    let mut stages = StageLog::default();
    let shared = run_shared_prefix(cfg, None, &mut stages)?;
    let run_dir = run_train_eval(cfg, &shared, &cfg.out_dir, &mut stages)?;

    let val = read_eval_summary(run_dir.join("eval_val.tsv"))?;
    let evaluated = read_eval_summary(run_dir.join(format!("eval_{}.tsv", cfg.eval_split)))?;
    let split = cfg.eval_split;
    let mut report = format!("mode\tn\talpha\ttap\tval_acc\tval_uar\t{split}_acc\t{split}_uar\n");
    let _ = writeln!(
        report,
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        cfg.train.mode,
        cfg.train
            .max_neighbors
            .map(|n| n.to_string())
            .unwrap_or_default(),
        cfg.train.alpha,
        cfg.train.tap,
        val.accuracy,
        val.uar,
        evaluated.accuracy,
        evaluated.uar
    );
    let report_path = cfg.out_dir.join("report.tsv");
    fs::write(&report_path, report).map_err(io_err(&report_path))?;

    Ok(PipelineReport {
        stages,
        run_dir,
        val,
        evaluated,
        eval_split: cfg.eval_split,
    })
}

fn resolve_audio(root: &Path, recorded: &str) -> PathBuf {
    let p = Path::new(recorded);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// The experiment grid: every mode crossed with the parameters that apply
/// to it, times the seed list.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub modes: Vec<TrainMode>,
    pub ns: Vec<usize>,
    pub alphas: Vec<f64>,
    pub taps: Vec<Tap>,
    pub seeds: Vec<u64>,
}

/// One grid cell: the hyperparameters of a single run.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub mode: TrainMode,
    pub n: Option<usize>,
    pub alpha: Option<f64>,
    pub tap: Option<Tap>,
    pub seed: u64,
}

impl GridCell {
    /// Directory name, unique per cell by construction.
    pub fn dir_name(&self) -> String {
        let mut s = self.mode.to_string();
        if let Some(n) = self.n {
            let _ = write!(s, "_n{n}");
        }
        if let Some(a) = self.alpha {
            let _ = write!(s, "_a{a}");
        }
        if let Some(t) = self.tap {
            let _ = write!(s, "_{}", t.to_string().to_ascii_lowercase());
        }
        let _ = write!(s, "_s{}", self.seed);
        s
    }
}

impl GridSpec {
    pub fn new(
        modes: Vec<TrainMode>,
        ns: Vec<usize>,
        alphas: Vec<f64>,
        taps: Vec<Tap>,
        seeds: Vec<u64>,
    ) -> std::result::Result<GridSpec, String> {
        if modes.is_empty() || seeds.is_empty() {
            return Err("grid needs at least one mode and one seed".into());
        }
        if modes.contains(&TrainMode::Nsl)
            && (ns.is_empty() || alphas.is_empty() || taps.is_empty())
        {
            return Err("nsl grid cells need ns, alphas, and taps".into());
        }
        let spec = GridSpec {
            modes,
            ns,
            alphas,
            taps,
            seeds,
        };
        let mut seen = std::collections::HashSet::new();
        for cell in spec.cells() {
            if !seen.insert(cell.dir_name()) {
                return Err(format!("duplicate grid cell {}", cell.dir_name()));
            }
        }
        Ok(spec)
    }

    /// Expand the spec into cells: NSL crosses n, alpha, and tap; the other
    /// modes take one cell per seed.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut cells = Vec::new();
        for &seed in &self.seeds {
            for &mode in &self.modes {
                if mode == TrainMode::Nsl {
                    for &n in &self.ns {
                        for &alpha in &self.alphas {
                            for &tap in &self.taps {
                                cells.push(GridCell {
                                    mode,
                                    n: Some(n),
                                    alpha: Some(alpha),
                                    tap: Some(tap),
                                    seed,
                                });
                            }
                        }
                    }
                } else {
                    cells.push(GridCell {
                        mode,
                        n: None,
                        alpha: None,
                        tap: None,
                        seed,
                    });
                }
            }
        }
        cells
    }
}

fn write_cell_meta(dir: &Path, cell: &GridCell) -> Result<()> {
    let mut text = format!("mode = \"{}\"\nseed = {}\n", cell.mode, cell.seed);
    if let Some(n) = cell.n {
        let _ = writeln!(text, "n = {n}");
    }
    if let Some(a) = cell.alpha {
        let _ = writeln!(text, "alpha = {a}");
    }
    if let Some(t) = cell.tap {
        let _ = writeln!(text, "tap = \"{t}\"");
    }
    let path = dir.join("cell.meta");
    fs::write(&path, text).map_err(io_err(&path))
}

fn read_cell_meta(path: &Path) -> Result<GridCell> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| bad_config(path, format!("not valid TOML: {e}")))?;
    let mode = get_str(path, "cell", &table, "mode")?
        .ok_or_else(|| bad_config(path, "missing mode"))?;
    let mode = TrainMode::from_str(mode).map_err(|msg| bad_config(path, msg))?;
    let seed = get_usize(path, "cell", &table, "seed")?
        .ok_or_else(|| bad_config(path, "missing seed"))? as u64;
    let tap = match get_str(path, "cell", &table, "tap")? {
        None => None,
        Some(t) => Some(Tap::from_str(t).map_err(|msg| bad_config(path, msg))?),
    };
    Ok(GridCell {
        mode,
        n: get_usize(path, "cell", &table, "n")?,
        alpha: get_f64(path, "cell", &table, "alpha")?,
        tap,
        seed,
    })
}

/// Outcome of a grid run: per-cell directories plus the comparison table.
#[derive(Debug, Clone)]
pub struct GridReport {
    pub cells: Vec<(GridCell, PathBuf)>,
    pub report_path: PathBuf,
}

/// Run every grid cell through the pipeline. Shared stages (features,
/// embeddings, per-cap graphs) live at the top of `out_dir` and run once;
/// each cell owns `cells/<name>/` with its own train and eval gates.
pub fn run_grid(base: &PipelineConfig, spec: &GridSpec) -> Result<GridReport> {
    let mut out = Vec::new();
    for cell in spec.cells() {
        let mut cfg = base.clone();
        cfg.train.mode = cell.mode;
        cfg.train.seed = cell.seed;
        if let Some(alpha) = cell.alpha {
            cfg.train.alpha = alpha;
        }
        if let Some(tap) = cell.tap {
            cfg.train.tap = tap;
        }
        match cell.n {
            Some(n) => {
                cfg.train.max_neighbors = Some(n);
                let stage = cfg.graph.get_or_insert(GraphStage {
                    epsilon: GraphConfig::default().epsilon,
                    max_neighbors: n,
                    split: Some(Split::Train),
                });
                stage.max_neighbors = n;
            }
            // Cells without a neighbor cap never read the graph.
            None => cfg.graph = None,
        }

        let mut stages = StageLog::default();
        let shared = run_shared_prefix(&cfg, cell.n, &mut stages)?;
        let cell_dir = base.out_dir.join("cells").join(cell.dir_name());
        run_train_eval(&cfg, &shared, &cell_dir, &mut stages)?;
        write_cell_meta(&cell_dir, &cell)?;
        log::info!(
            "grid cell {}: ran [{}], skipped [{}]",
            cell.dir_name(),
            stages.ran.join(", "),
            stages.skipped.join(", ")
        );
        out.push((cell, cell_dir));
    }
    let report_path = report_grid(&base.out_dir)?;
    Ok(GridReport {
        cells: out,
        report_path,
    })
}

/// Build the comparison table over every completed cell under
/// `out_dir/cells/`, sorted by test UAR descending. Non-base rows carry a
/// one-tailed z and p against the base cell of the same seed when one
/// exists; the columns stay empty otherwise.
pub fn report_grid(out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let cells_dir = out_dir.join("cells");
    let mut rows = Vec::new();
    let entries = fs::read_dir(&cells_dir).map_err(io_err(&cells_dir))?;
    for entry in entries {
        let entry = entry.map_err(io_err(&cells_dir))?;
        let dir = entry.path();
        let meta = dir.join("cell.meta");
        if !meta.exists() {
            continue;
        }
        let cell = read_cell_meta(&meta)?;
        let val = read_eval_summary(dir.join("run/eval_val.tsv"))?;
        let test = read_eval_summary(dir.join("run/eval_test.tsv"))?;
        rows.push((cell, val, test));
    }
    if rows.is_empty() {
        return Err(PipelineError::Report {
            path: cells_dir.display().to_string(),
            msg: "no completed cells".into(),
        });
    }

    let base_by_seed: BTreeMap<u64, EvalSummary> = rows
        .iter()
        .filter(|(c, _, _)| c.mode == TrainMode::Base)
        .map(|(c, _, t)| (c.seed, *t))
        .collect();
    rows.sort_by(|a, b| b.2.uar.total_cmp(&a.2.uar));

    let mut text =
        String::from("mode\tn\talpha\ttap\tval_acc\tval_uar\ttest_acc\ttest_uar\tz\tp\n");
    for (cell, val, test) in &rows {
        let (z_col, p_col) = match base_by_seed.get(&cell.seed) {
            Some(base) if cell.mode != TrainMode::Base => {
                let z = eval::two_proportion_z(test.uar, base.uar, test.samples, base.samples)
                    .map_err(stage_err("report"))?;
                let p = eval::one_tailed_z_test(test.uar, base.uar, test.samples, base.samples)
                    .map_err(stage_err("report"))?;
                (z.to_string(), p.to_string())
            }
            _ => (String::new(), String::new()),
        };
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            cell.mode,
            cell.n.map(|n| n.to_string()).unwrap_or_default(),
            cell.alpha.map(|a| a.to_string()).unwrap_or_default(),
            cell.tap.map(|t| t.to_string()).unwrap_or_default(),
            val.accuracy,
            val.uar,
            test.accuracy,
            test.uar,
            z_col,
            p_col
        );
    }
    let report_path = out_dir.join("report.tsv");
    fs::write(&report_path, text).map_err(io_err(&report_path))?;
    Ok(report_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthConfig};

    fn synth_corpus(dir: &Path) -> PathBuf {
        let cfg = SynthConfig {
            classes: 3,
            train_per_class: 4,
            val_per_class: 2,
            test_per_class: 2,
            speakers: 5,
            embedding_dim: 16,
            max_duration_s: 0.2,
            min_duration_s: 0.15,
            seed: 11,
            ..SynthConfig::default()
        };
        synth::generate(dir, &cfg).unwrap();
        dir.join("manifest.tsv")
    }

    fn small_model(path: &Path) {
        // 11 frames at the synth test settings: 1 + (0.2s * 16k - 512) / 256.
        let text = "\
input_frames = 11
input_mels = 16
classes = 3

[[layer]]
type = \"flatten\"

[[layer]]
type = \"dense\"
out_dim = 8
name = \"FC1\"

[[layer]]
type = \"relu\"

[[layer]]
type = \"dense\"
out_dim = 8
name = \"FC2\"

[[layer]]
type = \"relu\"

[[layer]]
type = \"dense\"
out_dim = 3
";
        fs::write(path, text).unwrap();
    }

    fn base_config(dir: &Path) -> PipelineConfig {
        let corpus = dir.join("corpus");
        let manifest = synth_corpus(&corpus);
        let model = dir.join("model.cfg");
        small_model(&model);
        PipelineConfig {
            manifest,
            audio_root: corpus.clone(),
            out_dir: dir.join("out"),
            model,
            mel: MelConfig {
                n_mels: 16,
                ..MelConfig::default()
            },
            embed: Some(EmbedSource::Toy { dim: 8, seed: 3 }),
            graph: Some(GraphStage {
                epsilon: 0.5,
                max_neighbors: 2,
                split: Some(Split::Train),
            }),
            train: TrainConfig {
                mode: TrainMode::Nsl,
                alpha: 0.05,
                epochs: 2,
                batch_size: 4,
                seed: 5,
                max_neighbors: Some(2),
                ..TrainConfig::default()
            },
            eval_split: Split::Test,
        }
    }

    #[test]
    fn pipeline_runs_and_then_skips_every_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path());

        let first = run_pipeline(&cfg).unwrap();
        assert_eq!(
            first.stages.ran,
            vec!["features", "embed", "graph", "train", "eval"]
        );
        assert!(first.stages.skipped.is_empty());
        for file in ["metrics.tsv", "batches.tsv", "best.nnck", "config.lock"] {
            assert!(first.run_dir.join(file).exists(), "missing {file}");
        }
        assert!(cfg.out_dir.join("report.tsv").exists());
        assert!(first.evaluated.samples > 0);

        let second = run_pipeline(&cfg).unwrap();
        assert!(second.stages.ran.is_empty(), "reran {:?}", second.stages.ran);
        assert_eq!(second.stages.skipped.len(), 5);
        assert_eq!(second.evaluated, first.evaluated);
    }

    #[test]
    fn changing_one_knob_reruns_only_downstream_stages() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        run_pipeline(&cfg).unwrap();

        cfg.train.seed = 6;
        let report = run_pipeline(&cfg).unwrap();
        assert_eq!(report.stages.ran, vec!["train", "eval"]);
        assert_eq!(report.stages.skipped, vec!["features", "embed", "graph"]);
    }

    #[test]
    fn eval_summary_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.tsv");
        let s = EvalSummary {
            accuracy: 0.625,
            uar: 0.5833333333333334,
            samples: 48,
        };
        write_eval_summary(&path, &s).unwrap();
        assert_eq!(read_eval_summary(&path).unwrap(), s);
    }

    #[test]
    fn grid_runs_cells_and_reports_against_the_seed_matched_base() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.train.epochs = 1;
        let spec = GridSpec::new(
            vec![TrainMode::Base, TrainMode::Nsl],
            vec![2],
            vec![0.05],
            vec![Tap::Fc2],
            vec![5],
        )
        .unwrap();

        let report = run_grid(&cfg, &spec).unwrap();
        assert_eq!(report.cells.len(), 2);
        let names: Vec<String> = report.cells.iter().map(|(c, _)| c.dir_name()).collect();
        assert!(names.contains(&"base_s5".to_string()));
        assert!(names.contains(&"nsl_n2_a0.05_fc2_s5".to_string()));
        for (_, path) in &report.cells {
            assert!(path.join("run/eval_test.tsv").exists());
            assert!(path.join("cell.meta").exists());
        }
        assert!(cfg.out_dir.join("g_n2.tsv").exists());

        let text = fs::read_to_string(&report.report_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "mode\tn\talpha\ttap\tval_acc\tval_uar\ttest_acc\ttest_uar\tz\tp"
        );
        let base_row = lines.iter().find(|l| l.starts_with("base")).unwrap();
        let nsl_row = lines.iter().find(|l| l.starts_with("nsl")).unwrap();
        let base_fields: Vec<&str> = base_row.split('\t').collect();
        let nsl_fields: Vec<&str> = nsl_row.split('\t').collect();
        assert_eq!(base_fields[8], "");
        assert_eq!(base_fields[9], "");
        let p: f64 = nsl_fields[9].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));

        // Rows come out sorted by test UAR, highest first.
        let uars: Vec<f64> = lines[1..]
            .iter()
            .map(|l| l.split('\t').nth(7).unwrap().parse().unwrap())
            .collect();
        assert!(uars[0] >= uars[1]);
    }

    #[test]
    fn config_file_round_trips_with_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipe.toml");
        fs::write(
            &path,
            "\
[paths]
manifest = \"corpus/manifest.tsv\"
audio_root = \"corpus\"
out = \"out\"
model = \"model.cfg\"

[features]
n_mels = 32
hop_length = 128

[embed]
source = \"toy\"
dim = 64
seed = 9

[graph]
epsilon = 0.25
max_neighbors = 4

[train]
mode = \"nsl\"
alpha = 0.2
tap = \"FC1\"
epochs = 3
seed = 12

[eval]
split = \"val\"
",
        )
        .unwrap();
        let cfg = load_pipeline_config(&path).unwrap();
        assert_eq!(cfg.manifest, dir.path().join("corpus/manifest.tsv"));
        assert_eq!(cfg.mel.n_mels, 32);
        assert_eq!(cfg.mel.hop_length, 128);
        assert_eq!(cfg.mel.win_length, MelConfig::default().win_length);
        assert_eq!(cfg.embed, Some(EmbedSource::Toy { dim: 64, seed: 9 }));
        let g = cfg.graph.unwrap();
        assert_eq!(g.epsilon, 0.25);
        assert_eq!(g.max_neighbors, 4);
        assert_eq!(g.split, Some(Split::Train));
        assert_eq!(cfg.train.mode, TrainMode::Nsl);
        assert_eq!(cfg.train.alpha, 0.2);
        assert_eq!(cfg.train.tap, Tap::Fc1);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.seed, 12);
        assert_eq!(cfg.eval_split, Split::Val);

        fs::write(
            &path,
            "[paths]\nmanifest = \"m\"\nout = \"o\"\nmodel = \"c\"\ntypo = 1\n",
        )
        .unwrap();
        assert!(matches!(
            load_pipeline_config(&path),
            Err(PipelineError::Config { .. })
        ));
    }

    #[test]
    fn mel_and_grid_loaders_accept_optional_sections() {
        let dir = tempfile::tempdir().unwrap();
        let bare = dir.path().join("mel.toml");
        fs::write(&bare, "n_mels = 24\nhop_length = 160\n").unwrap();
        let mel = load_mel_config(&bare).unwrap();
        assert_eq!(mel.n_mels, 24);
        assert_eq!(mel.hop_length, 160);
        assert_eq!(mel.win_length, MelConfig::default().win_length);

        let pipe = dir.path().join("pipe.toml");
        fs::write(
            &pipe,
            "[paths]\nmanifest = \"m\"\nout = \"o\"\nmodel = \"c\"\n",
        )
        .unwrap();
        assert!(load_grid_spec(&pipe).unwrap().is_none());

        fs::write(
            &pipe,
            "[paths]\nmanifest = \"m\"\nout = \"o\"\nmodel = \"c\"\n\n\
             [grid]\nmodes = [\"base\", \"nsl\"]\nns = [3, 6, 9]\n\
             alphas = [0.01, 0.1, 1.0]\ntaps = [\"FC1\", \"FC2\"]\nseeds = [7]\n",
        )
        .unwrap();
        let spec = load_grid_spec(&pipe).unwrap().unwrap();
        assert_eq!(spec.cells().len(), 1 + 3 * 3 * 2);
    }

    #[test]
    fn grid_spec_expands_and_validates() {
        let spec = GridSpec::new(
            vec![TrainMode::Base, TrainMode::Nsl],
            vec![3, 6],
            vec![0.01, 0.1],
            vec![Tap::Fc1, Tap::Fc2],
            vec![1, 2],
        )
        .unwrap();
        // Per seed: one base cell plus 2*2*2 nsl cells.
        assert_eq!(spec.cells().len(), 2 * (1 + 8));

        assert!(GridSpec::new(vec![], vec![], vec![], vec![], vec![1]).is_err());
        assert!(GridSpec::new(
            vec![TrainMode::Nsl],
            vec![],
            vec![0.1],
            vec![Tap::Fc2],
            vec![1]
        )
        .is_err());
    }
}
