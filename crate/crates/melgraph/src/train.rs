//! Training: a composite objective (cross-entropy plus a graph-neighbor
//! similarity term), Adam with a stepped learning-rate schedule, and the
//! plain and transfer-fusion baselines.
//!
//! The neighbor term pulls the tap activations of graph-adjacent samples
//! together: for each batch member, every neighbor's spectrogram is
//! forwarded through the current model in the same step (appended to the
//! batch, deduplicated) and the pair distance is 1 minus the cosine of the
//! two tap vectors. Gradients flow through both ends of every pair. By
//! default the supervised sum is divided by the batch size and the
//! neighbor sum by the total pair count so the blend weight stays
//! comparable across batch geometries; `raw_sums` restores literal sums.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Manifest, Split};
use crate::embedding::EmbeddingMatrix;
use crate::eval;
use crate::features::{self, FeatureSet};
use crate::graph::{self, NeighborGraph};
use crate::nn::{
    self, backward_into, forward_trace, FuseMode, Gradients, ModelConfig, ModelState, Scalar,
    TapActivations, TapGrads, Tensor,
};

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("mode {mode} requires {what}")]
    MissingInput { mode: TrainMode, what: &'static str },
    #[error("no upstream embedding for sample {0:?}")]
    MissingEmbedding(String),
    #[error("feature shape {got_frames}x{got_mels} does not match model input {want_frames}x{want_mels}")]
    ShapeMismatch {
        got_frames: usize,
        got_mels: usize,
        want_frames: usize,
        want_mels: usize,
    },
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error(transparent)]
    Feature(#[from] features::FeatureError),
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

/// Which intermediate activation the neighbor term reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    Fc1,
    Fc2,
}

impl FromStr for Tap {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Tap, String> {
        match s.to_ascii_uppercase().as_str() {
            "FC1" => Ok(Tap::Fc1),
            "FC2" => Ok(Tap::Fc2),
            other => Err(format!("unknown tap {other:?}, expected FC1 or FC2")),
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tap::Fc1 => "FC1",
            Tap::Fc2 => "FC2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Base,
    Nsl,
    TransferAdd,
    TransferMax,
    TransferAvg,
}

impl TrainMode {
    /// Fusion flavor for the transfer baselines, `None` otherwise.
    pub fn fuse_mode(&self) -> Option<FuseMode> {
        match self {
            TrainMode::TransferAdd => Some(FuseMode::Add),
            TrainMode::TransferMax => Some(FuseMode::Max),
            TrainMode::TransferAvg => Some(FuseMode::Avg),
            _ => None,
        }
    }
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<TrainMode, String> {
        match s {
            "base" => Ok(TrainMode::Base),
            "nsl" => Ok(TrainMode::Nsl),
            "transfer_add" => Ok(TrainMode::TransferAdd),
            "transfer_max" => Ok(TrainMode::TransferMax),
            "transfer_avg" => Ok(TrainMode::TransferAvg),
            other => Err(format!("unknown train mode {other:?}")),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Base => "base",
            TrainMode::Nsl => "nsl",
            TrainMode::TransferAdd => "transfer_add",
            TrainMode::TransferMax => "transfer_max",
            TrainMode::TransferAvg => "transfer_avg",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub alpha: f64,
    pub tap: Tap,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_period: usize,
    pub seed: u64,
    pub raw_sums: bool,
    /// Per-member neighbor cap at batch-assembly time. Symmetrization can
    /// push a node's degree past the build-time cap; this restores it.
    pub max_neighbors: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            mode: TrainMode::Base,
            alpha: 0.1,
            tap: Tap::Fc2,
            batch_size: 16,
            epochs: 50,
            lr0: 1e-3,
            lr_decay: 0.9,
            lr_period: 5,
            seed: 0,
            raw_sums: false,
            max_neighbors: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(TrainError::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.lr_period == 0 {
            return Err(TrainError::Config(
                "batch_size, epochs, and lr_period must be >= 1".into(),
            ));
        }
        if !(self.lr0 > 0.0) {
            return Err(TrainError::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::Config(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        Ok(())
    }
}

/// Stepped schedule: `lr0 * decay^(epoch / period)` with integer division.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_period) as i32)
}

/// The two loss components and their blend at one evaluation point.
/// `total` is always the arithmetic `supervised + alpha * neighbor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub neighbor: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(supervised: f64, neighbor: f64, alpha: f64) -> LossBreakdown {
        LossBreakdown {
            supervised,
            neighbor,
            alpha,
            total: supervised + alpha * neighbor,
        }
    }
}

/// Cross entropy `-log softmax(logits)[target]` via log-sum-exp.
pub fn cross_entropy<S: Scalar>(logits: &[S], target: usize) -> f64 {
    assert!(target < logits.len());
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b.to_f64()));
    let sum: f64 = logits.iter().map(|&l| (l.to_f64() - max).exp()).sum();
    max + sum.ln() - logits[target].to_f64()
}

/// 1 minus the cosine of two tap vectors, in [0, 2]. A zero-norm vector is
/// treated as orthogonal (distance 1) with a warning.
pub fn neighbor_distance<S: Scalar>(p_i: &[S], p_k: &[S]) -> f64 {
    let a: Vec<f64> = p_i.iter().map(|&v| v.to_f64()).collect();
    let b: Vec<f64> = p_k.iter().map(|&v| v.to_f64()).collect();
    match crate::embedding::cosine_similarity(&a, &b) {
        Ok(cos) => 1.0 - cos,
        Err(_) => {
            log::warn!("zero-norm tap vector in neighbor distance; treating as orthogonal");
            1.0
        }
    }
}

/// Elementwise fusion of an upstream embedding with an FC1 activation.
pub fn fuse_transfer<S: Scalar>(fc1: &[S], upstream: &[S], mode: FuseMode) -> Result<Vec<S>> {
    if fc1.len() != upstream.len() {
        return Err(TrainError::Config(format!(
            "fusion dims differ: fc1 {} vs upstream {}",
            fc1.len(),
            upstream.len()
        )));
    }
    let two = S::from_f64(2.0);
    Ok(fc1
        .iter()
        .zip(upstream)
        .map(|(&a, &b)| match mode {
            FuseMode::Add => a + b,
            FuseMode::Max => if a >= b { a } else { b },
            FuseMode::Avg => (a + b) / two,
        })
        .collect())
}

/// One assembled batch: member rows first, then deduplicated neighbor rows,
/// with every (member, neighbor) pair as row-index references.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub rows: Vec<String>,
    pub members: usize,
    pub pairs: Vec<(usize, usize)>,
}

/// Resolve the neighbor rows and pairs of a batch. Members absent from the
/// graph simply have no pairs; `cap` truncates each adjacency list (which
/// is sorted strongest-first) to at most that many neighbors.
pub fn assemble_batch(
    members: &[String],
    graph: Option<&NeighborGraph>,
    cap: Option<usize>,
) -> Result<BatchPlan> {
    let mut rows: Vec<String> = members.to_vec();
    let mut index: HashMap<String, usize> = rows
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i))
        .collect();
    let mut pairs = Vec::new();
    if let Some(graph) = graph {
        for (i, id) in members.iter().enumerate() {
            if !graph.contains(id) {
                continue;
            }
            let mut neighbors = graph.neighbors_of(id)?;
            if let Some(cap) = cap {
                neighbors.truncate(cap);
            }
            for (nbr, _w) in neighbors {
                let k = *index.entry(nbr.to_string()).or_insert_with(|| {
                    rows.push(nbr.to_string());
                    rows.len() - 1
                });
                pairs.push((i, k));
            }
        }
    }
    Ok(BatchPlan {
        rows,
        members: members.len(),
        pairs,
    })
}

/// Loss terms of one batch given its activations. `labels[r]` is `None`
/// for appended neighbor rows, which carry no supervised term.
pub struct BatchTerms<'a, S> {
    pub taps: &'a [TapActivations<S>],
    pub labels: &'a [Option<usize>],
    pub pairs: &'a [(usize, usize)],
    pub members: usize,
}

fn tap_of<'a, S>(taps: &'a TapActivations<S>, tap: Tap) -> &'a [S] {
    match tap {
        Tap::Fc1 => &taps.fc1,
        Tap::Fc2 => &taps.fc2,
    }
}

/// Evaluate the composite loss over one batch's activations.
pub fn nsl_batch_loss<S: Scalar>(
    terms: &BatchTerms<'_, S>,
    tap: Tap,
    alpha: f64,
    raw_sums: bool,
) -> LossBreakdown {
    let mut supervised = 0.0f64;
    for (t, label) in terms.taps.iter().zip(terms.labels) {
        if let Some(y) = label {
            supervised += cross_entropy(&t.logits, *y);
        }
    }
    if !raw_sums {
        supervised /= terms.members.max(1) as f64;
    }
    let mut neighbor = 0.0f64;
    for &(i, k) in terms.pairs {
        neighbor += neighbor_distance(tap_of(&terms.taps[i], tap), tap_of(&terms.taps[k], tap));
    }
    if !raw_sums {
        neighbor /= terms.pairs.len().max(1) as f64;
    }
    LossBreakdown::new(supervised, neighbor, alpha)
}

/// Per-row tap gradients of [`nsl_batch_loss`]. With `alpha == 0` the tap
/// vectors are left untouched (empty injections), so the backward pass is
/// arithmetically identical to a plain supervised step.
pub fn nsl_batch_grads<S: Scalar>(
    terms: &BatchTerms<'_, S>,
    tap: Tap,
    alpha: f64,
    raw_sums: bool,
) -> Vec<TapGrads<S>> {
    let supervised_w = if raw_sums {
        1.0
    } else {
        1.0 / terms.members.max(1) as f64
    };
    let mut grads: Vec<TapGrads<S>> = terms
        .taps
        .iter()
        .zip(terms.labels)
        .map(|(t, label)| match label {
            Some(y) => {
                let probs = nn::softmax(&t.logits);
                let d: Vec<S> = probs
                    .iter()
                    .enumerate()
                    .map(|(c, &p)| {
                        let delta = if c == *y { S::one() } else { S::zero() };
                        (p - delta) * S::from_f64(supervised_w)
                    })
                    .collect();
                TapGrads::logits_only(d)
            }
            None => TapGrads::logits_only(Vec::new()),
        })
        .collect();

    if alpha == 0.0 || terms.pairs.is_empty() {
        return grads;
    }
    let pair_w = if raw_sums {
        alpha
    } else {
        alpha / terms.pairs.len().max(1) as f64
    };
    let w = S::from_f64(pair_w);
    for &(i, k) in terms.pairs {
        let a = tap_of(&terms.taps[i], tap);
        let b = tap_of(&terms.taps[k], tap);
        let na = a.iter().map(|&v| v * v).sum::<S>().sqrt();
        let nb = b.iter().map(|&v| v * v).sum::<S>().sqrt();
        if na == S::zero() || nb == S::zero() {
            // Matches the distance-1 convention: locally constant, no pull.
            continue;
        }
        let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<S>();
        let cos = dot / (na * nb);
        for (dst, j) in [(i, 0usize), (k, 1usize)] {
            let (p, q, np, nq) = if j == 0 { (a, b, na, nb) } else { (b, a, nb, na) };
            let d = match tap {
                Tap::Fc1 => &mut grads[dst].d_fc1,
                Tap::Fc2 => &mut grads[dst].d_fc2,
            };
            if d.is_empty() {
                d.resize(p.len(), S::zero());
            }
            for (dj, (&pj, &qj)) in d.iter_mut().zip(p.iter().zip(q)) {
                // d/dp of (1 - cos) = cos * p / |p|^2 - q / (|p| |q|).
                *dj += w * (cos * pj / (np * np) - qj / (np * nq));
            }
        }
    }
    grads
}

/// The composite objective as a checkable batch loss (f64 path).
pub struct NslObjective {
    pub labels: Vec<Option<usize>>,
    pub pairs: Vec<(usize, usize)>,
    pub members: usize,
    pub tap: Tap,
    pub alpha: f64,
    pub raw_sums: bool,
}

impl nn::gradcheck::BatchLoss<f64> for NslObjective {
    fn evaluate(&self, taps: &[TapActivations<f64>]) -> f64 {
        let terms = BatchTerms {
            taps,
            labels: &self.labels,
            pairs: &self.pairs,
            members: self.members,
        };
        nsl_batch_loss(&terms, self.tap, self.alpha, self.raw_sums).total
    }
    fn tap_grads(&self, taps: &[TapActivations<f64>]) -> Vec<TapGrads<f64>> {
        let terms = BatchTerms {
            taps,
            labels: &self.labels,
            pairs: &self.pairs,
            members: self.members,
        };
        nsl_batch_grads(&terms, self.tap, self.alpha, self.raw_sums)
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update with bias correction. Increments the step counter.
pub fn adam_step<S: Scalar>(state: &mut ModelState<S>, grads: &Gradients<S>, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64(ADAM_BETA1);
    let b2 = S::from_f64(ADAM_BETA2);
    let one = S::one();
    let b1c = S::from_f64(1.0 - ADAM_BETA1.powi(t));
    let b2c = S::from_f64(1.0 - ADAM_BETA2.powi(t));
    let eps = S::from_f64(ADAM_EPS);
    let lr_s = S::from_f64(lr);

    let update = |p: &mut Tensor<S>, m: &mut Tensor<S>, v: &mut Tensor<S>, g: &Tensor<S>| {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        let gd = g.data();
        for idx in 0..pd.len() {
            md[idx] = b1 * md[idx] + (one - b1) * gd[idx];
            vd[idx] = b2 * vd[idx] + (one - b2) * gd[idx] * gd[idx];
            let m_hat = md[idx] / b1c;
            let v_hat = vd[idx] / b2c;
            pd[idx] = pd[idx] - lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    };
    for i in 0..state.params.len() {
        if let (Some(p), Some(m), Some(v), Some(g)) = (
            state.params[i].as_mut(),
            state.adam_m[i].as_mut(),
            state.adam_v[i].as_mut(),
            grads.layers[i].as_ref(),
        ) {
            update(&mut p.weight, &mut m.weight, &mut v.weight, &g.weight);
            update(&mut p.bias, &mut m.bias, &mut v.bias, &g.bias);
        }
    }
    if let (Some(p), Some(m), Some(v), Some(g)) = (
        state.adapter.as_mut(),
        state.adapter_m.as_mut(),
        state.adapter_v.as_mut(),
        grads.adapter.as_ref(),
    ) {
        update(&mut p.weight, &mut m.weight, &mut v.weight, &g.weight);
        update(&mut p.bias, &mut m.bias, &mut v.bias, &g.bias);
    }
}

/// SHA-256 over every parameter tensor's little-endian bytes in canonical
/// order. Moments and the step counter are excluded.
pub fn param_digest(state: &ModelState<f32>) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for t in state.param_tensors() {
        for v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub supervised: f64,
    pub neighbor: f64,
    pub total: f64,
    pub val_acc: f64,
    pub val_uar: f64,
}

/// Everything a finished run reports. Logged files land in the run
/// directory when one is given.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_uar: f64,
    pub final_train_accuracy: f64,
    pub param_digests: Vec<[u8; 32]>,
    pub best_state: ModelState<f32>,
    pub final_state: ModelState<f32>,
}

fn epoch_shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    // Golden-ratio mixing keeps per-epoch streams disjoint across seeds.
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Full training loop. Deterministic for a fixed config and inputs:
/// epoch-wise shuffles derive from (seed, epoch), batches run in order,
/// and every reduction has a fixed order. Selection: best validation UAR,
/// earliest epoch on ties.
pub fn train(
    manifest: &Manifest,
    feature_set: &mut FeatureSet,
    graph: Option<&NeighborGraph>,
    embeddings: Option<&EmbeddingMatrix>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    let graph = match train_cfg.mode {
        TrainMode::Nsl => Some(graph.ok_or(TrainError::MissingInput {
            mode: train_cfg.mode,
            what: "a neighbor graph",
        })?),
        _ => None,
    };
    let fuse = train_cfg.mode.fuse_mode();
    let embeddings = match fuse {
        Some(_) => Some(embeddings.ok_or(TrainError::MissingInput {
            mode: train_cfg.mode,
            what: "upstream embeddings",
        })?),
        None => None,
    };

    let mut state: ModelState<f32> = match embeddings {
        Some(emb) => ModelState::init_with_adapter(model_cfg, train_cfg.seed, Some(emb.dim()))?,
        None => ModelState::init(model_cfg, train_cfg.seed)?,
    };

    let train_ids: Vec<String> = manifest
        .split_records(Split::Train)
        .iter()
        .map(|r| r.id.clone())
        .collect();
    if train_ids.is_empty() {
        return Err(TrainError::Config("train split is empty".into()));
    }
    let labels: HashMap<String, usize> = manifest
        .records()
        .iter()
        .map(|r| (r.id.clone(), manifest.label_id(r)))
        .collect();

    let load_input = |set: &mut FeatureSet, id: &str| -> Result<Tensor<f32>> {
        let (values, frames, mels) = set.standardized(id)?;
        if (frames, mels) != (model_cfg.input_frames, model_cfg.input_mels) {
            return Err(TrainError::ShapeMismatch {
                got_frames: frames,
                got_mels: mels,
                want_frames: model_cfg.input_frames,
                want_mels: model_cfg.input_mels,
            });
        }
        Ok(Tensor::new(vec![frames, mels], values).map_err(nn::NnError::from)?)
    };
    let upstream_of = |emb: &EmbeddingMatrix, id: &str| -> Result<Vec<f32>> {
        emb.row_of(id)
            .map(|r| r.to_vec())
            .ok_or_else(|| TrainError::MissingEmbedding(id.to_string()))
    };

    let mut metrics = Vec::with_capacity(train_cfg.epochs);
    let mut param_digests = Vec::with_capacity(train_cfg.epochs);
    let mut batch_lines = vec!["epoch\tbatch\tsupervised\tneighbor\talpha\ttotal".to_string()];
    let mut best_epoch = 0usize;
    let mut best_val_uar = f64::NEG_INFINITY;
    let mut best_state = state.clone();

    for epoch in 0..train_cfg.epochs {
        let lr = lr_at(epoch, train_cfg);
        let mut order = train_ids.clone();
        order.shuffle(&mut epoch_shuffle_rng(train_cfg.seed, epoch));

        let mut epoch_sup = 0.0f64;
        let mut epoch_nbr = 0.0f64;
        let mut epoch_total = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, members) in order.chunks(train_cfg.batch_size).enumerate() {
            let plan = assemble_batch(members, graph, train_cfg.max_neighbors)?;
            let mut taps = Vec::with_capacity(plan.rows.len());
            let mut traces = Vec::with_capacity(plan.rows.len());
            for id in &plan.rows {
                let x = load_input(feature_set, id)?;
                let fusion = match (fuse, embeddings) {
                    (Some(mode), Some(emb)) => Some((mode, upstream_of(emb, id)?)),
                    _ => None,
                };
                let trace = forward_trace(
                    &state,
                    model_cfg,
                    &x,
                    fusion.as_ref().map(|(m, u)| (*m, u.as_slice())),
                )?;
                taps.push(trace.taps());
                traces.push(trace);
            }
            let row_labels: Vec<Option<usize>> = plan
                .rows
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    if i < plan.members {
                        Some(labels[id])
                    } else {
                        None
                    }
                })
                .collect();
            let terms = BatchTerms {
                taps: &taps,
                labels: &row_labels,
                pairs: &plan.pairs,
                members: plan.members,
            };
            let breakdown =
                nsl_batch_loss(&terms, train_cfg.tap, train_cfg.alpha, train_cfg.raw_sums);
            let tap_grads =
                nsl_batch_grads(&terms, train_cfg.tap, train_cfg.alpha, train_cfg.raw_sums);

            let mut grads = Gradients::zeros_like(&state);
            for (trace, tg) in traces.iter().zip(&tap_grads) {
                if tg.d_logits.is_empty() && tg.d_fc1.is_empty() && tg.d_fc2.is_empty() {
                    continue;
                }
                backward_into(&state, model_cfg, trace, tg, &mut grads)?;
            }
            adam_step(&mut state, &grads, lr);

            epoch_sup += breakdown.supervised;
            epoch_nbr += breakdown.neighbor;
            epoch_total += breakdown.total;
            batches += 1;
            batch_lines.push(format!(
                "{epoch}\t{batch_idx}\t{}\t{}\t{}\t{}",
                breakdown.supervised, breakdown.neighbor, breakdown.alpha, breakdown.total
            ));
        }

        let (val_acc, val_uar) = if manifest.split_records(Split::Val).is_empty() {
            log::warn!("validation split is empty; logging zero validation scores");
            (0.0, 0.0)
        } else {
            let report = eval::evaluate(
                &state,
                model_cfg,
                manifest,
                Split::Val,
                feature_set,
                fuse.and_then(|m| embeddings.map(|e| (m, e))),
            )?;
            (report.accuracy, report.uar)
        };
        if val_uar > best_val_uar {
            best_val_uar = val_uar;
            best_epoch = epoch;
            best_state = state.clone();
        }
        let n = batches.max(1) as f64;
        metrics.push(EpochMetrics {
            epoch,
            lr,
            supervised: epoch_sup / n,
            neighbor: epoch_nbr / n,
            total: epoch_total / n,
            val_acc,
            val_uar,
        });
        param_digests.push(param_digest(&state));
    }

    let final_train_accuracy = eval::evaluate(
        &state,
        model_cfg,
        manifest,
        Split::Train,
        feature_set,
        fuse.and_then(|m| embeddings.map(|e| (m, e))),
    )?
    .accuracy;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let write = |name: &str, text: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|source| TrainError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let mut lines = vec!["epoch\tlr\tsupervised\tneighbor\ttotal\tval_acc\tval_uar".to_string()];
        for m in &metrics {
            lines.push(format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.epoch, m.lr, m.supervised, m.neighbor, m.total, m.val_acc, m.val_uar
            ));
        }
        write("metrics.tsv", lines.join("\n") + "\n")?;
        write("batches.tsv", batch_lines.join("\n") + "\n")?;
        nn::checkpoint::save_checkpoint(dir.join("best.nnck"), &best_state, model_cfg)?;
    }

    Ok(TrainReport {
        metrics,
        best_epoch,
        best_val_uar,
        final_train_accuracy,
        param_digests,
        best_state,
        final_state: state,
    })
}
