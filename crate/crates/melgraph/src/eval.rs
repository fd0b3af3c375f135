//! Metrics: accuracy, unweighted average recall, confusion matrices, and
//! the pooled two-proportion one-tailed z-test used to compare runs.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::dataset::{Manifest, Split};
use crate::embedding::EmbeddingMatrix;
use crate::features::{self, FeatureSet};
use crate::nn::{self, FuseMode, ModelConfig, ModelState, Tensor};

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("invalid metric input: {0}")]
    Validation(String),
    #[error("confusion matrix is empty")]
    Empty,
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("no upstream embedding for sample {0:?}")]
    MissingEmbedding(String),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error(transparent)]
    Feature(#[from] features::FeatureError),
}

/// C x C counts, rows are true classes, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_pairs(
        classes: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(classes);
        for (t, p) in pairs {
            cm.record(t, p);
        }
        cm
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        assert!(true_class < self.classes && predicted < self.classes);
        self.counts[true_class * self.classes + predicted] += 1;
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        self.counts[true_class * self.classes..(true_class + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }
}

/// Fraction of correct predictions: trace over total.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Mean per-class recall. Classes with zero support are excluded with a
/// warning rather than dragged in as zero recall.
pub fn uar(cm: &ConfusionMatrix) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut counted = 0usize;
    for c in 0..cm.classes() {
        let support = cm.row_sum(c);
        if support == 0 {
            log::warn!("class {c} has no support; excluded from UAR");
            continue;
        }
        sum += cm.get(c, c) as f64 / support as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(EvalError::Empty);
    }
    Ok(sum / counted as f64)
}

/// Pooled two-proportion z statistic for rates `a` and `b` over `n_a` and
/// `n_b` trials. Infinite when the pooled rate is degenerate and the rates
/// still differ.
pub fn two_proportion_z(a: f64, b: f64, n_a: u64, n_b: u64) -> Result<f64> {
    for (name, v) in [("a", a), ("b", b)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(EvalError::Validation(format!(
                "rate {name} = {v} is outside [0, 1]"
            )));
        }
    }
    if n_a == 0 || n_b == 0 {
        return Err(EvalError::Validation("sample counts must be >= 1".into()));
    }
    let (na, nb) = (n_a as f64, n_b as f64);
    let pooled = (a * na + b * nb) / (na + nb);
    let variance = pooled * (1.0 - pooled) * (1.0 / na + 1.0 / nb);
    if variance == 0.0 {
        return Ok(match a.partial_cmp(&b).unwrap() {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Greater => f64::INFINITY,
            std::cmp::Ordering::Less => f64::NEG_INFINITY,
        });
    }
    Ok((a - b) / variance.sqrt())
}

/// Standard normal CDF through the error function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// One-tailed p-value for "rate a exceeds rate b": p = 1 - Phi(z).
pub fn one_tailed_z_test(uar_a: f64, uar_b: f64, n_a: u64, n_b: u64) -> Result<f64> {
    let z = two_proportion_z(uar_a, uar_b, n_a, n_b)?;
    if z.is_infinite() {
        return Ok(if z > 0.0 { 0.0 } else { 1.0 });
    }
    Ok(1.0 - normal_cdf(z))
}

/// Index of the largest logit, ties to the lowest class id.
pub fn argmax_lowest(logits: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub uar: f64,
    pub samples: u64,
}

/// Run a model over one manifest split and score it. Transfer-fusion
/// models need their fusion mode and the upstream embeddings used in
/// training.
pub fn evaluate(
    state: &ModelState<f32>,
    model_cfg: &ModelConfig,
    manifest: &Manifest,
    split: Split,
    feature_set: &mut FeatureSet,
    fusion: Option<(FuseMode, &EmbeddingMatrix)>,
) -> Result<EvalReport> {
    let classes = manifest.vocab().len();
    let mut cm = ConfusionMatrix::new(classes);
    for record in manifest.split_records(split) {
        let (values, frames, mels) = feature_set.standardized(&record.id)?;
        let x = Tensor::new(vec![frames, mels], values).map_err(nn::NnError::from)?;
        let taps = match fusion {
            None => nn::forward_with_taps(state, model_cfg, &x)?,
            Some((mode, emb)) => {
                let upstream = emb
                    .row_of(&record.id)
                    .ok_or_else(|| EvalError::MissingEmbedding(record.id.clone()))?;
                nn::forward_with_taps_fused(state, model_cfg, &x, Some((mode, upstream)))?
            }
        };
        cm.record(manifest.label_id(record), argmax_lowest(&taps.logits));
    }
    let accuracy = accuracy(&cm)?;
    let uar = uar(&cm)?;
    Ok(EvalReport {
        samples: cm.total(),
        confusion: cm,
        accuracy,
        uar,
    })
}

/// Write a confusion matrix as TSV: a header of predicted-class names, then
/// one row per true class.
pub fn save_confusion(
    path: impl AsRef<Path>,
    cm: &ConfusionMatrix,
    class_names: &[String],
) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(class_names.len(), cm.classes());
    let mut text = String::from("true\\pred");
    for name in class_names {
        text.push('\t');
        text.push_str(name);
    }
    text.push('\n');
    for t in 0..cm.classes() {
        text.push_str(&class_names[t]);
        for p in 0..cm.classes() {
            text.push_str(&format!("\t{}", cm.get(t, p)));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}
