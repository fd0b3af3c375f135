//! Upstream embeddings: the vectors that drive neighbor-graph construction.
//!
//! Real runs load embeddings dumped by an external upstream model in the
//! EMB1 format; desk-scale runs can synthesize stand-ins with [`toy_embed`].
//! EMB1 is little-endian: magic `EMB1`, u32 N, u32 d, N null-terminated
//! UTF-8 ids, then N x d f32 values row-major.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::audio::Spectrogram;

pub type Result<T> = std::result::Result<T, EmbeddingError>;

#[derive(Error, Debug)]
pub enum EmbeddingError {
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad embedding file {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("invalid embedding matrix: {0}")]
    Validation(String),
    #[error("vectors have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,
}

const EMB1_MAGIC: &[u8; 4] = b"EMB1";

/// N x d embedding matrix with one row per sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    /// Build a matrix from aligned ids and row-major data, validating
    /// uniqueness, finiteness, and nonzero row norms.
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<EmbeddingMatrix> {
        if dim == 0 {
            return Err(EmbeddingError::Validation("dimension must be >= 1".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(EmbeddingError::Validation(format!(
                "{} ids with dim {} need {} values, found {}",
                ids.len(),
                dim,
                ids.len() * dim,
                data.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(EmbeddingError::Validation(format!("duplicate id {id:?}")));
            }
            let slice = &data[row * dim..(row + 1) * dim];
            if slice.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::Validation(format!(
                    "non-finite value in row for {id:?}"
                )));
            }
            if slice.iter().all(|&v| v == 0.0) {
                return Err(EmbeddingError::Validation(format!(
                    "zero-norm row for {id:?}"
                )));
            }
        }
        Ok(EmbeddingMatrix {
            ids,
            dim,
            data,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_of(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.row(i))
    }

    /// Restrict the matrix to the given ids, in the order given. Ids
    /// without a row are an error.
    pub fn subset(&self, ids: &[String]) -> Result<EmbeddingMatrix> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            let row = self.row_of(id).ok_or_else(|| {
                EmbeddingError::Validation(format!("no embedding row for {id:?}"))
            })?;
            data.extend_from_slice(row);
        }
        EmbeddingMatrix::new(ids.to_vec(), self.dim, data)
    }
}

/// Cosine similarity dot(a,b)/(|a||b|), clamped to [-1, 1] so threshold
/// comparisons stay robust against rounding.
///
/// ```
/// let s = melgraph::embedding::cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
/// assert_eq!(s, 0.0);
/// ```
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EmbeddingError::LengthMismatch(a.len(), b.len()));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Cosine similarity of two f32 rows, accumulated in f64.
pub fn cosine_similarity_f32(a: &[f32], b: &[f32]) -> Result<f64> {
    let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    cosine_similarity(&a64, &b64)
}

/// Toy upstream extractor: time-average the spectrogram over frames, then
/// apply a fixed seeded Gaussian random projection `n_mels -> d`.
///
/// The projection depends only on `(n_mels, d, seed)`, so every sample of a
/// corpus shares one map and the output is deterministic.
pub fn toy_embed(spec: &Spectrogram, d: usize, seed: u64) -> Vec<f32> {
    let avg = spec.time_average();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(d);
    for _ in 0..d {
        let mut acc = 0.0f64;
        for &a in &avg {
            let w: f64 = StandardNormal.sample(&mut rng);
            acc += w * a;
        }
        out.push(acc as f32);
    }
    out
}

pub fn save_embeddings(path: impl AsRef<Path>, emb: &EmbeddingMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(EMB1_MAGIC);
    buf.extend_from_slice(&(emb.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(emb.dim() as u32).to_le_bytes());
    for id in emb.ids() {
        buf.extend_from_slice(id.as_bytes());
        buf.push(0);
    }
    for v in &emb.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let format = |msg: String| EmbeddingError::Format {
        path: path.display().to_string(),
        msg,
    };
    if data.len() < 12 || &data[0..4] != EMB1_MAGIC {
        return Err(format("missing EMB1 header".into()));
    }
    let n = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let mut pos = 12usize;
    let mut ids = Vec::with_capacity(n);
    for row in 0..n {
        let end = data[pos..]
            .iter()
            .position(|&b| b == 0)
            .map(|off| pos + off)
            .ok_or_else(|| format(format!("unterminated id at row {row}")))?;
        let id = std::str::from_utf8(&data[pos..end])
            .map_err(|_| format(format!("id at row {row} is not UTF-8")))?;
        ids.push(id.to_string());
        pos = end + 1;
    }
    let expected = pos + n * d * 4;
    if data.len() != expected {
        return Err(format(format!(
            "expected {expected} bytes for {n}x{d}, found {}",
            data.len()
        )));
    }
    let values: Vec<f32> = data[pos..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::new(ids, d, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingMatrix {
        let ids = (0..n).map(|i| format!("s{i:03}")).collect();
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingMatrix::new(ids, d, data).unwrap()
    }

    #[test]
    fn cosine_of_identical_direction_is_one() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        // Positive scaling cannot push it past 1.
        assert_eq!(cosine_similarity(&[1.0, 2.0], &[3.0, 6.0]).unwrap(), 1.0);
    }

    #[test]
    fn cosine_of_orthogonal_is_zero() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_hand_computed_case() {
        let s = cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!((s - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_and_mismatched_vectors() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(EmbeddingError::ZeroNorm)
        ));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(EmbeddingError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn cosine_is_symmetric_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            assert_eq!(ab, ba);
            let scaled: Vec<f64> = a.iter().map(|v| v * 7.5).collect();
            let s = cosine_similarity(&scaled, &b).unwrap();
            assert!((ab - s).abs() < 1e-12);
        }
    }

    #[test]
    fn emb1_round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emb = random_matrix(&mut rng, 50, 256);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        save_embeddings(&path, &emb).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back, emb);
    }

    #[test]
    fn emb1_bytes_match_the_declared_layout() {
        let emb = EmbeddingMatrix::new(
            vec!["a".into(), "b".into()],
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        save_embeddings(&path, &emb).unwrap();
        let bytes = fs::read(&path).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"EMB1");
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&3u32.to_le_bytes());
        expected.extend_from_slice(b"a\0b\0");
        for v in [1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back.row_of("a").unwrap(), &[1.0, 0.0, 0.0]);
        assert_eq!(back.row_of("b").unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn short_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EMB1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&256u32.to_le_bytes());
        bytes.extend_from_slice(b"x\0");
        bytes.extend(std::iter::repeat(0u8).take(255 * 4));
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_embeddings(&path),
            Err(EmbeddingError::Format { .. })
        ));
    }

    #[test]
    fn matrix_validation_rejects_bad_rows() {
        assert!(EmbeddingMatrix::new(
            vec!["a".into(), "a".into()],
            1,
            vec![1.0, 2.0]
        )
        .is_err());
        assert!(EmbeddingMatrix::new(vec!["a".into()], 2, vec![0.0, 0.0]).is_err());
        assert!(EmbeddingMatrix::new(vec!["a".into()], 2, vec![f32::NAN, 1.0]).is_err());
    }

    #[test]
    fn toy_embed_is_deterministic_and_permutation_invariant() {
        let spec = Spectrogram::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2).unwrap();
        let a = toy_embed(&spec, 8, 42);
        let b = toy_embed(&spec, 8, 42);
        assert_eq!(a, b);
        // Swap frames 0 and 2; the time average is unchanged.
        let permuted = Spectrogram::new(vec![5.0, 6.0, 3.0, 4.0, 1.0, 2.0], 3, 2).unwrap();
        assert_eq!(toy_embed(&permuted, 8, 42), a);
        assert_ne!(toy_embed(&spec, 8, 43), a);
    }

    #[test]
    fn toy_embed_is_linear_in_constant_input() {
        let ones = Spectrogram::new(vec![1.0; 8], 2, 4).unwrap();
        let threes = Spectrogram::new(vec![3.0; 8], 2, 4).unwrap();
        let e1 = toy_embed(&ones, 6, 9);
        let e3 = toy_embed(&threes, 6, 9);
        for (a, b) in e1.iter().zip(&e3) {
            assert!((b - 3.0 * a).abs() < 1e-5);
        }
    }
}
