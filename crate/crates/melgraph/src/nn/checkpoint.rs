//! Binary model checkpoints.
//!
//! Layout, all little-endian: magic `NNCK`, a 32-byte SHA-256 digest of the
//! model config's canonical form, u32 tensor count, then each tensor as
//! u32 rank, u32 dims, f32 values. Tensors follow the canonical parameter
//! order (per-layer weight then bias, adapter pair last). Optimizer moments
//! and the step counter are not part of a checkpoint.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use super::{Dims, LayerParams, LayerSpec, ModelConfig, ModelState, NnError, Result};

const NNCK_MAGIC: &[u8; 4] = b"NNCK";

/// SHA-256 of the config's canonical string form.
pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(cfg.canonical_string().as_bytes());
    hasher.finalize().into()
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    state: &ModelState<f32>,
    cfg: &ModelConfig,
) -> Result<()> {
    let path = path.as_ref();
    let tensors = state.param_tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(NNCK_MAGIC);
    buf.extend_from_slice(&config_digest(cfg));
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|source| NnError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Load a checkpoint saved for exactly this config. The adapter pair is
/// reconstructed when present; moments restart at zero.
pub fn load_checkpoint(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<ModelState<f32>> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|source| NnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let format = |msg: String| NnError::Format {
        path: path.display().to_string(),
        msg,
    };
    if data.len() < 40 || &data[0..4] != NNCK_MAGIC {
        return Err(format("missing NNCK header".into()));
    }
    if data[4..36] != config_digest(cfg) {
        return Err(NnError::DigestMismatch);
    }
    let count = u32::from_le_bytes(data[36..40].try_into().unwrap()) as usize;
    let mut pos = 40usize;
    let mut tensors: Vec<Tensor<f32>> = Vec::with_capacity(count);
    for i in 0..count {
        let need = |n: usize, pos: usize| -> Result<()> {
            if pos + n > data.len() {
                Err(format(format!("tensor {i} is truncated")))
            } else {
                Ok(())
            }
        };
        need(4, pos)?;
        let rank = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        need(rank * 4, pos)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap()) as usize);
            pos += 4;
        }
        let len: usize = shape.iter().product();
        need(len * 4, pos)?;
        let values: Vec<f32> = data[pos..pos + len * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        pos += len * 4;
        tensors.push(Tensor::new(shape, values)?);
    }
    if pos != data.len() {
        return Err(format("trailing bytes after the last tensor".into()));
    }

    let dims = cfg.layer_dims()?;
    let mut iter = tensors.into_iter();
    let mut take_pair = |what: &str,
                         weight_shape: Vec<usize>,
                         bias_shape: Vec<usize>|
     -> Result<LayerParams<f32>> {
        let weight = iter
            .next()
            .ok_or_else(|| format(format!("missing weight tensor for {what}")))?;
        let bias = iter
            .next()
            .ok_or_else(|| format(format!("missing bias tensor for {what}")))?;
        if weight.shape() != weight_shape.as_slice() || bias.shape() != bias_shape.as_slice() {
            return Err(format(format!(
                "tensor shapes for {what} do not match the config"
            )));
        }
        Ok(LayerParams { weight, bias })
    };
    let mut params: Vec<Option<LayerParams<f32>>> = Vec::with_capacity(cfg.layers.len());
    for (i, layer) in cfg.layers.iter().enumerate() {
        let block = match layer {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                ..
            } => {
                let Dims::Chw(in_c, _, _) = dims[i] else {
                    unreachable!()
                };
                Some(take_pair(
                    &format!("conv layer {i}"),
                    vec![*out_channels, in_c, *kernel, *kernel],
                    vec![*out_channels],
                )?)
            }
            LayerSpec::Dense { out_dim, .. } => {
                let Dims::Flat(in_dim) = dims[i] else {
                    unreachable!()
                };
                Some(take_pair(
                    &format!("dense layer {i}"),
                    vec![*out_dim, in_dim],
                    vec![*out_dim],
                )?)
            }
            _ => None,
        };
        params.push(block);
    }
    let adapter = match iter.next() {
        None => None,
        Some(weight) => {
            let bias = iter
                .next()
                .ok_or_else(|| format("adapter weight without a bias".into()))?;
            if weight.shape().len() != 2
                || weight.shape()[0] != cfg.fc1_dim()
                || bias.shape() != [weight.shape()[0]]
            {
                return Err(format("adapter tensor shapes are inconsistent".into()));
            }
            Some(LayerParams { weight, bias })
        }
    };
    if iter.next().is_some() {
        return Err(format("more tensors than the config accounts for".into()));
    }

    let adam_m: Vec<_> = params
        .iter()
        .map(|p| p.as_ref().map(LayerParams::zeros_like))
        .collect();
    let adam_v = adam_m.clone();
    let adapter_m = adapter.as_ref().map(LayerParams::zeros_like);
    let adapter_v = adapter_m.clone();
    Ok(ModelState {
        params,
        adapter,
        adam_m,
        adam_v,
        adapter_m,
        adapter_v,
        step: 0,
    })
}
