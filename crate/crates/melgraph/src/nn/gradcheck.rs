//! Central-difference verification of the analytic gradients.
//!
//! Runs in f64 only. Above 10^4 parameters a seeded random subsample is
//! checked instead of every coordinate. Relu inputs within `h` of zero
//! make finite differences unreliable; the report flags that instead of
//! failing.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    backward_into, forward_trace, FuseMode, Gradients, LayerSpec, ModelConfig, ModelState,
    Result, Scalar, TapActivations, TapGrads, Tensor,
};

/// A differentiable scalar objective over a batch of tap activations.
pub trait BatchLoss<S: Scalar> {
    fn evaluate(&self, taps: &[TapActivations<S>]) -> f64;
    /// Per-sample gradients of the objective w.r.t. logits, fc1, fc2.
    fn tap_grads(&self, taps: &[TapActivations<S>]) -> Vec<TapGrads<S>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub total_params: usize,
    /// True when some relu input sat within `h` of its kink, where the
    /// central difference may disagree with the (exact) subgradient.
    pub unreliable: bool,
}

const SUBSAMPLE_ABOVE: usize = 10_000;
const SUBSAMPLE_SIZE: usize = 2_000;

/// Compare analytic gradients against central differences of the loss.
pub fn grad_check(
    state: &ModelState<f64>,
    cfg: &ModelConfig,
    inputs: &[Tensor<f64>],
    fusion: Option<(FuseMode, &[Vec<f64>])>,
    loss: &dyn BatchLoss<f64>,
    h: f64,
) -> Result<GradCheckReport> {
    let fusion_for = |i: usize| fusion.map(|(mode, ups)| (mode, ups[i].as_slice()));

    // Analytic pass, watching relu inputs along the way.
    let mut taps = Vec::with_capacity(inputs.len());
    let mut traces = Vec::with_capacity(inputs.len());
    let mut unreliable = false;
    for (i, x) in inputs.iter().enumerate() {
        let trace = forward_trace(state, cfg, x, fusion_for(i))?;
        for (l, layer) in cfg.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::Relu)
                && trace.acts[l].data().iter().any(|v| v.abs() <= h)
            {
                unreliable = true;
            }
        }
        taps.push(trace.taps());
        traces.push(trace);
    }
    let tap_grads = loss.tap_grads(&taps);
    let mut analytic = Gradients::zeros_like(state);
    for (trace, tg) in traces.iter().zip(&tap_grads) {
        backward_into(state, cfg, trace, tg, &mut analytic)?;
    }
    let analytic_flat: Vec<f64> = analytic
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();

    let total_params: usize = state.param_tensors().iter().map(|t| t.len()).sum();
    let indices: Vec<usize> = if total_params > SUBSAMPLE_ABOVE {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6d656c);
        let mut picked = sample(&mut rng, total_params, SUBSAMPLE_SIZE).into_vec();
        picked.sort_unstable();
        picked
    } else {
        (0..total_params).collect()
    };

    let mut probe = state.clone();
    let loss_at = |probe: &ModelState<f64>| -> Result<f64> {
        let mut taps = Vec::with_capacity(inputs.len());
        for (i, x) in inputs.iter().enumerate() {
            taps.push(forward_trace(probe, cfg, x, fusion_for(i))?.taps());
        }
        Ok(loss.evaluate(&taps))
    };

    let mut max_rel_error = 0.0f64;
    for &flat in &indices {
        let (tensor_idx, offset) = locate(&probe, flat);
        let original = probe.param_tensors()[tensor_idx].data()[offset];
        set_param(&mut probe, tensor_idx, offset, original + h);
        let plus = loss_at(&probe)?;
        set_param(&mut probe, tensor_idx, offset, original - h);
        let minus = loss_at(&probe)?;
        set_param(&mut probe, tensor_idx, offset, original);
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic_flat[flat];
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        if rel > max_rel_error {
            max_rel_error = rel;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        checked: indices.len(),
        total_params,
        unreliable,
    })
}

fn locate(state: &ModelState<f64>, mut flat: usize) -> (usize, usize) {
    for (i, t) in state.param_tensors().iter().enumerate() {
        if flat < t.len() {
            return (i, flat);
        }
        flat -= t.len();
    }
    unreachable!("flat index out of range");
}

fn set_param(state: &mut ModelState<f64>, tensor_idx: usize, offset: usize, value: f64) {
    state.param_tensors_mut()[tensor_idx].data_mut()[offset] = value;
}
