//! SGD and Adam with optional global-norm gradient clipping.
//!
//! Moment buffers are keyed by parameter name and exist only for Adam; names
//! are sorted, so iteration order (and therefore the norm accumulation) is
//! deterministic.

use std::collections::BTreeMap;

use crate::{Element, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct Moments<E: Element> {
    m: Vec<E>,
    v: Vec<E>,
}

#[derive(Debug, Clone)]
pub struct OptimizerState<E: Element> {
    pub kind: OptimKind,
    pub lr: f64,
    pub adam: AdamParams,
    step: u64,
    moments: BTreeMap<String, Moments<E>>,
}

/// Outcome of one step, for logging.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl<E: Element> OptimizerState<E> {
    pub fn sgd(lr: f64) -> Self {
        OptimizerState { kind: OptimKind::Sgd, lr, adam: AdamParams::default(), step: 0, moments: BTreeMap::new() }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerState { kind: OptimKind::Adam, lr, adam: AdamParams::default(), step: 0, moments: BTreeMap::new() }
    }

    pub fn new(kind: OptimKind, lr: f64) -> Self {
        match kind {
            OptimKind::Sgd => Self::sgd(lr),
            OptimKind::Adam => Self::adam(lr),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment buffers exist only for Adam, one per parameter seen so far.
    pub fn tracked_params(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// Marks the start of a new optimizer step (one per batch). Adam bias
    /// correction uses the post-increment count.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one update to a single parameter. `scale` multiplies the raw
    /// gradient (the clipping factor); call [`Self::begin_step`] first.
    pub fn update(&mut self, name: &str, data: &mut [E], grad: &[E], scale: f64) -> Result<()> {
        if data.len() != grad.len() {
            return Err(TensorError::shape(
                "OptimizerState::update",
                format!("`{name}`: {} values vs {} gradients", data.len(), grad.len()),
            ));
        }
        let s = E::from_f64(scale);
        match self.kind {
            OptimKind::Sgd => {
                let lr = E::from_f64(self.lr);
                for (p, g) in data.iter_mut().zip(grad) {
                    *p = *p - lr * (s * *g);
                }
            }
            OptimKind::Adam => {
                let t = self.step.max(1);
                let AdamParams { beta1, beta2, eps } = self.adam;
                let bc1 = 1.0 - beta1.powi(t as i32);
                let bc2 = 1.0 - beta2.powi(t as i32);
                let lr = E::from_f64(self.lr);
                let b1 = E::from_f64(beta1);
                let b2 = E::from_f64(beta2);
                let one_m_b1 = E::from_f64(1.0 - beta1);
                let one_m_b2 = E::from_f64(1.0 - beta2);
                let inv_bc1 = E::from_f64(1.0 / bc1);
                let inv_bc2 = E::from_f64(1.0 / bc2);
                let epse = E::from_f64(eps);
                let entry = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| Moments { m: vec![E::zero(); data.len()], v: vec![E::zero(); data.len()] });
                if entry.m.len() != data.len() {
                    return Err(TensorError::shape(
                        "OptimizerState::update",
                        format!("`{name}`: moment buffer has {} elements, parameter {}", entry.m.len(), data.len()),
                    ));
                }
                for i in 0..data.len() {
                    let g = s * grad[i];
                    entry.m[i] = b1 * entry.m[i] + one_m_b1 * g;
                    entry.v[i] = b2 * entry.v[i] + one_m_b2 * g * g;
                    let mhat = entry.m[i] * inv_bc1;
                    let vhat = entry.v[i] * inv_bc2;
                    data[i] = data[i] - lr * mhat / (vhat.sqrt() + epse);
                }
            }
        }
        Ok(())
    }
}

/// Euclidean norm over all gradients, accumulated in `f64` in iteration
/// order. Errors on the first NaN or infinity, naming the parameter.
pub fn global_grad_norm<'a, E: Element>(
    grads: impl Iterator<Item = (&'a str, &'a [E])>,
) -> Result<f64> {
    let mut sum = 0.0f64;
    for (name, g) in grads {
        for v in g {
            let v = v.as_f64();
            if !v.is_finite() {
                return Err(TensorError::NonFiniteGrad { name: name.to_string() });
            }
            sum += v * v;
        }
    }
    Ok(sum.sqrt())
}

/// Scale factor that brings a gradient of norm `norm` within `clip_norm`.
pub fn clip_scale(norm: f64, clip_norm: Option<f64>) -> (f64, bool) {
    match clip_norm {
        Some(c) if norm > c && norm > 0.0 => (c / norm, true),
        _ => (1.0, false),
    }
}

/// One full optimizer step over named parameters whose gradients sit in the
/// tensors' grad slots. Parameters without a gradient are left untouched.
pub fn optimizer_step<E: Element>(
    params: &mut [(&str, &mut Tensor<E>)],
    state: &mut OptimizerState<E>,
    clip_norm: Option<f64>,
) -> Result<StepReport> {
    state.begin_step();
    let norm = global_grad_norm(
        params
            .iter()
            .filter_map(|(name, t)| t.grad().map(|g| (*name, g))),
    )?;
    let (scale, clipped) = clip_scale(norm, clip_norm);
    for (name, t) in params.iter_mut() {
        if let Some(grad) = t.grad().map(<[E]>::to_vec) {
            state.update(name, t.data_mut(), &grad, scale)?;
        }
    }
    Ok(StepReport { grad_norm: norm, clipped })
}
