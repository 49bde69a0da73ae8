//! Pixel discriminator contract `f(X | theta)`, the reference network, and
//! one optimizer step on the batch-mean composite loss.

mod layers;
mod toy;
mod unet;

use serde::{Deserialize, Serialize};

use crate::error::{CksError, Result};
use crate::losses::LossConfig;
use crate::types::{Image, LayoutId, LossBreakdown, Mask, ParamVector, ProbMap};

pub use toy::PixelLogistic;
pub use unet::BackboneSpec;

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A trainable per-pixel foreground estimator.
///
/// Implementors compute in f64; [`ParamVector`] snapshots are binary32 and
/// converted at the boundary.
pub trait Backbone: Send + Sync {
    fn layout_id(&self) -> LayoutId;

    fn param_count(&self) -> usize;

    /// Input height and width must be multiples of this.
    fn input_align(&self) -> usize;

    fn init_params_f64(&self, seed: u64) -> Vec<f64>;

    fn forward_f64(&self, params: &[f64], x: &Image) -> Result<ProbMap>;

    /// Composite loss of one item and its gradient with respect to `params`.
    fn loss_and_grad(
        &self,
        params: &[f64],
        x: &Image,
        t: &Mask,
        loss: &LossConfig,
    ) -> Result<(LossBreakdown, Vec<f64>)>;

    /// Deterministic initial parameters for `seed`.
    fn init_params(&self, seed: u64) -> ParamVector {
        ParamVector::from_f64(&self.init_params_f64(seed), self.layout_id()).expect("backbones have parameters")
    }

    fn forward(&self, theta: &ParamVector, x: &Image) -> Result<ProbMap> {
        theta.check_layout(&self.layout_id())?;
        self.forward_f64(&theta.to_f64(), x)
    }
}

/// Anything that maps an image to a foreground probability map: a bound
/// backbone, a cache model, or a test oracle.
pub trait Discriminator {
    fn predict(&self, x: &Image) -> Result<ProbMap>;

    fn input_align(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Adam,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 12,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate < 1.0) {
            return Err(CksError::InvalidArgument(format!(
                "learning_rate must lie in [0, 1), got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(CksError::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment buffers plus the step counter. SGD uses only
/// `first` (the velocity).
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptState {
    pub fn new(param_count: usize) -> Self {
        OptState {
            step: 0,
            first: vec![0.0; param_count],
            second: vec![0.0; param_count],
        }
    }
}

/// Mean loss and mean gradient of a batch.
pub fn batch_loss_and_grad<B: Backbone + ?Sized>(
    backbone: &B,
    params: &[f64],
    batch: &[(&Image, &Mask)],
    loss: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if batch.is_empty() {
        return Err(CksError::EmptyDataset("training batch is empty".into()));
    }
    let mut grad = vec![0.0; params.len()];
    let mut parts = Vec::with_capacity(batch.len());
    for (x, t) in batch {
        let (b, g) = backbone.loss_and_grad(params, x, t, loss)?;
        grad.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
        parts.push(b);
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((LossBreakdown::mean(&parts), grad))
}

/// One optimizer step on the batch-mean loss. Returns the updated
/// parameters, the advanced state and the loss measured before the step.
pub fn train_step<B: Backbone + ?Sized>(
    backbone: &B,
    theta: &ParamVector,
    batch: &[(&Image, &Mask)],
    cfg: &OptimizerConfig,
    loss: &LossConfig,
    mut state: OptState,
) -> Result<(ParamVector, OptState, LossBreakdown)> {
    theta.check_layout(&backbone.layout_id())?;
    cfg.validate()?;
    let mut params = theta.to_f64();
    let (breakdown, grad) = batch_loss_and_grad(backbone, &params, batch, loss)?;
    if !breakdown.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(CksError::NonFiniteLoss {
            step: state.step,
            breakdown,
        });
    }
    state.step += 1;
    let lr = cfg.learning_rate;
    match cfg.algorithm {
        Algorithm::SgdMomentum => {
            for ((p, v), g) in params.iter_mut().zip(state.first.iter_mut()).zip(&grad) {
                *v = SGD_MOMENTUM * *v + g;
                *p -= lr * *v;
            }
        }
        Algorithm::Adam => {
            let t = state.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (((p, m), v), g) in params
                .iter_mut()
                .zip(state.first.iter_mut())
                .zip(state.second.iter_mut())
                .zip(&grad)
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
    Ok((
        ParamVector::from_f64(&params, theta.layout().clone())?,
        state,
        breakdown,
    ))
}
