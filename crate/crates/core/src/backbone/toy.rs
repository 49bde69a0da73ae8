use ndarray::Array2;

use super::{sigmoid, Backbone};
use crate::error::{CksError, Result};
use crate::losses::{loss_with_grad, LossConfig};
use crate::rng::Rng64;
use crate::types::{Image, LayoutId, LossBreakdown, Mask, ProbMap};

/// Three-parameter per-pixel model `p = sigmoid(a x + b x^2 + c)`.
///
/// Has no spatial context at all; useful as a miniature backbone for
/// gradient checks and fast pipeline tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PixelLogistic;

impl PixelLogistic {
    fn check(params: &[f64]) -> Result<()> {
        if params.len() != 3 {
            return Err(CksError::CountMismatch {
                expected: 3,
                found: params.len() as u64,
            });
        }
        Ok(())
    }
}

impl Backbone for PixelLogistic {
    fn layout_id(&self) -> LayoutId {
        LayoutId("pixel-logistic-3".into())
    }

    fn param_count(&self) -> usize {
        3
    }

    fn input_align(&self) -> usize {
        1
    }

    fn init_params_f64(&self, seed: u64) -> Vec<f64> {
        let mut rng = Rng64::new(seed);
        (0..3).map(|_| rng.range(-0.5, 0.5)).collect()
    }

    fn forward_f64(&self, params: &[f64], x: &Image) -> Result<ProbMap> {
        Self::check(params)?;
        ProbMap::new(
            x.pixels()
                .mapv(|v| sigmoid(params[0] * v + params[1] * v * v + params[2])),
        )
    }

    fn loss_and_grad(
        &self,
        params: &[f64],
        x: &Image,
        t: &Mask,
        loss: &LossConfig,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let p = self.forward_f64(params, x)?;
        let (b, dp) = loss_with_grad(&p, t, loss)?;
        let dz: Array2<f64> = &dp * &p.probs().mapv(|v| v * (1.0 - v));
        let mut g = vec![0.0; 3];
        for (&d, &v) in dz.iter().zip(x.pixels().iter()) {
            g[0] += d * v;
            g[1] += d * v * v;
            g[2] += d;
        }
        Ok((b, g))
    }
}
