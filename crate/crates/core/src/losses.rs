//! Composite segmentation loss: soft IoU + binary cross-entropy + a
//! Gaussian-smoothed Dice-style agreement term, with analytic gradients
//! against the prediction.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{CksError, Result};
use crate::geometry::{gaussian_smooth, gaussian_smooth_adjoint, GaussianKernel};
use crate::types::{LossBreakdown, Mask, ProbMap};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Probabilities are clamped to `[eps_log, 1 - eps_log]` inside logarithms.
    pub eps_log: f64,
    /// Added to numerator and denominator of ratios.
    pub eps_div: f64,
    pub kernel: GaussianKernel,
    /// Divide the cross-entropy sum by the pixel count. Off by default.
    pub normalize_bce: bool,
}

impl LossConfig {
    pub fn new(eps_log: f64, eps_div: f64, kernel: GaussianKernel, normalize_bce: bool) -> Result<Self> {
        if !(eps_log > 0.0 && eps_log < 0.5) {
            return Err(CksError::InvalidArgument(format!(
                "eps_log must lie in (0, 0.5), got {eps_log}"
            )));
        }
        if !(eps_div > 0.0 && eps_div.is_finite()) {
            return Err(CksError::InvalidArgument(format!("eps_div must be > 0, got {eps_div}")));
        }
        Ok(LossConfig {
            eps_log,
            eps_div,
            kernel,
            normalize_bce,
        })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eps_log: 1e-7,
            eps_div: 1e-7,
            kernel: GaussianKernel::default(),
            normalize_bce: false,
        }
    }
}

/// Serializable mirror of [`LossConfig`] used by config files and sidecars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSettings {
    pub eps_log: f64,
    pub eps_div: f64,
    pub sigma: f64,
    pub radius: usize,
    pub normalize_bce: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            eps_log: 1e-7,
            eps_div: 1e-7,
            sigma: crate::geometry::DEFAULT_SIGMA,
            radius: crate::geometry::DEFAULT_RADIUS,
            normalize_bce: false,
        }
    }
}

impl LossSettings {
    pub fn build(&self) -> Result<LossConfig> {
        LossConfig::new(
            self.eps_log,
            self.eps_div,
            GaussianKernel::new(self.sigma, self.radius)?,
            self.normalize_bce,
        )
    }
}

fn check_shapes(p: &ProbMap, t: &Mask) -> Result<()> {
    if p.shape() != t.shape() {
        return Err(CksError::ShapeMismatch {
            expected: t.shape(),
            found: p.shape(),
        });
    }
    Ok(())
}

fn target(t: &Mask) -> Array2<f64> {
    t.labels().mapv(f64::from)
}

struct IouSums {
    inter: f64,
    sum_t: f64,
    sum_p: f64,
}

fn iou_sums(p: &Array2<f64>, t: &Array2<f64>) -> IouSums {
    let mut s = IouSums {
        inter: 0.0,
        sum_t: 0.0,
        sum_p: 0.0,
    };
    Zip::from(p).and(t).for_each(|&pv, &tv| {
        s.inter += tv * pv;
        s.sum_t += tv;
        s.sum_p += pv;
    });
    s
}

fn iou_value(s: &IouSums, eps: f64) -> f64 {
    1.0 - s.inter / (s.sum_t + s.sum_p - s.inter + eps)
}

fn bce_value(p: &Array2<f64>, t: &Array2<f64>, cfg: &LossConfig) -> f64 {
    let mut acc = 0.0;
    Zip::from(p).and(t).for_each(|&pv, &tv| {
        let pc = pv.clamp(cfg.eps_log, 1.0 - cfg.eps_log);
        acc -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
    });
    if cfg.normalize_bce {
        acc / p.len() as f64
    } else {
        acc
    }
}

/// Smoothed fields and per-pixel agreement denominators shared between the
/// value and the gradient of the smoothed term.
struct Smoothed {
    t_hat: Array2<f64>,
    p_hat: Array2<f64>,
}

fn smoothed(p: &Array2<f64>, t: &Array2<f64>, cfg: &LossConfig) -> Smoothed {
    Smoothed {
        t_hat: gaussian_smooth(t, &cfg.kernel),
        p_hat: gaussian_smooth(p, &cfg.kernel),
    }
}

fn smoothed_value(s: &Smoothed, eps: f64) -> f64 {
    let mut acc = 0.0;
    Zip::from(&s.t_hat).and(&s.p_hat).for_each(|&th, &ph| {
        acc += (2.0 * th * ph + eps) / (th * th + ph * ph + eps);
    });
    1.0 - acc / s.t_hat.len() as f64
}

/// Soft IoU loss, `1 - sum(tp) / (sum(t) + sum(p) - sum(tp) + eps_div)`.
pub fn loss_iou(p: &ProbMap, t: &Mask, cfg: &LossConfig) -> Result<f64> {
    check_shapes(p, t)?;
    Ok(iou_value(&iou_sums(p.probs(), &target(t)), cfg.eps_div))
}

/// Binary cross-entropy summed over pixels.
pub fn loss_bce(p: &ProbMap, t: &Mask, cfg: &LossConfig) -> Result<f64> {
    check_shapes(p, t)?;
    Ok(bce_value(p.probs(), &target(t), cfg))
}

/// `1 - mean((2 t^ p^ + eps) / (t^2 + p^2 + eps))` over Gaussian-smoothed
/// target and prediction.
pub fn loss_smoothed(p: &ProbMap, t: &Mask, cfg: &LossConfig) -> Result<f64> {
    check_shapes(p, t)?;
    Ok(smoothed_value(&smoothed(p.probs(), &target(t), cfg), cfg.eps_div))
}

pub fn loss_total(p: &ProbMap, t: &Mask, cfg: &LossConfig) -> Result<LossBreakdown> {
    check_shapes(p, t)?;
    let tt = target(t);
    let pp = p.probs();
    Ok(LossBreakdown::from_parts(
        iou_value(&iou_sums(pp, &tt), cfg.eps_div),
        bce_value(pp, &tt, cfg),
        smoothed_value(&smoothed(pp, &tt, cfg), cfg.eps_div),
    ))
}

/// Gradient of the total loss with respect to every pixel of `p`.
pub fn loss_grad(p: &ProbMap, t: &Mask, cfg: &LossConfig) -> Result<Array2<f64>> {
    Ok(loss_with_grad(p, t, cfg)?.1)
}

/// Loss breakdown and gradient in one pass (the smoothing is shared).
pub fn loss_with_grad(p: &ProbMap, t: &Mask, cfg: &LossConfig) -> Result<(LossBreakdown, Array2<f64>)> {
    check_shapes(p, t)?;
    let tt = target(t);
    let pp = p.probs();
    let n = pp.len() as f64;

    let sums = iou_sums(pp, &tt);
    let union = sums.sum_t + sums.sum_p - sums.inter + cfg.eps_div;
    let l_iou = iou_value(&sums, cfg.eps_div);
    let l_bce = bce_value(pp, &tt, cfg);
    let sm = smoothed(pp, &tt, cfg);
    let l_s = smoothed_value(&sm, cfg.eps_div);

    // d L_s / d p^, then pulled back through the smoothing.
    let eps = cfg.eps_div;
    let mut g_hat = Array2::zeros(pp.dim());
    Zip::from(&mut g_hat)
        .and(&sm.t_hat)
        .and(&sm.p_hat)
        .for_each(|g, &th, &ph| {
            let den = th * th + ph * ph + eps;
            let num = 2.0 * th * ph + eps;
            *g = -(2.0 * th * den - num * 2.0 * ph) / (den * den) / n;
        });
    let mut grad = gaussian_smooth_adjoint(&g_hat, &cfg.kernel);

    let bce_scale = if cfg.normalize_bce { 1.0 / n } else { 1.0 };
    let lo = cfg.eps_log;
    let hi = 1.0 - cfg.eps_log;
    Zip::from(&mut grad).and(pp).and(&tt).for_each(|g, &pv, &tv| {
        *g -= (tv * union - sums.inter * (1.0 - tv)) / (union * union);
        if pv > lo && pv < hi {
            *g += bce_scale * (-tv / pv + (1.0 - tv) / (1.0 - pv));
        }
    });

    Ok((LossBreakdown::from_parts(l_iou, l_bce, l_s), grad))
}
