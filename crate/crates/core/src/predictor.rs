//! Crop-then-segment inference: detect with one model, crop around the
//! detection, segment the crop with a second model, paste back and threshold.

use serde::{Deserialize, Serialize};

use crate::backbone::Discriminator;
use crate::error::{CksError, Result};
use crate::evaluation::dsc;
use crate::geometry::{bbox_from_mask, crop_image_with, pad_to_align, paste_back, plan_crop, threshold};
use crate::types::{BBox, CropRecord, Image, Mask, ProbMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub crop_threshold: f64,
    pub final_threshold: f64,
    pub margin: usize,
    /// Agreement level that stops iterative refinement; `None` runs a single
    /// segmentation pass.
    pub d_t: Option<f64>,
    pub max_iters: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            crop_threshold: 0.5,
            final_threshold: 0.5,
            margin: crate::geometry::DEFAULT_MARGIN,
            d_t: None,
            max_iters: 10,
        }
    }
}

impl PredictConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("crop_threshold", self.crop_threshold),
            ("final_threshold", self.final_threshold),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(CksError::InvalidArgument(format!("{name} must lie in (0, 1), got {t}")));
            }
        }
        if let Some(d) = self.d_t {
            if !(d > 0.0 && d <= 1.0) {
                return Err(CksError::InvalidArgument(format!("d_t must lie in (0, 1], got {d}")));
            }
        }
        if self.max_iters < 1 {
            return Err(CksError::InvalidArgument("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    /// Region handed to the segmentation model (margin applied, clipped).
    pub bbox: BBox,
    /// Whether the crop fell back to the whole image.
    pub fallback: bool,
    /// Agreement with the previous iteration's mask.
    pub dsc_to_previous: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictTrace {
    pub iterations: Vec<IterationTrace>,
    /// The stopping rule fired before `max_iters` (always true for a single
    /// pass).
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mask: Mask,
    /// Segmentation probabilities pasted into full-image coordinates; 0
    /// outside the final crop.
    pub probs: ProbMap,
    pub trace: PredictTrace,
}

/// Runs `model` on `x` padded to its alignment and trims the padding off
/// the output.
pub fn predict_full(model: &(impl Discriminator + ?Sized), x: &Image) -> Result<ProbMap> {
    let (padded, rec) = pad_to_align(x, model.input_align())?;
    paste_back(&model.predict(&padded)?, &rec, 0.0)
}

/// Crop plan around the thresholded `p`, or the whole image when nothing
/// crosses the threshold.
pub fn plan_from_probs(p: &ProbMap, t: f64, margin: usize, align: usize) -> Result<(CropRecord, bool)> {
    let (h, w) = p.shape();
    let (box_, fallback, margin) = match bbox_from_mask(&threshold(p, t)?) {
        Some(b) => (b, false, margin),
        None => (BBox::full(h, w), true, 0),
    };
    Ok((plan_crop((h, w), box_, margin, align)?, fallback))
}

/// Segments the crop described by `rec` and pastes it back.
fn segment(seg: &(impl Discriminator + ?Sized), x: &Image, rec: &CropRecord) -> Result<ProbMap> {
    let patch = crop_image_with(x, rec)?;
    paste_back(&seg.predict(&patch)?, rec, 0.0)
}

/// The full workflow. Both models are only read.
pub fn predict(
    x: &Image,
    det: &(impl Discriminator + ?Sized),
    seg: &(impl Discriminator + ?Sized),
    cfg: &PredictConfig,
) -> Result<Prediction> {
    cfg.validate()?;
    let align = seg.input_align();
    let p_det = predict_full(det, x)?;

    let mut guide = p_det;
    let mut iterations = Vec::new();
    let mut previous: Option<Mask> = None;
    let mut converged = cfg.d_t.is_none();
    let passes = if cfg.d_t.is_some() { cfg.max_iters } else { 1 };
    let mut last = None;
    for _ in 0..passes {
        let (rec, fallback) = plan_from_probs(&guide, cfg.crop_threshold, cfg.margin, align)?;
        let p_seg = segment(seg, x, &rec)?;
        let mask = threshold(&p_seg, cfg.final_threshold)?;
        let agreement = previous.as_ref().map(|prev| dsc(&mask, prev)).transpose()?;
        iterations.push(IterationTrace {
            bbox: rec.box_,
            fallback,
            dsc_to_previous: agreement,
        });
        let stop = match (cfg.d_t, agreement) {
            (Some(d_t), Some(a)) => a > d_t || previous.as_ref() == Some(&mask),
            _ => false,
        };
        previous = Some(mask.clone());
        last = Some((mask, p_seg.clone()));
        guide = p_seg;
        if stop {
            converged = true;
            break;
        }
    }
    let (mask, probs) = last.expect("at least one pass runs");
    Ok(Prediction {
        mask,
        probs,
        trace: PredictTrace { iterations, converged },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Knows the scene: every source pixel has a distinct value, so the
    /// top-left pixel of any crop reveals where the crop came from.
    struct Oracle {
        truth: Mask,
        width: usize,
    }

    impl Discriminator for Oracle {
        fn predict(&self, x: &Image) -> Result<ProbMap> {
            let code = (x.pixels()[(0, 0)] * 400.0).round() as usize;
            let (r0, c0) = (code / self.width, code % self.width);
            let (sh, sw) = self.truth.shape();
            ProbMap::new(ndarray::Array2::from_shape_fn(x.shape(), |(r, c)| {
                let (sr, sc) = (r0 + r, c0 + c);
                if sr < sh && sc < sw {
                    f64::from(self.truth.labels()[(sr, sc)])
                } else {
                    0.0
                }
            }))
        }

        fn input_align(&self) -> usize {
            4
        }
    }

    struct Constant(f64);

    impl Discriminator for Constant {
        fn predict(&self, x: &Image) -> Result<ProbMap> {
            ProbMap::filled(x.height(), x.width(), self.0)
        }

        fn input_align(&self) -> usize {
            4
        }
    }

    fn scene() -> (Image, Mask) {
        // Distinct pixel values so the oracle can locate any crop.
        let x = Image::from_fn(20, 20, |(r, c)| (r * 20 + c) as f64 / 400.0).unwrap();
        let t = Mask::from_fn(20, 20, |(r, c)| (5..9).contains(&r) && (7..12).contains(&c)).unwrap();
        (x, t)
    }

    #[test]
    fn oracle_models_reproduce_the_truth_in_one_pass() {
        let (x, t) = scene();
        let oracle = Oracle {
            truth: t.clone(),
            width: 20,
        };
        let out = predict(&x, &oracle, &oracle, &PredictConfig::default()).unwrap();
        assert_eq!(out.mask, t);
        assert_eq!(out.trace.iterations.len(), 1);
        assert!(!out.trace.iterations[0].fallback);
        assert_eq!(out.trace.iterations[0].bbox, BBox::new(1, 12, 3, 15).unwrap());
    }

    #[test]
    fn silent_detector_falls_back_to_whole_image() {
        let (x, t) = scene();
        let oracle = Oracle {
            truth: t.clone(),
            width: 20,
        };
        let out = predict(&x, &Constant(0.0), &oracle, &PredictConfig::default()).unwrap();
        assert!(out.trace.iterations[0].fallback);
        assert_eq!(out.trace.iterations[0].bbox, BBox::full(20, 20));
        assert_eq!(out.mask, t);
    }

    #[test]
    fn pasted_probabilities_vanish_outside_the_crop() {
        let (x, t) = scene();
        let oracle = Oracle { truth: t, width: 20 };
        let out = predict(&x, &oracle, &Constant(0.7), &PredictConfig::default()).unwrap();
        let b = out.trace.iterations[0].bbox;
        for ((r, c), &p) in out.probs.probs().indexed_iter() {
            assert_eq!(p, if b.contains(r, c) { 0.7 } else { 0.0 });
        }
    }

    #[test]
    fn iterative_mode_stops_on_agreement() {
        let (x, t) = scene();
        let oracle = Oracle {
            truth: t.clone(),
            width: 20,
        };
        let cfg = PredictConfig {
            d_t: Some(0.95),
            ..PredictConfig::default()
        };
        let out = predict(&x, &oracle, &oracle, &cfg).unwrap();
        assert_eq!(out.trace.iterations.len(), 2);
        assert_eq!(out.trace.iterations[1].dsc_to_previous, Some(1.0));
        assert!(out.trace.converged);
        assert_eq!(out.mask, t);
    }

    #[test]
    fn unit_threshold_stops_on_identical_masks_or_runs_out() {
        let (x, t) = scene();
        let oracle = Oracle { truth: t, width: 20 };
        let cfg = PredictConfig {
            d_t: Some(1.0),
            max_iters: 4,
            ..PredictConfig::default()
        };
        let out = predict(&x, &oracle, &oracle, &cfg).unwrap();
        assert_eq!(out.trace.iterations.len(), 2);
        // A segmenter that always covers its whole crop grows the box each
        // pass until it spans the image, then repeats itself.
        let out = predict(&x, &oracle, &Constant(0.9), &cfg).unwrap();
        assert!(out.trace.iterations.len() <= 4);
        if out.trace.converged {
            let n = out.trace.iterations.len();
            assert_eq!(out.trace.iterations[n - 1].dsc_to_previous, Some(1.0));
        }
    }

    #[test]
    fn predict_full_trims_padding() {
        let x = Image::from_fn(6, 7, |(r, c)| ((r + c) % 2) as f64).unwrap();
        let p = predict_full(&Constant(0.3), &x).unwrap();
        assert_eq!(p.shape(), (6, 7));
    }

    #[test]
    fn bad_config_is_rejected() {
        let (x, _) = scene();
        let cfg = PredictConfig {
            d_t: Some(0.0),
            ..PredictConfig::default()
        };
        assert!(predict(&x, &Constant(0.5), &Constant(0.5), &cfg).is_err());
    }
}
