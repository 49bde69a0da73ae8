//! Shared value types: images, masks, probability maps, boxes, crop
//! provenance, parameter snapshots and datasets.
//!
//! Every constructor validates its invariants; once built, values are never
//! mutated in place by the rest of the crate.

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CksError, Result};

fn check_nonempty(shape: (usize, usize)) -> Result<()> {
    if shape.0 == 0 || shape.1 == 0 {
        return Err(CksError::InvalidArgument(format!(
            "grid must be at least 1x1, got {}x{}",
            shape.0, shape.1
        )));
    }
    Ok(())
}

fn check_unit_interval(values: &Array2<f64>) -> Result<()> {
    for ((r, c), &v) in values.indexed_iter() {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(CksError::ValueOutOfRange {
                index: (r, c),
                value: v,
            });
        }
    }
    Ok(())
}

/// Grayscale slice with intensities normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Array2<f64>,
}

impl Image {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        check_nonempty(pixels.dim())?;
        check_unit_interval(&pixels)?;
        Ok(Image { pixels })
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut((usize, usize)) -> f64) -> Result<Self> {
        Image::new(Array2::from_shape_fn((height, width), f))
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Image::new(Array2::zeros((height, width)))
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }
}

/// Binary ground truth or prediction, values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    labels: Array2<u8>,
}

impl Mask {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        check_nonempty(labels.dim())?;
        for ((r, c), &v) in labels.indexed_iter() {
            if v > 1 {
                return Err(CksError::ValueOutOfRange {
                    index: (r, c),
                    value: f64::from(v),
                });
            }
        }
        Ok(Mask { labels })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut((usize, usize)) -> bool) -> Result<Self> {
        Mask::new(Array2::from_shape_fn((height, width), |ix| u8::from(f(ix))))
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Mask::new(Array2::zeros((height, width)))
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn shape(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn count_ones(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.iter().all(|&v| v == 0)
    }

    /// Fraction of pixels labelled foreground.
    pub fn foreground_ratio(&self) -> f64 {
        self.count_ones() as f64 / self.labels.len() as f64
    }

    /// The mask as a 0/1 probability map.
    pub fn to_probs(&self) -> ProbMap {
        ProbMap {
            probs: self.labels.mapv(f64::from),
        }
    }
}

/// Per-pixel foreground probability.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    probs: Array2<f64>,
}

impl ProbMap {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        check_nonempty(probs.dim())?;
        check_unit_interval(&probs)?;
        Ok(ProbMap { probs })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        ProbMap::new(Array2::from_elem((height, width), value))
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn shape(&self) -> (usize, usize) {
        self.probs.dim()
    }
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn new(row_min: usize, row_max: usize, col_min: usize, col_max: usize) -> Result<Self> {
        if row_min > row_max || col_min > col_max {
            return Err(CksError::InvalidArgument(format!(
                "inverted box rows {row_min}..={row_max}, cols {col_min}..={col_max}"
            )));
        }
        Ok(BBox {
            row_min,
            row_max,
            col_min,
            col_max,
        })
    }

    /// Box covering a whole `height x width` grid.
    pub fn full(height: usize, width: usize) -> Self {
        BBox {
            row_min: 0,
            row_max: height - 1,
            col_min: 0,
            col_max: width - 1,
        }
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }

    /// Whether the box lies inside a grid of the given shape.
    pub fn fits(&self, shape: (usize, usize)) -> bool {
        self.row_max < shape.0 && self.col_max < shape.1
    }
}

/// Provenance of a crop: where it came from and how it was padded, so a
/// prediction on the crop can be pasted back into source coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub source_shape: (usize, usize),
    /// Region of the source actually copied (margin applied, then clipped).
    pub box_: BBox,
    /// Zero rows added below the copied region.
    pub pad_bottom: usize,
    /// Zero columns added right of the copied region.
    pub pad_right: usize,
}

impl CropRecord {
    /// Shape of the crop output, padding included.
    pub fn crop_shape(&self) -> (usize, usize) {
        (self.box_.height() + self.pad_bottom, self.box_.width() + self.pad_right)
    }
}

/// Identifies a parameter layout; two parameter vectors can be combined only
/// when their layouts agree.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayoutId(pub String);

impl fmt::Display for LayoutId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Flat, ordered snapshot of model parameters.
///
/// Values are binary32 so checkpoints round-trip bit-exactly; arithmetic on
/// them is carried out in f64 by the consumers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Arc<[f32]>,
    layout: LayoutId,
}

impl ParamVector {
    pub fn new(values: Vec<f32>, layout: LayoutId) -> Result<Self> {
        if values.is_empty() {
            return Err(CksError::InvalidArgument("parameter vector must be non-empty".into()));
        }
        Ok(ParamVector {
            values: values.into(),
            layout,
        })
    }

    /// Builds a vector from f64 values, rounding each to binary32.
    pub fn from_f64(values: &[f64], layout: LayoutId) -> Result<Self> {
        ParamVector::new(values.iter().map(|&v| v as f32).collect(), layout)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn layout(&self) -> &LayoutId {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_layout(&self, expected: &LayoutId) -> Result<()> {
        if &self.layout != expected {
            return Err(CksError::LayoutMismatch {
                expected: expected.0.clone(),
                found: self.layout.0.clone(),
            });
        }
        Ok(())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and NaN payloads.
    pub fn bit_eq(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhaseId {
    D1,
    D2,
    D3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub crop: Option<CropRecord>,
}

impl DatasetItem {
    pub fn new(id: impl Into<String>, image: Image, mask: Mask, crop: Option<CropRecord>) -> Result<Self> {
        validate_pair(&image, &mask)?;
        Ok(DatasetItem {
            id: id.into(),
            image,
            mask,
            crop,
        })
    }
}

/// A materialized training set for one curriculum phase.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPhase {
    phase: PhaseId,
    items: Vec<DatasetItem>,
}

impl DatasetPhase {
    pub fn new(phase: PhaseId, items: Vec<DatasetItem>) -> Result<Self> {
        if phase == PhaseId::D3 {
            if let Some(item) = items.iter().find(|it| it.crop.is_some()) {
                return Err(CksError::InvalidArgument(format!(
                    "raw item `{}` must not carry a crop record",
                    item.id
                )));
            }
        }
        Ok(DatasetPhase { phase, items })
    }

    pub fn phase(&self) -> PhaseId {
        self.phase
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Mean per-item foreground ratio; 0 for an empty dataset.
    pub fn mean_foreground_ratio(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        self.items.iter().map(|it| it.mask.foreground_ratio()).sum::<f64>() / self.items.len() as f64
    }
}

/// The components of the composite segmentation loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_iou: f64,
    pub l_bce: f64,
    pub l_s: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn from_parts(l_iou: f64, l_bce: f64, l_s: f64) -> Self {
        LossBreakdown {
            l_iou,
            l_bce,
            l_s,
            l_total: l_iou + l_bce + l_s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_iou.is_finite() && self.l_bce.is_finite() && self.l_s.is_finite() && self.l_total.is_finite()
    }

    /// Component-wise mean of a non-empty collection.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a LossBreakdown>) -> LossBreakdown {
        let mut n = 0usize;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.l_iou += b.l_iou;
            acc.l_bce += b.l_bce;
            acc.l_s += b.l_s;
            acc.l_total += b.l_total;
            n += 1;
        }
        if n == 0 {
            return acc;
        }
        let n = n as f64;
        LossBreakdown {
            l_iou: acc.l_iou / n,
            l_bce: acc.l_bce / n,
            l_s: acc.l_s / n,
            l_total: acc.l_total / n,
        }
    }
}

/// Checks that an image and its mask describe the same grid.
pub fn validate_pair(img: &Image, msk: &Mask) -> Result<()> {
    if img.shape() != msk.shape() {
        return Err(CksError::ShapeMismatch {
            expected: img.shape(),
            found: msk.shape(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn validate_pair_accepts_matching_shapes() {
        let img = Image::zeros(4, 4).unwrap();
        let msk = Mask::zeros(4, 4).unwrap();
        validate_pair(&img, &msk).unwrap();
    }

    #[test]
    fn validate_pair_rejects_shape_mismatch() {
        let img = Image::zeros(4, 4).unwrap();
        let msk = Mask::zeros(3, 4).unwrap();
        assert!(matches!(
            validate_pair(&img, &msk),
            Err(CksError::ShapeMismatch {
                expected: (4, 4),
                found: (3, 4)
            })
        ));
    }

    #[test]
    fn mask_value_two_is_out_of_range() {
        let err = Mask::new(array![[0, 1], [2, 0]]).unwrap_err();
        assert!(matches!(err, CksError::ValueOutOfRange { index: (1, 0), .. }));
    }

    #[test]
    fn image_rejects_nan_and_out_of_range() {
        assert!(matches!(
            Image::new(array![[0.0, f64::NAN]]),
            Err(CksError::ValueOutOfRange { index: (0, 1), .. })
        ));
        assert!(Image::new(array![[1.5]]).is_err());
        assert!(ProbMap::new(array![[-0.1]]).is_err());
        assert!(Image::new(Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn bbox_rejects_inverted_ranges() {
        assert!(BBox::new(3, 2, 0, 0).is_err());
        let b = BBox::new(1, 3, 2, 5).unwrap();
        assert_eq!((b.height(), b.width()), (3, 4));
        assert!(b.fits((4, 6)));
        assert!(!b.fits((4, 5)));
    }

    #[test]
    fn raw_phase_rejects_crop_records() {
        let rec = CropRecord {
            source_shape: (4, 4),
            box_: BBox::full(4, 4),
            pad_bottom: 0,
            pad_right: 0,
        };
        let item = DatasetItem::new("a", Image::zeros(4, 4).unwrap(), Mask::zeros(4, 4).unwrap(), Some(rec)).unwrap();
        assert!(DatasetPhase::new(PhaseId::D3, vec![item.clone()]).is_err());
        assert!(DatasetPhase::new(PhaseId::D1, vec![item]).is_ok());
    }

    #[test]
    fn param_vector_bit_equality_sees_signed_zero() {
        let l = LayoutId("x".into());
        let a = ParamVector::new(vec![0.0, 1.0], l.clone()).unwrap();
        let b = ParamVector::new(vec![-0.0, 1.0], l.clone()).unwrap();
        assert_eq!(a, b);
        assert!(!a.bit_eq(&b));
        assert!(ParamVector::new(vec![], l).is_err());
    }

    #[test]
    fn loss_breakdown_total_is_sum() {
        let b = LossBreakdown::from_parts(0.25, 3.5, 0.125);
        assert_eq!(b.l_total, 3.875);
        let m = LossBreakdown::mean([&b, &LossBreakdown::from_parts(0.75, 0.5, 0.375)]);
        assert_eq!(m.l_iou, 0.5);
        assert!((m.l_total - (m.l_iou + m.l_bce + m.l_s)).abs() < 1e-12);
    }
}
