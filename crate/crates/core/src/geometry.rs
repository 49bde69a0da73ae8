//! Crop geometry, thresholding, paste-back and Gaussian smoothing.

use ndarray::{s, Array2};

use crate::error::{CksError, Result};
use crate::types::{BBox, CropRecord, Image, Mask, ProbMap};

pub const DEFAULT_SIGMA: f64 = 1.0;
pub const DEFAULT_RADIUS: usize = 3;
pub const DEFAULT_MARGIN: usize = 4;

/// Normalized `(2r+1) x (2r+1)` Gaussian kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    sigma: f64,
    radius: usize,
    weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(sigma: f64, radius: usize) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(CksError::InvalidArgument(format!(
                "kernel sigma must be > 0, got {sigma}"
            )));
        }
        if radius < 1 {
            return Err(CksError::InvalidArgument("kernel radius must be >= 1".into()));
        }
        let side = 2 * radius + 1;
        let r = radius as f64;
        let mut weights = Vec::with_capacity(side * side);
        for dy in 0..side {
            for dx in 0..side {
                let y = dy as f64 - r;
                let x = dx as f64 - r;
                weights.push((-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(GaussianKernel { sigma, radius, weights })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Weight at offset `(dy, dx)`, each in `-radius..=radius`.
    pub fn weight(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        let side = self.side();
        self.weights[(dy + r) as usize * side + (dx + r) as usize]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl Default for GaussianKernel {
    fn default() -> Self {
        GaussianKernel::new(DEFAULT_SIGMA, DEFAULT_RADIUS).expect("default kernel parameters are valid")
    }
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`) of an
/// arbitrary integer index into `0..n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - 1 - m) as usize
    } else {
        m as usize
    }
}

/// `1` where `p > t` (strict).
pub fn threshold(p: &ProbMap, t: f64) -> Result<Mask> {
    if !(t > 0.0 && t < 1.0) {
        return Err(CksError::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {t}"
        )));
    }
    Mask::new(p.probs().mapv(|v| u8::from(v > t)))
}

/// Tightest box around the 1-pixels, or `None` for an all-zero mask.
pub fn bbox_from_mask(m: &Mask) -> Option<BBox> {
    let mut acc: Option<BBox> = None;
    for ((r, c), &v) in m.labels().indexed_iter() {
        if v == 0 {
            continue;
        }
        acc = Some(match acc {
            None => BBox {
                row_min: r,
                row_max: r,
                col_min: c,
                col_max: c,
            },
            Some(b) => BBox {
                row_min: b.row_min.min(r),
                row_max: b.row_max.max(r),
                col_min: b.col_min.min(c),
                col_max: b.col_max.max(c),
            },
        });
    }
    acc
}

fn round_up(n: usize, align: usize) -> usize {
    n.div_ceil(align) * align
}

/// Crop arithmetic: expand `box_` by `margin`, clip to `source_shape`, pad the
/// bottom/right up to multiples of `align`.
pub fn plan_crop(source_shape: (usize, usize), box_: BBox, margin: usize, align: usize) -> Result<CropRecord> {
    if align < 1 {
        return Err(CksError::InvalidArgument("align must be >= 1".into()));
    }
    if !box_.fits(source_shape) || box_.row_min > box_.row_max || box_.col_min > box_.col_max {
        return Err(CksError::InvalidArgument(format!(
            "box {box_:?} does not fit a {}x{} grid",
            source_shape.0, source_shape.1
        )));
    }
    let clipped = BBox {
        row_min: box_.row_min.saturating_sub(margin),
        row_max: (box_.row_max + margin).min(source_shape.0 - 1),
        col_min: box_.col_min.saturating_sub(margin),
        col_max: (box_.col_max + margin).min(source_shape.1 - 1),
    };
    Ok(CropRecord {
        source_shape,
        box_: clipped,
        pad_bottom: round_up(clipped.height(), align) - clipped.height(),
        pad_right: round_up(clipped.width(), align) - clipped.width(),
    })
}

fn check_source(shape: (usize, usize), rec: &CropRecord) -> Result<()> {
    if shape != rec.source_shape {
        return Err(CksError::ShapeMismatch {
            expected: rec.source_shape,
            found: shape,
        });
    }
    Ok(())
}

fn cut<T: Copy + Default>(src: &Array2<T>, rec: &CropRecord) -> Array2<T> {
    let b = rec.box_;
    let mut out = Array2::from_elem(rec.crop_shape(), T::default());
    out.slice_mut(s![..b.height(), ..b.width()])
        .assign(&src.slice(s![b.row_min..=b.row_max, b.col_min..=b.col_max]));
    out
}

/// Applies an existing crop record to an image (zero padding).
pub fn crop_image_with(img: &Image, rec: &CropRecord) -> Result<Image> {
    check_source(img.shape(), rec)?;
    Image::new(cut(img.pixels(), rec))
}

/// Applies an existing crop record to a mask (zero padding).
pub fn crop_mask_with(m: &Mask, rec: &CropRecord) -> Result<Mask> {
    check_source(m.shape(), rec)?;
    Mask::new(cut(m.labels(), rec))
}

/// Crops `img` to `box_` expanded by `margin`, padded to multiples of `align`.
pub fn crop(img: &Image, box_: BBox, margin: usize, align: usize) -> Result<(Image, CropRecord)> {
    let rec = plan_crop(img.shape(), box_, margin, align)?;
    Ok((crop_image_with(img, &rec)?, rec))
}

/// Places the unpadded part of `p` back at the record's box inside a
/// `source_shape` canvas filled with `fill`.
pub fn paste_back(p: &ProbMap, rec: &CropRecord, fill: f64) -> Result<ProbMap> {
    if p.shape() != rec.crop_shape() {
        return Err(CksError::ShapeMismatch {
            expected: rec.crop_shape(),
            found: p.shape(),
        });
    }
    let b = rec.box_;
    let mut out = Array2::from_elem(rec.source_shape, fill);
    out.slice_mut(s![b.row_min..=b.row_max, b.col_min..=b.col_max])
        .assign(&p.probs().slice(s![..b.height(), ..b.width()]));
    ProbMap::new(out)
}

fn reflect_table(n: usize, radius: usize) -> Vec<usize> {
    (0..n + 2 * radius)
        .map(|i| reflect_index(i as isize - radius as isize, n))
        .collect()
}

/// 2D convolution with `k` under reflect-at-border handling.
pub fn gaussian_smooth(m: &Array2<f64>, k: &GaussianKernel) -> Array2<f64> {
    let (h, w) = m.dim();
    let r = k.radius();
    let side = k.side();
    let rows = reflect_table(h, r);
    let cols = reflect_table(w, r);
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for dy in 0..side {
                let src_r = rows[i + dy];
                let wrow = &k.weights()[dy * side..(dy + 1) * side];
                for (dx, &wt) in wrow.iter().enumerate() {
                    acc += wt * m[[src_r, cols[j + dx]]];
                }
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Adjoint of [`gaussian_smooth`]: scatters each output-side value back to
/// the input pixels that produced it.
pub fn gaussian_smooth_adjoint(g: &Array2<f64>, k: &GaussianKernel) -> Array2<f64> {
    let (h, w) = g.dim();
    let r = k.radius();
    let side = k.side();
    let rows = reflect_table(h, r);
    let cols = reflect_table(w, r);
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let gij = g[[i, j]];
            if gij == 0.0 {
                continue;
            }
            for dy in 0..side {
                let src_r = rows[i + dy];
                let wrow = &k.weights()[dy * side..(dy + 1) * side];
                for (dx, &wt) in wrow.iter().enumerate() {
                    out[[src_r, cols[j + dx]]] += wt * gij;
                }
            }
        }
    }
    out
}

/// Whole-image crop record padding an image to the backbone alignment.
pub fn pad_to_align(img: &Image, align: usize) -> Result<(Image, CropRecord)> {
    let (h, w) = img.shape();
    crop(img, BBox::full(h, w), 0, align)
}
