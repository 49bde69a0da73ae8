//! Seeded synthetic slices: a textured background, distractor blobs and at
//! most one irregular target blob whose area is a small fraction of the
//! image.
//!
//! Every item draws from its own stream `derive_seed(cfg.seed, index)`, so
//! an item depends only on the configuration and its index. Intensities are
//! quantized to multiples of 1/255, which makes the in-memory dataset equal
//! to what the 8-bit files hold.

use std::collections::VecDeque;
use std::f64::consts::TAU;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CksError, Result};
use crate::rng::{derive_seed, Rng64};
use crate::types::{DatasetItem, DatasetPhase, Image, Mask, PhaseId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Target area over image area, drawn per item from this closed range.
    pub fg_ratio_range: (f64, f64),
    /// Strength of the random-walk perturbation of the target outline.
    pub blob_irregularity: f64,
    pub noise_sigma: f64,
    pub empty_slice_fraction: f64,
    /// Upper bound on distractor blobs per slice; each slice gets between
    /// half of this and this many.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 200,
            height: 64,
            width: 64,
            fg_ratio_range: (0.01, 0.04),
            blob_irregularity: 0.35,
            noise_sigma: 0.03,
            empty_slice_fraction: 0.1,
            distractors: 4,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.fg_ratio_range;
        let bad = |msg: String| Err(CksError::InvalidArgument(msg));
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return bad(format!(
                "fg_ratio_range must satisfy 0 < lo <= hi < 0.5, got ({lo}, {hi})"
            ));
        }
        if self.height < 16 || self.width < 16 {
            return bad(format!(
                "images must be at least 16x16, got {}x{}",
                self.height, self.width
            ));
        }
        if (lo * (self.height * self.width) as f64) < 5.0 {
            return bad("fg_ratio_range lower bound allows fewer than 5 target pixels".into());
        }
        if !(0.0..=1.0).contains(&self.blob_irregularity) {
            return bad(format!(
                "blob_irregularity must lie in [0, 1], got {}",
                self.blob_irregularity
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.empty_slice_fraction) {
            return bad(format!(
                "empty_slice_fraction must lie in [0, 1), got {}",
                self.empty_slice_fraction
            ));
        }
        Ok(())
    }

    /// Number of items generated without a target.
    pub fn empty_count(&self) -> usize {
        (self.count as f64 * self.empty_slice_fraction).round() as usize
    }
}

pub(crate) fn item_id(index: usize) -> String {
    format!("{index:05}")
}

/// Generates the raw dataset described by `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<DatasetPhase> {
    cfg.validate()?;
    let empty = empty_indices(cfg);
    let items = (0..cfg.count)
        .map(|i| {
            let (image, mask) = generate_item(cfg, i, empty[i])?;
            DatasetItem::new(item_id(i), image, mask, None)
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetPhase::new(PhaseId::D3, items)
}

/// Which items are empty: the first `empty_count` entries of a shuffle of
/// `0..count` drawn from stream `u64::MAX` of the seed.
fn empty_indices(cfg: &GenConfig) -> Vec<bool> {
    let mut order: Vec<usize> = (0..cfg.count).collect();
    Rng64::new(derive_seed(cfg.seed, u64::MAX)).shuffle(&mut order);
    let mut flags = vec![false; cfg.count];
    for &i in order.iter().take(cfg.empty_count()) {
        flags[i] = true;
    }
    flags
}

/// Closed outline `r(theta)` sampled at evenly spaced angles.
struct Outline {
    cy: f64,
    cx: f64,
    radii: Vec<f64>,
}

impl Outline {
    fn radius_at(&self, theta: f64) -> f64 {
        let n = self.radii.len();
        let pos = theta.rem_euclid(TAU) / TAU * n as f64;
        let i = pos.floor() as usize % n;
        let f = pos - pos.floor();
        self.radii[i] * (1.0 - f) + self.radii[(i + 1) % n] * f
    }

    fn max_radius(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }

    fn contains(&self, r: usize, c: usize, scale: f64) -> bool {
        let dy = r as f64 - self.cy;
        let dx = c as f64 - self.cx;
        let d = (dy * dy + dx * dx).sqrt();
        d <= scale * self.radius_at(dy.atan2(dx))
    }

    /// The 4-connected component containing the centre pixel of the outline
    /// drawn at `scale`.
    fn rasterize(&self, shape: (usize, usize), scale: f64) -> Array2<bool> {
        let mut out = Array2::from_elem(shape, false);
        let start = (self.cy.round() as usize, self.cx.round() as usize);
        if !self.contains(start.0, start.1, scale) {
            return out;
        }
        let mut queue = VecDeque::from([start]);
        out[start] = true;
        while let Some((r, c)) = queue.pop_front() {
            let neighbours = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
            for (nr, nc) in neighbours {
                if nr < shape.0 && nc < shape.1 && !out[(nr, nc)] && self.contains(nr, nc, scale) {
                    out[(nr, nc)] = true;
                    queue.push_back((nr, nc));
                }
            }
        }
        out
    }
}

const OUTLINE_POINTS: usize = 32;

/// An ellipse (axis ratio in `[0.6, 1]`, random orientation) whose radius is
/// multiplied by `1 + irregularity * w(theta)`, `w` a closed random walk
/// (Brownian bridge) rescaled to `max |w| = 1`. Unit mean radius.
fn random_outline(rng: &mut Rng64, cy: f64, cx: f64, irregularity: f64) -> Outline {
    let ratio = rng.range(0.6, 1.0);
    let tilt = rng.range(0.0, TAU);
    let mut walk = Vec::with_capacity(OUTLINE_POINTS);
    let mut acc = 0.0;
    for _ in 0..OUTLINE_POINTS {
        walk.push(acc);
        acc += rng.normal();
    }
    // Subtract the drift so the walk closes on itself.
    let drift = acc / OUTLINE_POINTS as f64;
    for (i, w) in walk.iter_mut().enumerate() {
        *w -= drift * i as f64;
    }
    let mean = walk.iter().sum::<f64>() / OUTLINE_POINTS as f64;
    let peak = walk.iter().map(|w| (w - mean).abs()).fold(0.0, f64::max).max(1e-12);
    let radii = walk
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let theta = i as f64 / OUTLINE_POINTS as f64 * TAU - tilt;
            // Ellipse radius with semi-axes 1 and `ratio`.
            let (s, c) = theta.sin_cos();
            let ellipse = ratio / ((ratio * c).powi(2) + s * s).sqrt();
            ellipse * (1.0 + irregularity * 0.8 * (w - mean) / peak)
        })
        .collect();
    Outline { cy, cx, radii }
}

/// Smallest scale (by bisection) whose rasterized blob reaches `area` pixels.
fn fit_area(outline: &Outline, shape: (usize, usize), area: f64) -> (f64, Array2<bool>) {
    let (mut lo, mut hi) = (0.0, (shape.0.max(shape.1)) as f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let n = outline.rasterize(shape, mid).iter().filter(|&&b| b).count();
        if (n as f64) < area {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (hi, outline.rasterize(shape, hi))
}

struct Placed {
    cy: f64,
    cx: f64,
    radius: f64,
}

impl Placed {
    fn clear_of(&self, others: &[Placed], gap: f64) -> bool {
        others
            .iter()
            .all(|o| ((self.cy - o.cy).powi(2) + (self.cx - o.cx).powi(2)).sqrt() >= self.radius + o.radius + gap)
    }
}

/// Radius of a disc with the given area.
fn disc_radius(area: f64) -> f64 {
    (area / std::f64::consts::PI).sqrt()
}

fn random_center(rng: &mut Rng64, shape: (usize, usize), radius: f64) -> (f64, f64) {
    let pad = radius + 2.0;
    let cy = rng.range(pad, (shape.0 as f64 - 1.0 - pad).max(pad));
    let cx = rng.range(pad, (shape.1 as f64 - 1.0 - pad).max(pad));
    (cy, cx)
}

/// Low-frequency background in roughly `[0.15, 0.45]`: three random plane
/// waves.
fn background(rng: &mut Rng64, shape: (usize, usize)) -> Array2<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.range(0.0, TAU);
            let freq = rng.range(0.03, 0.09) * TAU;
            (
                freq * angle.cos(),
                freq * angle.sin(),
                rng.range(0.0, TAU),
                rng.range(0.5, 1.0),
            )
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    Array2::from_shape_fn(shape, |(r, c)| {
        let v: f64 = waves
            .iter()
            .map(|&(ky, kx, phase, amp)| amp * (ky * r as f64 + kx * c as f64 + phase).sin())
            .sum();
        0.3 + 0.15 * v / norm
    })
}

#[derive(Clone, Copy)]
enum Texture {
    /// The target: flat intensity.
    Flat(f64),
    /// Same mean as the target, modulated by a stripe pattern.
    Striped { mean: f64, period: f64, angle: f64 },
}

impl Texture {
    fn value(&self, r: usize, c: usize) -> f64 {
        match *self {
            Texture::Flat(v) => v,
            Texture::Striped { mean, period, angle } => {
                let u = r as f64 * angle.sin() + c as f64 * angle.cos();
                mean + 0.2 * (TAU * u / period).sin()
            }
        }
    }
}

fn paint(canvas: &mut Array2<f64>, region: &Array2<bool>, tex: Texture) {
    for ((r, c), &inside) in region.indexed_iter() {
        if inside {
            canvas[(r, c)] = tex.value(r, c);
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

const TARGET_LEVEL: (f64, f64) = (0.62, 0.72);
const MAX_ATTEMPTS: usize = 64;

fn generate_item(cfg: &GenConfig, index: usize, empty: bool) -> Result<(Image, Mask)> {
    let shape = (cfg.height, cfg.width);
    let n_pixels = (cfg.height * cfg.width) as f64;
    let (lo, hi) = cfg.fg_ratio_range;
    let mut rng = Rng64::new(derive_seed(cfg.seed, index as u64));
    let mut canvas = background(&mut rng, shape);
    let level = rng.range(TARGET_LEVEL.0, TARGET_LEVEL.1);
    let mut placed = Vec::new();
    let mut mask = Array2::from_elem(shape, false);

    if !empty {
        // Aim inside the range so rasterization granularity cannot push the
        // final ratio out of it; retry on the rare miss.
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let ratio = lo + (hi - lo) * rng.range(0.1, 0.9);
            let area = ratio * n_pixels;
            let reach = disc_radius(area) * (1.0 + cfg.blob_irregularity) * 1.25;
            let (cy, cx) = random_center(&mut rng, shape, reach);
            let outline = random_outline(&mut rng, cy, cx, cfg.blob_irregularity);
            let (scale, region) = fit_area(&outline, shape, area);
            let got = region.iter().filter(|&&b| b).count() as f64 / n_pixels;
            if (lo..=hi).contains(&got) {
                found = Some((
                    region,
                    Placed {
                        cy,
                        cx,
                        radius: scale * outline.max_radius(),
                    },
                ));
                break;
            }
        }
        let (region, spot) = found.ok_or_else(|| {
            CksError::InvalidArgument(format!("could not fit a target of ratio {lo}..{hi} in item {index}"))
        })?;
        paint(&mut canvas, &region, Texture::Flat(level));
        mask = region;
        placed.push(spot);
    }

    let n_distractors = if cfg.distractors == 0 {
        0
    } else {
        cfg.distractors / 2 + rng.below((cfg.distractors - cfg.distractors / 2 + 1) as u64) as usize
    };
    for _ in 0..n_distractors {
        let area = (lo + (hi - lo) * rng.uniform()) * n_pixels;
        for _ in 0..MAX_ATTEMPTS {
            let reach = disc_radius(area) * (1.0 + cfg.blob_irregularity) * 1.25;
            let (cy, cx) = random_center(&mut rng, shape, reach);
            let spot = Placed { cy, cx, radius: reach };
            if !spot.clear_of(&placed, 2.0) {
                continue;
            }
            let outline = random_outline(&mut rng, cy, cx, cfg.blob_irregularity);
            let (_, region) = fit_area(&outline, shape, area);
            let texture = Texture::Striped {
                mean: level,
                period: rng.range(3.0, 5.0),
                angle: rng.range(0.0, TAU),
            };
            paint(&mut canvas, &region, texture);
            placed.push(spot);
            break;
        }
    }

    let noisy = Array2::from_shape_fn(shape, |rc| quantize(canvas[rc] + cfg.noise_sigma * rng.normal()));
    Ok((Image::new(noisy)?, Mask::new(mask.mapv(u8::from))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::bbox_from_mask;

    fn small(count: usize, seed: u64) -> GenConfig {
        GenConfig {
            count,
            seed,
            ..GenConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small(6, 7)).unwrap();
        let b = generate(&small(6, 7)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(6, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn items_depend_only_on_their_index() {
        let a = generate(&GenConfig {
            empty_slice_fraction: 0.0,
            ..small(3, 1)
        })
        .unwrap();
        let b = generate(&GenConfig {
            empty_slice_fraction: 0.0,
            ..small(5, 1)
        })
        .unwrap();
        assert_eq!(a.items(), &b.items()[..3]);
    }

    #[test]
    fn ratios_in_range_and_exact_empty_count() {
        let cfg = small(200, 3);
        let ds = generate(&cfg).unwrap();
        let (lo, hi) = cfg.fg_ratio_range;
        let mut empty = 0;
        for it in ds.items() {
            if it.mask.is_empty() {
                empty += 1;
                continue;
            }
            let r = it.mask.foreground_ratio();
            assert!((lo..=hi).contains(&r), "item {} ratio {r}", it.id);
        }
        assert_eq!(empty, 20);
    }

    /// Flood fill from one foreground pixel reaches all of them.
    fn is_single_component(m: &Mask) -> bool {
        let labels = m.labels();
        let (h, w) = labels.dim();
        let Some(start) = labels.indexed_iter().find(|(_, &v)| v == 1).map(|(rc, _)| rc) else {
            return true;
        };
        let mut seen = Array2::from_elem((h, w), false);
        let mut stack = vec![start];
        seen[start] = true;
        let mut n = 0;
        while let Some((r, c)) = stack.pop() {
            n += 1;
            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                    let p = (nr as usize, nc as usize);
                    if labels[p] == 1 && !seen[p] {
                        seen[p] = true;
                        stack.push(p);
                    }
                }
            }
        }
        n == m.count_ones()
    }

    #[test]
    fn targets_are_single_four_connected_blobs() {
        let ds = generate(&GenConfig {
            blob_irregularity: 1.0,
            ..small(60, 11)
        })
        .unwrap();
        for it in ds.items() {
            assert!(is_single_component(&it.mask), "item {}", it.id);
        }
    }

    #[test]
    fn intensities_are_eight_bit_levels() {
        let ds = generate(&small(4, 2)).unwrap();
        for it in ds.items() {
            for &v in it.image.pixels() {
                let q = v * 255.0;
                assert_eq!(q, q.round());
            }
        }
    }

    #[test]
    fn targets_stay_off_the_border() {
        let ds = generate(&small(40, 5)).unwrap();
        for it in ds.items() {
            if let Some(b) = bbox_from_mask(&it.mask) {
                assert!(b.row_min > 0 && b.col_min > 0 && b.row_max < 63 && b.col_max < 63);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            GenConfig {
                fg_ratio_range: (0.2, 0.1),
                ..GenConfig::default()
            },
            GenConfig {
                fg_ratio_range: (0.01, 0.6),
                ..GenConfig::default()
            },
            GenConfig {
                empty_slice_fraction: 1.0,
                ..GenConfig::default()
            },
            GenConfig {
                blob_irregularity: 1.5,
                ..GenConfig::default()
            },
        ] {
            assert!(generate(&cfg).is_err());
        }
    }
}
