//! Dense CHW feature maps and the handful of layers the reference network
//! needs, each with an explicit backward pass.

/// Channel-major feature map.
#[derive(Clone, Debug)]
pub(crate) struct Feature {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Feature {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Feature {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Location of one convolution inside the flat parameter vector: weights
/// `[cout][cin][k][k]` followed by `cout` biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvLayer {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub offset: usize,
}

impl ConvLayer {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// `c = a * b` (or `c += a * b` with `accumulate`), all row-major unless
/// the transpose flags say otherwise. `a` is `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the strides, so every
    // index the kernel touches is in bounds; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `x` into a `(cin*k*k) x (h*w)` matrix for a same-padded conv.
fn im2col(x: &Feature, k: usize) -> Vec<f64> {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut col = vec![0.0; x.c * k * k * hw];
    for ci in 0..x.c {
        let plane = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = sy as usize * w;
                    let sx0 = (x_lo as isize + dx) as usize;
                    dst[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&plane[src_row + sx0..src_row + sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize) -> Feature {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut out = Feature::zeros(c, h, w);
    for ci in 0..c {
        let plane = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = sy as usize * w;
                    let sx0 = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[dst_row + sx0..dst_row + sx0 + (x_hi - x_lo)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// Same-padded convolution. Returns the output and the unfolded input,
/// which the backward pass reuses.
pub(crate) fn conv_forward(params: &[f64], layer: &ConvLayer, x: &Feature) -> (Feature, Vec<f64>) {
    debug_assert_eq!(x.c, layer.cin);
    let hw = x.hw();
    let col = im2col(x, layer.k);
    let weights = &params[layer.offset..layer.offset + layer.weight_len()];
    let bias = &params[layer.offset + layer.weight_len()..layer.offset + layer.param_len()];
    let mut out = Feature::zeros(layer.cout, x.h, x.w);
    gemm(
        layer.cout,
        layer.patch(),
        hw,
        weights,
        false,
        &col,
        false,
        &mut out.data,
        false,
    );
    for (co, &b) in bias.iter().enumerate() {
        out.data[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += b);
    }
    (out, col)
}

/// Accumulates parameter gradients into `grad` and, when `need_input` is
/// set, returns the gradient with respect to the layer input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    params: &[f64],
    layer: &ConvLayer,
    col: &[f64],
    h: usize,
    w: usize,
    dy: &Feature,
    grad: &mut [f64],
    need_input: bool,
) -> Option<Feature> {
    let hw = h * w;
    let patch = layer.patch();
    let wl = layer.weight_len();
    {
        let (gw, gb) = grad[layer.offset..layer.offset + layer.param_len()].split_at_mut(wl);
        gemm(layer.cout, hw, patch, &dy.data, false, col, true, gw, true);
        for (co, g) in gb.iter_mut().enumerate() {
            *g += dy.data[co * hw..(co + 1) * hw].iter().sum::<f64>();
        }
    }
    if !need_input {
        return None;
    }
    let weights = &params[layer.offset..layer.offset + wl];
    let mut dcol = vec![0.0; patch * hw];
    gemm(patch, layer.cout, hw, weights, true, &dy.data, false, &mut dcol, false);
    Some(col2im(&dcol, layer.cin, h, w, layer.k))
}

pub(crate) fn relu_inplace(x: &mut Feature) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the (post-activation) output was not positive.
pub(crate) fn relu_backward(out: &Feature, dy: &mut Feature) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max-pool with stride 2; records which of the four inputs won.
pub(crate) fn maxpool(x: &Feature) -> (Feature, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Feature::zeros(x.c, oh, ow);
    let mut arg = vec![0u8; x.c * oh * ow];
    for c in 0..x.c {
        let plane = &x.data[c * x.hw()..(c + 1) * x.hw()];
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * x.w + 2 * xx;
                let cands = [plane[base], plane[base + 1], plane[base + x.w], plane[base + x.w + 1]];
                let mut best = 0;
                for i in 1..4 {
                    if cands[i] > cands[best] {
                        best = i;
                    }
                }
                let o = c * oh * ow + y * ow + xx;
                out.data[o] = cands[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(arg: &[u8], dy: &Feature, in_h: usize, in_w: usize) -> Feature {
    let mut dx = Feature::zeros(dy.c, in_h, in_w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let o = c * dy.hw() + y * dy.w + xx;
                let a = arg[o] as usize;
                let (oy, ox) = (a / 2, a % 2);
                dx.data[c * in_h * in_w + (2 * y + oy) * in_w + 2 * xx + ox] += dy.data[o];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample(x: &Feature) -> Feature {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Feature::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for y in 0..oh {
            let src = &x.data[c * x.hw() + (y / 2) * x.w..c * x.hw() + (y / 2 + 1) * x.w];
            let dst = &mut out.data[c * oh * ow + y * ow..c * oh * ow + (y + 1) * ow];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(dy: &Feature) -> Feature {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Feature::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dx.data[c * h * w + (y / 2) * w + xx / 2] += dy.data[c * dy.hw() + y * dy.w + xx];
            }
        }
    }
    dx
}

/// Stacks `a` on top of `b` along the channel axis.
pub(crate) fn concat(a: &Feature, b: &Feature) -> Feature {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feature {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Splits a concatenated gradient back into its two parts.
pub(crate) fn split(d: Feature, first_channels: usize) -> (Feature, Feature) {
    let cut = first_channels * d.hw();
    let (h, w, c) = (d.h, d.w, d.c);
    let mut data = d.data;
    let tail = data.split_off(cut);
    (
        Feature {
            c: first_channels,
            h,
            w,
            data,
        },
        Feature {
            c: c - first_channels,
            h,
            w,
            data: tail,
        },
    )
}
