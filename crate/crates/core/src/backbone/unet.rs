//! Reference encoder-decoder: 3x3 convolutions with ReLU, 2x max-pool on the
//! way down, nearest-neighbour upsample plus 3x3 conv on the way up, skip
//! connections by channel concatenation, 1x1 conv and sigmoid head.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::layers::{
    concat, conv_backward, conv_forward, maxpool, maxpool_backward, relu_backward, relu_inplace, split, upsample,
    upsample_backward, ConvLayer, Feature,
};
use super::{sigmoid, Backbone};
use crate::error::{CksError, Result};
use crate::losses::{loss_with_grad, LossConfig};
use crate::rng::Rng64;
use crate::types::{Image, LayoutId, LossBreakdown, Mask, ProbMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            depth: 2,
            base_channels: 8,
        }
    }
}

impl BackboneSpec {
    pub fn new(depth: usize, base_channels: usize) -> Result<Self> {
        if depth < 1 || base_channels < 1 {
            return Err(CksError::InvalidArgument(format!(
                "depth and base_channels must be >= 1, got {depth} and {base_channels}"
            )));
        }
        Ok(BackboneSpec { depth, base_channels })
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Convolutions in parameter order: encoder levels `0..=depth`, then
    /// `(up, dec)` pairs for levels `depth-1` down to `0`, then the head.
    pub(crate) fn layers(&self) -> Vec<ConvLayer> {
        let mut shapes = Vec::new();
        shapes.push((1, self.channels(0), 3));
        for l in 1..=self.depth {
            shapes.push((self.channels(l - 1), self.channels(l), 3));
        }
        for l in (0..self.depth).rev() {
            shapes.push((self.channels(l + 1), self.channels(l), 3));
            shapes.push((2 * self.channels(l), self.channels(l), 3));
        }
        shapes.push((self.channels(0), 1, 1));
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(cin, cout, k)| {
                let layer = ConvLayer { cin, cout, k, offset };
                offset += layer.param_len();
                layer
            })
            .collect()
    }
}

struct Tape {
    /// Unfolded inputs of every convolution, in layer order.
    cols: Vec<Vec<f64>>,
    /// Post-ReLU outputs of every convolution except the head.
    outs: Vec<Feature>,
    /// Max-pool winners per encoder level `1..=depth`.
    pools: Vec<Vec<u8>>,
    probs: Vec<f64>,
}

impl BackboneSpec {
    fn input_feature(&self, x: &Image) -> Result<Feature> {
        let (h, w) = x.shape();
        let align = self.input_align();
        if h % align != 0 || w % align != 0 {
            return Err(CksError::AlignmentError {
                height: h,
                width: w,
                align,
            });
        }
        Ok(Feature {
            c: 1,
            h,
            w,
            data: x.pixels().iter().copied().collect(),
        })
    }

    fn check_len(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(CksError::CountMismatch {
                expected: self.param_count() as u64,
                found: params.len() as u64,
            });
        }
        Ok(())
    }

    fn run(&self, params: &[f64], x: Feature) -> Tape {
        let layers = self.layers();
        let d = self.depth;
        let mut cols = Vec::with_capacity(layers.len());
        let mut outs: Vec<Feature> = Vec::with_capacity(layers.len());
        let mut pools = Vec::with_capacity(d);

        let conv_relu = |li: usize, input: &Feature, cols: &mut Vec<Vec<f64>>| {
            let (mut out, col) = conv_forward(params, &layers[li], input);
            relu_inplace(&mut out);
            cols.push(col);
            out
        };

        // Encoder: outs[0..=d] are the per-level features.
        let e0 = conv_relu(0, &x, &mut cols);
        outs.push(e0);
        for l in 1..=d {
            let (pooled, arg) = maxpool(&outs[l - 1]);
            pools.push(arg);
            let e = conv_relu(l, &pooled, &mut cols);
            outs.push(e);
        }

        // Decoder.
        let mut li = d + 1;
        let mut cur_index = d;
        for l in (0..d).rev() {
            let up_in = upsample(&outs[cur_index]);
            let u = conv_relu(li, &up_in, &mut cols);
            let joined = concat(&u, &outs[l]);
            outs.push(u);
            let dec = conv_relu(li + 1, &joined, &mut cols);
            outs.push(dec);
            cur_index = outs.len() - 1;
            li += 2;
        }

        let (logits, col) = conv_forward(params, &layers[li], &outs[cur_index]);
        cols.push(col);
        let probs = logits.data.iter().map(|&z| sigmoid(z)).collect();
        Tape {
            cols,
            outs,
            pools,
            probs,
        }
    }

    fn backward(&self, params: &[f64], tape: &Tape, dlogits: Feature) -> Vec<f64> {
        let layers = self.layers();
        let d = self.depth;
        let mut grad = vec![0.0; params.len()];
        let (h0, w0) = (dlogits.h, dlogits.w);
        let dims = |l: usize| (h0 >> l, w0 >> l);

        let head = layers.len() - 1;
        let last = tape.outs.len() - 1;
        let mut dcur = conv_backward(
            params,
            &layers[head],
            &tape.cols[head],
            h0,
            w0,
            &dlogits,
            &mut grad,
            true,
        )
        .expect("input gradient requested");

        // Skip-connection gradients per encoder level.
        let mut denc: Vec<Option<Feature>> = (0..=d).map(|_| None).collect();

        // Decoder layers were appended as (up, dec) for l = d-1 .. 0, so walk
        // them back from l = 0 upwards.
        for (step, l) in (0..d).enumerate() {
            let dec_out = last - 2 * step;
            let up_out = dec_out - 1;
            let dec_layer = head - 1 - 2 * step;
            let up_layer = dec_layer - 1;
            let (h, w) = dims(l);

            relu_backward(&tape.outs[dec_out], &mut dcur);
            let djoined = conv_backward(
                params,
                &layers[dec_layer],
                &tape.cols[dec_layer],
                h,
                w,
                &dcur,
                &mut grad,
                true,
            )
            .expect("input gradient requested");
            let (mut du, dskip) = split(djoined, self.channels(l));
            denc[l] = Some(dskip);

            relu_backward(&tape.outs[up_out], &mut du);
            let dup = conv_backward(
                params,
                &layers[up_layer],
                &tape.cols[up_layer],
                h,
                w,
                &du,
                &mut grad,
                true,
            )
            .expect("input gradient requested");
            dcur = upsample_backward(&dup);
        }

        // Encoder, deepest level first.
        let mut dlevel = dcur;
        for l in (0..=d).rev() {
            if let Some(skip) = denc[l].take() {
                dlevel.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += b);
            }
            relu_backward(&tape.outs[l], &mut dlevel);
            let (h, w) = dims(l);
            let dinput = conv_backward(params, &layers[l], &tape.cols[l], h, w, &dlevel, &mut grad, l > 0);
            if l > 0 {
                let (ph, pw) = dims(l - 1);
                dlevel = maxpool_backward(&tape.pools[l - 1], &dinput.expect("input gradient requested"), ph, pw);
            }
        }
        grad
    }
}

impl Backbone for BackboneSpec {
    fn layout_id(&self) -> LayoutId {
        LayoutId(format!("unet-d{}-c{}-k3", self.depth, self.base_channels))
    }

    fn param_count(&self) -> usize {
        self.layers().iter().map(ConvLayer::param_len).sum()
    }

    fn input_align(&self) -> usize {
        1 << self.depth
    }

    /// He-uniform weights; biases uniform in `+-1/sqrt(fan_in)` so no unit
    /// starts exactly on a ReLU kink.
    fn init_params_f64(&self, seed: u64) -> Vec<f64> {
        let mut rng = Rng64::new(seed);
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            let fan_in = (layer.cin * layer.k * layer.k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            out.extend((0..layer.weight_len()).map(|_| rng.range(-bound, bound)));
            let bias_bound = 1.0 / fan_in.sqrt();
            out.extend((0..layer.cout).map(|_| rng.range(-bias_bound, bias_bound)));
        }
        out
    }

    fn forward_f64(&self, params: &[f64], x: &Image) -> Result<ProbMap> {
        self.check_len(params)?;
        let feature = self.input_feature(x)?;
        let tape = self.run(params, feature);
        ProbMap::new(Array2::from_shape_vec(x.shape(), tape.probs).expect("output matches input shape"))
    }

    fn loss_and_grad(
        &self,
        params: &[f64],
        x: &Image,
        t: &Mask,
        loss: &LossConfig,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        self.check_len(params)?;
        let feature = self.input_feature(x)?;
        let (h, w) = x.shape();
        let tape = self.run(params, feature);
        let p = ProbMap::new(Array2::from_shape_vec((h, w), tape.probs.clone()).expect("output matches input shape"))?;
        let (breakdown, dp) = loss_with_grad(&p, t, loss)?;
        let dlogits = Feature {
            c: 1,
            h,
            w,
            data: dp.iter().zip(&tape.probs).map(|(g, &p)| g * p * (1.0 - p)).collect(),
        };
        Ok((breakdown, self.backward(params, &tape, dlogits)))
    }
}
