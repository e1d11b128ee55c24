use serde::{Deserialize, Serialize};

use super::tensor::saturate_i8;

/// Rounding grid an output channel is requantized onto.
///
/// `Full` is the ordinary int8 range. `Even` keeps outputs on the even
/// integers of the same range, and `Half` is the range of one split replica:
/// for the same real pre-activation `y`, `2 * Half(y / 2) == Even(y)` holds
/// exactly, which is what makes neuron splitting lossless on an integer
/// datapath.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputGrid {
    #[default]
    Full,
    Even,
    Half,
}

impl OutputGrid {
    /// Requantizes an int32 accumulator with the real multiplier
    /// `s_in * s_w / s_out`. One f64 multiply, then round half away from
    /// zero, then clamp.
    pub fn requantize(self, acc: i32, multiplier: f64) -> i8 {
        let y = multiplier * f64::from(acc);
        match self {
            OutputGrid::Full => saturate_i8(y.round()),
            OutputGrid::Even => 2 * (y * 0.5).round().clamp(-64.0, 63.0) as i8,
            OutputGrid::Half => y.round().clamp(-64.0, 63.0) as i8,
        }
    }
}

/// Fully connected layer with row-major `out_features x in_features` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FullyConnected {
    pub in_features: usize,
    pub out_features: usize,
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
    pub weight_scale: f64,
    pub output_scale: f64,
    pub grids: Vec<OutputGrid>,
}

impl FullyConnected {
    pub fn new(
        in_features: usize,
        out_features: usize,
        weights: Vec<i8>,
        bias: Vec<i32>,
        weight_scale: f64,
        output_scale: f64,
    ) -> Self {
        Self {
            in_features,
            out_features,
            weights,
            bias,
            weight_scale,
            output_scale,
            grids: vec![OutputGrid::Full; out_features],
        }
    }

    pub fn row(&self, unit: usize) -> &[i8] {
        &self.weights[unit * self.in_features..(unit + 1) * self.in_features]
    }

    pub(crate) fn forward(&self, input: &[i8], multiplier: f64) -> Vec<i8> {
        (0..self.out_features)
            .map(|o| {
                let acc = self
                    .row(o)
                    .iter()
                    .zip(input)
                    .fold(self.bias[o], |acc, (&w, &x)| {
                        acc.wrapping_add(i32::from(w) * i32::from(x))
                    });
                self.grids[o].requantize(acc, multiplier)
            })
            .collect()
    }
}

/// 2-D convolution over `[channels, height, width]` activations with zero
/// padding. Weights are laid out `[out][in][kh][kw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
    pub weight_scale: f64,
    pub output_scale: f64,
    pub grids: Vec<OutputGrid>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        weights: Vec<i8>,
        bias: Vec<i32>,
        weight_scale: f64,
        output_scale: f64,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride,
            padding,
            weights,
            bias,
            weight_scale,
            output_scale,
            grids: vec![OutputGrid::Full; out_channels],
        }
    }

    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn filter(&self, channel: usize) -> &[i8] {
        let n = self.filter_len();
        &self.weights[channel * n..(channel + 1) * n]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if self.stride == 0 || ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }

    /// Visits every `(input index, weight index)` pair contributing to output
    /// position `(oy, ox)` of any output channel, weight index relative to the
    /// start of a filter.
    pub(crate) fn for_each_tap(
        &self,
        (h, w): (usize, usize),
        (oy, ox): (usize, usize),
        mut f: impl FnMut(usize, usize),
    ) {
        for ic in 0..self.in_channels {
            for ky in 0..self.kernel_h {
                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..self.kernel_w {
                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let input = (ic * h + iy as usize) * w + ix as usize;
                    let weight = (ic * self.kernel_h + ky) * self.kernel_w + kx;
                    f(input, weight);
                }
            }
        }
    }

    pub(crate) fn forward(&self, input: &[i8], hw: (usize, usize), multiplier: f64) -> Vec<i8> {
        let (oh, ow) = self.output_hw(hw.0, hw.1).expect("validated conv geometry");
        let mut out = Vec::with_capacity(self.out_channels * oh * ow);
        for oc in 0..self.out_channels {
            let filter = self.filter(oc);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[oc];
                    self.for_each_tap(hw, (oy, ox), |i, k| {
                        acc = acc.wrapping_add(i32::from(filter[k]) * i32::from(input[i]));
                    });
                    out.push(self.grids[oc].requantize(acc, multiplier));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool2d {
    pub window: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.window == 0 || self.stride == 0 || h < self.window || w < self.window {
            return None;
        }
        Some(((h - self.window) / self.stride + 1, (w - self.window) / self.stride + 1))
    }

    /// Index of the maximum of each window; the lowest index wins ties.
    pub(crate) fn argmax_indices(&self, input: &[i8], shape: (usize, usize, usize)) -> Vec<usize> {
        let (c, h, w) = shape;
        let (oh, ow) = self.output_hw(h, w).expect("validated pool geometry");
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (ch * h + oy * self.stride) * w + ox * self.stride;
                    for ky in 0..self.window {
                        for kx in 0..self.window {
                            let idx = (ch * h + oy * self.stride + ky) * w + ox * self.stride + kx;
                            if input[idx] > input[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
        out
    }
}

/// One layer of a quantized network.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    FullyConnected(FullyConnected),
    Conv2d(Conv2d),
    Relu,
    MaxPool2d(MaxPool2d),
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::FullyConnected(_) => "fully_connected",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d(_) => "max_pool2d",
            Layer::Flatten => "flatten",
        }
    }

    /// True for the layers whose outputs are neurons.
    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::FullyConnected(_) | Layer::Conv2d(_))
    }

    pub fn output_scale(&self) -> Option<f64> {
        match self {
            Layer::FullyConnected(fc) => Some(fc.output_scale),
            Layer::Conv2d(conv) => Some(conv.output_scale),
            _ => None,
        }
    }

    pub fn weight_scale(&self) -> Option<f64> {
        match self {
            Layer::FullyConnected(fc) => Some(fc.weight_scale),
            Layer::Conv2d(conv) => Some(conv.weight_scale),
            _ => None,
        }
    }

    pub fn out_channels(&self) -> Option<usize> {
        match self {
            Layer::FullyConnected(fc) => Some(fc.out_features),
            Layer::Conv2d(conv) => Some(conv.out_channels),
            _ => None,
        }
    }

    pub fn grids(&self) -> Option<&[OutputGrid]> {
        match self {
            Layer::FullyConnected(fc) => Some(&fc.grids),
            Layer::Conv2d(conv) => Some(&conv.grids),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&[i32]> {
        match self {
            Layer::FullyConnected(fc) => Some(&fc.bias),
            Layer::Conv2d(conv) => Some(&conv.bias),
            _ => None,
        }
    }

    /// Input weights of output channel `channel` (a row for FC, a filter for
    /// conv).
    pub fn channel_weights(&self, channel: usize) -> Option<&[i8]> {
        match self {
            Layer::FullyConnected(fc) => Some(fc.row(channel)),
            Layer::Conv2d(conv) => Some(conv.filter(channel)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requantize_rounds_half_away_from_zero() {
        assert_eq!(OutputGrid::Full.requantize(5, 0.5), 3);
        assert_eq!(OutputGrid::Full.requantize(-5, 0.5), -3);
        assert_eq!(OutputGrid::Full.requantize(1000, 1.0), 127);
        assert_eq!(OutputGrid::Full.requantize(-1000, 1.0), -128);
    }

    #[test]
    fn half_grid_doubles_to_even_grid() {
        for acc in (-600..600).step_by(2) {
            for m in [1.0, 0.37, 0.013, 2.5] {
                let even = OutputGrid::Even.requantize(acc, m);
                let half = OutputGrid::Half.requantize(acc / 2, m);
                assert_eq!(2 * i16::from(half), i16::from(even), "acc {acc} m {m}");
            }
        }
    }

    #[test]
    fn maxpool_ties_pick_lowest_index() {
        let pool = MaxPool2d { window: 2, stride: 2 };
        let idx = pool.argmax_indices(&[3, 3, 3, 3], (1, 2, 2));
        assert_eq!(idx, vec![0]);
    }
}
