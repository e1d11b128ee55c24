use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::qnn::{Conv2d, MaxPool2d};
use crate::scalar::Scalar;

/// Real-valued layer, same topology language as the quantized network.
#[derive(Clone, Debug, PartialEq)]
pub enum FloatLayer<T> {
    Dense {
        in_features: usize,
        out_features: usize,
        /// Row-major `out x in`.
        weights: Vec<T>,
        bias: Vec<T>,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        /// `[out][in][kh][kw]`.
        weights: Vec<T>,
        bias: Vec<T>,
    },
    Relu,
    MaxPool2d(MaxPool2d),
    Flatten,
}

impl<T: Scalar> FloatLayer<T> {
    pub fn is_weighted(&self) -> bool {
        matches!(self, FloatLayer::Dense { .. } | FloatLayer::Conv2d { .. })
    }

    pub fn weights(&self) -> Option<(&[T], &[T])> {
        match self {
            FloatLayer::Dense { weights, bias, .. } | FloatLayer::Conv2d { weights, bias, .. } => {
                Some((weights, bias))
            }
            _ => None,
        }
    }

    fn conv_geometry(&self) -> Option<Conv2d> {
        match *self {
            FloatLayer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => Some(Conv2d::new(
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                Vec::new(),
                Vec::new(),
                1.0,
                1.0,
            )),
            _ => None,
        }
    }
}

/// Pre-quantization model.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatModel<T> {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub layers: Vec<FloatLayer<T>>,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Scalar> FloatModel<T> {
    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((w, b)) = layer.weights() {
                if w.iter().chain(b).any(|v| !v.is_finite()) {
                    return Err(Error::InvalidNetwork(format!("layer {i}: non-finite parameter")));
                }
            }
        }
        Ok(())
    }

    /// Outputs of every layer; entry `i` is the output of layer `i`.
    pub fn forward_all(&self, input: &[T]) -> Vec<Vec<T>> {
        let mut shape = self.input_shape.clone();
        let mut act = input.to_vec();
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                FloatLayer::Dense {
                    in_features,
                    out_features,
                    weights,
                    bias,
                } => {
                    act = (0..*out_features)
                        .map(|o| {
                            let row = &weights[o * in_features..(o + 1) * in_features];
                            row.iter().zip(&act).fold(bias[o], |acc, (&w, &x)| acc + w * x)
                        })
                        .collect();
                    shape = vec![*out_features];
                }
                FloatLayer::Conv2d { weights, bias, .. } => {
                    let geom = layer.conv_geometry().expect("conv layer");
                    let hw = (shape[1], shape[2]);
                    let (oh, ow) = geom.output_hw(hw.0, hw.1).expect("conv geometry");
                    let n = geom.filter_len();
                    let mut out = Vec::with_capacity(geom.out_channels * oh * ow);
                    for oc in 0..geom.out_channels {
                        let filter = &weights[oc * n..(oc + 1) * n];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias[oc];
                                geom.for_each_tap(hw, (oy, ox), |i, k| acc += filter[k] * act[i]);
                                out.push(acc);
                            }
                        }
                    }
                    act = out;
                    shape = vec![geom.out_channels, oh, ow];
                }
                FloatLayer::Relu => {
                    for v in &mut act {
                        *v = v.max(T::zero());
                    }
                }
                FloatLayer::MaxPool2d(pool) => {
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let (oh, ow) = pool.output_hw(h, w).expect("pool geometry");
                    let mut out = Vec::with_capacity(c * oh * ow);
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = T::neg_infinity();
                                for ky in 0..pool.window {
                                    for kx in 0..pool.window {
                                        let idx = (ch * h + oy * pool.stride + ky) * w
                                            + ox * pool.stride
                                            + kx;
                                        best = best.max(act[idx]);
                                    }
                                }
                                out.push(best);
                            }
                        }
                    }
                    act = out;
                    shape = vec![c, oh, ow];
                }
                FloatLayer::Flatten => shape = vec![act.len()],
            }
            outs.push(act.clone());
        }
        outs
    }

    pub fn predict(&self, input: &[T]) -> usize {
        let outs = self.forward_all(input);
        crate::qnn::argmax(outs.last().map_or(&[][..], Vec::as_slice))
    }

    pub fn accuracy(&self, dataset: &crate::io::Dataset) -> f64 {
        if dataset.is_empty() {
            return 0.0;
        }
        let hits = dataset
            .samples
            .iter()
            .filter(|s| {
                let x: Vec<T> = s.features.iter().map(|&f| T::lit(f)).collect();
                self.predict(&x) == s.label
            })
            .count();
        hits as f64 / dataset.len() as f64
    }
}
