//! Gradient gate: does the golden-class loss depend on a neuron's output?
//!
//! The loss is `sigmoid(sum_j (E_t - E_j))` over dequantized logits `E`, with
//! `t` the fault-free predicted class. Its gradient with respect to every
//! neuron's dequantized post-activation output is obtained by one backward
//! pass through a real-valued shadow of the network: requantization is
//! treated as identity (straight-through), ReLU masks and max-pool routing
//! come from the quantized forward pass.

use super::layer::Layer;
use super::network::{argmax, NeuronId, QNetwork, Trace};
use super::tensor::QTensor;
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateResult<T> {
    pub loss: T,
    pub grad: T,
    pub grad_nonzero: bool,
}

/// Loss gradients for every neuron of one input.
#[derive(Clone, Debug)]
pub struct NeuronGradients<T> {
    pub golden_class: usize,
    pub loss: T,
    slope: T,
    /// d(sum)/d(output) per neuron layer with the downstream weight scales
    /// factored out, so entries are exact integer path sums; `None` for
    /// other layers.
    inner: Vec<Option<Vec<T>>>,
    /// Product of the weight scales downstream of each neuron layer.
    scales: Vec<T>,
}

impl<T: Scalar> NeuronGradients<T> {
    /// dL/d(output) of `neuron`.
    pub fn grad(&self, neuron: NeuronId) -> T {
        self.slope * self.scales[neuron.layer] * self.inner_grad(neuron)
    }

    /// The gate. Decided on the unscaled path sum: the sigmoid slope and the
    /// weight scales are strictly positive, but products with them can
    /// underflow or round a cancelling sum away from zero.
    pub fn is_nonzero(&self, neuron: NeuronId) -> bool {
        self.inner_grad(neuron) != T::zero()
    }

    fn inner_grad(&self, neuron: NeuronId) -> T {
        self.inner[neuron.layer].as_ref().expect("neuron layer")[neuron.unit]
    }

    pub fn gate(&self, neuron: NeuronId) -> GateResult<T> {
        GateResult {
            loss: self.loss,
            grad: self.grad(neuron),
            grad_nonzero: self.is_nonzero(neuron),
        }
    }
}

/// Golden-class loss for dequantized outputs `scale * logits`.
pub fn golden_loss<T: Scalar>(logits: &[i32], scale: f64, golden: usize) -> T {
    sigmoid(margin_sum::<T>(logits, scale, golden))
}

fn margin_sum<T: Scalar>(logits: &[i32], scale: f64, golden: usize) -> T {
    let s = T::lit(scale);
    let et = s * T::lit(f64::from(logits[golden]));
    logits
        .iter()
        .map(|&l| et - s * T::lit(f64::from(l)))
        .sum()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Backpropagates the loss of one fault-free pass to every neuron.
pub fn neuron_gradients<T: Scalar>(net: &QNetwork, trace: &Trace) -> NeuronGradients<T> {
    let layers = net.layers();
    let logits: Vec<i32> = trace.output().iter().map(|&q| i32::from(q)).collect();
    let golden = argmax(&logits);
    let out_scale = net.scale_at(layers.len());
    let sum = margin_sum::<T>(&logits, out_scale, golden);
    let loss = sigmoid(sum);
    let slope = loss * (T::one() - loss);

    let n = T::lit(logits.len() as f64);
    let mut g: Vec<T> = (0..logits.len())
        .map(|c| if c == golden { n - T::one() } else { -T::one() })
        .collect();
    let mut inner: Vec<Option<Vec<T>>> = vec![None; layers.len()];
    let mut scales = vec![T::one(); layers.len()];
    let mut downstream = T::one();
    let first = net.neuron_layers().next().expect("validated");

    for i in (first..layers.len()).rev() {
        let fused_relu = i > 0 && matches!(layers[i], Layer::Relu) && layers[i - 1].is_weighted();
        match &layers[i] {
            Layer::Flatten => {}
            Layer::Relu if fused_relu => {}
            Layer::Relu => mask_inactive(&mut g, &trace.stages[i + 1]),
            Layer::MaxPool2d(pool) => {
                let shape = net.shape_at(i);
                let routes = pool.argmax_indices(&trace.stages[i], (shape[0], shape[1], shape[2]));
                let mut back = vec![T::zero(); trace.stages[i].len()];
                for (o, src) in routes.into_iter().enumerate() {
                    back[src] += g[o];
                }
                g = back;
            }
            Layer::FullyConnected(fc) => {
                inner[i] = Some(g.clone());
                scales[i] = downstream;
                downstream *= T::lit(fc.weight_scale);
                if i == first {
                    break;
                }
                if net.relu_follows(i) {
                    mask_inactive(&mut g, trace.layer_output(i));
                }
                let mut back = vec![T::zero(); fc.in_features];
                for (o, &go) in g.iter().enumerate() {
                    if go == T::zero() {
                        continue;
                    }
                    for (b, &w) in back.iter_mut().zip(fc.row(o)) {
                        *b += go * T::lit(f64::from(w));
                    }
                }
                g = back;
            }
            Layer::Conv2d(conv) => {
                inner[i] = Some(g.clone());
                scales[i] = downstream;
                downstream *= T::lit(conv.weight_scale);
                if i == first {
                    break;
                }
                if net.relu_follows(i) {
                    mask_inactive(&mut g, trace.layer_output(i));
                }
                let shape = net.shape_at(i);
                let out_shape = net.shape_at(i + 1);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let mut back = vec![T::zero(); trace.stages[i].len()];
                for oc in 0..conv.out_channels {
                    let filter = conv.filter(oc);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[(oc * oh + oy) * ow + ox];
                            if go == T::zero() {
                                continue;
                            }
                            conv.for_each_tap((shape[1], shape[2]), (oy, ox), |src, k| {
                                back[src] += go * T::lit(f64::from(filter[k]));
                            });
                        }
                    }
                }
                g = back;
            }
        }
    }

    NeuronGradients {
        golden_class: golden,
        loss,
        slope,
        inner,
        scales,
    }
}

fn mask_inactive<T: Scalar>(g: &mut [T], activations: &[i8]) {
    for (gi, &a) in g.iter_mut().zip(activations) {
        if a <= 0 {
            *gi = T::zero();
        }
    }
}

/// Loss and gradient gate of a single neuron for one input.
pub fn loss_and_gradient_gate<T: Scalar>(
    net: &QNetwork,
    input: &QTensor,
    neuron: NeuronId,
) -> Result<GateResult<T>> {
    net.validate_neuron(neuron)?;
    let trace = net.trace(input)?;
    Ok(neuron_gradients::<T>(net, &trace).gate(neuron))
}
