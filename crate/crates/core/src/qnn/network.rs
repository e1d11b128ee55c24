use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::layer::{Layer, OutputGrid};
use super::tensor::QTensor;
use crate::error::{Error, Result};

/// Address of one neuron: a single output activation of a fully connected or
/// convolution layer. For convolutions `unit` is the flat `channel * H * W +
/// y * W + x` index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub unit: usize,
}

impl NeuronId {
    pub fn new(layer: usize, unit: usize) -> Self {
        Self { layer, unit }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.unit)
    }
}

/// Callback invoked on every neuron layer's post-activation output, before
/// any downstream layer reads it.
pub trait LayerHook {
    fn after_layer(&mut self, layer: usize, values: &mut [i8]);
}

/// Hook that leaves every value untouched.
pub struct NoHook;

impl LayerHook for NoHook {
    fn after_layer(&mut self, _layer: usize, _values: &mut [i8]) {}
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inference {
    pub logits: Vec<i32>,
    pub predicted_class: usize,
}

impl Inference {
    fn from_outputs(outputs: &[i8]) -> Self {
        let logits: Vec<i32> = outputs.iter().map(|&q| i32::from(q)).collect();
        let predicted_class = argmax(&logits);
        Self {
            logits,
            predicted_class,
        }
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Requested replacement of one neuron's post-activation value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapOverride {
    pub neuron: NeuronId,
    pub value: i8,
}

/// What a tap saw during one inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapRecord {
    pub neuron: NeuronId,
    pub observed_value: i8,
    pub override_value: Option<i8>,
}

#[derive(Clone, Debug)]
pub struct TapOutput {
    pub inference: Inference,
    pub taps: Vec<TapRecord>,
}

/// Activations entering every layer of one fault-free pass. `stages[i]` is
/// the input of layer `i`, `stages[len]` is the network output. For a neuron
/// layer fused with the following ReLU both `stages[i + 1]` and `stages[i + 2]`
/// hold the post-activation output.
#[derive(Clone, Debug)]
pub struct Trace {
    pub stages: Vec<Vec<i8>>,
}

impl Trace {
    /// Post-activation output of neuron layer `layer`.
    pub fn layer_output(&self, layer: usize) -> &[i8] {
        &self.stages[layer + 1]
    }

    pub fn output(&self) -> &[i8] {
        self.stages.last().expect("trace has at least the input stage")
    }
}

/// A layered int8 network with per-tensor scales.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    name: String,
    input_shape: Vec<usize>,
    input_scale: f64,
    class_count: usize,
    layers: Vec<Layer>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output.
    shapes: Vec<Vec<usize>>,
    /// Real scale of the activation entering layer `i`.
    in_scales: Vec<f64>,
    /// Requantization multiplier of each neuron layer (0 elsewhere).
    multipliers: Vec<f64>,
}

impl QNetwork {
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        input_scale: f64,
        class_count: usize,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidNetwork(msg));
        if input_shape.is_empty() || input_shape.contains(&0) {
            return bad(format!("input shape {input_shape:?} must have positive dimensions"));
        }
        if !(input_scale.is_finite() && input_scale > 0.0) {
            return bad(format!("input scale must be positive, got {input_scale}"));
        }
        if class_count == 0 {
            return bad("class count must be positive".into());
        }
        let mut shapes = vec![input_shape.clone()];
        let mut in_scales = vec![input_scale];
        let mut multipliers = Vec::with_capacity(layers.len());
        let mut shape = input_shape.clone();
        let mut scale = input_scale;
        for (i, layer) in layers.iter().enumerate() {
            let mut multiplier = 0.0;
            shape = match layer {
                Layer::FullyConnected(fc) => {
                    if shape.len() != 1 || shape[0] != fc.in_features {
                        return bad(format!(
                            "layer {i}: fully connected expects [{}] input, got {shape:?}",
                            fc.in_features
                        ));
                    }
                    if fc.weights.len() != fc.in_features * fc.out_features {
                        return bad(format!("layer {i}: weight count mismatch"));
                    }
                    if fc.bias.len() != fc.out_features || fc.grids.len() != fc.out_features {
                        return bad(format!("layer {i}: bias/grid length must equal out_features"));
                    }
                    vec![fc.out_features]
                }
                Layer::Conv2d(conv) => {
                    if shape.len() != 3 || shape[0] != conv.in_channels {
                        return bad(format!(
                            "layer {i}: conv expects [{}, H, W] input, got {shape:?}",
                            conv.in_channels
                        ));
                    }
                    if conv.weights.len() != conv.out_channels * conv.filter_len() {
                        return bad(format!("layer {i}: weight count mismatch"));
                    }
                    if conv.bias.len() != conv.out_channels || conv.grids.len() != conv.out_channels
                    {
                        return bad(format!("layer {i}: bias/grid length must equal out_channels"));
                    }
                    let Some((oh, ow)) = conv.output_hw(shape[1], shape[2]) else {
                        return bad(format!("layer {i}: kernel does not fit input {shape:?}"));
                    };
                    vec![conv.out_channels, oh, ow]
                }
                Layer::Relu => shape.clone(),
                Layer::MaxPool2d(pool) => {
                    if shape.len() != 3 {
                        return bad(format!("layer {i}: max pool expects [C, H, W] input"));
                    }
                    let Some((oh, ow)) = pool.output_hw(shape[1], shape[2]) else {
                        return bad(format!("layer {i}: pool window does not fit input {shape:?}"));
                    };
                    vec![shape[0], oh, ow]
                }
                Layer::Flatten => vec![shape.iter().product()],
            };
            if let (Some(ws), Some(os)) = (layer.weight_scale(), layer.output_scale()) {
                if !(ws.is_finite() && ws > 0.0 && os.is_finite() && os > 0.0) {
                    return bad(format!("layer {i}: scales must be positive and finite"));
                }
                multiplier = scale * ws / os;
                scale = os;
            }
            multipliers.push(multiplier);
            shapes.push(shape.clone());
            in_scales.push(scale);
        }
        match layers.iter().rposition(Layer::is_weighted) {
            Some(last) if layers[last + 1..].iter().all(|l| matches!(l, Layer::Relu | Layer::Flatten)) => {}
            _ => return bad("network must end with a fully connected or conv layer".into()),
        }
        let out_len: usize = shape.iter().product();
        if out_len != class_count {
            return bad(format!("network yields {out_len} outputs but class_count is {class_count}"));
        }
        Ok(Self {
            name: name.into(),
            input_shape,
            input_scale,
            class_count,
            layers,
            shapes,
            in_scales,
            multipliers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    /// Input shape of layer `i` (or the output shape for `i == len`).
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Real scale of the activation entering layer `i`.
    pub fn scale_at(&self, i: usize) -> f64 {
        self.in_scales[i]
    }

    pub fn multiplier(&self, layer: usize) -> f64 {
        self.multipliers[layer]
    }

    /// Indices of fully connected and convolution layers.
    pub fn neuron_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_weighted())
            .map(|(i, _)| i)
    }

    /// Index of the last neuron layer; its outputs are the logits.
    pub fn output_layer(&self) -> usize {
        self.neuron_layers().last().expect("validated at construction")
    }

    /// Number of output activations of neuron layer `layer`.
    pub fn layer_width(&self, layer: usize) -> usize {
        self.shapes[layer + 1].iter().product()
    }

    /// Activations per output channel (1 for fully connected layers).
    pub fn channel_size(&self, layer: usize) -> usize {
        match &self.layers[layer] {
            Layer::Conv2d(_) => self.shapes[layer + 1][1] * self.shapes[layer + 1][2],
            _ => 1,
        }
    }

    pub fn neuron_count(&self) -> usize {
        self.neuron_layers().map(|l| self.layer_width(l)).sum()
    }

    /// All neurons in `(layer, unit)` order.
    pub fn neurons(&self) -> impl Iterator<Item = NeuronId> + '_ {
        self.neuron_layers()
            .flat_map(move |l| (0..self.layer_width(l)).map(move |u| NeuronId::new(l, u)))
    }

    pub fn validate_neuron(&self, neuron: NeuronId) -> Result<()> {
        match self.layers.get(neuron.layer) {
            Some(l) if l.is_weighted() && neuron.unit < self.layer_width(neuron.layer) => Ok(()),
            _ => Err(Error::InvalidNeuron(neuron)),
        }
    }

    /// Whether a ReLU directly follows neuron layer `layer` (and is fused into it).
    pub fn relu_follows(&self, layer: usize) -> bool {
        matches!(self.layers.get(layer + 1), Some(Layer::Relu))
    }

    /// Index of the first layer that reads neuron layer `layer`'s tapped output.
    pub fn block_end(&self, layer: usize) -> usize {
        if self.relu_follows(layer) {
            layer + 2
        } else {
            layer + 1
        }
    }

    pub fn output_grid(&self, neuron: NeuronId) -> OutputGrid {
        let channel = neuron.unit / self.channel_size(neuron.layer);
        self.layers[neuron.layer].grids().expect("neuron layer")[channel]
    }

    /// Quantizes a real feature vector onto the network's input grid.
    pub fn quantize_input(&self, features: &[f64]) -> Result<QTensor> {
        let expected: usize = self.input_shape.iter().product();
        if features.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.clone(),
                actual: vec![features.len()],
            });
        }
        QTensor::quantize(self.input_shape.clone(), features, self.input_scale)
    }

    fn check_input(&self, input: &QTensor) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.clone(),
                actual: input.shape().to_vec(),
            });
        }
        if input.scale() != self.input_scale {
            return Err(Error::ScaleMismatch {
                expected: self.input_scale,
                actual: input.scale(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &QTensor) -> Result<Inference> {
        self.check_input(input)?;
        Ok(self.forward_raw(input.data(), &mut NoHook))
    }

    /// Runs a full pass with `hook` applied to every neuron layer.
    pub fn forward_raw(&self, input: &[i8], hook: &mut dyn LayerHook) -> Inference {
        let out = self.run(0, input.to_vec(), hook, None);
        Inference::from_outputs(&out)
    }

    /// Fault-free pass recording every intermediate activation.
    pub fn trace(&self, input: &QTensor) -> Result<Trace> {
        self.check_input(input)?;
        Ok(self.trace_raw(input.data()))
    }

    pub fn trace_raw(&self, input: &[i8]) -> Trace {
        self.trace_hooked(input, &mut NoHook)
    }

    /// Like [`QNetwork::trace_raw`], recording values after `hook` ran.
    pub fn trace_hooked(&self, input: &[i8], hook: &mut dyn LayerHook) -> Trace {
        let mut stages = Vec::with_capacity(self.layers.len() + 1);
        self.run(0, input.to_vec(), hook, Some(&mut stages));
        Trace { stages }
    }

    /// Continues a pass from layer `start` given the activation entering it.
    pub fn resume(&self, start: usize, activation: Vec<i8>, hook: &mut dyn LayerHook) -> Inference {
        let out = self.run(start, activation, hook, None);
        Inference::from_outputs(&out)
    }

    fn run(
        &self,
        start: usize,
        mut act: Vec<i8>,
        hook: &mut dyn LayerHook,
        mut stages: Option<&mut Vec<Vec<i8>>>,
    ) -> Vec<i8> {
        debug_assert_eq!(act.len(), self.shapes[start].iter().product::<usize>());
        let mut i = start;
        if let Some(s) = stages.as_deref_mut() {
            s.push(act.clone());
        }
        while i < self.layers.len() {
            let shape = &self.shapes[i];
            let next = match &self.layers[i] {
                Layer::FullyConnected(fc) => {
                    act = fc.forward(&act, self.multipliers[i]);
                    self.finish_neuron_layer(i, &mut act, hook)
                }
                Layer::Conv2d(conv) => {
                    act = conv.forward(&act, (shape[1], shape[2]), self.multipliers[i]);
                    self.finish_neuron_layer(i, &mut act, hook)
                }
                Layer::Relu => {
                    relu(&mut act);
                    i + 1
                }
                Layer::MaxPool2d(pool) => {
                    let idx = pool.argmax_indices(&act, (shape[0], shape[1], shape[2]));
                    act = idx.into_iter().map(|j| act[j]).collect();
                    i + 1
                }
                Layer::Flatten => i + 1,
            };
            if let Some(s) = stages.as_deref_mut() {
                for _ in i..next {
                    s.push(act.clone());
                }
            }
            i = next;
        }
        act
    }

    fn finish_neuron_layer(&self, i: usize, act: &mut [i8], hook: &mut dyn LayerHook) -> usize {
        if self.relu_follows(i) {
            relu(act);
        }
        hook.after_layer(i, act);
        self.block_end(i)
    }

    /// Forward pass where listed neurons' post-activation values are replaced
    /// before any downstream layer reads them.
    pub fn forward_with_taps(&self, input: &QTensor, overrides: &[TapOverride]) -> Result<TapOutput> {
        self.check_input(input)?;
        let mut by_layer: BTreeMap<usize, Vec<(usize, i8)>> = BTreeMap::new();
        let mut seen = HashSet::new();
        for o in overrides {
            self.validate_neuron(o.neuron)?;
            if !seen.insert(o.neuron) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate override for neuron {}",
                    o.neuron
                )));
            }
            by_layer.entry(o.neuron.layer).or_default().push((o.neuron.unit, o.value));
        }
        let mut hook = OverrideHook {
            overrides: &by_layer,
            taps: Vec::with_capacity(self.neuron_count()),
        };
        let inference = self.forward_raw(input.data(), &mut hook);
        Ok(TapOutput {
            inference,
            taps: hook.taps,
        })
    }
}

struct OverrideHook<'a> {
    overrides: &'a BTreeMap<usize, Vec<(usize, i8)>>,
    taps: Vec<TapRecord>,
}

impl LayerHook for OverrideHook<'_> {
    fn after_layer(&mut self, layer: usize, values: &mut [i8]) {
        let start = self.taps.len();
        self.taps.extend(values.iter().enumerate().map(|(unit, &v)| TapRecord {
            neuron: NeuronId::new(layer, unit),
            observed_value: v,
            override_value: None,
        }));
        if let Some(list) = self.overrides.get(&layer) {
            for &(unit, value) in list {
                values[unit] = value;
                self.taps[start + unit].override_value = Some(value);
            }
        }
    }
}

fn relu(values: &mut [i8]) {
    for v in values {
        *v = (*v).max(0);
    }
}
