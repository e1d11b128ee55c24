use super::dataset::Dataset;
use super::float_model::{FloatLayer, FloatModel};
use crate::error::{Error, Result};
use crate::qnn::{Conv2d, FullyConnected, Layer, QNetwork, QTensor};
use crate::scalar::Scalar;

/// Symmetric scale mapping `max_abs` onto 127; an all-zero tensor gets scale 1.
pub fn symmetric_scale(max_abs: f64) -> f64 {
    if max_abs > 0.0 {
        max_abs / 127.0
    } else {
        1.0
    }
}

fn quantize_weights<T: Scalar>(weights: &[T]) -> (Vec<i8>, f64) {
    let max_abs = weights
        .iter()
        .map(|w| w.to_f64().unwrap_or(0.0).abs())
        .fold(0.0, f64::max);
    let scale = symmetric_scale(max_abs);
    let q = weights
        .iter()
        .map(|w| (w.to_f64().unwrap_or(0.0) / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    (q, scale)
}

fn quantize_bias<T: Scalar>(bias: &[T], acc_scale: f64) -> Vec<i32> {
    bias.iter()
        .map(|b| {
            (b.to_f64().unwrap_or(0.0) / acc_scale)
                .round()
                .clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32
        })
        .collect()
}

/// Post-training quantization with max-abs calibration.
///
/// Weights get one scale per tensor (`max|w| / 127`), biases are stored in
/// the int32 accumulator domain, and every neuron layer's output scale is the
/// largest post-activation magnitude seen on `calibration` divided by 127.
pub fn quantize<T: Scalar>(fm: &FloatModel<T>, calibration: &Dataset) -> Result<QNetwork> {
    if calibration.is_empty() {
        return Err(Error::InvalidArgument("calibration set is empty".into()));
    }
    fm.validate()?;
    let expected: usize = fm.input_shape.iter().product();
    if calibration.feature_width() != expected {
        return Err(Error::ShapeMismatch {
            expected: fm.input_shape.clone(),
            actual: vec![calibration.feature_width()],
        });
    }

    let n_layers = fm.layers.len();
    let mut input_max = 0.0f64;
    let mut layer_max = vec![0.0f64; n_layers];
    for s in &calibration.samples {
        input_max = s.features.iter().fold(input_max, |m, f| m.max(f.abs()));
        let x: Vec<T> = s.features.iter().map(|&f| T::lit(f)).collect();
        let outs = fm.forward_all(&x);
        for (i, layer) in fm.layers.iter().enumerate() {
            if !layer.is_weighted() {
                continue;
            }
            let tap = if matches!(fm.layers.get(i + 1), Some(FloatLayer::Relu)) {
                &outs[i + 1]
            } else {
                &outs[i]
            };
            layer_max[i] = tap
                .iter()
                .fold(layer_max[i], |m, v| m.max(v.to_f64().unwrap_or(0.0).abs()));
        }
    }

    let input_scale = symmetric_scale(input_max);
    let mut scale = input_scale;
    let mut layers = Vec::with_capacity(n_layers);
    for (i, layer) in fm.layers.iter().enumerate() {
        let q = match layer {
            FloatLayer::Dense {
                in_features,
                out_features,
                weights,
                bias,
            } => {
                let (qw, ws) = quantize_weights(weights);
                let out_scale = symmetric_scale(layer_max[i]);
                let qb = quantize_bias(bias, scale * ws);
                scale = out_scale;
                Layer::FullyConnected(FullyConnected::new(
                    *in_features,
                    *out_features,
                    qw,
                    qb,
                    ws,
                    out_scale,
                ))
            }
            FloatLayer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weights,
                bias,
            } => {
                let (qw, ws) = quantize_weights(weights);
                let out_scale = symmetric_scale(layer_max[i]);
                let qb = quantize_bias(bias, scale * ws);
                scale = out_scale;
                Layer::Conv2d(Conv2d::new(
                    *in_channels,
                    *out_channels,
                    *kernel,
                    *stride,
                    *padding,
                    qw,
                    qb,
                    ws,
                    out_scale,
                ))
            }
            FloatLayer::Relu => Layer::Relu,
            FloatLayer::MaxPool2d(p) => Layer::MaxPool2d(*p),
            FloatLayer::Flatten => Layer::Flatten,
        };
        layers.push(q);
    }
    QNetwork::new(
        fm.name.clone(),
        fm.input_shape.clone(),
        input_scale,
        fm.class_count,
        layers,
    )
}

/// Quantizes every sample of `dataset` onto `net`'s input grid.
pub fn encode_inputs(net: &QNetwork, dataset: &Dataset) -> Result<Vec<QTensor>> {
    dataset
        .samples
        .iter()
        .map(|s| net.quantize_input(&s.features))
        .collect()
}

/// Fraction of `dataset` classified correctly by the quantized network.
pub fn quantized_accuracy(net: &QNetwork, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let mut hits = 0usize;
    for s in &dataset.samples {
        let x = net.quantize_input(&s.features)?;
        if net.forward(&x)?.predicted_class == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}
