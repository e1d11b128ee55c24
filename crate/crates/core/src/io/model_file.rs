//! Versioned JSON container for quantized networks.
//!
//! ```text
//! {
//!   "format": "splitguard-qnn", "format_version": 1,
//!   "name": "...", "class_count": 4, "input_shape": [2], "input_scale": 0.02,
//!   "metadata": {"key": "value"},
//!   "layers": [
//!     {"kind": "fully_connected", "in_features": 2, "out_features": 16,
//!      "weight_scale": 0.01, "output_scale": 0.05,
//!      "weights": {"dtype": "i8", "shape": [16, 2], "data": [...]},
//!      "bias": {"dtype": "i32", "shape": [16], "data": [...]},
//!      "grids": ["full", "even", ...]},            // optional, default all full
//!     {"kind": "conv2d", "in_channels": 1, "out_channels": 4, "kernel": [3, 3],
//!      "stride": 1, "padding": 0, ...same weight fields...},
//!     {"kind": "relu"}, {"kind": "max_pool2d", "window": 2, "stride": 2},
//!     {"kind": "flatten"}
//!   ]
//! }
//! ```
//!
//! Scales are written with the shortest decimal that parses back to the same
//! f64, so `load(save(m)) == m` bit for bit. Unknown fields are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qnn::{Conv2d, FullyConnected, Layer, MaxPool2d, OutputGrid, QNetwork};

pub const FORMAT: &str = "splitguard-qnn";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRepr {
    format: String,
    format_version: u32,
    name: String,
    class_count: usize,
    input_shape: Vec<usize>,
    input_scale: f64,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    layers: Vec<LayerRepr>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntArray {
    dtype: String,
    shape: Vec<usize>,
    data: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerRepr {
    FullyConnected {
        in_features: usize,
        out_features: usize,
        weight_scale: f64,
        output_scale: f64,
        weights: IntArray,
        bias: IntArray,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grids: Option<Vec<OutputGrid>>,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
        weight_scale: f64,
        output_scale: f64,
        weights: IntArray,
        bias: IntArray,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grids: Option<Vec<OutputGrid>>,
    },
    Relu {},
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Flatten {},
}

/// A quantized network plus free-form string metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub network: QNetwork,
    pub metadata: BTreeMap<String, String>,
}

impl ModelFile {
    pub fn new(network: QNetwork) -> Self {
        Self {
            network,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let net = &self.network;
        let layers = net.layers().iter().map(layer_repr).collect();
        let repr = FileRepr {
            format: FORMAT.into(),
            format_version: FORMAT_VERSION,
            name: net.name().into(),
            class_count: net.class_count(),
            input_shape: net.input_shape().to_vec(),
            input_scale: net.input_scale(),
            metadata: self.metadata.clone(),
            layers,
        };
        let mut s = serde_json::to_string(&repr).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let repr: FileRepr = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::parse(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        if repr.format != FORMAT {
            return Err(Error::parse("format", format!("expected `{FORMAT}`, got `{}`", repr.format)));
        }
        if repr.format_version != FORMAT_VERSION {
            return Err(Error::parse(
                "format_version",
                format!("unsupported version {} (expected {FORMAT_VERSION})", repr.format_version),
            ));
        }
        let layers = repr
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| layer_from_repr(i, l))
            .collect::<Result<Vec<_>>>()?;
        let network = QNetwork::new(repr.name, repr.input_shape, repr.input_scale, repr.class_count, layers)
            .map_err(|e| Error::parse("layers", e.to_string()))?;
        Ok(Self {
            network,
            metadata: repr.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub fn save_model(net: &QNetwork, metadata: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    ModelFile {
        network: net.clone(),
        metadata: metadata.clone(),
    }
    .save(path)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    ModelFile::load(path)
}

fn grids_repr(grids: &[OutputGrid]) -> Option<Vec<OutputGrid>> {
    grids.iter().any(|g| *g != OutputGrid::Full).then(|| grids.to_vec())
}

fn layer_repr(layer: &Layer) -> LayerRepr {
    match layer {
        Layer::FullyConnected(fc) => LayerRepr::FullyConnected {
            in_features: fc.in_features,
            out_features: fc.out_features,
            weight_scale: fc.weight_scale,
            output_scale: fc.output_scale,
            weights: IntArray {
                dtype: "i8".into(),
                shape: vec![fc.out_features, fc.in_features],
                data: fc.weights.iter().map(|&w| i64::from(w)).collect(),
            },
            bias: IntArray {
                dtype: "i32".into(),
                shape: vec![fc.out_features],
                data: fc.bias.iter().map(|&b| i64::from(b)).collect(),
            },
            grids: grids_repr(&fc.grids),
        },
        Layer::Conv2d(c) => LayerRepr::Conv2d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: [c.kernel_h, c.kernel_w],
            stride: c.stride,
            padding: c.padding,
            weight_scale: c.weight_scale,
            output_scale: c.output_scale,
            weights: IntArray {
                dtype: "i8".into(),
                shape: vec![c.out_channels, c.in_channels, c.kernel_h, c.kernel_w],
                data: c.weights.iter().map(|&w| i64::from(w)).collect(),
            },
            bias: IntArray {
                dtype: "i32".into(),
                shape: vec![c.out_channels],
                data: c.bias.iter().map(|&b| i64::from(b)).collect(),
            },
            grids: grids_repr(&c.grids),
        },
        Layer::Relu => LayerRepr::Relu {},
        Layer::MaxPool2d(p) => LayerRepr::MaxPool2d {
            window: p.window,
            stride: p.stride,
        },
        Layer::Flatten => LayerRepr::Flatten {},
    }
}

fn int_array<T: TryFrom<i64>>(
    array: IntArray,
    path: &str,
    dtype: &str,
    shape: &[usize],
) -> Result<Vec<T>> {
    if array.dtype != dtype {
        return Err(Error::parse(
            format!("{path}.dtype"),
            format!("expected `{dtype}`, got `{}`", array.dtype),
        ));
    }
    if array.shape != shape {
        return Err(Error::parse(
            format!("{path}.shape"),
            format!("expected {shape:?}, got {:?}", array.shape),
        ));
    }
    let len: usize = shape.iter().product();
    if array.data.len() != len {
        return Err(Error::parse(
            format!("{path}.data"),
            format!("expected {len} values, got {}", array.data.len()),
        ));
    }
    array
        .data
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            T::try_from(v).map_err(|_| {
                Error::parse(format!("{path}.data[{i}]"), format!("value {v} out of {dtype} range"))
            })
        })
        .collect()
}

fn scale(value: f64, path: String) -> Result<f64> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(Error::parse(path, format!("scale must be positive, got {value}")))
    }
}

fn grids(grids: Option<Vec<OutputGrid>>, channels: usize, path: String) -> Result<Vec<OutputGrid>> {
    match grids {
        None => Ok(vec![OutputGrid::Full; channels]),
        Some(g) if g.len() == channels => Ok(g),
        Some(g) => Err(Error::parse(path, format!("expected {channels} entries, got {}", g.len()))),
    }
}

fn layer_from_repr(i: usize, repr: LayerRepr) -> Result<Layer> {
    let p = format!("layers[{i}]");
    Ok(match repr {
        LayerRepr::FullyConnected {
            in_features,
            out_features,
            weight_scale,
            output_scale,
            weights,
            bias,
            grids: g,
        } => {
            let w = int_array(weights, &format!("{p}.weights"), "i8", &[out_features, in_features])?;
            let b = int_array(bias, &format!("{p}.bias"), "i32", &[out_features])?;
            let mut fc = FullyConnected::new(
                in_features,
                out_features,
                w,
                b,
                scale(weight_scale, format!("{p}.weight_scale"))?,
                scale(output_scale, format!("{p}.output_scale"))?,
            );
            fc.grids = grids(g, out_features, format!("{p}.grids"))?;
            Layer::FullyConnected(fc)
        }
        LayerRepr::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight_scale,
            output_scale,
            weights,
            bias,
            grids: g,
        } => {
            let w = int_array(
                weights,
                &format!("{p}.weights"),
                "i8",
                &[out_channels, in_channels, kernel[0], kernel[1]],
            )?;
            let b = int_array(bias, &format!("{p}.bias"), "i32", &[out_channels])?;
            let mut conv = Conv2d::new(
                in_channels,
                out_channels,
                (kernel[0], kernel[1]),
                stride,
                padding,
                w,
                b,
                scale(weight_scale, format!("{p}.weight_scale"))?,
                scale(output_scale, format!("{p}.output_scale"))?,
            );
            conv.grids = grids(g, out_channels, format!("{p}.grids"))?;
            Layer::Conv2d(conv)
        }
        LayerRepr::Relu {} => Layer::Relu,
        LayerRepr::MaxPool2d { window, stride } => Layer::MaxPool2d(MaxPool2d { window, stride }),
        LayerRepr::Flatten {} => Layer::Flatten,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelFile {
        let mut fc = FullyConnected::new(2, 2, vec![3, -128, 127, 0], vec![-70000, 5], 0.0123, 0.1 + 0.2);
        fc.grids[1] = OutputGrid::Even;
        let net = QNetwork::new(
            "small",
            vec![2],
            1.0 / 3.0,
            2,
            vec![Layer::FullyConnected(fc), Layer::Relu],
        )
        .unwrap();
        let mut m = ModelFile::new(net);
        m.metadata.insert("note".into(), "x".into());
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = small();
        let text = m.to_json();
        let back = ModelFile::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn out_of_range_weight_names_path() {
        let text = small().to_json().replace("[3,-128,127,0]", "[3,130,127,0]");
        let err = ModelFile::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("layers[0].weights.data[1]"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let text = small().to_json().replace("\"kind\":\"relu\"", "\"kind\":\"relu\",\"alpha\":1");
        let err = ModelFile::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("alpha"), "{err}");
        let text = small().to_json().replacen('{', "{\"extra\":0,", 1);
        assert!(ModelFile::from_json(&text).is_err());
    }

    #[test]
    fn version_mismatch_rejected() {
        let text = small().to_json().replace("\"format_version\":1", "\"format_version\":2");
        let err = ModelFile::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("format_version"), "{err}");
    }

    #[test]
    fn malformed_array_rejected() {
        let text = small().to_json().replace("[3,-128,127,0]", "[3,-128,127]");
        let err = ModelFile::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("layers[0].weights.data"), "{err}");
    }
}
