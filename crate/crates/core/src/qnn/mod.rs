//! Deterministic int8 inference with per-neuron taps.

mod gradient;
mod interval;
mod layer;
mod network;
mod tensor;

pub(crate) use interval::resume_bounds;
pub use gradient::{golden_loss, loss_and_gradient_gate, neuron_gradients, GateResult, NeuronGradients};
pub use layer::{Conv2d, FullyConnected, Layer, MaxPool2d, OutputGrid};
pub use network::{
    argmax, Inference, LayerHook, NeuronId, NoHook, QNetwork, TapOutput, TapOverride, TapRecord,
    Trace,
};
pub use tensor::QTensor;
