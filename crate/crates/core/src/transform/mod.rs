//! Hardening transforms: neuron splitting and selective triplication.
//!
//! Protection works per output channel. A fully connected unit is its own
//! channel; a convolution neuron selects its whole channel. Output-layer
//! neurons are never protected, since replicating a logit would change the
//! class count.

mod correct;
mod plan;

use std::collections::BTreeMap;

pub use correct::{lcu_correct, tmr_vote};
pub use plan::{ProtectionMode, ProtectionPlan, ReplicaGroup, PLAN_HEADER};

use crate::error::{Error, Result};
use crate::qnn::{Layer, NeuronId, OutputGrid, QNetwork};

/// A hardened network together with the bookkeeping its correction needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtectedNetwork {
    pub net: QNetwork,
    pub plan: ProtectionPlan,
    pub source_name: String,
    pub source_neurons: usize,
}

impl ProtectedNetwork {
    /// Neurons added on top of the source network.
    pub fn overhead(&self) -> usize {
        self.net.neuron_count() - self.source_neurons
    }
}

/// Channels `(layer, channel)` covering `neurons`, deduplicated and sorted.
pub fn channels_of(net: &QNetwork, neurons: &[NeuronId]) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(neurons.len());
    for &n in neurons {
        net.validate_neuron(n)?;
        out.push((n.layer, n.unit / net.channel_size(n.layer)));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// The subset of `neurons` that can be protected (everything outside the
/// output layer).
pub fn protectable(net: &QNetwork, neurons: &[NeuronId]) -> Vec<NeuronId> {
    let last = net.output_layer();
    neurons.iter().copied().filter(|n| n.layer != last).collect()
}

fn protectable_channels(net: &QNetwork, neurons: &[NeuronId]) -> Result<BTreeMap<usize, Vec<usize>>> {
    let last = net.output_layer();
    let mut by_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (layer, channel) in channels_of(net, neurons)? {
        if layer == last {
            return Err(Error::InvalidArgument(format!(
                "neuron in output layer {layer} cannot be protected"
            )));
        }
        by_layer.entry(layer).or_default().push(channel);
    }
    Ok(by_layer)
}

/// Nearest even integer, ties toward zero.
fn even_toward_zero(x: i32) -> i32 {
    if x % 2 == 0 {
        x
    } else {
        x - x.signum()
    }
}

/// Rounds the input weights and bias of every channel covering `neurons` to
/// even integers and moves those channels onto the even output grid. All
/// other parameters are untouched.
pub fn evenize(net: &QNetwork, neurons: &[NeuronId]) -> Result<QNetwork> {
    let channels = channels_of(net, neurons)?;
    let mut layers = net.layers().to_vec();
    for (layer, channel) in channels {
        let (weights, stride, bias, grids) = match &mut layers[layer] {
            Layer::FullyConnected(fc) => (&mut fc.weights, fc.in_features, &mut fc.bias, &mut fc.grids),
            Layer::Conv2d(c) => {
                let n = c.filter_len();
                (&mut c.weights, n, &mut c.bias, &mut c.grids)
            }
            _ => unreachable!("validated neuron layer"),
        };
        for w in &mut weights[channel * stride..(channel + 1) * stride] {
            *w = even_toward_zero(i32::from(*w)) as i8;
        }
        bias[channel] = even_toward_zero(bias[channel]);
        grids[channel] = OutputGrid::Even;
    }
    rebuild(net, layers)
}

fn rebuild(net: &QNetwork, layers: Vec<Layer>) -> Result<QNetwork> {
    QNetwork::new(net.name(), net.input_shape().to_vec(), net.input_scale(), net.class_count(), layers)
}

fn check_evenized(net: &QNetwork, layer: usize, channel: usize) -> Result<()> {
    let l = &net.layers()[layer];
    let neuron = NeuronId::new(layer, channel * net.channel_size(layer));
    if let Some(w) = l.channel_weights(channel).and_then(|w| w.iter().find(|w| **w % 2 != 0)) {
        return Err(Error::NotEvenized {
            neuron,
            detail: format!("odd weight {w}"),
        });
    }
    let b = l.bias().expect("neuron layer")[channel];
    if b % 2 != 0 {
        return Err(Error::NotEvenized {
            neuron,
            detail: format!("odd bias {b}"),
        });
    }
    if l.grids().expect("neuron layer")[channel] != OutputGrid::Even {
        return Err(Error::NotEvenized {
            neuron,
            detail: "output is not on the even grid".into(),
        });
    }
    Ok(())
}

/// Splits every channel covering `neurons` into two replicas with halved
/// input weights and bias; downstream weights reading the original are
/// duplicated unchanged for the second replica. Targets must be evenized.
pub fn split_neurons(net: &QNetwork, neurons: &[NeuronId]) -> Result<ProtectedNetwork> {
    let targets = protectable_channels(net, neurons)?;
    for (&layer, channels) in &targets {
        for &c in channels {
            check_evenized(net, layer, c)?;
        }
    }
    replicate(net, &targets, ProtectionMode::Split)
}

/// Adds two unchanged copies of every channel covering `neurons`. The copies
/// feed nothing downstream directly; the voter writes the voted value back
/// into the original slot.
pub fn triplicate_neurons(net: &QNetwork, neurons: &[NeuronId]) -> Result<ProtectedNetwork> {
    let targets = protectable_channels(net, neurons)?;
    replicate(net, &targets, ProtectionMode::Tmr)
}

/// How the next neuron layer must treat newly appended input channels:
/// `(source channel, copy its weights?)` per appended channel, in order.
type Appended = Vec<(usize, bool)>;

fn replicate(
    net: &QNetwork,
    targets: &BTreeMap<usize, Vec<usize>>,
    mode: ProtectionMode,
) -> Result<ProtectedNetwork> {
    let mut layers = net.layers().to_vec();
    let mut groups = Vec::new();
    let mut pending: Option<(usize, Appended)> = None;

    for i in net.neuron_layers().collect::<Vec<_>>() {
        if let Some((source_channels, appended)) = pending.take() {
            widen_inputs(&mut layers[i], source_channels, &appended);
        }
        let Some(channels) = targets.get(&i) else {
            continue;
        };
        let base = layers[i].out_channels().expect("neuron layer");
        let mut appended = Appended::new();
        for &c in channels {
            let mut replicas = vec![c];
            for _ in 1..mode.replicas() {
                replicas.push(base + appended.len());
                appended.push((c, mode == ProtectionMode::Split));
            }
            groups.push(ReplicaGroup {
                layer: i,
                original: c,
                replicas,
            });
        }
        grow_outputs(&mut layers[i], channels, &appended, mode);
        pending = Some((base, appended));
    }

    let protected = rebuild(net, layers)?;
    let plan = ProtectionPlan { mode, groups };
    plan.validate(&protected)?;
    Ok(ProtectedNetwork {
        net: protected,
        plan,
        source_name: net.name().to_string(),
        source_neurons: net.neuron_count(),
    })
}

/// Appends replica rows (or filters) and, for splitting, halves the targets.
fn grow_outputs(layer: &mut Layer, targets: &[usize], appended: &Appended, mode: ProtectionMode) {
    let split = mode == ProtectionMode::Split;
    let (weights, row_len, bias, grids, count) = match layer {
        Layer::FullyConnected(fc) => (&mut fc.weights, fc.in_features, &mut fc.bias, &mut fc.grids, &mut fc.out_features),
        Layer::Conv2d(c) => {
            let n = c.filter_len();
            (&mut c.weights, n, &mut c.bias, &mut c.grids, &mut c.out_channels)
        }
        _ => unreachable!("neuron layer"),
    };
    if split {
        for &c in targets {
            for w in &mut weights[c * row_len..(c + 1) * row_len] {
                *w /= 2;
            }
            bias[c] /= 2;
            grids[c] = OutputGrid::Half;
        }
    }
    for &(src, _) in appended {
        let row: Vec<i8> = weights[src * row_len..(src + 1) * row_len].to_vec();
        weights.extend_from_slice(&row);
        bias.push(bias[src]);
        grids.push(grids[src]);
    }
    *count += appended.len();
}

/// Adds input columns for channels appended to the upstream neuron layer,
/// which had `source_channels` channels before growing.
fn widen_inputs(layer: &mut Layer, source_channels: usize, appended: &Appended) {
    match layer {
        Layer::FullyConnected(fc) => {
            // Flattened [C, H, W] features are channel-major.
            let per_channel = fc.in_features / source_channels;
            let old_in = fc.in_features;
            let new_in = old_in + appended.len() * per_channel;
            let mut weights = Vec::with_capacity(fc.out_features * new_in);
            for o in 0..fc.out_features {
                let row = &fc.weights[o * old_in..(o + 1) * old_in];
                weights.extend_from_slice(row);
                for &(src, copy) in appended {
                    let cols = &row[src * per_channel..(src + 1) * per_channel];
                    if copy {
                        weights.extend_from_slice(cols);
                    } else {
                        weights.extend(std::iter::repeat_n(0, per_channel));
                    }
                }
            }
            fc.weights = weights;
            fc.in_features = new_in;
        }
        Layer::Conv2d(c) => {
            let k = c.kernel_h * c.kernel_w;
            let old = c.filter_len();
            let mut weights = Vec::with_capacity(c.out_channels * (c.in_channels + appended.len()) * k);
            for o in 0..c.out_channels {
                let filter = &c.weights[o * old..(o + 1) * old];
                weights.extend_from_slice(filter);
                for &(src, copy) in appended {
                    if copy {
                        weights.extend_from_slice(&filter[src * k..(src + 1) * k]);
                    } else {
                        weights.extend(std::iter::repeat_n(0, k));
                    }
                }
            }
            c.weights = weights;
            c.in_channels += appended.len();
        }
        _ => unreachable!("neuron layer"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnn::{Conv2d, FullyConnected, MaxPool2d, QTensor};

    fn fc(in_f: usize, out_f: usize, w: Vec<i8>, b: Vec<i32>) -> Layer {
        Layer::FullyConnected(FullyConnected::new(in_f, out_f, w, b, 1.0, 1.0))
    }

    #[test]
    fn evenize_rounds_toward_zero_on_ties() {
        let net = QNetwork::new("e", vec![4], 1.0, 2, vec![
            fc(4, 2, vec![4, 3, -3, -128, 1, 1, 1, 1], vec![5, 7]),
            Layer::Relu,
            fc(2, 2, vec![1, 0, 0, 1], vec![0, 0]),
        ])
        .unwrap();
        let even = evenize(&net, &[NeuronId::new(0, 0)]).unwrap();
        let Layer::FullyConnected(l) = &even.layers()[0] else { panic!() };
        assert_eq!(&l.weights[..4], &[4, 2, -2, -128]);
        assert_eq!(&l.weights[4..], &[1, 1, 1, 1]);
        assert_eq!(l.bias, vec![4, 7]);
        assert_eq!(l.grids, vec![OutputGrid::Even, OutputGrid::Full]);
    }

    #[test]
    fn split_keeps_downstream_sum() {
        // w = [4, -6], b = 2, downstream weight 5, input [3, 1]:
        // 5 * relu(12 - 6 + 2) = 40; two halves of 4 each give 5*4 + 5*4.
        let net = QNetwork::new("s", vec![2], 1.0, 1, vec![
            fc(2, 1, vec![4, -6], vec![2]),
            Layer::Relu,
            fc(1, 1, vec![5], vec![0]),
        ])
        .unwrap();
        let x = QTensor::new(vec![2], vec![3, 1], 1.0).unwrap();
        let target = [NeuronId::new(0, 0)];
        let even = evenize(&net, &target).unwrap();
        assert_eq!(net.forward(&x).unwrap().logits, vec![40]);
        let split = split_neurons(&even, &target).unwrap();
        let taps = split.net.forward_with_taps(&x, &[]).unwrap().taps;
        assert_eq!(taps[0].observed_value, 4);
        assert_eq!(taps[1].observed_value, 4);
        assert_eq!(split.net.forward(&x).unwrap().logits, vec![40]);
        assert_eq!(split.plan.groups, vec![ReplicaGroup { layer: 0, original: 0, replicas: vec![0, 1] }]);
        assert_eq!(split.overhead(), 1);
    }

    #[test]
    fn split_rejects_odd_parameters() {
        let net = QNetwork::new("s", vec![2], 1.0, 1, vec![
            fc(2, 1, vec![3, -6], vec![2]),
            Layer::Relu,
            fc(1, 1, vec![5], vec![0]),
        ])
        .unwrap();
        let err = split_neurons(&net, &[NeuronId::new(0, 0)]).unwrap_err();
        assert!(matches!(err, Error::NotEvenized { .. }), "{err}");
        assert!(err.to_string().contains("evenize"));
    }

    #[test]
    fn empty_targets_leave_network_unchanged() {
        let net = QNetwork::new("s", vec![2], 1.0, 1, vec![fc(2, 1, vec![3, -6], vec![2])]).unwrap();
        for p in [split_neurons(&net, &[]).unwrap(), triplicate_neurons(&net, &[]).unwrap()] {
            assert_eq!(p.net, net);
            assert!(p.plan.is_empty());
        }
    }

    #[test]
    fn output_layer_is_not_protectable() {
        let net = QNetwork::new("s", vec![2], 1.0, 1, vec![fc(2, 1, vec![3, -6], vec![2])]).unwrap();
        assert!(triplicate_neurons(&net, &[NeuronId::new(0, 0)]).is_err());
        assert!(protectable(&net, &[NeuronId::new(0, 0)]).is_empty());
    }

    fn conv_net() -> QNetwork {
        let conv = Conv2d::new(1, 2, (2, 2), 1, 0, vec![2, -4, 6, 2, 4, 4, -2, 2], vec![4, -2], 1.0, 1.0);
        QNetwork::new("c", vec![1, 3, 3], 1.0, 2, vec![
            Layer::Conv2d(conv),
            Layer::Relu,
            Layer::MaxPool2d(MaxPool2d { window: 2, stride: 1 }),
            Layer::Flatten,
            fc(2, 2, vec![1, -2, 3, 1], vec![0, 1]),
        ])
        .unwrap()
    }

    #[test]
    fn conv_channel_split_and_triplicate_preserve_logits() {
        let net = conv_net();
        let target = [NeuronId::new(0, 5)]; // channel 1
        let even = evenize(&net, &target).unwrap();
        let split = split_neurons(&even, &target).unwrap();
        let tmr = triplicate_neurons(&net, &target).unwrap();
        assert_eq!(split.overhead(), 4);
        assert_eq!(tmr.overhead(), 8);
        for seed in 0..20i32 {
            let data: Vec<i8> = (0..9).map(|i| ((i * 37 + seed * 11) % 21 - 10) as i8).collect();
            let x = QTensor::new(vec![1, 3, 3], data, 1.0).unwrap();
            assert_eq!(split.net.forward(&x).unwrap(), even.forward(&x).unwrap());
            assert_eq!(tmr.net.forward(&x).unwrap(), net.forward(&x).unwrap());
        }
    }

    #[test]
    fn plan_csv_round_trip() {
        let net = conv_net();
        let tmr = triplicate_neurons(&net, &[NeuronId::new(0, 0), NeuronId::new(0, 7)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plan.csv");
        tmr.plan.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "mode,layer,orig_unit,replica_units\ntmr,0,0,0,2,3\ntmr,0,1,1,4,5\n");
        assert_eq!(ProtectionPlan::read_csv(&p, ProtectionMode::Split).unwrap(), tmr.plan);
    }
}
