//! Single bit-flip fault model and inference under fault.
//!
//! A fault XOR-flips one bit of one neuron's post-activation byte and stays
//! active for every input of a run. Protected variants correct their replica
//! groups at the layer boundary, before any downstream layer reads them.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::io::{encode_inputs, Dataset};
use crate::qnn::{Inference, LayerHook, NeuronId, QNetwork, QTensor, Trace};
use crate::transform::{lcu_correct, tmr_vote, ProtectedNetwork, ProtectionMode, ProtectionPlan, ReplicaGroup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FaultSpec {
    pub neuron: NeuronId,
    pub bit: u8,
}

impl FaultSpec {
    pub fn new(neuron: NeuronId, bit: u8) -> Result<Self> {
        if bit > 7 {
            return Err(Error::InvalidArgument(format!("bit {bit} outside 0..=7")));
        }
        Ok(Self { neuron, bit })
    }

    pub fn apply(self, value: i8) -> i8 {
        value ^ (1u8 << self.bit) as i8
    }
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} bit {}", self.neuron, self.bit)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub enum VariantKind {
    Unprotected,
    SplitLcu,
    Tmr,
}

impl VariantKind {
    pub const ALL: [VariantKind; 3] = [VariantKind::Unprotected, VariantKind::SplitLcu, VariantKind::Tmr];

    pub fn label(self) -> &'static str {
        match self {
            VariantKind::Unprotected => "Unprotected",
            VariantKind::SplitLcu => "Proposed",
            VariantKind::Tmr => "TMR",
        }
    }

    fn mode(self) -> Option<ProtectionMode> {
        match self {
            VariantKind::Unprotected => None,
            VariantKind::SplitLcu => Some(ProtectionMode::Split),
            VariantKind::Tmr => Some(ProtectionMode::Tmr),
        }
    }
}

/// One network as the accelerator would execute it, with its correction plan.
#[derive(Clone, Debug)]
pub struct VariantUnderTest {
    kind: VariantKind,
    net: QNetwork,
    plan: Option<ProtectionPlan>,
    /// Replica groups and channel size per protected layer.
    groups: BTreeMap<usize, (usize, Vec<ReplicaGroup>)>,
}

impl VariantUnderTest {
    pub fn unprotected(net: QNetwork) -> Self {
        Self {
            kind: VariantKind::Unprotected,
            net,
            plan: None,
            groups: BTreeMap::new(),
        }
    }

    pub fn protected(protected: ProtectedNetwork) -> Result<Self> {
        Self::new(
            match protected.plan.mode {
                ProtectionMode::Split => VariantKind::SplitLcu,
                ProtectionMode::Tmr => VariantKind::Tmr,
            },
            protected.net,
            Some(protected.plan),
        )
    }

    pub fn new(kind: VariantKind, net: QNetwork, plan: Option<ProtectionPlan>) -> Result<Self> {
        let plan = match (kind.mode(), plan) {
            (None, None) => None,
            (None, Some(p)) if p.is_empty() => None,
            (Some(mode), Some(p)) if p.mode == mode => Some(p),
            (Some(mode), None) => Some(ProtectionPlan::empty(mode)),
            (_, Some(p)) => {
                return Err(Error::InvalidArgument(format!(
                    "{} plan does not match a {} variant",
                    p.mode.as_str(),
                    kind.label()
                )))
            }
        };
        let mut groups: BTreeMap<usize, (usize, Vec<ReplicaGroup>)> = BTreeMap::new();
        if let Some(p) = &plan {
            p.validate(&net)?;
            for g in &p.groups {
                groups
                    .entry(g.layer)
                    .or_insert_with(|| (net.channel_size(g.layer), Vec::new()))
                    .1
                    .push(g.clone());
            }
        }
        Ok(Self {
            kind,
            net,
            plan,
            groups,
        })
    }

    pub fn kind(&self) -> VariantKind {
        self.kind
    }

    pub fn net(&self) -> &QNetwork {
        &self.net
    }

    pub fn plan(&self) -> Option<&ProtectionPlan> {
        self.plan.as_ref()
    }

    pub fn neuron_count(&self) -> usize {
        self.net.neuron_count()
    }

    /// Size of the single-fault space: every neuron times 8 bits.
    pub fn fault_space(&self) -> usize {
        self.neuron_count() * 8
    }

    /// Fault number `index` in `0..fault_space()`, neuron-major.
    pub fn fault_at(&self, index: usize) -> FaultSpec {
        let mut rest = index / 8;
        for l in self.net.neuron_layers() {
            let width = self.net.layer_width(l);
            if rest < width {
                return FaultSpec {
                    neuron: NeuronId::new(l, rest),
                    bit: (index % 8) as u8,
                };
            }
            rest -= width;
        }
        panic!("fault index {index} outside fault space {}", self.fault_space());
    }

    pub fn validate_fault(&self, fault: FaultSpec) -> Result<()> {
        FaultSpec::new(fault.neuron, fault.bit)?;
        self.net.validate_neuron(fault.neuron)
    }

    fn hook(&self, fault: Option<FaultSpec>) -> ControllerHook<'_> {
        ControllerHook {
            groups: &self.groups,
            fault,
        }
    }
}

/// Applies the fault, then routes replica groups of the layer through
/// correction and writes the result back to every member.
struct ControllerHook<'a> {
    groups: &'a BTreeMap<usize, (usize, Vec<ReplicaGroup>)>,
    fault: Option<FaultSpec>,
}

impl LayerHook for ControllerHook<'_> {
    fn after_layer(&mut self, layer: usize, values: &mut [i8]) {
        if let Some(f) = self.fault.filter(|f| f.neuron.layer == layer) {
            values[f.neuron.unit] = f.apply(values[f.neuron.unit]);
        }
        let Some((cs, groups)) = self.groups.get(&layer) else {
            return;
        };
        for g in groups {
            for p in 0..*cs {
                let at = |r: usize| g.replicas[r] * cs + p;
                let y = match g.replicas.len() {
                    2 => lcu_correct(values[at(0)], values[at(1)]),
                    _ => tmr_vote(values[at(0)], values[at(1)], values[at(2)]),
                };
                for r in 0..g.replicas.len() {
                    values[at(r)] = y;
                }
            }
        }
    }
}

/// Runs one inference of `variant` with an optional persistent fault.
pub fn infer_with_fault(variant: &VariantUnderTest, input: &QTensor, fault: Option<FaultSpec>) -> Result<Inference> {
    if let Some(f) = fault {
        variant.validate_fault(f)?;
    }
    variant.net.forward(input)?;
    Ok(variant.net.forward_raw(input.data(), &mut variant.hook(fault)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultOutcome {
    pub accuracy: f64,
    /// Inputs whose prediction differs from the fault-free prediction.
    pub per_input_flips: usize,
    pub correct: usize,
}

/// A variant with its fault-free traces over an evaluation set cached, so
/// each fault only re-executes the layers from the faulted one onward.
pub struct FaultBench<'a> {
    variant: &'a VariantUnderTest,
    traces: Vec<Trace>,
    labels: Vec<usize>,
    golden: Vec<usize>,
}

impl<'a> FaultBench<'a> {
    pub fn new(variant: &'a VariantUnderTest, dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("evaluation set is empty".into()));
        }
        let inputs = encode_inputs(&variant.net, dataset)?;
        let labels = dataset.samples.iter().map(|s| s.label).collect();
        Self::from_inputs(variant, &inputs, labels)
    }

    pub fn from_inputs(variant: &'a VariantUnderTest, inputs: &[QTensor], labels: Vec<usize>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} inputs with {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let mut traces = Vec::with_capacity(inputs.len());
        let mut golden = Vec::with_capacity(inputs.len());
        for x in inputs {
            variant.net.forward(x)?;
            let t = variant.net.trace_hooked(x.data(), &mut variant.hook(None));
            golden.push(crate::qnn::argmax(t.output()));
            traces.push(t);
        }
        Ok(Self {
            variant,
            traces,
            labels,
            golden,
        })
    }

    pub fn variant(&self) -> &VariantUnderTest {
        self.variant
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn golden(&self) -> &[usize] {
        &self.golden
    }

    pub fn baseline_accuracy(&self) -> f64 {
        let correct = self.golden.iter().zip(&self.labels).filter(|(g, l)| g == l).count();
        correct as f64 / self.len() as f64
    }

    /// Predictions for every input under `fault`.
    pub fn predictions(&self, fault: FaultSpec) -> Result<Vec<usize>> {
        self.variant.validate_fault(fault)?;
        let layer = fault.neuron.layer;
        Ok(self
            .traces
            .iter()
            .map(|t| {
                let mut hook = self.variant.hook(Some(fault));
                self.variant.net.resume(layer, t.stages[layer].clone(), &mut hook).predicted_class
            })
            .collect())
    }

    pub fn evaluate(&self, fault: FaultSpec) -> Result<FaultOutcome> {
        let predicted = self.predictions(fault)?;
        let mut correct = 0;
        let mut flips = 0;
        for ((p, g), l) in predicted.iter().zip(&self.golden).zip(&self.labels) {
            correct += usize::from(p == l);
            flips += usize::from(p != g);
        }
        Ok(FaultOutcome {
            accuracy: correct as f64 / self.len() as f64,
            per_input_flips: flips,
            correct,
        })
    }
}

/// Accuracy and golden-prediction flips of `variant` over `dataset` with
/// `fault` active on every input.
pub fn evaluate_fault(variant: &VariantUnderTest, dataset: &Dataset, fault: FaultSpec) -> Result<FaultOutcome> {
    FaultBench::new(variant, dataset)?.evaluate(fault)
}
