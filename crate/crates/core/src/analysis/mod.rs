//! Per-neuron vulnerability analysis.
//!
//! For each neuron and each analysis input the gradient gate decides whether
//! the neuron can influence the golden-class loss at all; if so, the smallest
//! positive and negative output perturbations that misclassify are located,
//! mapped to a bit position, and counted. The counts give the neuron's
//! vulnerability factor.

mod bounds;
mod profile;

use rayon::prelude::*;

pub use bounds::{
    bit_index, bit_index_with, misclassification_bounds, BoundsMethod, BoundsResult,
    NegativeBitRule, Side,
};
pub use profile::{neuron_nvf, ProfileEntry, VulnerabilityCounters, VulnerabilityProfile, PROFILE_HEADER};

use crate::error::{Error, Result};
use crate::io::{encode_inputs, Dataset};
use crate::qnn::{argmax, neuron_gradients, NeuronId, QNetwork, QTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnalysisOptions {
    pub method: BoundsMethod,
    pub negative_rule: NegativeBitRule,
    /// Re-run the exhaustive scan behind every bisection and keep the scan's
    /// answer on disagreement.
    pub verify_bisection: bool,
    /// Skip the gradient gate and probe every (neuron, input) pair.
    pub skip_gate: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            method: BoundsMethod::Scan,
            negative_rule: NegativeBitRule::Symmetric,
            verify_bisection: cfg!(debug_assertions),
            skip_gate: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AnalysisStats {
    pub pairs: u64,
    pub gated_out: u64,
    pub bisection_mismatches: u64,
}

impl AnalysisStats {
    fn merge(mut self, o: Self) -> Self {
        self.pairs += o.pairs;
        self.gated_out += o.gated_out;
        self.bisection_mismatches += o.bisection_mismatches;
        self
    }
}

/// Vulnerability profile of every neuron of `net` over `analysis_set`.
pub fn analyze(net: &QNetwork, analysis_set: &Dataset, options: &AnalysisOptions) -> Result<VulnerabilityProfile> {
    analyze_detailed(net, analysis_set, options).map(|(p, _)| p)
}

pub fn analyze_detailed(
    net: &QNetwork,
    analysis_set: &Dataset,
    options: &AnalysisOptions,
) -> Result<(VulnerabilityProfile, AnalysisStats)> {
    let inputs = encode_inputs(net, analysis_set)?;
    analyze_inputs(net, &inputs, options)
}

/// Same as [`analyze`] over already quantized inputs.
pub fn analyze_inputs(
    net: &QNetwork,
    inputs: &[QTensor],
    options: &AnalysisOptions,
) -> Result<(VulnerabilityProfile, AnalysisStats)> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("analysis set is empty".into()));
    }
    let neurons: Vec<NeuronId> = net.neurons().collect();
    let blank = || (vec![VulnerabilityCounters::default(); neurons.len()], AnalysisStats::default());

    let per_input = |input: &QTensor| -> Result<(Vec<VulnerabilityCounters>, AnalysisStats)> {
        let trace = net.trace(input)?;
        let golden = argmax(trace.output());
        let grads = neuron_gradients::<f64>(net, &trace);
        let mut counters = vec![VulnerabilityCounters { inputs_seen: 1, ..Default::default() }; neurons.len()];
        let mut stats = AnalysisStats::default();
        for (slot, &neuron) in counters.iter_mut().zip(&neurons) {
            stats.pairs += 1;
            if !options.skip_gate && !grads.is_nonzero(neuron) {
                stats.gated_out += 1;
                continue;
            }
            let prober = bounds::Prober::new(net, &trace, neuron, golden);
            let mut result = prober.bounds(options.method);
            if options.method == BoundsMethod::Bisect && options.verify_bisection {
                let exact = prober.bounds(BoundsMethod::Scan);
                if exact != result {
                    stats.bisection_mismatches += 1;
                    result = exact;
                }
            }
            slot.record(result, options.negative_rule);
        }
        Ok((counters, stats))
    };

    let (counters, stats) = inputs
        .par_iter()
        .map(per_input)
        .try_reduce(blank, |(mut a, sa), (b, sb)| {
            for (x, y) in a.iter_mut().zip(&b) {
                x.merge(y);
            }
            Ok((a, sa.merge(sb)))
        })?;
    let profile = VulnerabilityProfile::from_counters(neurons.into_iter().zip(counters).collect())?;
    Ok((profile, stats))
}

/// Neurons whose NVF is at least `threshold`, in `(layer, unit)` order.
pub fn select_critical(profile: &VulnerabilityProfile, threshold: f64) -> Vec<NeuronId> {
    let mut out: Vec<NeuronId> = profile
        .entries
        .iter()
        .filter(|e| e.nvf >= threshold)
        .map(|e| e.neuron)
        .collect();
    out.sort_unstable();
    out
}

/// `0.00, 0.05, ..., 0.50`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=10).map(|k| f64::from(k) / 20.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct CriticalityRow {
    pub threshold: f64,
    pub neurons: usize,
    pub portion: f64,
}

/// Number and portion of critical neurons per threshold.
pub fn criticality_table(profile: &VulnerabilityProfile, thresholds: &[f64]) -> Vec<CriticalityRow> {
    thresholds
        .iter()
        .map(|&t| {
            let neurons = select_critical(profile, t).len();
            CriticalityRow {
                threshold: t,
                neurons,
                portion: if profile.is_empty() {
                    0.0
                } else {
                    neurons as f64 / profile.len() as f64
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{Sample, Split};
    use crate::qnn::{FullyConnected, Layer};

    fn fc(in_f: usize, out_f: usize, w: Vec<i8>, b: Vec<i32>) -> Layer {
        Layer::FullyConnected(FullyConnected::new(in_f, out_f, w, b, 1.0, 1.0))
    }

    /// 2-2-2 net whose hidden neuron 1 has a zero outgoing column.
    fn net_with_dead_neuron() -> QNetwork {
        QNetwork::new(
            "dead",
            vec![2],
            1.0,
            2,
            vec![
                fc(2, 2, vec![1, -1, 2, 1], vec![0, 0]),
                Layer::Relu,
                fc(2, 2, vec![1, 0, -1, 0], vec![0, 5]),
            ],
        )
        .unwrap()
    }

    fn inputs() -> Vec<QTensor> {
        [[4, 1], [1, 4], [10, -3], [0, 0]]
            .iter()
            .map(|x| QTensor::new(vec![2], x.to_vec(), 1.0).unwrap())
            .collect()
    }

    #[test]
    fn dead_neuron_has_zero_nvf() {
        let (profile, _) = analyze_inputs(&net_with_dead_neuron(), &inputs(), &AnalysisOptions::default()).unwrap();
        assert_eq!(profile.nvf(NeuronId::new(0, 1)), Some(0.0));
        assert!(profile.nvf(NeuronId::new(0, 0)).unwrap() > 0.0);
        assert_eq!(profile.len(), 4);
    }

    #[test]
    fn gate_only_removes_zero_influence_pairs() {
        let net = net_with_dead_neuron();
        let gated = analyze_inputs(&net, &inputs(), &AnalysisOptions::default()).unwrap().0;
        let opts = AnalysisOptions { skip_gate: true, ..Default::default() };
        let brute = analyze_inputs(&net, &inputs(), &opts).unwrap().0;
        assert_eq!(gated, brute);
    }

    #[test]
    fn selection_examples() {
        let (profile, _) = analyze_inputs(&net_with_dead_neuron(), &inputs(), &AnalysisOptions::default()).unwrap();
        assert_eq!(select_critical(&profile, 0.0).len(), 4);
        assert!(select_critical(&profile, profile.max_nvf() + 1e-9).is_empty());
        let sizes: Vec<usize> = default_thresholds().iter().map(|&t| select_critical(&profile, t).len()).collect();
        assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn dataset_entry_point_quantizes_inputs() {
        let net = net_with_dead_neuron();
        let samples = vec![Sample { features: vec![4.0, 1.0], label: 0 }];
        let ds = Dataset::new(Split::Train, 2, samples).unwrap();
        let profile = analyze(&net, &ds, &AnalysisOptions::default()).unwrap();
        assert_eq!(profile.inputs_seen, Some(1));
        let empty = Dataset::new(Split::Train, 2, vec![]).unwrap();
        assert!(analyze(&net, &empty, &AnalysisOptions::default()).is_err());
    }

    #[test]
    fn default_grid_is_exact_twentieths() {
        let grid = default_thresholds();
        assert_eq!(grid.len(), 11);
        assert_eq!(grid[4], 0.2);
        assert_eq!(grid[10], 0.5);
    }
}
