//! Statistical fault-injection campaigns over an NVF threshold sweep.
//!
//! For every threshold the source network is compared with two hardened
//! variants built from the neurons whose NVF reaches it: split with LCU
//! correction ("Proposed") and selective TMR. Each variant's single-fault
//! space is `neurons * 8`; a statistically sized sample of it is drawn
//! without replacement and every drawn fault is run over the whole test set.

mod report;

use rand::seq::index;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::analysis::{criticality_table, default_thresholds, select_critical, CriticalityRow, VulnerabilityProfile};
use crate::error::{Error, Result};
use crate::faultsim::{FaultBench, FaultSpec, VariantKind, VariantUnderTest};
use crate::io::Dataset;
use crate::qnn::{NeuronId, QNetwork};
use crate::transform::{evenize, protectable, split_neurons, triplicate_neurons};

pub use report::{check_report, format_sig, nvf_label, write_report, REPORT_FILES};

/// How a fault counts as critical.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticalAccounting {
    /// Fraction of (fault, input) pairs that change the golden prediction.
    #[default]
    PerPair,
    /// Fraction of faults that change at least one golden prediction.
    PerFault,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CampaignConfig {
    pub confidence: f64,
    pub margin: f64,
    pub p_estimate: f64,
    pub seed: u64,
    pub thresholds: Vec<f64>,
    /// Enumerate every fault instead of sampling.
    pub exhaustive: bool,
    pub accounting: CriticalAccounting,
    /// Worker threads for fault evaluation; 0 uses rayon's default.
    pub workers: usize,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            confidence: 0.95,
            margin: 0.01,
            p_estimate: 0.5,
            seed: 0,
            thresholds: default_thresholds(),
            exhaustive: false,
            accounting: CriticalAccounting::PerPair,
            workers: 0,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.confidence) {
            return Err(Error::InvalidArgument(format!("confidence {} outside (0, 1)", self.confidence)));
        }
        if !open_unit(self.margin) {
            return Err(Error::InvalidArgument(format!("margin {} outside (0, 1)", self.margin)));
        }
        if !open_unit(self.p_estimate) {
            return Err(Error::InvalidArgument(format!("p estimate {} outside (0, 1)", self.p_estimate)));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(Error::InvalidArgument(format!("invalid NVF threshold {t}")));
        }
        Ok(())
    }
}

/// Statistical fault-injection sample size for a finite population of
/// `fault_space` faults: `N / (1 + e^2 (N - 1) / (t^2 p (1 - p)))`, rounded up.
pub fn sample_size(fault_space: usize, config: &CampaignConfig) -> usize {
    if fault_space == 0 {
        return 0;
    }
    let n = fault_space as f64;
    let t = Normal::standard().inverse_cdf(1.0 - (1.0 - config.confidence) / 2.0);
    let p = config.p_estimate;
    let e = config.margin;
    let size = n / (1.0 + e * e * (n - 1.0) / (t * t * p * (1.0 - p)));
    (size.ceil() as usize).min(fault_space)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantMetrics {
    pub variant: VariantKind,
    pub threshold: f64,
    /// Source neurons selected for protection (output layer excluded).
    pub protected_neurons: usize,
    pub neuron_count: usize,
    pub faults_enumerated: usize,
    pub sample_size: usize,
    pub baseline_accuracy: f64,
    pub mean_faulty_accuracy: f64,
    pub accuracy_loss: f64,
    pub critical_fault_fraction: f64,
    /// Sum of per-fault golden-prediction flips over the sample.
    pub total_flips: u64,
    /// Sampled faults that flipped at least one prediction.
    pub critical_faults: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CampaignReport {
    pub config: CampaignConfig,
    pub test_size: usize,
    pub source_neurons: usize,
    pub rows: Vec<VariantMetrics>,
    pub criticality: Vec<CriticalityRow>,
}

impl CampaignReport {
    pub fn metrics(&self, variant: VariantKind, threshold: f64) -> Option<&VariantMetrics> {
        self.rows.iter().find(|r| r.variant == variant && r.threshold == threshold)
    }
}

/// Faults drawn for `variant` at threshold number `threshold_index`: unique,
/// uniform over the fault space, in draw order.
pub fn draw_faults(
    variant: &VariantUnderTest,
    config: &CampaignConfig,
    threshold_index: usize,
) -> Vec<FaultSpec> {
    let space = variant.fault_space();
    if config.exhaustive {
        return (0..space).map(|i| variant.fault_at(i)).collect();
    }
    let n = sample_size(space, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream_id(variant.kind(), threshold_index));
    index::sample(&mut rng, space, n).into_iter().map(|i| variant.fault_at(i)).collect()
}

fn stream_id(kind: VariantKind, threshold_index: usize) -> u64 {
    let k = VariantKind::ALL.iter().position(|v| *v == kind).expect("listed kind") as u64;
    (threshold_index as u64) << 2 | k
}

/// Builds the three variants compared at one threshold.
pub fn build_variants(source: &QNetwork, critical: &[NeuronId]) -> Result<[VariantUnderTest; 3]> {
    let targets = protectable(source, critical);
    let even = evenize(source, &targets)?;
    Ok([
        VariantUnderTest::unprotected(source.clone()),
        VariantUnderTest::protected(split_neurons(&even, &targets)?)?,
        VariantUnderTest::protected(triplicate_neurons(source, &targets)?)?,
    ])
}

pub fn run_campaign(
    source: &QNetwork,
    profile: &VulnerabilityProfile,
    test_set: &Dataset,
    config: &CampaignConfig,
) -> Result<CampaignReport> {
    config.validate()?;
    if test_set.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    if profile.len() != source.neuron_count() || source.neurons().any(|n| profile.get(n).is_none()) {
        return Err(Error::InvalidArgument(format!(
            "profile has {} entries, network {} has {} neurons",
            profile.len(),
            source.name(),
            source.neuron_count()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;

    let mut rows = Vec::with_capacity(config.thresholds.len() * 3);
    for (ti, &threshold) in config.thresholds.iter().enumerate() {
        let critical = protectable(source, &select_critical(profile, threshold));
        for variant in build_variants(source, &critical)? {
            let bench = FaultBench::new(&variant, test_set)?;
            let faults = draw_faults(&variant, config, ti);
            let outcomes = pool.install(|| {
                faults
                    .par_iter()
                    .map(|&f| bench.evaluate(f))
                    .collect::<Result<Vec<_>>>()
            })?;
            rows.push(aggregate(&bench, threshold, critical.len(), &faults, &outcomes, config));
        }
    }
    Ok(CampaignReport {
        config: config.clone(),
        test_size: test_set.len(),
        source_neurons: source.neuron_count(),
        rows,
        criticality: criticality_table(profile, &config.thresholds),
    })
}

fn aggregate(
    bench: &FaultBench<'_>,
    threshold: f64,
    protected_neurons: usize,
    faults: &[FaultSpec],
    outcomes: &[crate::faultsim::FaultOutcome],
    config: &CampaignConfig,
) -> VariantMetrics {
    let variant = bench.variant();
    let inputs = bench.len() as u64;
    let sampled = faults.len() as u64;
    let correct: u64 = outcomes.iter().map(|o| o.correct as u64).sum();
    let total_flips: u64 = outcomes.iter().map(|o| o.per_input_flips as u64).sum();
    let critical_faults = outcomes.iter().filter(|o| o.per_input_flips > 0).count() as u64;
    let baseline = bench.baseline_accuracy();
    let (mean, fraction) = if sampled == 0 {
        (baseline, 0.0)
    } else {
        let fraction = match config.accounting {
            CriticalAccounting::PerPair => total_flips as f64 / (sampled * inputs) as f64,
            CriticalAccounting::PerFault => critical_faults as f64 / sampled as f64,
        };
        (correct as f64 / (sampled * inputs) as f64, fraction)
    };
    VariantMetrics {
        variant: variant.kind(),
        threshold,
        protected_neurons,
        neuron_count: variant.neuron_count(),
        faults_enumerated: variant.fault_space(),
        sample_size: faults.len(),
        baseline_accuracy: baseline,
        mean_faulty_accuracy: mean,
        accuracy_loss: baseline - mean,
        critical_fault_fraction: fraction,
        total_flips,
        critical_faults,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{analyze, AnalysisOptions};
    use crate::io::{Sample, Split};
    use crate::qnn::{FullyConnected, Layer, QTensor};

    #[test]
    fn sample_sizes_for_reference_fault_spaces() {
        let cfg = CampaignConfig::default();
        assert_eq!(sample_size(2816 * 8, &cfg), 6734);
        assert_eq!(sample_size(4684 * 8, &cfg), 7645);
        assert_eq!(sample_size(103_168 * 8, &cfg), 9494);
        assert_eq!(sample_size(1, &cfg), 1);
        assert_eq!(sample_size(0, &cfg), 0);
    }

    #[test]
    fn sample_size_never_exceeds_population() {
        let cfg = CampaignConfig::default();
        for n in 1..2000 {
            let s = sample_size(n, &cfg);
            assert!(s >= 1 && s <= n, "{n} -> {s}");
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        for cfg in [
            CampaignConfig { margin: 0.0, ..Default::default() },
            CampaignConfig { confidence: 1.0, ..Default::default() },
            CampaignConfig { thresholds: vec![f64::NAN], ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    fn fc(in_f: usize, out_f: usize, w: Vec<i8>, b: Vec<i32>) -> Layer {
        Layer::FullyConnected(FullyConnected::new(in_f, out_f, w, b, 1.0, 1.0))
    }

    fn toy() -> QNetwork {
        QNetwork::new("toy", vec![2], 1.0, 2, vec![
            fc(2, 4, vec![4, -2, -2, 4, 2, 2, 3, -5], vec![0, 2, -4, 1]),
            Layer::Relu,
            fc(4, 2, vec![1, 0, 1, -1, 0, 1, -1, 2], vec![0, 0]),
        ])
        .unwrap()
    }

    fn toy_data(net: &QNetwork) -> Dataset {
        let mut samples = Vec::new();
        for a in -6i8..=6 {
            for b in -6i8..=6 {
                let x = QTensor::new(vec![2], vec![a, b], 1.0).unwrap();
                let label = net.forward(&x).unwrap().predicted_class;
                samples.push(Sample { features: vec![f64::from(a), f64::from(b)], label });
            }
        }
        Dataset::new(Split::Test, 2, samples).unwrap()
    }

    fn toy_campaign(cfg: &CampaignConfig) -> CampaignReport {
        let net = toy();
        let data = toy_data(&net);
        let profile = analyze(&net, &data, &AnalysisOptions::default()).unwrap();
        run_campaign(&net, &profile, &data, cfg).unwrap()
    }

    #[test]
    fn drawn_faults_are_unique_and_uniform() {
        // Pooled over many streams, each fault of a 48-fault space should be
        // drawn equally often; chi-square with 47 dof, p = 0.001 cutoff 82.7.
        let net = toy();
        let variant = VariantUnderTest::unprotected(net);
        let space = variant.fault_space();
        let cfg = CampaignConfig { margin: 0.2, ..Default::default() };
        let per_draw = sample_size(space, &cfg);
        assert!(per_draw < space);
        let mut counts = vec![0u64; space];
        let rounds = 2000;
        for r in 0..rounds {
            let cfg = CampaignConfig { seed: r, ..cfg.clone() };
            let faults = draw_faults(&variant, &cfg, 0);
            let mut idx: Vec<usize> = faults
                .iter()
                .map(|f| (0..space).find(|&i| variant.fault_at(i) == *f).unwrap())
                .collect();
            idx.sort_unstable();
            idx.dedup();
            assert_eq!(idx.len(), per_draw);
            for i in idx {
                counts[i] += 1;
            }
        }
        let expected = (rounds as usize * per_draw) as f64 / space as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 82.7, "chi2 = {chi2}");
    }

    #[test]
    fn campaign_is_deterministic_across_worker_counts() {
        let one = toy_campaign(&CampaignConfig { seed: 7, margin: 0.05, workers: 1, ..Default::default() });
        let four = toy_campaign(&CampaignConfig { seed: 7, margin: 0.05, workers: 4, ..Default::default() });
        assert_eq!(one.rows, four.rows);
    }

    #[test]
    fn exhaustive_toy_campaign_laws() {
        let report = toy_campaign(&CampaignConfig { exhaustive: true, ..Default::default() });
        assert!(check_report(&report).is_empty(), "{:?}", check_report(&report));
        for &t in &report.config.thresholds {
            let plain = report.metrics(VariantKind::Unprotected, t).unwrap();
            let split = report.metrics(VariantKind::SplitLcu, t).unwrap();
            let tmr = report.metrics(VariantKind::Tmr, t).unwrap();
            assert_eq!(plain.sample_size, plain.faults_enumerated);
            assert_eq!(2 * (split.neuron_count - plain.neuron_count), tmr.neuron_count - plain.neuron_count);
            if split.protected_neurons == 0 {
                assert_eq!(split.neuron_count, plain.neuron_count);
            }
        }
        let t0 = report.metrics(VariantKind::SplitLcu, 0.0).unwrap();
        assert_eq!(t0.protected_neurons, 4);
        assert_eq!(t0.neuron_count, 6 + 4);
        assert_eq!(report.metrics(VariantKind::Tmr, 0.0).unwrap().neuron_count, 6 + 8);
    }

    #[test]
    fn per_fault_accounting_counts_faults() {
        let cfg = CampaignConfig { exhaustive: true, thresholds: vec![0.0], accounting: CriticalAccounting::PerFault, ..Default::default() };
        let report = toy_campaign(&cfg);
        for r in &report.rows {
            assert_eq!(r.critical_fault_fraction, r.critical_faults as f64 / r.sample_size as f64);
        }
    }

    #[test]
    fn empty_test_set_and_mismatched_profile_are_rejected() {
        let net = toy();
        let data = toy_data(&net);
        let profile = analyze(&net, &data, &AnalysisOptions::default()).unwrap();
        let empty = Dataset::new(Split::Test, 2, Vec::new()).unwrap();
        assert!(run_campaign(&net, &profile, &empty, &CampaignConfig::default()).is_err());
        let mut short = profile.clone();
        short.entries.pop();
        assert!(run_campaign(&net, &short, &data, &CampaignConfig::default()).is_err());
    }
}
