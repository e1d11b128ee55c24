//! The `splitguard` command line: fixture, analyze, protect, inject, campaign.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::analysis::{
    analyze_detailed, criticality_table, default_thresholds, select_critical, AnalysisOptions, BoundsMethod,
    NegativeBitRule, VulnerabilityProfile,
};
use crate::campaign::{check_report, format_sig, nvf_label, run_campaign, write_report, CampaignConfig, CriticalAccounting};
use crate::error::Error;
use crate::faultsim::{FaultBench, FaultSpec, VariantKind, VariantUnderTest};
use crate::io::{
    gaussian_blobs, load_dataset, load_model, quantize, quantized_accuracy, save_dataset, save_model,
    train_reference_mlp, BlobSpec, Dataset, Split,
};
use crate::qnn::NeuronId;
use crate::transform::{evenize, protectable, split_neurons, triplicate_neurons, ProtectionMode, ProtectionPlan};

/// Exit codes by error category.
pub mod exit {
    pub const OK: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const INPUT: u8 = 4;
    pub const CHECKS: u8 = 5;
}

#[derive(Parser, Debug)]
#[command(name = "splitguard", version, about = "Resilience analysis and neuron-splitting protection for int8 networks")]
pub struct Cli {
    /// Print a machine-readable JSON summary instead of text.
    #[arg(long, global = true, env = "SPLITGUARD_JSON")]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the blobs datasets, train and quantize the reference MLP.
    Fixture(FixtureArgs),
    /// Compute the per-neuron vulnerability profile.
    Analyze(AnalyzeArgs),
    /// Split or triplicate neurons at or above an NVF threshold.
    Protect(ProtectArgs),
    /// Evaluate one bit-flip fault over a dataset.
    Inject(InjectArgs),
    /// Run the three-variant fault-injection sweep and write the report.
    Campaign(CampaignArgs),
}

#[derive(Args, Debug)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, env = "SPLITGUARD_SEED", default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Analysis set CSV (`label,f0,f1,...`).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Profile CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Locate flip bounds by bisection instead of a linear scan.
    #[arg(long)]
    pub bisect: bool,
    /// Map negative bounds without the +1 bit offset.
    #[arg(long)]
    pub unshifted_negative_bits: bool,
    #[arg(long, value_delimiter = ',', env = "SPLITGUARD_THRESHOLDS")]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long, env = "SPLITGUARD_WORKERS", default_value_t = 0)]
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Split,
    Tmr,
}

impl From<ModeArg> for ProtectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Split => ProtectionMode::Split,
            ModeArg::Tmr => ProtectionMode::Tmr,
        }
    }
}

#[derive(Args, Debug)]
pub struct ProtectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long)]
    pub threshold: f64,
    #[arg(long, value_enum, env = "SPLITGUARD_MODE", default_value = "split")]
    pub mode: ModeArg,
    /// Skip evenization; odd parameters on split targets are then rejected.
    #[arg(long)]
    pub no_evenize: bool,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long)]
    pub out_plan: PathBuf,
    /// Dataset for a fault-free equivalence check against the source.
    #[arg(long)]
    pub check: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InjectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Protection plan; its mode selects the correction.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Target neuron as `layer:unit`.
    #[arg(long, value_parser = parse_neuron)]
    pub neuron: NeuronId,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..8))]
    pub bit: u8,
}

#[derive(Args, Debug)]
pub struct CampaignArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub profile: PathBuf,
    /// Test set CSV.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, env = "SPLITGUARD_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "SPLITGUARD_CONFIDENCE", default_value_t = 0.95)]
    pub confidence: f64,
    #[arg(long, env = "SPLITGUARD_MARGIN", default_value_t = 0.01)]
    pub margin: f64,
    #[arg(long, value_delimiter = ',', env = "SPLITGUARD_THRESHOLDS")]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long, env = "SPLITGUARD_WORKERS", default_value_t = 0)]
    pub workers: usize,
    /// Enumerate the whole fault space instead of sampling.
    #[arg(long, env = "SPLITGUARD_EXHAUSTIVE")]
    pub exhaustive: bool,
    /// Count a fault as critical if it flips any prediction.
    #[arg(long)]
    pub per_fault: bool,
    /// Also write SVG line charts.
    #[arg(long)]
    pub charts: bool,
}

fn parse_neuron(s: &str) -> Result<NeuronId, String> {
    let (l, u) = s.split_once(':').ok_or_else(|| format!("expected layer:unit, got `{s}`"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok(NeuronId::new(num(l)?, num(u)?))
}

/// Parses `args`, runs the command and maps failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}

fn classify(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Io(_)) => exit::IO,
        Some(Error::Parse { .. } | Error::Csv(_)) => exit::INPUT,
        Some(Error::InvalidArgument(_) | Error::NotEvenized { .. } | Error::InvalidNeuron(_)) => exit::USAGE,
        Some(_) => exit::FAILURE,
        None if e.chain().any(|c| c.is::<std::io::Error>()) => exit::IO,
        None => exit::FAILURE,
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<u8> {
    let mut out = std::io::stdout().lock();
    match &cli.command {
        Command::Fixture(a) => cmd_fixture(a, cli.json, &mut out),
        Command::Analyze(a) => cmd_analyze(a, cli.json, &mut out),
        Command::Protect(a) => cmd_protect(a, cli.json, &mut out),
        Command::Inject(a) => cmd_inject(a, cli.json, &mut out),
        Command::Campaign(a) => cmd_campaign(a, cli.json, &mut out),
    }
}

fn read_test_set(path: &Path, class_count: usize) -> anyhow::Result<Dataset> {
    let data = load_dataset(path, Split::Test, class_count).with_context(|| format!("loading {}", path.display()))?;
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset {} is empty", path.display())).into());
    }
    Ok(data)
}

fn emit(out: &mut dyn Write, json: bool, value: serde_json::Value, text: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> anyhow::Result<()> {
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(&value)?)?;
    } else {
        text(out)?;
    }
    Ok(())
}

/// Files written by `fixture`.
pub const FIXTURE_FILES: [&str; 3] = ["model.json", "train.csv", "test.csv"];

pub fn cmd_fixture(a: &FixtureArgs, json: bool, out: &mut dyn Write) -> anyhow::Result<u8> {
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let (train, test) = gaussian_blobs(BlobSpec::PLANAR_4, a.seed)?;
    let topology = [2, 16, 16, 4];
    let float = train_reference_mlp::<f64>(&train, &topology, a.epochs, a.seed)?;
    let net = quantize(&float, &train)?;
    let float_acc = float.accuracy(&test);
    let quant_acc = quantized_accuracy(&net, &test)?;
    let mut metadata: BTreeMap<String, String> = float.metadata.clone();
    metadata.insert("float_test_accuracy".into(), format_sig(float_acc));
    metadata.insert("quantized_test_accuracy".into(), format_sig(quant_acc));
    save_model(&net, &metadata, &a.out_dir.join("model.json"))?;
    save_dataset(&train, &a.out_dir.join("train.csv"))?;
    save_dataset(&test, &a.out_dir.join("test.csv"))?;
    emit(
        out,
        json,
        json!({"neurons": net.neuron_count(), "float_accuracy": float_acc, "quantized_accuracy": quant_acc}),
        |o| {
            writeln!(o, "fixture written to {}", a.out_dir.display())?;
            writeln!(o, "neurons: {}", net.neuron_count())?;
            writeln!(o, "float test accuracy: {}", format_sig(float_acc))?;
            writeln!(o, "quantized test accuracy: {}", format_sig(quant_acc))
        },
    )?;
    Ok(exit::OK)
}

pub fn cmd_analyze(a: &AnalyzeArgs, json: bool, out: &mut dyn Write) -> anyhow::Result<u8> {
    let model = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let net = model.network;
    let data = load_dataset(&a.dataset, Split::Train, net.class_count())
        .with_context(|| format!("loading {}", a.dataset.display()))?;
    let options = AnalysisOptions {
        method: if a.bisect { BoundsMethod::Bisect } else { BoundsMethod::Scan },
        negative_rule: if a.unshifted_negative_bits { NegativeBitRule::Unshifted } else { NegativeBitRule::Symmetric },
        ..AnalysisOptions::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.workers).build()?;
    let (profile, stats) = pool.install(|| analyze_detailed(&net, &data, &options))?;
    profile.write_csv(&a.out)?;
    let thresholds = a.thresholds.clone().unwrap_or_else(default_thresholds);
    let table = criticality_table(&profile, &thresholds);
    emit(
        out,
        json,
        json!({"neurons": profile.len(), "inputs": data.len(), "pairs": stats.pairs, "gated_out": stats.gated_out, "criticality": table}),
        |o| {
            writeln!(o, "profiled {} neurons over {} inputs ({} pairs gated out of {})", profile.len(), data.len(), stats.gated_out, stats.pairs)?;
            writeln!(o, "NVF >=   neurons  portion")?;
            for row in &table {
                writeln!(o, "{:>5}%  {:>8}  {}", nvf_label(row.threshold), row.neurons, format_sig(row.portion))?;
            }
            Ok(())
        },
    )?;
    Ok(exit::OK)
}

pub fn cmd_protect(a: &ProtectArgs, json: bool, out: &mut dyn Write) -> anyhow::Result<u8> {
    let model = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let net = model.network;
    let profile = VulnerabilityProfile::read_csv(&a.profile).with_context(|| format!("loading {}", a.profile.display()))?;
    let targets = protectable(&net, &select_critical(&profile, a.threshold));
    let mode = ProtectionMode::from(a.mode);
    let (source, protected) = match mode {
        ProtectionMode::Split => {
            let source = if a.no_evenize { net.clone() } else { evenize(&net, &targets)? };
            let p = split_neurons(&source, &targets)?;
            (source, p)
        }
        ProtectionMode::Tmr => (net.clone(), triplicate_neurons(&net, &targets)?),
    };
    let mut check = None;
    if let Some(path) = &a.check {
        let data = read_test_set(path, net.class_count())?;
        let variant = VariantUnderTest::protected(protected.clone())?;
        let bench = FaultBench::new(&variant, &data)?;
        let reference = FaultBench::new(&VariantUnderTest::unprotected(source.clone()), &data)?.golden().to_vec();
        let equal = bench.golden() == reference.as_slice();
        check = Some(equal);
        if !equal {
            bail!("protected network disagrees with its source on fault-free inputs");
        }
    }
    let mut metadata = model.metadata.clone();
    metadata.insert("protection".into(), mode.as_str().into());
    metadata.insert("protected_from".into(), protected.source_name.clone());
    save_model(&protected.net, &metadata, &a.out_model)?;
    protected.plan.write_csv(&a.out_plan)?;
    let added = protected.overhead();
    emit(
        out,
        json,
        json!({"mode": mode.as_str(), "protected_neurons": targets.len(), "source_neurons": protected.source_neurons,
               "neurons": protected.net.neuron_count(), "added": added, "equivalence_check": check}),
        |o| {
            writeln!(o, "{} protection of {} neurons", mode.as_str(), targets.len())?;
            writeln!(o, "neurons: {} -> {} (+{added})", protected.source_neurons, protected.net.neuron_count())?;
            if check == Some(true) {
                writeln!(o, "fault-free equivalence check passed")?;
            }
            Ok(())
        },
    )?;
    Ok(exit::OK)
}

pub fn cmd_inject(a: &InjectArgs, json: bool, out: &mut dyn Write) -> anyhow::Result<u8> {
    let net = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?.network;
    let variant = match &a.plan {
        None => VariantUnderTest::unprotected(net),
        Some(path) => {
            let plan = ProtectionPlan::read_csv(path, ProtectionMode::Split)
                .with_context(|| format!("loading {}", path.display()))?;
            let kind = match plan.mode {
                ProtectionMode::Split => VariantKind::SplitLcu,
                ProtectionMode::Tmr => VariantKind::Tmr,
            };
            VariantUnderTest::new(kind, net, Some(plan))?
        }
    };
    let data = read_test_set(&a.dataset, variant.net().class_count())?;
    let fault = FaultSpec::new(a.neuron, a.bit)?;
    let bench = FaultBench::new(&variant, &data)?;
    let outcome = bench.evaluate(fault)?;
    let baseline = bench.baseline_accuracy();
    emit(
        out,
        json,
        json!({"variant": variant.kind(), "neuron": [fault.neuron.layer, fault.neuron.unit], "bit": fault.bit,
               "baseline_accuracy": baseline, "accuracy": outcome.accuracy, "per_input_flips": outcome.per_input_flips}),
        |o| {
            writeln!(o, "{} fault {fault}", variant.kind().label())?;
            writeln!(o, "accuracy: {} (fault-free {})", format_sig(outcome.accuracy), format_sig(baseline))?;
            writeln!(o, "flipped predictions: {} of {}", outcome.per_input_flips, data.len())
        },
    )?;
    Ok(exit::OK)
}

pub fn cmd_campaign(a: &CampaignArgs, json: bool, out: &mut dyn Write) -> anyhow::Result<u8> {
    let net = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?.network;
    let profile = VulnerabilityProfile::read_csv(&a.profile).with_context(|| format!("loading {}", a.profile.display()))?;
    let data = read_test_set(&a.dataset, net.class_count())?;
    let config = CampaignConfig {
        confidence: a.confidence,
        margin: a.margin,
        seed: a.seed,
        thresholds: a.thresholds.clone().unwrap_or_else(default_thresholds),
        exhaustive: a.exhaustive,
        accounting: if a.per_fault { CriticalAccounting::PerFault } else { CriticalAccounting::PerPair },
        workers: a.workers,
        ..CampaignConfig::default()
    };
    let report = run_campaign(&net, &profile, &data, &config)?;
    let files = write_report(&report, &a.out_dir, a.charts)?;
    let problems = check_report(&report);
    emit(
        out,
        json,
        json!({"report": report, "files": files, "consistency_problems": problems}),
        |o| {
            writeln!(o, "NVF   variant      neurons  faults  acc_loss  critical")?;
            for m in &report.rows {
                writeln!(
                    o,
                    "{:>3}%  {:<11} {:>8} {:>7}  {:>8}  {}",
                    nvf_label(m.threshold),
                    m.variant.label(),
                    m.neuron_count,
                    m.sample_size,
                    format_sig(m.accuracy_loss),
                    format_sig(m.critical_fault_fraction)
                )?;
            }
            writeln!(o, "report written to {}", a.out_dir.display())?;
            for p in &problems {
                writeln!(o, "consistency check failed: {p}")?;
            }
            Ok(())
        },
    )?;
    Ok(if problems.is_empty() { exit::OK } else { exit::CHECKS })
}
