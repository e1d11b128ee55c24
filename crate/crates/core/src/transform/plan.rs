use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::qnn::{NeuronId, QNetwork};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProtectionMode {
    Split,
    Tmr,
}

impl ProtectionMode {
    pub fn replicas(self) -> usize {
        match self {
            ProtectionMode::Split => 2,
            ProtectionMode::Tmr => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProtectionMode::Split => "split",
            ProtectionMode::Tmr => "tmr",
        }
    }
}

impl std::str::FromStr for ProtectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(ProtectionMode::Split),
            "tmr" => Ok(ProtectionMode::Tmr),
            other => Err(Error::InvalidArgument(format!("unknown protection mode `{other}`"))),
        }
    }
}

/// One protected channel (a unit for fully connected layers) and the
/// channels that replace it in the protected network. `replicas[0]` reuses
/// the original index; the rest are appended after the layer's original
/// channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplicaGroup {
    pub layer: usize,
    pub original: usize,
    pub replicas: Vec<usize>,
}

impl ReplicaGroup {
    /// Flat neuron ids of replica `r` in a layer with `channel_size`
    /// activations per channel.
    pub fn replica_neurons(&self, r: usize, channel_size: usize) -> impl Iterator<Item = NeuronId> + '_ {
        let c = self.replicas[r];
        (c * channel_size..(c + 1) * channel_size).map(move |u| NeuronId::new(self.layer, u))
    }
}

/// Which neurons are replicated and how; what the controller must know to
/// route replica outputs through correction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtectionPlan {
    pub mode: ProtectionMode,
    pub groups: Vec<ReplicaGroup>,
}

pub const PLAN_HEADER: &str = "mode,layer,orig_unit,replica_units";

impl ProtectionPlan {
    pub fn empty(mode: ProtectionMode) -> Self {
        Self {
            mode,
            groups: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups_in_layer(&self, layer: usize) -> impl Iterator<Item = &ReplicaGroup> {
        self.groups.iter().filter(move |g| g.layer == layer)
    }

    /// Checks replica counts, disjointness and that every replica exists in `net`.
    pub fn validate(&self, net: &QNetwork) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for g in &self.groups {
            if g.replicas.len() != self.mode.replicas() {
                return Err(Error::InvalidArgument(format!(
                    "group ({}, {}) has {} replicas, {} expected",
                    g.layer,
                    g.original,
                    g.replicas.len(),
                    self.mode.replicas()
                )));
            }
            let channels = net
                .layers()
                .get(g.layer)
                .and_then(|l| l.out_channels())
                .ok_or(Error::InvalidNeuron(NeuronId::new(g.layer, g.original)))?;
            for &r in &g.replicas {
                if r >= channels {
                    return Err(Error::InvalidNeuron(NeuronId::new(g.layer, r)));
                }
                if !seen.insert((g.layer, r)) {
                    return Err(Error::InvalidArgument(format!(
                        "replica ({}, {r}) belongs to two groups",
                        g.layer
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_csv_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_to(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "{PLAN_HEADER}")?;
        for g in &self.groups {
            let replicas: Vec<String> = g.replicas.iter().map(ToString::to_string).collect();
            writeln!(out, "{},{},{},{}", self.mode.as_str(), g.layer, g.original, replicas.join(","))?;
        }
        Ok(())
    }

    /// Reads a plan; an empty file body yields an empty plan of `default_mode`.
    pub fn read_csv(path: &Path, default_mode: ProtectionMode) -> Result<Self> {
        let name = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_reader(BufReader::new(File::open(path)?));
        if reader.headers()?.iter().collect::<Vec<_>>().join(",") != PLAN_HEADER {
            return Err(Error::parse(format!("{name}:header"), format!("expected `{PLAN_HEADER}`")));
        }
        let mut mode = None;
        let mut groups = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            let at = |field: &str| format!("{name}:row[{row}].{field}");
            let m: ProtectionMode = record[0].parse().map_err(|e: Error| Error::parse(at("mode"), e.to_string()))?;
            if mode.is_some_and(|prev| prev != m) {
                return Err(Error::parse(at("mode"), "mixed protection modes"));
            }
            mode = Some(m);
            let num = |i: usize, field: &str| -> Result<usize> {
                record
                    .get(i)
                    .ok_or_else(|| Error::parse(at(field), "missing"))?
                    .parse()
                    .map_err(|e| Error::parse(at(field), format!("{e}")))
            };
            let replicas = (3..record.len())
                .map(|i| num(i, "replica_units"))
                .collect::<Result<Vec<_>>>()?;
            if replicas.len() != m.replicas() {
                return Err(Error::parse(
                    at("replica_units"),
                    format!("expected {} replicas, got {}", m.replicas(), replicas.len()),
                ));
            }
            groups.push(ReplicaGroup {
                layer: num(1, "layer")?,
                original: num(2, "orig_unit")?,
                replicas,
            });
        }
        Ok(Self {
            mode: mode.unwrap_or(default_mode),
            groups,
        })
    }
}
