use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::qnn::NeuronId;

use super::bounds::{bit_index_with, BoundsResult, NegativeBitRule, Side};

/// Per-bit vulnerability counts of one neuron. Index `j - 1` holds bit `j`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VulnerabilityCounters {
    pub pos: [u64; 8],
    pub neg: [u64; 8],
    pub inputs_seen: u64,
}

impl VulnerabilityCounters {
    /// Counts one analyzed input; an absent bound increments nothing on its side.
    pub fn record(&mut self, bounds: BoundsResult, rule: NegativeBitRule) {
        if let Some(r) = bounds.r_upper {
            let bit = bit_index_with(r, Side::Positive, rule).expect("r_upper is nonzero");
            self.pos[usize::from(bit) - 1] += 1;
        }
        if let Some(r) = bounds.r_lower {
            let bit = bit_index_with(r, Side::Negative, rule).expect("r_lower is nonzero");
            self.neg[usize::from(bit) - 1] += 1;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for j in 0..8 {
            self.pos[j] += other.pos[j];
            self.neg[j] += other.neg[j];
        }
        self.inputs_seen += other.inputs_seen;
    }

    pub fn is_zero(&self) -> bool {
        self.pos.iter().chain(&self.neg).all(|&c| c == 0)
    }
}

/// Neuron vulnerability factor.
///
/// With `v[j] = (pos[j] + neg[j]) / 2`, the factor is
/// `sum_{i=1..8} (1/8 * sum_{j<=i} v[j]) / inputs`, which collapses to
/// `sum_j (9 - j) * (pos[j] + neg[j]) / (16 * inputs)`. The collapsed form is
/// evaluated with one integer numerator and a single division.
pub fn neuron_nvf(counters: &VulnerabilityCounters) -> Result<f64> {
    nvf_from_counts(&counters.pos, &counters.neg, counters.inputs_seen)
}

fn nvf_from_counts(pos: &[u64; 8], neg: &[u64; 8], inputs: u64) -> Result<f64> {
    if inputs == 0 {
        return Err(Error::InvalidArgument("NVF needs at least one input".into()));
    }
    let numerator: u128 = (0..8)
        .map(|j| (8 - j as u128) * u128::from(pos[j] + neg[j]))
        .sum();
    Ok(numerator as f64 / (16 * u128::from(inputs)) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileEntry {
    pub neuron: NeuronId,
    pub pos: [u64; 8],
    pub neg: [u64; 8],
    pub nvf: f64,
}

/// NVF of every neuron of a network, in `(layer, unit)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct VulnerabilityProfile {
    /// Size of the analysis set; unknown for profiles read back from CSV.
    pub inputs_seen: Option<u64>,
    pub entries: Vec<ProfileEntry>,
}

pub const PROFILE_HEADER: &str =
    "layer,unit,nvf,pos1,pos2,pos3,pos4,pos5,pos6,pos7,pos8,neg1,neg2,neg3,neg4,neg5,neg6,neg7,neg8";

impl VulnerabilityProfile {
    pub fn from_counters(counters: Vec<(NeuronId, VulnerabilityCounters)>) -> Result<Self> {
        let inputs_seen = counters.first().map(|(_, c)| c.inputs_seen);
        let entries = counters
            .into_iter()
            .map(|(neuron, c)| {
                Ok(ProfileEntry {
                    neuron,
                    pos: c.pos,
                    neg: c.neg,
                    nvf: neuron_nvf(&c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs_seen,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, neuron: NeuronId) -> Option<&ProfileEntry> {
        self.entries
            .binary_search_by_key(&neuron, |e| e.neuron)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn nvf(&self, neuron: NeuronId) -> Option<f64> {
        self.get(neuron).map(|e| e.nvf)
    }

    pub fn counters(&self, neuron: NeuronId) -> Option<VulnerabilityCounters> {
        let e = self.get(neuron)?;
        Some(VulnerabilityCounters {
            pos: e.pos,
            neg: e.neg,
            inputs_seen: self.inputs_seen?,
        })
    }

    pub fn max_nvf(&self) -> f64 {
        self.entries.iter().map(|e| e.nvf).fold(0.0, f64::max)
    }

    /// NVF of a convolution channel: the largest NVF among its activations.
    pub fn channel_nvf(&self, layer: usize, channel: usize, channel_size: usize) -> Option<f64> {
        (channel * channel_size..(channel + 1) * channel_size)
            .map(|unit| self.nvf(NeuronId::new(layer, unit)))
            .try_fold(0.0f64, |m, v| v.map(|v| m.max(v)))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_csv_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_to(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "{PROFILE_HEADER}")?;
        for e in &self.entries {
            let mut line = format!("{},{},{}", e.neuron.layer, e.neuron.unit, e.nvf);
            for c in e.pos.iter().chain(&e.neg) {
                line.push_str(&format!(",{c}"));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new().from_reader(BufReader::new(File::open(path)?));
        let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        if header.join(",") != PROFILE_HEADER {
            return Err(Error::parse(format!("{name}:header"), format!("expected `{PROFILE_HEADER}`")));
        }
        let mut entries = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            let at = |c: usize| format!("{name}:row[{row}].{}", header[c]);
            let int = |c: usize| -> Result<u64> {
                record[c].parse().map_err(|e| Error::parse(at(c), format!("{e}")))
            };
            let nvf: f64 = record[2].parse().map_err(|e| Error::parse(at(2), format!("{e}")))?;
            if !(0.0..=1.0).contains(&nvf) {
                return Err(Error::parse(at(2), format!("NVF {nvf} outside [0, 1]")));
            }
            let mut pos = [0u64; 8];
            let mut neg = [0u64; 8];
            for j in 0..8 {
                pos[j] = int(3 + j)?;
                neg[j] = int(11 + j)?;
            }
            let neuron = NeuronId::new(int(0)? as usize, int(1)? as usize);
            if entries.last().is_some_and(|e: &ProfileEntry| e.neuron >= neuron) {
                return Err(Error::parse(at(0), "rows must be in increasing (layer, unit) order"));
            }
            entries.push(ProfileEntry { neuron, pos, neg, nvf });
        }
        Ok(Self {
            inputs_seen: None,
            entries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The double sum exactly as written, in floating point.
    fn nvf_double_sum(c: &VulnerabilityCounters) -> f64 {
        let v: Vec<f64> = (0..8).map(|j| (c.pos[j] + c.neg[j]) as f64 / 2.0).collect();
        let mut total = 0.0;
        for i in 1..=8 {
            let inner: f64 = v[..i].iter().sum();
            total += inner / 8.0;
        }
        total / c.inputs_seen as f64
    }

    #[test]
    fn nvf_examples() {
        let zero = VulnerabilityCounters {
            inputs_seen: 3,
            ..Default::default()
        };
        assert_eq!(neuron_nvf(&zero).unwrap(), 0.0);

        let mut low = VulnerabilityCounters {
            inputs_seen: 1,
            ..Default::default()
        };
        low.pos[0] = 1;
        low.neg[0] = 1;
        assert_eq!(neuron_nvf(&low).unwrap(), 1.0);

        let mut high = VulnerabilityCounters {
            inputs_seen: 1,
            ..Default::default()
        };
        high.pos[7] = 1;
        high.neg[7] = 1;
        assert_eq!(neuron_nvf(&high).unwrap(), 0.125);
    }

    #[test]
    fn nvf_rejects_empty_input_set() {
        assert!(neuron_nvf(&VulnerabilityCounters::default()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn nvf_matches_double_sum_and_stays_in_unit_interval(
            inputs in 1u64..50,
            pos_bits in proptest::collection::vec(proptest::option::of(0usize..8), 1..50),
            neg_bits in proptest::collection::vec(proptest::option::of(0usize..8), 1..50),
        ) {
            let mut c = VulnerabilityCounters { inputs_seen: inputs, ..Default::default() };
            // at most one increment per side per input
            for b in pos_bits.iter().take(inputs as usize).flatten() { c.pos[*b] += 1; }
            for b in neg_bits.iter().take(inputs as usize).flatten() { c.neg[*b] += 1; }
            let nvf = neuron_nvf(&c).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&nvf));
            proptest::prop_assert!((nvf - nvf_double_sum(&c)).abs() < 1e-12);
            if c.is_zero() { proptest::prop_assert_eq!(nvf, 0.0); }
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut c = VulnerabilityCounters {
            inputs_seen: 7,
            ..Default::default()
        };
        c.pos[2] = 3;
        c.neg[5] = 1;
        let profile = VulnerabilityProfile::from_counters(vec![
            (NeuronId::new(0, 0), c),
            (NeuronId::new(0, 1), VulnerabilityCounters { inputs_seen: 7, ..Default::default() }),
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        profile.write_csv(&p).unwrap();
        let back = VulnerabilityProfile::read_csv(&p).unwrap();
        assert_eq!(back.entries, profile.entries);
        assert_eq!(back.inputs_seen, None);
    }
}
