use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Labelled real-valued samples with a uniform feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub class_count: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(split: Split, class_count: usize, samples: Vec<Sample>) -> Result<Self> {
        let width = samples.first().map(|s| s.features.len());
        for (i, s) in samples.iter().enumerate() {
            if s.label >= class_count {
                return Err(Error::InvalidArgument(format!(
                    "sample {i}: label {} out of range for {class_count} classes",
                    s.label
                )));
            }
            if Some(s.features.len()) != width {
                return Err(Error::InvalidArgument(format!(
                    "sample {i}: feature width {} differs from {}",
                    s.features.len(),
                    width.unwrap_or(0)
                )));
            }
            if s.features.iter().any(|f| !f.is_finite()) {
                return Err(Error::InvalidArgument(format!("sample {i}: non-finite feature")));
            }
        }
        Ok(Self {
            split,
            class_count,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_width(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }
}

/// Parameters of a synthetic Gaussian-blobs problem.
#[derive(Clone, Copy, Debug)]
pub struct BlobSpec {
    pub dims: usize,
    pub classes: usize,
    pub per_class: usize,
    pub spread: f64,
    pub radius: f64,
}

impl BlobSpec {
    /// Four well separated classes in the plane.
    pub const PLANAR_4: BlobSpec = BlobSpec {
        dims: 2,
        classes: 4,
        per_class: 64,
        spread: 0.9,
        radius: 3.0,
    };

    /// Four classes in 16 dimensions.
    pub const WIDE_4: BlobSpec = BlobSpec {
        dims: 16,
        classes: 4,
        per_class: 64,
        spread: 1.0,
        radius: 3.0,
    };

    fn center(&self, class: usize) -> Vec<f64> {
        // Classes sit on a circle in the first two axes; further axes get a
        // class-dependent alternating offset.
        let angle = std::f64::consts::TAU * class as f64 / self.classes as f64;
        (0..self.dims)
            .map(|d| match d {
                0 => self.radius * angle.cos(),
                1 => self.radius * angle.sin(),
                _ if (d + class).is_multiple_of(2) => 0.5 * self.radius,
                _ => -0.5 * self.radius,
            })
            .collect()
    }
}

/// Draws matching train and test splits of a blobs problem.
pub fn gaussian_blobs(spec: BlobSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.spread)
        .map_err(|e| Error::InvalidArgument(format!("blob spread: {e}")))?;
    let draw = |rng: &mut ChaCha8Rng| {
        let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
        for _ in 0..spec.per_class {
            for class in 0..spec.classes {
                let features = spec
                    .center(class)
                    .into_iter()
                    .map(|c| c + noise.sample(rng))
                    .collect();
                samples.push(Sample { features, label: class });
            }
        }
        samples
    };
    let train = draw(&mut rng);
    let test = draw(&mut rng);
    Ok((
        Dataset::new(Split::Train, spec.classes, train)?,
        Dataset::new(Split::Test, spec.classes, test)?,
    ))
}

/// Writes `label,f0,f1,...` CSV. Reals use the shortest representation that
/// parses back to the same value.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = String::from("label");
    for i in 0..dataset.feature_width() {
        header.push_str(&format!(",f{i}"));
    }
    writeln!(out, "{header}")?;
    for s in &dataset.samples {
        let mut line = s.label.to_string();
        for f in &s.features {
            line.push(',');
            line.push_str(&f.to_string());
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path, split: Split, class_count: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(File::open(path)?));
    let headers = reader.headers()?.clone();
    let name = path.display();
    if headers.get(0) != Some("label") {
        return Err(Error::parse(format!("{name}:header[0]"), "expected `label`"));
    }
    for (i, h) in headers.iter().enumerate().skip(1) {
        if h != format!("f{}", i - 1) {
            return Err(Error::parse(format!("{name}:header[{i}]"), format!("expected `f{}`", i - 1)));
        }
    }
    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let at = |col: usize| format!("{name}:row[{row}].{}", &headers[col]);
        let label: usize = record[0]
            .parse()
            .map_err(|e| Error::parse(at(0), format!("{e}")))?;
        if label >= class_count {
            return Err(Error::parse(at(0), format!("label {label} >= class count {class_count}")));
        }
        let features = record
            .iter()
            .enumerate()
            .skip(1)
            .map(|(c, v)| v.parse::<f64>().map_err(|e| Error::parse(at(c), format!("{e}"))))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample { features, label });
    }
    Dataset::new(split, class_count, samples)
}

/// Loads the common 8x8 digits CSV layout: 64 pixel intensities in 0..=16
/// followed by the digit label, no header. Pixels are scaled to [0, 1].
pub fn load_digits_csv(path: &Path, split: Split) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(BufReader::new(File::open(path)?));
    let name = path.display();
    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 65 {
            return Err(Error::parse(
                format!("{name}:row[{row}]"),
                format!("expected 65 columns, got {}", record.len()),
            ));
        }
        let mut values = Vec::with_capacity(64);
        for (c, v) in record.iter().enumerate() {
            let x: f64 = v
                .trim()
                .parse()
                .map_err(|e| Error::parse(format!("{name}:row[{row}][{c}]"), format!("{e}")))?;
            values.push(x);
        }
        let label = values.pop().expect("65 columns");
        if label.fract() != 0.0 || !(0.0..10.0).contains(&label) {
            return Err(Error::parse(format!("{name}:row[{row}][64]"), "label must be 0..=9"));
        }
        let features = values.into_iter().map(|x| x / 16.0).collect();
        samples.push(Sample { features, label: label as usize });
    }
    Dataset::new(split, 10, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic() {
        let a = gaussian_blobs(BlobSpec::PLANAR_4, 7).unwrap();
        let b = gaussian_blobs(BlobSpec::PLANAR_4, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 256);
        assert_eq!(a.0.feature_width(), 2);
        assert_ne!(a.0, gaussian_blobs(BlobSpec::PLANAR_4, 8).unwrap().0);
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = gaussian_blobs(BlobSpec::WIDE_4, 3).unwrap();
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        save_dataset(&train, &p1).unwrap();
        let loaded = load_dataset(&p1, Split::Train, 4).unwrap();
        assert_eq!(loaded, train);
        save_dataset(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_label_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "label,f0\n0,1.5\n7,2\n").unwrap();
        let err = load_dataset(&p, Split::Test, 4).unwrap_err().to_string();
        assert!(err.contains("row[1].label"), "{err}");
    }
}
