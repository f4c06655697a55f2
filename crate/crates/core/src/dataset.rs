//! Labeled feature datasets: synthetic cluster generation with a planted
//! two-level grouping, CSV and binary file formats, and stratified splits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// RNG substream tags, one per consumer, so the same master seed never
/// produces overlapping draw sequences across components.
pub mod rng_tags {
    pub const SYNTH: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const GIBBS: u64 = 5;
    pub const DROPOUT: u64 = 6;
}

/// One labeled example: a raw input vector and its class index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u32,
    pub label: usize,
    pub input: Vec<f64>,
}

/// An ordered collection of samples with a fixed class count and input width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    input_dim: usize,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("dataset has no samples".into()));
        }
        let input_dim = samples[0].input.len();
        for (i, s) in samples.iter().enumerate() {
            if s.input.len() != input_dim {
                return Err(Error::dim(
                    format!("sample {i} input width"),
                    input_dim,
                    s.input.len(),
                ));
            }
            if s.label >= num_classes {
                return Err(Error::InvalidInput(format!(
                    "sample {i} has label {} but dataset declares {num_classes} classes",
                    s.label
                )));
            }
            if s.input.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "Dataset::new".into(),
                    detail: format!("sample {i} contains a non-finite feature"),
                });
            }
        }
        Ok(Dataset {
            samples,
            num_classes,
            input_dim,
            class_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Number of samples per class, indexed by class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// Parameters for the synthetic generator: classes live in superclusters,
/// superclusters are spread wider than the classes inside them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_superclusters: usize,
    pub classes_per_supercluster: usize,
    pub input_dim: usize,
    pub intra_spread: f64,
    pub inter_spread: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_superclusters < 1
            || self.classes_per_supercluster < 1
            || self.input_dim < 1
            || self.samples_per_class < 1
        {
            return Err(Error::InvalidConfig(
                "synthetic spec counts must all be at least 1".into(),
            ));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.intra_spread) || !positive(self.inter_spread) {
            return Err(Error::InvalidConfig(
                "synthetic spreads must be positive and finite".into(),
            ));
        }
        if self.inter_spread <= self.intra_spread {
            return Err(Error::InvalidConfig(format!(
                "inter_spread ({}) must exceed intra_spread ({}) or the planted grouping \
                 is not recoverable",
                self.inter_spread, self.intra_spread
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_superclusters * self.classes_per_supercluster
    }
}

/// The generator's ground truth: which supercluster each class was planted
/// in, and the noiseless class means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedGrouping {
    pub num_superclusters: usize,
    pub class_to_supercluster: Vec<usize>,
    pub class_means: Vec<Vec<f64>>,
}

/// Draws a dataset of isotropic Gaussian clusters with a known grouping.
///
/// Supercluster centers are N(0, inter_spread² I); each class mean is its
/// center plus N(0, intra_spread² I); each sample is its class mean plus
/// N(0, (intra_spread/4)² I). The sample noise is a quarter of the
/// class-offset scale so classes stay compact relative to their spacing.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Dataset, PlantedGrouping)> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed).substream(&[rng_tags::SYNTH]);
    let d = spec.input_dim;
    let num_classes = spec.num_classes();

    let draw_vec = |rng: &mut RngStream, scale: f64| -> Vec<f64> {
        (0..d).map(|_| scale * rng.next_standard_normal()).collect()
    };

    let centers: Vec<Vec<f64>> = (0..spec.num_superclusters)
        .map(|_| draw_vec(&mut rng, spec.inter_spread))
        .collect();

    let mut class_means = Vec::with_capacity(num_classes);
    let mut class_to_supercluster = Vec::with_capacity(num_classes);
    for (s, center) in centers.iter().enumerate() {
        for _ in 0..spec.classes_per_supercluster {
            let offset = draw_vec(&mut rng, spec.intra_spread);
            let mean: Vec<f64> = center.iter().zip(&offset).map(|(c, o)| c + o).collect();
            class_means.push(mean);
            class_to_supercluster.push(s);
        }
    }

    let noise_scale = spec.intra_spread / 4.0;
    let mut samples = Vec::with_capacity(num_classes * spec.samples_per_class);
    for (y, mean) in class_means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let noise = draw_vec(&mut rng, noise_scale);
            let input: Vec<f64> = mean.iter().zip(&noise).map(|(m, n)| m + n).collect();
            samples.push(Sample {
                id: samples.len() as u32,
                label: y,
                input,
            });
        }
    }

    let dataset = Dataset::new(samples, num_classes)?;
    let truth = PlantedGrouping {
        num_superclusters: spec.num_superclusters,
        class_to_supercluster,
        class_means,
    };
    Ok((dataset, truth))
}

/// On-disk feature formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Csv,
    Binary,
}

/// Loads a dataset; for CSV, `declared_classes` caps the label range (when
/// absent the class count is max label + 1).
pub fn load_features(
    path: &Path,
    format: FileFormat,
    declared_classes: Option<usize>,
) -> Result<Dataset> {
    match format {
        FileFormat::Csv => load_csv(path, declared_classes),
        FileFormat::Binary => load_binary(path),
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// CSV format: header `id,label,f0,...,f{d-1}`, one sample per row.
pub fn load_csv(path: &Path, declared_classes: Option<usize>) -> Result<Dataset> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file, expected header"))?;
    let header = header?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "label" {
        return Err(parse_err(1, "header must start with id,label,f0,..."));
    }
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(parse_err(1, format!("feature column {j} named {c:?}, expected f{j}")));
        }
    }
    let d = cols.len() - 2;

    let mut samples = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(parse_err(
                lineno,
                format!("expected {} fields, found {}", d + 2, fields.len()),
            ));
        }
        let id: u32 = fields[0]
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad id {:?}: {e}", fields[0])))?;
        let label: usize = fields[1]
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad label {:?}: {e}", fields[1])))?;
        let mut input = Vec::with_capacity(d);
        for f in &fields[2..] {
            let v: f64 = f
                .parse()
                .map_err(|e| parse_err(lineno, format!("bad feature {f:?}: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite feature {f:?}")));
            }
            input.push(v);
        }
        if let Some(n) = declared_classes {
            if label >= n {
                return Err(parse_err(
                    lineno,
                    format!("label {label} out of range for {n} declared classes"),
                ));
            }
        }
        samples.push(Sample { id, label, input });
    }
    if samples.is_empty() {
        return Err(parse_err(1, "file has a header but no samples"));
    }
    let num_classes = declared_classes
        .unwrap_or_else(|| samples.iter().map(|s| s.label).max().unwrap_or(0) + 1);
    Dataset::new(samples, num_classes)
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "id,label")?;
    for j in 0..dataset.input_dim() {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for s in dataset.samples() {
        write!(w, "{},{}", s.id, s.label)?;
        for v in &s.input {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

const BINARY_MAGIC: &[u8; 4] = b"HMX1";

/// Binary format: magic `HMX1`, little-endian u32 class count, sample count,
/// and feature width, then per sample (u32 id, u32 label, f32 features).
pub fn load_binary(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(parse_err(0, format!("bad magic {magic:?}, expected HMX1")));
    }
    let read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let num_classes = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let id = read_u32(&mut r)?;
        let label = read_u32(&mut r)? as usize;
        if label >= num_classes {
            return Err(parse_err(
                i,
                format!("record {i}: label {label} out of range for {num_classes} classes"),
            ));
        }
        let mut input = Vec::with_capacity(d);
        let mut buf = [0u8; 4];
        for _ in 0..d {
            r.read_exact(&mut buf)?;
            input.push(f32::from_le_bytes(buf) as f64);
        }
        samples.push(Sample { id, label, input });
    }
    Dataset::new(samples, num_classes)
}

pub fn save_binary(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&(dataset.num_classes() as u32).to_le_bytes())?;
    w.write_all(&(dataset.len() as u32).to_le_bytes())?;
    w.write_all(&(dataset.input_dim() as u32).to_le_bytes())?;
    for s in dataset.samples() {
        w.write_all(&s.id.to_le_bytes())?;
        w.write_all(&(s.label as u32).to_le_bytes())?;
        for &v in &s.input {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A stratified train/test split and any warnings produced while making it.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

/// Splits stratified by class: every class's train share is within one
/// sample of `train_fraction` of its count, and classes with at least two
/// samples appear in both splits. Single-sample classes go to train with a
/// warning.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let counts = dataset.class_counts();
    let n_classes = dataset.num_classes();

    // Per-class floor shares, then distribute the remaining slots (to reach
    // a total of round(size * fraction)) by largest fractional remainder,
    // ties toward the lower class index.
    let mut train_share = vec![0usize; n_classes];
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(n_classes);
    let mut floor_total = 0usize;
    for (c, &n) in counts.iter().enumerate() {
        let exact = n as f64 * train_fraction;
        let fl = exact.floor() as usize;
        train_share[c] = fl;
        floor_total += fl;
        remainders.push((c, exact - fl as f64));
    }
    let target_total = (dataset.len() as f64 * train_fraction).round() as usize;
    let extras = target_total.saturating_sub(floor_total);
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(c, _) in remainders.iter().take(extras) {
        train_share[c] += 1;
    }

    let mut warnings = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        if n == 1 {
            warnings.push(format!(
                "class {c} has a single sample; keeping it in the training split"
            ));
            train_share[c] = 1;
        } else {
            train_share[c] = train_share[c].clamp(1, n - 1);
        }
    }

    // Choose which samples fill each class's train share by a seeded
    // per-class shuffle, then rebuild both splits in original dataset order.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, s) in dataset.samples().iter().enumerate() {
        by_class[s.label].push(i);
    }
    let root = RngStream::new(seed);
    let mut to_train = vec![false; dataset.len()];
    for (c, indices) in by_class.iter_mut().enumerate() {
        use rand::seq::SliceRandom;
        let mut rng = root.substream(&[rng_tags::SPLIT, c as u64]);
        indices.shuffle(&mut rng);
        for &i in indices.iter().take(train_share[c]) {
            to_train[i] = true;
        }
    }

    let mut train_samples = Vec::new();
    let mut test_samples = Vec::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        if to_train[i] {
            train_samples.push(s.clone());
        } else {
            test_samples.push(s.clone());
        }
    }
    if test_samples.is_empty() {
        return Err(Error::InvalidConfig(
            "split left the test set empty; lower train_fraction or add data".into(),
        ));
    }
    let mut train = Dataset::new(train_samples, n_classes)?;
    let mut test = Dataset::new(test_samples, n_classes)?;
    train.class_names = dataset.class_names.clone();
    test.class_names = dataset.class_names.clone();
    Ok(Split {
        train,
        test,
        warnings,
    })
}
