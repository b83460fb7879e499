//! Dataset construction and ingestion.
//!
//! Datasets are immutable once built. Sequences share one length `n`;
//! discrete sequences are padded with [`PAD_ID`](crate::embedding::PAD_ID).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::embedding::{encode_discrete, PAD_ID};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Discrete,
    Continuous,
}

/// One sequence of `n` raw tokens.
#[derive(Clone, Debug, PartialEq)]
pub enum Tokens {
    /// Byte ids `0..=255`, or the pad id.
    Discrete(Vec<u16>),
    /// `n × width` row-major feature values.
    Continuous { values: Vec<f64>, width: usize },
}

impl Tokens {
    pub fn continuous(values: Vec<f64>) -> Self {
        Tokens::Continuous { values, width: 1 }
    }

    pub fn len(&self) -> usize {
        match self {
            Tokens::Discrete(ids) => ids.len(),
            Tokens::Continuous { values, width } => values.len() / width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality(&self) -> Modality {
        match self {
            Tokens::Discrete(_) => Modality::Discrete,
            Tokens::Continuous { .. } => Modality::Continuous,
        }
    }

    pub fn is_pad(&self, i: usize) -> bool {
        matches!(self, Tokens::Discrete(ids) if ids[i] == PAD_ID)
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.is_pad(i)).collect()
    }

    /// Reorders positions so that new position `j` holds old position `p[j]`.
    fn permuted(&self, p: &[usize]) -> Tokens {
        match self {
            Tokens::Discrete(ids) => Tokens::Discrete(p.iter().map(|&i| ids[i]).collect()),
            Tokens::Continuous { values, width } => Tokens::Continuous {
                values: p
                    .iter()
                    .flat_map(|&i| values[i * width..(i + 1) * width].iter().copied())
                    .collect(),
                width: *width,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Value(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Tokens,
    pub label: Option<Label>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub modality: Modality,
    /// Sequence length shared by every sample.
    pub n: usize,
    /// Feature width per token (1 for discrete data and scalar tables).
    pub d_raw: usize,
    pub samples: Vec<Sample>,
    /// Per-position group id, for synthetic grouped data.
    pub groups: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(modality: Modality, n: usize, d_raw: usize, samples: Vec<Sample>) -> Result<Self> {
        let ds = Dataset {
            modality,
            n,
            d_raw,
            samples,
            groups: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.tokens.len() != self.n || s.tokens.modality() != self.modality {
                return Err(Error::Data(format!(
                    "sample {i} does not match dataset layout (n={}, {:?})",
                    self.n, self.modality
                )));
            }
            if let Tokens::Continuous { width, .. } = s.tokens {
                if width != self.d_raw {
                    return Err(Error::Data(format!(
                        "sample {i} has width {width}, expected {}",
                        self.d_raw
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.label.is_some())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            modality: self.modality,
            n: self.n,
            d_raw: self.d_raw,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            groups: self.groups.clone(),
        }
    }

    /// Task implied by the labels: classification when every label is a class.
    pub fn task(&self) -> Option<Task> {
        let mut classes = 0;
        for s in &self.samples {
            match s.label? {
                Label::Class(c) => classes = classes.max(c + 1),
                Label::Value(_) => return Some(Task::Regression),
            }
        }
        (classes > 0).then_some(Task::Classification {
            classes: classes.max(2),
        })
    }

    /// Writes the dataset as CSV (one column per token value, label last).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let cols = self.n * self.d_raw;
        let header: Vec<String> = (0..cols).map(|i| format!("x{i}")).collect();
        out.push_str(&header.join(","));
        if self.is_labeled() {
            out.push_str(",label");
        }
        out.push('\n');
        for s in &self.samples {
            let cells: Vec<String> = match &s.tokens {
                Tokens::Discrete(ids) => ids.iter().map(u16::to_string).collect(),
                Tokens::Continuous { values, .. } => values.iter().map(|v| format!("{v:?}")).collect(),
            };
            out.push_str(&cells.join(","));
            match s.label {
                Some(Label::Class(c)) => out.push_str(&format!(",{c}")),
                Some(Label::Value(v)) => out.push_str(&format!(",{v:?}")),
                None => {}
            }
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Synthetic data whose positions fall into groups of highly correlated tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedSpec {
    pub n: usize,
    pub groups: usize,
    pub samples: usize,
    pub sigma: f64,
    /// Scatter group members over random positions instead of contiguous runs.
    pub shuffle_positions: bool,
}

impl GroupedSpec {
    /// Group id of each position.
    pub fn assignment(&self, rng: &Rng) -> Result<Vec<usize>> {
        if self.groups == 0 || !self.n.is_multiple_of(self.groups) {
            return Err(Error::Data(format!(
                "{} groups do not evenly divide sequence length {}",
                self.groups, self.n
            )));
        }
        let size = self.n / self.groups;
        let mut assign: Vec<usize> = (0..self.n).map(|i| i / size).collect();
        if self.shuffle_positions {
            rng.fork(0x6772_6f75_70).shuffle(&mut assign);
        }
        Ok(assign)
    }

    /// Each sample draws one standard-normal latent per group; every member
    /// of the group equals that latent plus `sigma`-scaled noise. The label
    /// is 1 when the sum of the group latents is positive, else 0.
    pub fn generate(&self, rng: &mut Rng) -> Result<Dataset> {
        if !(self.sigma >= 0.0) {
            return Err(Error::OutOfRange {
                what: "noise sigma",
                value: self.sigma,
                expected: ">= 0",
            });
        }
        let assign = self.assignment(rng)?;
        let mut samples = Vec::with_capacity(self.samples);
        for _ in 0..self.samples {
            let latents: Vec<f64> = (0..self.groups).map(|_| rng.normal()).collect();
            let values = assign.iter().map(|&g| latents[g] + self.sigma * rng.normal()).collect();
            let label = Label::Class(usize::from(latents.iter().sum::<f64>() > 0.0));
            samples.push(Sample {
                tokens: Tokens::continuous(values),
                label: Some(label),
            });
        }
        let mut ds = Dataset::new(Modality::Continuous, self.n, 1, samples)?;
        ds.groups = Some(assign);
        Ok(ds)
    }
}

pub fn gen_grouped_tokens(
    n: usize,
    num_groups: usize,
    num_samples: usize,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    GroupedSpec {
        n,
        groups: num_groups,
        samples: num_samples,
        sigma: noise_sigma,
        shuffle_positions: false,
    }
    .generate(rng)
}

/// Per-position standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Columns with a smaller standard deviation are only centered.
pub const MIN_STD: f64 = 1e-12;

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.modality != Modality::Continuous || ds.is_empty() {
            return Err(Error::Data("standardization needs non-empty continuous data".into()));
        }
        let cols = ds.n * ds.d_raw;
        let mut mean = vec![0.0; cols];
        for s in &ds.samples {
            if let Tokens::Continuous { values, .. } = &s.tokens {
                for (m, v) in mean.iter_mut().zip(values) {
                    *m += v;
                }
            }
        }
        let count = ds.len() as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; cols];
        for s in &ds.samples {
            if let Tokens::Continuous { values, .. } = &s.tokens {
                for ((acc, v), m) in var.iter_mut().zip(values).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let std = var.into_iter().map(|v| (v / count).sqrt()).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, ds: &mut Dataset) {
        for s in &mut ds.samples {
            if let Tokens::Continuous { values, .. } = &mut s.tokens {
                for ((v, m), sd) in values.iter_mut().zip(&self.mean).zip(&self.std) {
                    *v -= m;
                    if *sd >= MIN_STD {
                        *v /= sd;
                    }
                }
            }
        }
    }
}

/// Which CSV column carries the downstream label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelColumn {
    pub index: usize,
    pub classification: bool,
}

/// Reads a dense numeric CSV; every non-label column becomes one scalar token.
///
/// A first row containing any non-numeric cell is treated as a header.
/// With `normalize`, the returned dataset is standardized with statistics
/// fitted on this file, and those statistics are returned for reuse on
/// other splits.
pub fn load_csv_tabular(
    path: &Path,
    label: Option<LabelColumn>,
    normalize: bool,
) -> Result<(Dataset, Option<Standardizer>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut width = None;
    let mut samples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Vec<Option<f64>> = cells.iter().map(|c| c.parse::<f64>().ok()).collect();
        if samples.is_empty() && width.is_none() && parsed.iter().any(Option::is_none) {
            width = Some(cells.len());
            continue;
        }
        match width {
            Some(w) if w != cells.len() => {
                return Err(parse_err(
                    lineno,
                    format!("expected {w} columns, found {}", cells.len()),
                ))
            }
            None => width = Some(cells.len()),
            _ => {}
        }
        let mut values = Vec::with_capacity(cells.len());
        let mut lab = None;
        for (c, (cell, v)) in cells.iter().zip(&parsed).enumerate() {
            let v = v.ok_or_else(|| parse_err(lineno, format!("column {c}: '{cell}' is not a number")))?;
            match label {
                Some(l) if l.index == c => {
                    lab = Some(if l.classification {
                        if v < 0.0 || v.fract() != 0.0 {
                            return Err(parse_err(
                                lineno,
                                format!("class label '{cell}' is not a non-negative integer"),
                            ));
                        }
                        Label::Class(v as usize)
                    } else {
                        Label::Value(v)
                    });
                }
                _ => values.push(v),
            }
        }
        if let Some(l) = label {
            if l.index >= cells.len() {
                return Err(parse_err(lineno, format!("label column {} out of range", l.index)));
            }
        }
        samples.push(Sample {
            tokens: Tokens::continuous(values),
            label: lab,
        });
    }
    let n = samples.first().map_or(0, |s| s.tokens.len());
    if n == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let mut ds = Dataset::new(Modality::Continuous, n, 1, samples)?;
    let stats = if normalize {
        let st = Standardizer::fit(&ds)?;
        st.apply(&mut ds);
        Some(st)
    } else {
        None
    };
    Ok((ds, stats))
}

/// Splits a byte stream into padded chunks of `n` bytes.
pub fn load_text_utf8(path: &Path, n: usize) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let samples = bytes
        .chunks(n)
        .map(|chunk| {
            Ok(Sample {
                tokens: Tokens::Discrete(encode_discrete(chunk, n)?),
                label: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(Modality::Discrete, n, 1, samples)
}

fn check_permutation(p: &[usize], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::InvalidPermutation(format!(
            "length {} for sequence length {n}",
            p.len()
        )));
    }
    let mut seen = vec![false; n];
    for &i in p {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidPermutation(format!("{i} is out of range or repeated")));
        }
    }
    Ok(())
}

pub fn invert_permutation(p: &[usize]) -> Result<Vec<usize>> {
    check_permutation(p, p.len())?;
    let mut inv = vec![0; p.len()];
    for (j, &i) in p.iter().enumerate() {
        inv[i] = j;
    }
    Ok(inv)
}

/// Reorders the positions of every sample: new position `j` takes old
/// position `p[j]`. Group assignments move with their positions.
pub fn permute_dataset(ds: &Dataset, p: &[usize]) -> Result<Dataset> {
    check_permutation(p, ds.n)?;
    Ok(Dataset {
        modality: ds.modality,
        n: ds.n,
        d_raw: ds.d_raw,
        samples: ds
            .samples
            .iter()
            .map(|s| Sample {
                tokens: s.tokens.permuted(p),
                label: s.label,
            })
            .collect(),
        groups: ds.groups.as_ref().map(|g| p.iter().map(|&i| g[i]).collect()),
    })
}

/// Seeded disjoint `(train, val, test)` partition.
///
/// Validation and test sizes are the rounded fractions of the dataset;
/// train takes the remainder. A positive fraction that rounds to an empty
/// partition is an error.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::Data(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let len = ds.len();
    let n_val = (fractions[1] * len as f64).round() as usize;
    let n_test = (fractions[2] * len as f64).round() as usize;
    let n_train = len.saturating_sub(n_val + n_test);
    for (f, size, name) in [
        (fractions[0], n_train, "train"),
        (fractions[1], n_val, "val"),
        (fractions[2], n_test, "test"),
    ] {
        if f > 0.0 && size == 0 {
            return Err(Error::Data(format!(
                "{name} partition of {len} samples at fraction {f} is empty"
            )));
        }
    }
    let mut order: Vec<usize> = (0..len).collect();
    Rng::new(seed).shuffle(&mut order);
    let take = |range: std::ops::Range<usize>| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        ds.subset(&idx)
    };
    Ok((
        take(0..n_train),
        take(n_train..n_train + n_val),
        take(n_train + n_val..len),
    ))
}
