//! Data source strings accepted by `--data`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use sma_core::data::{load_csv_tabular, load_text_utf8, Dataset, GroupedSpec, LabelColumn, Standardizer};
use sma_core::rng::Rng;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { spec: GroupedSpec, seed: u64 },
    Csv(PathBuf),
    Text(PathBuf),
}

/// Seed stream for synthetic generation, kept apart from every training stream.
const SYNTHETIC_STREAM: u64 = 0x7379_6e74;

impl DataSource {
    /// `synthetic:groups=8,n=32,...`, `text:<path>`, `csv:<path>` or a bare CSV path.
    pub fn parse(s: &str) -> Result<Self, CliError> {
        if let Some(opts) = s.strip_prefix("synthetic") {
            let opts = opts.strip_prefix(':').unwrap_or(opts);
            let mut spec = GroupedSpec {
                n: 32,
                groups: 8,
                samples: 4096,
                sigma: 0.01,
                shuffle_positions: false,
            };
            let mut seed = 0;
            for item in opts.split(',').filter(|i| !i.trim().is_empty()) {
                let (k, v) = item
                    .split_once('=')
                    .ok_or_else(|| CliError::Config(format!("synthetic option '{item}' is not key=value")))?;
                let bad = || CliError::Config(format!("invalid synthetic option '{item}'"));
                match k.trim() {
                    "n" => spec.n = v.parse().map_err(|_| bad())?,
                    "groups" => spec.groups = v.parse().map_err(|_| bad())?,
                    "samples" => spec.samples = v.parse().map_err(|_| bad())?,
                    "sigma" => spec.sigma = v.parse().map_err(|_| bad())?,
                    "seed" => seed = v.parse().map_err(|_| bad())?,
                    "shuffle" => spec.shuffle_positions = v.parse().map_err(|_| bad())?,
                    other => return Err(CliError::Config(format!("unknown synthetic option '{other}'"))),
                }
            }
            Ok(DataSource::Synthetic { spec, seed })
        } else if let Some(p) = s.strip_prefix("text:") {
            Ok(DataSource::Text(PathBuf::from(p)))
        } else if let Some(p) = s.strip_prefix("csv:") {
            Ok(DataSource::Csv(PathBuf::from(p)))
        } else if s.is_empty() || s == "none" {
            Err(CliError::Config("no data source given; pass --data".into()))
        } else {
            Ok(DataSource::Csv(PathBuf::from(s)))
        }
    }

    /// Loads the whole source. Normalization is left to the caller so that
    /// statistics can be fitted on a training split.
    pub fn load(&self, cfg: &RunConfig) -> Result<Dataset, CliError> {
        match self {
            DataSource::Synthetic { spec, seed } => Ok(spec.generate(&mut Rng::new(*seed).fork(SYNTHETIC_STREAM))?),
            DataSource::Csv(path) => {
                let label = cfg.label_column.map(|index| LabelColumn {
                    index,
                    classification: cfg.classification,
                });
                Ok(load_csv_tabular(path, label, false)?.0)
            }
            DataSource::Text(path) => {
                if !cfg.is_explicit("n") {
                    return Err(CliError::Config("text data needs an explicit sequence length n".into()));
                }
                Ok(load_text_utf8(path, cfg.model.n)?)
            }
        }
    }

    /// Content hash identifying this input.
    pub fn fingerprint(&self) -> Result<String, CliError> {
        match self {
            DataSource::Synthetic { spec, seed } => Ok(blob_sha256(
                format!(
                    "synthetic:groups={},n={},sigma={:?},samples={},seed={seed},shuffle={}",
                    spec.groups, spec.n, spec.sigma, spec.samples, spec.shuffle_positions
                )
                .as_bytes(),
            )),
            DataSource::Csv(path) | DataSource::Text(path) => file_sha256(path),
        }
    }
}

/// SHA-256 of `blob <len>\0` followed by the content, as lowercase hex.
pub fn blob_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(blob_sha256(&bytes))
}

/// Standardizes continuous data in place when `normalize` is set; returns
/// the fitted statistics for reuse on held-out splits.
pub fn maybe_normalize(cfg: &RunConfig, ds: &mut Dataset) -> Result<Option<Standardizer>, CliError> {
    if !cfg.normalize {
        return Ok(None);
    }
    let st = Standardizer::fit(ds)?;
    st.apply(ds);
    Ok(Some(st))
}
