//! Flat `key=value` run configuration shared by every subcommand.
//!
//! Values come from an optional config file, then command-line flags; later
//! assignments win. Every key has a default, and unknown keys are errors.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sma_core::attention::AttentionKind;
use sma_core::masker::MaskMode;
use sma_core::model::ModelConfig;
use sma_core::trainer::TrainConfig;

use crate::CliError;

/// Keys handled by [`ModelConfig::apply_pairs`].
const MODEL_KEYS: &[&str] = &[
    "attention",
    "modality",
    "n",
    "d_raw",
    "d_embed",
    "d_k",
    "d_v",
    "heads",
    "latents",
    "layers",
    "ratio",
    "query_count",
    "init_std",
];

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "preset",
    "attention",
    "modality",
    "n",
    "d_raw",
    "d_embed",
    "d_k",
    "d_v",
    "heads",
    "latents",
    "layers",
    "ratio",
    "query_count",
    "init_std",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "steps",
    "batch_size",
    "warmup_frac",
    "seed",
    "mask",
    "clip_norm",
    "checkpoint_every",
    "data",
    "label_column",
    "task",
    "normalize",
    "split",
    "out",
    "checkpoint",
    "scratch",
    "part",
    "count",
    "dump_width",
    "n_list",
    "m",
    "k",
    "repeats",
    "inject_fault",
];

/// Which partition `eval` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    All,
    Train,
    Val,
    Test,
}

impl Part {
    pub fn as_str(self) -> &'static str {
        match self {
            Part::All => "all",
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        }
    }
}

impl FromStr for Part {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "all" => Ok(Part::All),
            "train" => Ok(Part::Train),
            "val" => Ok(Part::Val),
            "test" => Ok(Part::Test),
            other => Err(CliError::Config(format!(
                "unknown part '{other}' (all, train, val, test)"
            ))),
        }
    }
}

/// Resolved settings for one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<String>,
    /// CSV column holding the label.
    pub label_column: Option<usize>,
    /// CSV labels are class ids (`true`) or real values.
    pub classification: bool,
    pub normalize: bool,
    pub split: [f64; 3],
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub scratch: bool,
    pub part: Part,
    pub count: usize,
    pub dump_width: Option<usize>,
    pub n_list: Vec<usize>,
    pub m: usize,
    pub k: Option<usize>,
    pub repeats: usize,
    pub inject_fault: Option<f64>,
    /// Keys that were assigned explicitly rather than defaulted.
    pub explicit: BTreeSet<String>,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("invalid value '{v}' for '{key}'")))
}

fn optional<T: FromStr>(key: &str, v: &str, none: &str) -> Result<Option<T>, CliError> {
    if v == none {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!("invalid boolean '{v}' for '{key}'"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

/// Base architecture for a preset name.
pub fn preset(name: &str, mask: MaskMode) -> Result<ModelConfig, CliError> {
    match name {
        "tiny" => Ok(ModelConfig::tiny(AttentionKind::Cross)),
        "tiny-self" => Ok(ModelConfig::tiny(AttentionKind::SelfAttention)),
        "physics" => Ok(ModelConfig::physics(mask)),
        "protein" => Ok(ModelConfig::protein(mask)),
        other => Err(CliError::Config(format!(
            "unknown preset '{other}' (tiny, tiny-self, physics, protein)"
        ))),
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key=value, got '{line}'", i + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_pairs(&text, &path.display().to_string())
}

impl RunConfig {
    /// Applies `pairs` in order over the defaults.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, CliError> {
        let mut last: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(CliError::Config(format!("unknown key '{k}'")));
            }
            last.insert(k, v);
        }
        let get = |k: &str| last.get(k).copied();

        let mut train = TrainConfig::default();
        if let Some(v) = get("mask") {
            train.mask = v.parse()?;
        }
        let preset_name = get("preset").unwrap_or("tiny").to_string();
        let mut model = preset(&preset_name, train.mask)?;
        let model_pairs = last
            .iter()
            .filter(|(k, _)| MODEL_KEYS.contains(k))
            .map(|(k, v)| (*k, *v));
        let rest = model.apply_pairs(model_pairs)?;
        debug_assert!(rest.is_empty());
        train.ratio = model.ratio;

        let mut cfg = RunConfig {
            preset: preset_name,
            model,
            train,
            data: None,
            label_column: None,
            classification: true,
            normalize: false,
            split: [0.8, 0.1, 0.1],
            out: PathBuf::from("sma-out"),
            checkpoint: None,
            scratch: false,
            part: Part::All,
            count: 10,
            dump_width: None,
            n_list: vec![1024, 36864],
            m: 64,
            k: None,
            repeats: 5,
            inject_fault: None,
            explicit: last.keys().map(|k| k.to_string()).collect(),
        };
        let t = &mut cfg.train;
        for (&k, &v) in &last {
            match k {
                "lr" => t.lr = parse(k, v)?,
                "weight_decay" => t.weight_decay = parse(k, v)?,
                "beta1" => t.beta1 = parse(k, v)?,
                "beta2" => t.beta2 = parse(k, v)?,
                "eps" => t.eps = parse(k, v)?,
                "steps" => t.steps = parse(k, v)?,
                "batch_size" => t.batch_size = parse(k, v)?,
                "warmup_frac" => t.warmup_frac = parse(k, v)?,
                "seed" => t.seed = parse(k, v)?,
                "clip_norm" => t.clip_norm = optional(k, v, "none")?,
                "checkpoint_every" => t.checkpoint_every = parse(k, v)?,
                _ => {}
            }
        }
        for (&k, &v) in &last {
            match k {
                "data" => cfg.data = Some(v.to_string()),
                "label_column" => cfg.label_column = optional(k, v, "none")?,
                "task" => {
                    cfg.classification = match v {
                        "classification" => true,
                        "regression" => false,
                        _ => {
                            return Err(CliError::Config(format!(
                                "unknown task '{v}' (classification, regression)"
                            )))
                        }
                    }
                }
                "normalize" => cfg.normalize = parse_bool(k, v)?,
                "split" => {
                    let parts: Vec<f64> = parse_list(k, v)?;
                    cfg.split = parts
                        .try_into()
                        .map_err(|_| CliError::Config(format!("split needs three fractions, got '{v}'")))?;
                }
                "out" => cfg.out = PathBuf::from(v),
                "checkpoint" => cfg.checkpoint = optional(k, v, "none")?,
                "scratch" => cfg.scratch = parse_bool(k, v)?,
                "part" => cfg.part = v.parse()?,
                "count" => cfg.count = parse(k, v)?,
                "dump_width" => cfg.dump_width = optional(k, v, "auto")?,
                "n_list" => cfg.n_list = parse_list(k, v)?,
                "m" => cfg.m = parse(k, v)?,
                "k" => cfg.k = optional(k, v, "auto")?,
                "repeats" => cfg.repeats = parse(k, v)?,
                "inject_fault" => cfg.inject_fault = optional(k, v, "none")?,
                _ => {}
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Every key with its resolved value; feeding this back reproduces the run.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = self.model.to_pairs();
        let t = &self.train;
        let none = |o: Option<String>, s: &str| o.unwrap_or_else(|| s.to_string());
        let path = |p: &Option<PathBuf>| none(p.as_ref().map(|p| p.display().to_string()), "none");
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let entries = [
            ("preset", self.preset.clone()),
            ("lr", format!("{:?}", t.lr)),
            ("weight_decay", format!("{:?}", t.weight_decay)),
            ("beta1", format!("{:?}", t.beta1)),
            ("beta2", format!("{:?}", t.beta2)),
            ("eps", format!("{:?}", t.eps)),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("warmup_frac", format!("{:?}", t.warmup_frac)),
            ("seed", t.seed.to_string()),
            ("mask", t.mask.as_str().to_string()),
            ("clip_norm", none(t.clip_norm.map(|c| format!("{c:?}")), "none")),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("data", none(self.data.clone(), "none")),
            ("label_column", none(self.label_column.map(|c| c.to_string()), "none")),
            (
                "task",
                if self.classification {
                    "classification"
                } else {
                    "regression"
                }
                .to_string(),
            ),
            ("normalize", self.normalize.to_string()),
            (
                "split",
                self.split
                    .iter()
                    .map(|f| format!("{f:?}"))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("out", self.out.display().to_string()),
            ("checkpoint", path(&self.checkpoint)),
            ("scratch", self.scratch.to_string()),
            ("part", self.part.as_str().to_string()),
            ("count", self.count.to_string()),
            ("dump_width", none(self.dump_width.map(|w| w.to_string()), "auto")),
            ("n_list", list(&self.n_list)),
            ("m", self.m.to_string()),
            ("k", none(self.k.map(|k| k.to_string()), "auto")),
            ("repeats", self.repeats.to_string()),
            (
                "inject_fault",
                none(self.inject_fault.map(|f| format!("{f:?}")), "none"),
            ),
        ];
        for (k, v) in entries {
            m.insert(k.to_string(), v);
        }
        if self.data.is_none() {
            m.remove("data");
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn later_assignments_win() {
        let c = RunConfig::from_pairs(&pairs(&[("steps", "5"), ("ratio", "0.5"), ("steps", "7")])).unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!((c.model.ratio, c.train.ratio), (0.5, 0.5));
        assert!(c.is_explicit("steps") && !c.is_explicit("lr"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for bad in [
            ("stepz", "1"),
            ("steps", "-1"),
            ("mask", "sometimes"),
            ("split", "0.5,0.5"),
            ("preset", "huge"),
        ] {
            let err = RunConfig::from_pairs(&pairs(&[bad])).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{bad:?}: {err}");
        }
    }

    #[test]
    fn resolved_pairs_round_trip() {
        let c = RunConfig::from_pairs(&pairs(&[
            ("preset", "physics"),
            ("data", "synthetic:n=28"),
            ("clip_norm", "1.5"),
            ("n_list", "8,16"),
        ]))
        .unwrap();
        let echo: Vec<(String, String)> = c.to_pairs().into_iter().collect();
        assert_eq!(RunConfig::from_pairs(&echo).unwrap().to_pairs(), c.to_pairs());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let p = parse_pairs("# run\n\nsteps = 3\nmask=random\n", "t").unwrap();
        assert_eq!(p, pairs(&[("steps", "3"), ("mask", "random")]));
        assert!(parse_pairs("steps\n", "t").is_err());
    }
}
