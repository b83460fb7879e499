use std::collections::BTreeMap;

use crate::attention::AttentionKind;
use crate::data::{Modality, Task};
use crate::error::{Error, Result};
use crate::masker::MaskMode;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: AttentionKind,
    pub modality: Modality,
    /// Sequence length.
    pub n: usize,
    /// Feature width of a continuous token (1 for discrete data).
    pub d_raw: usize,
    pub d_embed: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    /// Latent query count `l`; ignored for self-attention, where `l = n`.
    pub latents: usize,
    /// Transformer blocks after the first attention layer.
    pub layers: usize,
    /// Default masking ratio.
    pub ratio: f64,
    /// Query-subset size override; `None` means `max(1, round(l·r))`.
    pub query_count: Option<usize>,
    pub init_std: f64,
}

impl ModelConfig {
    /// Tabular physics defaults: 28 scalar tokens, self-attention.
    pub fn physics(mode: MaskMode) -> Self {
        ModelConfig {
            kind: AttentionKind::SelfAttention,
            modality: Modality::Continuous,
            n: 28,
            d_raw: 1,
            d_embed: 128,
            d_k: 128,
            d_v: 128,
            heads: 8,
            latents: 28,
            layers: 4,
            ratio: if mode == MaskMode::Random { 0.5 } else { 0.2 },
            query_count: None,
            init_std: 0.02,
        }
    }

    /// Byte-sequence defaults with a 256-latent cross-attention encoder.
    pub fn protein(mode: MaskMode) -> Self {
        ModelConfig {
            kind: AttentionKind::Cross,
            modality: Modality::Discrete,
            n: 1024,
            d_raw: 1,
            d_embed: 512,
            d_k: 256,
            d_v: 1024,
            heads: 8,
            latents: 256,
            layers: 16,
            ratio: if mode == MaskMode::Random { 0.2 } else { 0.15 },
            query_count: None,
            init_std: 0.02,
        }
    }

    /// Small continuous model for tests and gradient checks.
    pub fn tiny(kind: AttentionKind) -> Self {
        ModelConfig {
            kind,
            modality: Modality::Continuous,
            n: 8,
            d_raw: 1,
            d_embed: 16,
            d_k: 16,
            d_v: 16,
            heads: 2,
            latents: 4,
            layers: 2,
            ratio: 0.25,
            query_count: None,
            init_std: 0.02,
        }
    }

    /// Number of encoder rows before masking.
    pub fn l(&self) -> usize {
        match self.kind {
            AttentionKind::SelfAttention => self.n,
            AttentionKind::Cross => self.latents,
        }
    }

    /// Width of the reconstruction head.
    pub fn output_width(&self) -> usize {
        match self.modality {
            Modality::Discrete => crate::embedding::BYTE_VOCAB,
            Modality::Continuous => self.d_raw,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n == 0 || self.d_raw == 0 || self.d_embed == 0 || self.d_k == 0 || self.d_v == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.heads == 0 || !self.d_k.is_multiple_of(self.heads) || !self.d_v.is_multiple_of(self.heads) {
            return bad(format!(
                "d_k={} and d_v={} must be divisible by heads={}",
                self.d_k, self.d_v, self.heads
            ));
        }
        if self.modality == Modality::Discrete && self.d_raw != 1 {
            return bad("discrete tokens have d_raw = 1".into());
        }
        if self.kind == AttentionKind::Cross && !(1..self.n).contains(&self.latents) {
            return bad(format!(
                "cross-attention needs 1 <= latents < n, got {} for n={}",
                self.latents, self.n
            ));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return bad(format!("masking ratio {} outside (0, 1)", self.ratio));
        }
        if let Some(q) = self.query_count {
            if q == 0 || q > self.l() {
                return bad(format!("query_count {q} outside 1..={}", self.l()));
            }
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }

    /// Flat `key → value` form used by checkpoints and run manifests.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("attention", self.kind.as_str().into());
        put(
            "modality",
            match self.modality {
                Modality::Discrete => "discrete",
                Modality::Continuous => "continuous",
            }
            .into(),
        );
        put("n", self.n.to_string());
        put("d_raw", self.d_raw.to_string());
        put("d_embed", self.d_embed.to_string());
        put("d_k", self.d_k.to_string());
        put("d_v", self.d_v.to_string());
        put("heads", self.heads.to_string());
        put("latents", self.latents.to_string());
        put("layers", self.layers.to_string());
        put("ratio", format!("{:?}", self.ratio));
        put("query_count", self.query_count.map_or("auto".into(), |q| q.to_string()));
        put("init_std", format!("{:?}", self.init_std));
        m
    }

    /// Overrides fields from `pairs`; keys not describing the model are
    /// returned for the caller to handle.
    pub fn apply_pairs<'a>(
        &mut self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Vec<(&'a str, &'a str)>> {
        let mut rest = Vec::new();
        for (k, v) in pairs {
            match k {
                "attention" => self.kind = v.parse()?,
                "modality" => self.modality = parse_modality(v)?,
                "n" => self.n = parse(k, v)?,
                "d_raw" => self.d_raw = parse(k, v)?,
                "d_embed" => self.d_embed = parse(k, v)?,
                "d_k" => self.d_k = parse(k, v)?,
                "d_v" => self.d_v = parse(k, v)?,
                "heads" => self.heads = parse(k, v)?,
                "latents" => self.latents = parse(k, v)?,
                "layers" => self.layers = parse(k, v)?,
                "ratio" => self.ratio = parse(k, v)?,
                "query_count" => self.query_count = if v == "auto" { None } else { Some(parse(k, v)?) },
                "init_std" => self.init_std = parse(k, v)?,
                _ => rest.push((k, v)),
            }
        }
        Ok(rest)
    }
}

pub fn parse_modality(v: &str) -> Result<Modality> {
    match v {
        "discrete" => Ok(Modality::Discrete),
        "continuous" => Ok(Modality::Continuous),
        other => Err(Error::Config(format!("unknown modality '{other}'"))),
    }
}

pub fn parse_task(v: &str) -> Result<Option<Task>> {
    match v.split_once(':') {
        _ if v == "none" => Ok(None),
        _ if v == "regression" => Ok(Some(Task::Regression)),
        Some(("classification", c)) => Ok(Some(Task::Classification {
            classes: parse("classes", c)?,
        })),
        _ => Err(Error::Config(format!("unknown task '{v}'"))),
    }
}

pub fn task_str(task: Option<Task>) -> String {
    match task {
        None => "none".into(),
        Some(Task::Regression) => "regression".into(),
        Some(Task::Classification { classes }) => format!("classification:{classes}"),
    }
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
}
