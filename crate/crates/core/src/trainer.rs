//! Optimization loops: AdamW with decoupled weight decay, seeded batch
//! order and mask streams, checkpoints and a tab-separated metrics log.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{Dataset, Label, Sample, Task};
use crate::error::{Error, Result};
use crate::masker::MaskMode;
use crate::model::{MaskSource, Prediction, SmaModel};
use crate::ndtensor::{Bound, Graph, Params, Var};
use crate::rng::Rng;

const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_HEAD: u64 = 4;

/// Generator for model initialization under `seed`.
pub fn init_rng(seed: u64) -> Rng {
    Rng::new(seed).fork(STREAM_INIT)
}

/// Generator for downstream head initialization under `seed`.
pub fn head_rng(seed: u64) -> Rng {
    Rng::new(seed).fork(STREAM_HEAD)
}

/// Mask stream of sample `i` at `step`.
pub fn mask_rng(seed: u64, step: usize, i: usize) -> Rng {
    Rng::new(seed).fork(STREAM_MASK).fork(step as u64).fork(i as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub ratio: f64,
    /// Fraction of steps with linearly increasing learning rate.
    pub warmup_frac: f64,
    pub seed: u64,
    pub mask: MaskMode,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Also write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 1000,
            batch_size: 256,
            ratio: 0.2,
            warmup_frac: 0.01,
            seed: 0,
            mask: MaskMode::Guided,
            clip_norm: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name}={b} outside (0, 1)"));
            }
        }
        if self.mask != MaskMode::None && !(self.ratio > 0.0 && self.ratio < 1.0) {
            return bad(format!("masking ratio {} outside (0, 1)", self.ratio));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("lr and weight_decay must be >= 0, eps > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac {} outside [0, 1]", self.warmup_frac));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).ceil() as usize
    }

    /// Learning rate for the zero-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            self.lr * (step + 1) as f64 / w as f64
        } else {
            self.lr
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &Params, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn from_config(params: &Params, c: &TrainConfig) -> Self {
        Self::new(params, c.beta1, c.beta2, c.eps, c.weight_decay)
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// `θ ← θ·(1 − lr·wd)`, then the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut Params, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let decay = 1.0 - lr * self.weight_decay;
        for (((t, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if g.len() != t.numel() {
                return Err(Error::Contract("gradient length does not match parameter".into()));
            }
            for (((p, &g), m), v) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p *= decay;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
    /// Masked positions per sample, averaged over the batch.
    pub mask_count: f64,
}

/// One forward/backward/update on the loss built by `forward`.
pub fn optimize_step<F>(
    params: &mut Params,
    opt: &mut AdamW,
    config: &TrainConfig,
    step: usize,
    forward: F,
) -> Result<(f64, f64)>
where
    F: FnOnce(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let loss_var = forward(&mut g, &vars)?;
    let loss = g.value(loss_var).item();
    let lr = config.lr_at(step);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            lr,
            loss,
            grad_norm: f64::NAN,
        });
    }
    g.backward(loss_var)?;
    let mut grads = vars.grads(&g);
    let grad_norm = global_norm(&grads);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            step,
            lr,
            loss,
            grad_norm,
        });
    }
    if let Some(c) = config.clip_norm {
        if grad_norm > c {
            let s = c / grad_norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    opt.step(params, &grads, lr)?;
    Ok((loss, grad_norm))
}

/// Mask sources for a batch at `step`.
pub fn mask_sources(config: &TrainConfig, step: usize, batch: usize) -> Result<Vec<MaskSource>> {
    (0..batch)
        .map(|i| {
            let rng = mask_rng(config.seed, step, i);
            match config.mask {
                MaskMode::Guided => Ok(MaskSource::Guided {
                    rng,
                    ratio: config.ratio,
                }),
                MaskMode::Random => Ok(MaskSource::Random {
                    rng,
                    ratio: config.ratio,
                }),
                MaskMode::None => Err(Error::Config("pretraining requires masking (guided or random)".into())),
            }
        })
        .collect()
}

/// Runs `optimize_step` on the model's own parameters. The graph is built
/// from bound variables only, so the parameters can be moved out while the
/// rest of the model is borrowed.
fn model_step<F>(
    model: &mut SmaModel,
    opt: &mut AdamW,
    config: &TrainConfig,
    step: usize,
    forward: F,
) -> Result<(f64, f64)>
where
    F: FnOnce(&SmaModel, &mut Graph, &Bound) -> Result<Var>,
{
    let mut params = std::mem::replace(&mut model.params, Params::new());
    let result = optimize_step(&mut params, opt, config, step, |g, vars| forward(model, g, vars));
    model.params = params;
    result
}

/// One pretraining update on `batch`.
pub fn train_step(
    model: &mut SmaModel,
    opt: &mut AdamW,
    batch: &[Sample],
    config: &TrainConfig,
    step: usize,
) -> Result<StepReport> {
    let mut sources = mask_sources(config, step, batch.len())?;
    let mut masked = 0usize;
    let (loss, grad_norm) = model_step(model, opt, config, step, |m, g, vars| {
        let (loss, samples) = m.pretrain_graph(g, vars, batch, &mut sources)?;
        masked = samples.iter().map(|s| s.mask.count()).sum();
        Ok(loss)
    })?;
    Ok(StepReport {
        loss,
        grad_norm,
        mask_count: masked as f64 / batch.len() as f64,
    })
}

/// One supervised update on `batch`.
pub fn finetune_step(
    model: &mut SmaModel,
    opt: &mut AdamW,
    batch: &[Sample],
    config: &TrainConfig,
    step: usize,
) -> Result<f64> {
    model_step(model, opt, config, step, |m, g, vars| m.finetune_graph(g, vars, batch)).map(|(l, _)| l)
}

/// Seeded epoch-wise batch order. Each epoch is a fresh shuffle; a trailing
/// partial batch is dropped unless the dataset is smaller than one batch.
#[derive(Clone, Debug)]
pub struct Batcher {
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl Batcher {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("dataset is empty".into()));
        }
        Ok(Batcher {
            rng: Rng::new(seed).fork(STREAM_ORDER),
            order: (0..len).collect(),
            cursor: len,
            batch: batch.min(len),
        })
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }

    pub fn next_batch(&mut self, ds: &Dataset) -> Vec<Sample> {
        self.next_indices().into_iter().map(|i| ds.samples[i].clone()).collect()
    }
}

/// Where a loop writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub mask_counts: Vec<f64>,
}

fn periodic_path(path: &Path, step: usize) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("bin");
    path.with_file_name(format!("{stem}-step{step}.{ext}"))
}

/// Metrics line `step<TAB>loss<TAB>mask_count<TAB>wall_ms`.
pub fn metrics_line(step: usize, loss: f64, mask_count: f64, wall_ms: f64) -> String {
    format!("{step}\t{loss:?}\t{mask_count}\t{wall_ms:.3}")
}

/// Masked pretraining for `config.steps` updates.
pub fn pretrain_loop(
    model: &mut SmaModel,
    ds: &Dataset,
    config: &TrainConfig,
    out: &Outputs,
) -> Result<PretrainReport> {
    config.validate()?;
    if config.mask == MaskMode::None {
        return Err(Error::Config("pretraining requires masking (guided or random)".into()));
    }
    if ds.n != model.config.n {
        return Err(Error::Config(format!(
            "data n={} does not match model n={}",
            ds.n, model.config.n
        )));
    }
    let mut batcher = Batcher::new(ds.len(), config.batch_size, config.seed)?;
    let mut opt = AdamW::from_config(&model.params, config);
    let mut log = match &out.metrics {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let mut report = PretrainReport {
        losses: Vec::with_capacity(config.steps),
        mask_counts: Vec::with_capacity(config.steps),
    };
    for step in 0..config.steps {
        let start = Instant::now();
        let batch = batcher.next_batch(ds);
        let r = train_step(model, &mut opt, &batch, config, step)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        if let (Some(w), Some(p)) = (&mut log, &out.metrics) {
            writeln!(w, "{}", metrics_line(step, r.loss, r.mask_count, wall_ms)).map_err(|e| Error::io(p, e))?;
        }
        report.losses.push(r.loss);
        report.mask_counts.push(r.mask_count);
        if let Some(p) = &out.checkpoint {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < config.steps {
                model.save(&periodic_path(p, step + 1))?;
            }
        }
    }
    if let (Some(w), Some(p)) = (&mut log, &out.metrics) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = &out.checkpoint {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        model.save(p)?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Rmse,
}

impl Metric {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Classification { .. } => Metric::Accuracy,
            Task::Regression => Metric::Rmse,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Rmse => "rmse",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub train_losses: Vec<f64>,
    /// Mean supervised loss on the held-out split.
    pub val_loss: f64,
    pub metric: Metric,
    pub value: f64,
}

/// Supervised training, attaching a head for the dataset's task when the
/// model has none. Reports loss and metric on `val`.
pub fn finetune_loop(
    model: &mut SmaModel,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<FinetuneReport> {
    config.validate()?;
    if train.is_empty() || !train.is_labeled() {
        return Err(Error::Data("fine-tuning needs at least one labeled sample".into()));
    }
    if train.n != model.config.n {
        return Err(Error::Config(format!(
            "data n={} does not match model n={}",
            train.n, model.config.n
        )));
    }
    let task = train
        .task()
        .ok_or_else(|| Error::Data("cannot infer task from labels".into()))?;
    if model.head.as_ref().map(|h| h.task) != Some(task) {
        model.attach_head(task, &mut head_rng(config.seed));
    }
    let mut batcher = Batcher::new(train.len(), config.batch_size, config.seed)?;
    let mut opt = AdamW::from_config(&model.params, config);
    let mut train_losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = batcher.next_batch(train);
        train_losses.push(finetune_step(model, &mut opt, &batch, config, step)?);
    }
    let metric = Metric::for_task(task);
    Ok(FinetuneReport {
        train_losses,
        val_loss: supervised_loss(model, val)?,
        metric,
        value: evaluate(model, val, metric)?,
    })
}

/// Mean supervised loss over a whole dataset.
pub fn supervised_loss(model: &SmaModel, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let mut total = 0.0;
    for chunk in ds.samples.chunks(64) {
        total += model.finetune_forward(chunk)? * chunk.len() as f64;
    }
    Ok(total / ds.len() as f64)
}

/// Accuracy (argmax, ties to the lower class) or root-mean-square error.
pub fn evaluate(model: &SmaModel, ds: &Dataset, metric: Metric) -> Result<f64> {
    let preds = ds
        .samples
        .iter()
        .map(|s| model.predict(&s.tokens))
        .collect::<Result<Vec<_>>>()?;
    let labels = ds
        .samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Data("evaluation needs labels".into())))
        .collect::<Result<Vec<_>>>()?;
    score(&preds, &labels, metric)
}

pub fn score(preds: &[Prediction], labels: &[Label], metric: Metric) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut acc = 0.0;
    for (p, l) in preds.iter().zip(labels) {
        acc += match (metric, p, l) {
            (Metric::Accuracy, Prediction::Logits(z), Label::Class(c)) => {
                let best = (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b });
                f64::from(u8::from(best == *c))
            }
            (Metric::Rmse, Prediction::Value(y), Label::Value(t)) => (y - t) * (y - t),
            _ => {
                return Err(Error::Config(format!(
                    "metric {} does not fit the task",
                    metric.as_str()
                )))
            }
        };
    }
    let mean = acc / preds.len() as f64;
    Ok(match metric {
        Metric::Accuracy => mean,
        Metric::Rmse => mean.sqrt(),
    })
}
