//! Subcommand implementations. Each prints progress lines and ends with one
//! `metric=<name> value=<float>` line.

use std::fs;
use std::hint::black_box;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sma_core::attention::AttentionKind;
use sma_core::data::{gen_grouped_tokens, split, Dataset, Modality, Standardizer, Tokens};
use sma_core::masker::{
    bench, group_purity, mask_count, query_count, random_mask_padded, sample_mask_with, MaskMode, MaskSpec, QuerySubset,
};
use sma_core::model::{ModelConfig, SmaModel};
use sma_core::ndtensor::{row_softmax, GradCheckOptions, Tensor};
use sma_core::rng::Rng;
use sma_core::trainer::{evaluate, finetune_loop, init_rng, pretrain_loop, supervised_loss, Metric, Outputs};

use crate::config::{Part, RunConfig};
use crate::dump::{grid_width, render_ppm, render_text};
use crate::source::{file_sha256, maybe_normalize, DataSource};
use crate::CliError;

/// Gradient check pass threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
/// Largest sequence length `gradcheck` accepts.
pub const GRADCHECK_MAX_N: usize = 16;

const STREAM_DUMP: u64 = 5;
const STREAM_DUMP_BASELINE: u64 = 6;
const STREAM_BENCH: u64 = 7;
const STREAM_GRADCHECK_DATA: u64 = 8;
const STREAM_GRADCHECK_MASK: u64 = 9;

/// Mask stream for the `i`-th dumped sample.
pub fn dump_rng(seed: u64, i: usize) -> Rng {
    Rng::new(seed).fork(STREAM_DUMP).fork(i as u64)
}

fn emit(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<(), CliError> {
    writeln!(out, "{line}")?;
    Ok(())
}

fn data_source(cfg: &RunConfig) -> Result<DataSource, CliError> {
    DataSource::parse(cfg.data.as_deref().unwrap_or(""))
}

fn modality_str(m: Modality) -> &'static str {
    match m {
        Modality::Discrete => "discrete",
        Modality::Continuous => "continuous",
    }
}

/// The configured architecture with `n`, `d_raw` and `modality` taken from
/// the data unless set explicitly; an explicit value that disagrees is a
/// config error.
pub fn model_config_for(cfg: &RunConfig, ds: &Dataset) -> Result<ModelConfig, CliError> {
    let mut m = cfg.model.clone();
    let mismatch = |key: &str, want: String, got: String| {
        CliError::Config(format!("{key}={want} does not match the data ({got})"))
    };
    if cfg.is_explicit("n") && m.n != ds.n {
        return Err(mismatch("n", m.n.to_string(), ds.n.to_string()));
    }
    if cfg.is_explicit("d_raw") && m.d_raw != ds.d_raw {
        return Err(mismatch("d_raw", m.d_raw.to_string(), ds.d_raw.to_string()));
    }
    if cfg.is_explicit("modality") && m.modality != ds.modality {
        return Err(mismatch(
            "modality",
            modality_str(m.modality).into(),
            modality_str(ds.modality).into(),
        ));
    }
    m.n = ds.n;
    m.d_raw = ds.d_raw;
    m.modality = ds.modality;
    m.validate()?;
    Ok(m)
}

fn check_compatible(model: &SmaModel, ds: &Dataset) -> Result<(), CliError> {
    let c = &model.config;
    if (c.n, c.d_raw, c.modality) != (ds.n, ds.d_raw, ds.modality) {
        return Err(CliError::Config(format!(
            "checkpoint expects n={} d_raw={} {} data, got n={} d_raw={} {}",
            c.n,
            c.d_raw,
            modality_str(c.modality),
            ds.n,
            ds.d_raw,
            modality_str(ds.modality)
        )));
    }
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig) -> Result<(SmaModel, PathBuf), CliError> {
    let path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Config("this command needs --checkpoint".into()))?;
    Ok((SmaModel::load(&path)?, path))
}

/// Writes `manifest.txt`: resolved settings plus content hashes of the inputs.
/// The file can be passed back with `--config`.
fn write_manifest(
    cfg: &RunConfig,
    command: &str,
    model: &ModelConfig,
    inputs: &[(&str, String)],
) -> Result<(), CliError> {
    let mut pairs = cfg.to_pairs();
    pairs.extend(model.to_pairs());
    let mut text = format!("# sma {command} manifest; pass this file to --config to repeat the run\n");
    for (name, hash) in inputs {
        text.push_str(&format!("# input {name} sha256={hash}\n"));
    }
    for (k, v) in pairs {
        text.push_str(&format!("{k}={v}\n"));
    }
    let path = cfg.out.join("manifest.txt");
    fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

pub fn pretrain(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    if cfg.train.mask == MaskMode::None {
        return Err(CliError::Config("pretraining needs mask=guided or mask=random".into()));
    }
    let src = data_source(cfg)?;
    let mut ds = src.load(cfg)?;
    maybe_normalize(cfg, &mut ds)?;
    let mc = model_config_for(cfg, &ds)?;
    let mut model = SmaModel::new(mc.clone(), &mut init_rng(cfg.train.seed))?;
    create_out(&cfg.out)?;
    write_manifest(cfg, "pretrain", &mc, &[("data", src.fingerprint()?)])?;
    let outputs = Outputs {
        checkpoint: Some(cfg.out.join("model.ckpt")),
        metrics: Some(cfg.out.join("metrics.tsv")),
    };
    let report = pretrain_loop(&mut model, &ds, &cfg.train, &outputs)?;
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    emit(
        out,
        format_args!(
            "steps={} samples={} params={}",
            cfg.train.steps,
            ds.len(),
            model.params.num_scalars()
        ),
    )?;
    emit(out, format_args!("checkpoint={}", cfg.out.join("model.ckpt").display()))?;
    emit(out, format_args!("metric=loss value={last:?}"))
}

/// Train/val/test partitions, standardized with train statistics when asked.
fn partitions(cfg: &RunConfig, ds: &Dataset) -> Result<(Dataset, Dataset, Dataset), CliError> {
    let (mut train, mut val, mut test) = split(ds, cfg.split, cfg.train.seed)?;
    if let Some(st) = maybe_normalize(cfg, &mut train)? {
        for part in [&mut val, &mut test] {
            if !part.is_empty() {
                st.apply(part);
            }
        }
    }
    Ok((train, val, test))
}

fn require_labels(ds: &Dataset) -> Result<(), CliError> {
    if ds.is_labeled() {
        Ok(())
    } else {
        Err(CliError::Config(
            "data has no labels; set label_column for CSV input".into(),
        ))
    }
}

pub fn finetune(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    if cfg.scratch && cfg.checkpoint.is_some() {
        return Err(CliError::Config(
            "--scratch and --checkpoint are mutually exclusive".into(),
        ));
    }
    let src = data_source(cfg)?;
    let ds = src.load(cfg)?;
    require_labels(&ds)?;
    let (train, val, _) = partitions(cfg, &ds)?;
    if val.is_empty() {
        return Err(CliError::Config(
            "the validation split is empty; raise its fraction".into(),
        ));
    }
    let mut inputs = vec![("data", src.fingerprint()?)];
    let mut model = if cfg.scratch {
        SmaModel::new(model_config_for(cfg, &ds)?, &mut init_rng(cfg.train.seed))?
    } else if cfg.checkpoint.is_none() {
        return Err(CliError::Config(
            "finetune needs --checkpoint, or --scratch to start from random weights".into(),
        ));
    } else {
        let (model, path) = load_checkpoint(cfg)?;
        check_compatible(&model, &ds)?;
        inputs.push(("checkpoint", file_sha256(&path)?));
        model
    };
    let report = finetune_loop(&mut model, &train, &val, &cfg.train)?;
    create_out(&cfg.out)?;
    let ckpt = cfg.out.join("finetuned.ckpt");
    model.save(&ckpt)?;
    write_manifest(cfg, "finetune", &model.config, &inputs)?;
    emit(out, format_args!("train={} val={}", train.len(), val.len()))?;
    emit(out, format_args!("checkpoint={}", ckpt.display()))?;
    emit(out, format_args!("val_loss={:?}", report.val_loss))?;
    emit(
        out,
        format_args!("metric={} value={:?}", report.metric.as_str(), report.value),
    )
}

pub fn eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(cfg)?;
    let task = model
        .head
        .as_ref()
        .map(|h| h.task)
        .ok_or_else(|| CliError::Config("checkpoint has no prediction head; fine-tune it first".into()))?;
    let ds = data_source(cfg)?.load(cfg)?;
    require_labels(&ds)?;
    check_compatible(&model, &ds)?;
    let (train, val, test) = partitions(cfg, &ds)?;
    let part = match cfg.part {
        Part::Train => train,
        Part::Val => val,
        Part::Test => test,
        Part::All => {
            let mut all = ds.clone();
            if cfg.normalize {
                Standardizer::fit(&train)?.apply(&mut all);
            }
            all
        }
    };
    if part.is_empty() {
        return Err(CliError::Config(format!("the {} split is empty", cfg.part.as_str())));
    }
    let metric = Metric::for_task(task);
    emit(out, format_args!("part={} samples={}", cfg.part.as_str(), part.len()))?;
    emit(out, format_args!("loss={:?}", supervised_loss(&model, &part)?))?;
    emit(
        out,
        format_args!(
            "metric={} value={:?}",
            metric.as_str(),
            evaluate(&model, &part, metric)?
        ),
    )
}

fn sample_dump_mask(
    model: &SmaModel,
    cfg: &RunConfig,
    tokens: &Tokens,
    ratio: f64,
    rng: &mut Rng,
) -> Result<MaskSpec, CliError> {
    let pads = tokens.pad_mask();
    Ok(match cfg.train.mask {
        MaskMode::Guided => {
            let map = model.attention_map(tokens)?;
            let queries = if cfg.is_explicit("query_count") {
                cfg.model.query_count
            } else {
                model.config.query_count
            };
            let q = queries.unwrap_or_else(|| query_count(map.queries(), ratio));
            sample_mask_with(&map, ratio, &pads, q, rng)?
        }
        MaskMode::Random => random_mask_padded(&pads, ratio, rng)?,
        MaskMode::None => return Err(CliError::Config("mask-dump needs mask=guided or mask=random".into())),
    })
}

pub fn mask_dump(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    if cfg.train.mask == MaskMode::None {
        return Err(CliError::Config("mask-dump needs mask=guided or mask=random".into()));
    }
    let (model, path) = load_checkpoint(cfg)?;
    let src = data_source(cfg)?;
    let mut ds = src.load(cfg)?;
    maybe_normalize(cfg, &mut ds)?;
    check_compatible(&model, &ds)?;
    let n = ds.n;
    if cfg.dump_width.is_some() && grid_width(n, cfg.dump_width).is_none() {
        return Err(CliError::Config(format!("dump_width does not divide n={n}")));
    }
    let count = cfg.count.min(ds.len());
    if count == 0 {
        return Err(CliError::Config(
            "nothing to dump; count and the dataset must be non-empty".into(),
        ));
    }
    let ratio = if cfg.is_explicit("ratio") {
        cfg.model.ratio
    } else {
        model.config.ratio
    };
    let width = grid_width(n, cfg.dump_width);
    create_out(&cfg.out)?;
    write_manifest(
        cfg,
        "mask-dump",
        &model.config,
        &[("data", src.fingerprint()?), ("checkpoint", file_sha256(&path)?)],
    )?;

    let seed = cfg.train.seed;
    let (mut masked, mut purity, mut baseline) = (0usize, 0.0, 0.0);
    for (i, sample) in ds.samples.iter().take(count).enumerate() {
        let pads = sample.tokens.pad_mask();
        let mask = sample_dump_mask(&model, cfg, &sample.tokens, ratio, &mut dump_rng(seed, i))?;
        masked += mask.count();
        let stem = cfg.out.join(format!("mask-{i:04}"));
        let write = |ext: &str, bytes: &[u8]| {
            let p = stem.with_extension(ext);
            fs::write(&p, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
        };
        write("txt", render_text(&mask, &pads, width).as_bytes())?;
        if let Some(w) = width {
            write("ppm", &render_ppm(&mask, &pads, w))?;
        }
        if let Some(groups) = &ds.groups {
            purity += group_purity(&mask, groups)?;
            let mut rng = Rng::new(seed).fork(STREAM_DUMP_BASELINE).fork(i as u64);
            baseline += group_purity(&random_mask_padded(&pads, ratio, &mut rng)?, groups)?;
        }
    }
    let per = masked as f64 / count as f64;
    emit(
        out,
        format_args!(
            "dumped={count} mode={} masked_per_sample={per}",
            cfg.train.mask.as_str()
        ),
    )?;
    if ds.groups.is_some() {
        let (p, b) = (purity / count as f64, baseline / count as f64);
        emit(out, format_args!("purity={p:?} random_purity={b:?}"))?;
        emit(out, format_args!("metric=purity value={p:?}"))
    } else {
        emit(out, format_args!("metric=masked_per_sample value={per:?}"))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn time_ms(repeats: usize, mut f: impl FnMut() -> Result<Vec<usize>, CliError>) -> Result<f64, CliError> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        black_box(f()?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(times))
}

/// A random `m × n` row-stochastic score matrix.
pub fn random_scores(m: usize, n: usize, rng: &mut Rng) -> Result<Tensor, CliError> {
    let logits: Vec<f64> = (0..m * n).map(|_| 3.0 * rng.normal()).collect();
    Ok(row_softmax(&Tensor::new(vec![m, n], logits)?)?)
}

pub fn bench_topk(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let m = cfg.m;
    if m == 0 || cfg.repeats == 0 || cfg.n_list.is_empty() {
        return Err(CliError::Config(
            "bench-topk needs m, repeats and n_list to be non-empty".into(),
        ));
    }
    let mut speedup = f64::NAN;
    for &n in &cfg.n_list {
        let k = cfg.k.unwrap_or_else(|| mask_count(n, cfg.model.ratio));
        if n == 0 || k < m || k > n {
            return Err(CliError::Config(format!("need m <= k <= n, got m={m} k={k} n={n}")));
        }
        let s = random_scores(m, n, &mut Rng::new(cfg.train.seed).fork(STREAM_BENCH).fork(n as u64))?;
        let r = QuerySubset::all(m);
        let approx = time_ms(cfg.repeats, || Ok(bench::approximate(&s, &r, k)?))?;
        let iterative = time_ms(cfg.repeats, || Ok(bench::iterative(&s, &r, k)?))?;
        speedup = iterative / approx;
        emit(
            out,
            format_args!("n={n} m={m} k={k} approx_ms={approx:.4} iterative_ms={iterative:.4} speedup={speedup:.3}"),
        )?;
    }
    emit(out, format_args!("metric=speedup value={speedup:?}"))
}

/// Small-input batch used by `gradcheck`. Inputs are scaled down so the
/// loss stays small and central differences keep enough precision.
pub fn gradcheck_batch(n: usize, ratio: f64, seed: u64) -> Result<(Dataset, Vec<MaskSpec>), CliError> {
    let groups = [4, 2, 1].into_iter().find(|g| n.is_multiple_of(*g)).unwrap_or(1);
    let mut ds = gen_grouped_tokens(n, groups, 2, 0.1, &mut Rng::new(seed).fork(STREAM_GRADCHECK_DATA))?;
    for s in &mut ds.samples {
        if let Tokens::Continuous { values, .. } = &mut s.tokens {
            values.iter_mut().for_each(|v| *v *= 0.01);
        }
    }
    let masks = (0..2)
        .map(|i| {
            let mut rng = Rng::new(seed).fork(STREAM_GRADCHECK_MASK).fork(i);
            random_mask_padded(&vec![false; n], ratio, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((ds, masks))
}

pub fn gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let mut base = cfg.model.clone();
    if base.n > GRADCHECK_MAX_N {
        return Err(CliError::Config(format!(
            "gradcheck needs n <= {GRADCHECK_MAX_N}, got {}",
            base.n
        )));
    }
    if base.modality != Modality::Continuous || base.d_raw != 1 {
        return Err(CliError::Config("gradcheck runs on scalar continuous tokens".into()));
    }
    let kinds = if cfg.is_explicit("attention") {
        vec![base.kind]
    } else {
        vec![AttentionKind::SelfAttention, AttentionKind::Cross]
    };
    let seed = cfg.train.seed;
    let (ds, masks) = gradcheck_batch(base.n, base.ratio, seed)?;
    let opts = GradCheckOptions {
        inject_fault: cfg.inject_fault,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for kind in kinds {
        base.kind = kind;
        let model = SmaModel::new(base.clone(), &mut init_rng(seed))?;
        let report = model.grad_check_pretrain(&ds.samples, &masks, opts)?;
        emit(
            out,
            format_args!(
                "attention={} max_rel_error={:e} entries={} worst_param={} worst_entry={}",
                kind.as_str(),
                report.max_rel_error,
                report.entries_checked,
                report.worst.0,
                report.worst.1
            ),
        )?;
        worst = worst.max(report.max_rel_error);
    }
    emit(out, format_args!("metric=max_rel_error value={worst:e}"))?;
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::GradCheck(worst))
    }
}
