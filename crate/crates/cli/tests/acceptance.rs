//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.
//!
//! Criterion numbers given as arguments restrict the run, e.g.
//! `cargo test --test acceptance -- 1 2 3`. Criteria 6 and 9 reuse the
//! runs of criterion 5 and pull it in when selected.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use sma_core::attention::{AttentionKind, AttentionMap};
use sma_core::data::{permute_dataset, GroupedSpec, Modality, Tokens};
use sma_core::embedding::encode_discrete;
use sma_core::masker::{aggregate_heads, iterative_oracle_mask, query_count, random_mask, sample_mask, QuerySubset};
use sma_core::model::{ModelConfig, SmaModel};
use sma_core::ndtensor::Tensor;
use sma_core::rng::Rng;
use sma_core::trainer::{init_rng, pretrain_loop, Outputs, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn sma(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_sma"))
        .args(args)
        .output()
        .expect("spawn sma");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Value of `key=<float>` anywhere in `text`; the last occurrence wins.
fn field(text: &str, key: &str) -> Option<f64> {
    text.split_whitespace()
        .filter_map(|w| w.strip_prefix(key)?.strip_prefix('='))
        .next_back()?
        .parse()
        .ok()
}

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Gradients of both attention kinds against central differences.
fn gradients() -> Outcome {
    let start = Instant::now();
    let r = sma(&["gradcheck"]);
    let secs = start.elapsed().as_secs_f64();
    let err = field(&r.stdout, "value").unwrap_or(f64::INFINITY);
    let kinds = r.stdout.lines().filter(|l| l.starts_with("attention=")).count();
    outcome(
        r.code == 0 && kinds == 2 && err < 1e-5 && secs < 30.0,
        format!(
            "max_rel_error={err:e} kinds={kinds} exit={} {secs:.1}s {}",
            r.code,
            r.stderr.trim()
        ),
    )
}

/// Masked-set sizes for both mask sources across the whole grid.
fn mask_counts() -> Outcome {
    let start = Instant::now();
    // Ratios as exact percentages so round-half-up is integer arithmetic.
    let ratios = [10usize, 15, 20, 50, 75, 85];
    let (mut cases, mut violations) = (0usize, Vec::new());
    for n_eff in (8..=512).step_by(8) {
        for &pct in &ratios {
            let r = pct as f64 / 100.0;
            let want = (n_eff * pct + 50) / 100;
            for seed in 0..100u64 {
                let mut rng = Rng::new(seed);
                let random = random_mask(n_eff, r, &mut rng).map(|m| m.count());
                // Guided masks on a random map, with a few pads appended.
                let pad = (seed % 4) as usize;
                let n = n_eff + pad;
                let pads: Vec<bool> = (0..n).map(|i| i >= n_eff).collect();
                let l = 1 + (seed % 8) as usize;
                let logits: Vec<f64> = (0..l * n).map(|_| rng.normal()).collect();
                let map = AttentionMap::new(Tensor::new(vec![1, l, n], logits).unwrap()).unwrap();
                let guided = sample_mask(&map, r, &pads, &mut rng);
                let guided_ok = guided
                    .as_ref()
                    .map(|m| m.count() == want && m.masked.iter().all(|&i| !pads[i]))
                    .unwrap_or(false);
                cases += 2;
                if random.as_ref().ok() != Some(&want) || !guided_ok {
                    violations.push(format!("n_eff={n_eff} r={r} seed={seed}"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        violations.is_empty() && secs < 10.0,
        format!(
            "{cases} masks, {} violations {:?} {secs:.1}s",
            violations.len(),
            violations.first()
        ),
    )
}

/// Encoder output ignores the raw values of masked tokens.
fn no_information_flow() -> Outcome {
    let mut failures = 0;
    for case in 0..50u64 {
        let mut rng = Rng::new(1000 + case);
        let kind = if case % 2 == 0 {
            AttentionKind::Cross
        } else {
            AttentionKind::SelfAttention
        };
        let discrete = case % 5 == 4;
        let mut cfg = ModelConfig::tiny(kind);
        cfg.n = 16;
        if discrete {
            cfg.modality = Modality::Discrete;
        }
        let model = SmaModel::new(cfg, &mut Rng::new(case)).unwrap();
        let r = 0.1 + 0.8 * rng.next_f64();
        let mask = random_mask(16, r, &mut rng).unwrap();
        let (clean, dirty) = if discrete {
            let bytes: Vec<u8> = (0..16).map(|_| (rng.next_f64() * 256.0) as u8).collect();
            let mut other = bytes.clone();
            for &i in &mask.masked {
                other[i] = other[i].wrapping_add(1 + (rng.next_f64() * 254.0) as u8);
            }
            (
                Tokens::Discrete(encode_discrete(&bytes, 16).unwrap()),
                Tokens::Discrete(encode_discrete(&other, 16).unwrap()),
            )
        } else {
            let values: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            let mut other = values.clone();
            for &i in &mask.masked {
                let scale = 10f64.powi((rng.next_f64() * 24.0) as i32 - 12);
                other[i] += scale * rng.normal();
            }
            (Tokens::continuous(values), Tokens::continuous(other))
        };
        let bits = |t: &Tokens| {
            let h = model.encoder_hidden(t, &mask).unwrap();
            h.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        if bits(&clean) != bits(&dirty) {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("50 cases, {failures} with differing encoder output"),
    )
}

fn grouped_config() -> ModelConfig {
    let mut cfg = ModelConfig::tiny(AttentionKind::Cross);
    cfg.n = 32;
    cfg.latents = 8;
    cfg
}

/// Same losses under a consistent position permutation.
fn domain_agnostic() -> Outcome {
    let start = Instant::now();
    let spec = GroupedSpec {
        n: 32,
        groups: 8,
        samples: 512,
        sigma: 0.01,
        shuffle_positions: false,
    };
    let ds = spec.generate(&mut Rng::new(11)).unwrap();
    let mut p: Vec<usize> = (0..32).collect();
    Rng::new(12).shuffle(&mut p);
    let permuted = permute_dataset(&ds, &p).unwrap();
    let base = SmaModel::new(grouped_config(), &mut init_rng(5)).unwrap();
    let mut a = base.clone();
    let mut b = base;
    b.permute_positions(&p).unwrap();
    let train = TrainConfig {
        lr: 1e-3,
        steps: 50,
        batch_size: 16,
        seed: 5,
        ..Default::default()
    };
    let la = pretrain_loop(&mut a, &ds, &train, &Outputs::default()).unwrap().losses;
    let lb = pretrain_loop(&mut b, &permuted, &train, &Outputs::default())
        .unwrap()
        .losses;
    let worst = la
        .iter()
        .zip(&lb)
        .map(|(x, y)| (x - y).abs() / x.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        la.len() == 50 && lb.len() == 50 && worst <= 1e-9 && secs < 120.0,
        format!("50 steps, worst relative gap {worst:e} {secs:.1}s"),
    )
}

const PURITY_SEEDS: [u64; 3] = [0, 1, 2];

fn grouped_data(seed: u64, samples: usize) -> String {
    format!("synthetic:groups=8,n=32,sigma=0.01,samples={samples},seed={seed}")
}

fn pretrain_grouped(out: &Path, seed: u64, mask: &str, extra: &[&str]) -> (Run, f64) {
    let cfg = repo_path("configs/grouped-purity.cfg");
    let seed_s = seed.to_string();
    let data = grouped_data(seed, 4096);
    let start = Instant::now();
    let mut args = vec![
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        &data,
        "--seed",
        &seed_s,
        "--mask",
        mask,
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let r = sma(&args);
    (r, start.elapsed().as_secs_f64())
}

struct PurityRun {
    dir: PathBuf,
    secs: f64,
}

/// Guided masks of trained models cover whole groups.
fn purity(work: &Path, runs: &mut Vec<PurityRun>) -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in PURITY_SEEDS {
        let dir = work.join(format!("guided-{seed}"));
        let (r, secs) = pretrain_grouped(&dir, seed, "guided", &[]);
        if r.code != 0 {
            return outcome(false, format!("pretrain seed {seed} failed: {}", r.stderr.trim()));
        }
        let dump = sma(&[
            "mask-dump",
            "--config",
            dir.join("manifest.txt").to_str().unwrap(),
            "--checkpoint",
            dir.join("model.ckpt").to_str().unwrap(),
            "--count",
            "200",
            "--out",
            dir.join("dump").to_str().unwrap(),
        ]);
        let (p, b) = (field(&dump.stdout, "purity"), field(&dump.stdout, "random_purity"));
        let (Some(p), Some(b)) = (p, b) else {
            return outcome(false, format!("mask-dump seed {seed} failed: {}", dump.stderr.trim()));
        };
        pass &= p - b >= 0.25 && secs < 300.0;
        lines.push(format!("seed {seed}: {p:.3} vs {b:.3} ({secs:.0}s)"));
        runs.push(PurityRun { dir, secs });
    }
    outcome(pass, lines.join(", "))
}

fn finetune_val_loss(out: &Path, seed: u64, start: Option<&Path>) -> Result<f64, String> {
    let cfg = repo_path("configs/grouped-purity.cfg");
    let seed_s = seed.to_string();
    let data = grouped_data(100 + seed, 1280);
    let out_s = out.to_str().unwrap();
    let mut args = vec![
        "finetune",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        &data,
        "--seed",
        &seed_s,
        "--out",
        out_s,
        "--set",
        "split=0.2,0.8,0.0",
        "--steps",
        "300",
        "--lr",
        "1e-3",
    ];
    let ckpt;
    match start {
        Some(p) => {
            ckpt = p.to_str().unwrap().to_string();
            args.extend(["--checkpoint", &ckpt]);
        }
        None => args.push("--scratch"),
    }
    let r = sma(&args);
    if r.code != 0 || !r.stdout.contains("train=256 ") {
        return Err(format!("finetune failed: {}{}", r.stdout, r.stderr));
    }
    field(&r.stdout, "val_loss").ok_or_else(|| "no val_loss".into())
}

/// Guided pretraining beats random pretraining, which beats no pretraining.
/// The guided models are the purity runs; their time counts here too.
fn pretraining_benefit(work: &Path, guided: &[PurityRun]) -> Outcome {
    if guided.len() != PURITY_SEEDS.len() {
        return outcome(false, "needs the guided runs of the purity criterion");
    }
    let start = Instant::now();
    let mut losses = Vec::new();
    for (seed, g) in PURITY_SEEDS.into_iter().zip(guided) {
        let random_dir = work.join(format!("random-{seed}"));
        let (r, _) = pretrain_grouped(&random_dir, seed, "random", &[]);
        if r.code != 0 {
            return outcome(
                false,
                format!("random pretrain seed {seed} failed: {}", r.stderr.trim()),
            );
        }
        let run = |name: &str, ckpt: Option<PathBuf>| {
            finetune_val_loss(&work.join(format!("ft-{name}-{seed}")), seed, ckpt.as_deref())
        };
        let triple = (|| -> Result<[f64; 3], String> {
            Ok([
                run("guided", Some(g.dir.join("model.ckpt")))?,
                run("random", Some(random_dir.join("model.ckpt")))?,
                run("scratch", None)?,
            ])
        })();
        match triple {
            Ok(t) => losses.push(t),
            Err(e) => return outcome(false, e),
        }
    }
    let secs = start.elapsed().as_secs_f64() + guided.iter().map(|g| g.secs).sum::<f64>();
    let guided_wins = losses.iter().filter(|l| l[0] < l[1]).count();
    let random_wins = losses.iter().filter(|l| l[1] < l[2]).count();
    let table: Vec<String> = losses
        .iter()
        .map(|l| format!("{:.4}/{:.4}/{:.4}", l[0], l[1], l[2]))
        .collect();
    outcome(
        guided_wins >= 2 && random_wins >= 2 && secs < 600.0,
        format!(
            "guided/random/scratch val loss {}; guided<random {guided_wins}/3, random<scratch {random_wins}/3 {secs:.0}s",
            table.join(", ")
        ),
    )
}

/// One-shot top-k against the iterative oracle at n=36864, m=64.
fn sampler_speed() -> Outcome {
    let start = Instant::now();
    let r = sma(&[
        "bench-topk",
        "--set",
        "n_list=36864",
        "--set",
        "m=64",
        "--set",
        "repeats=5",
    ]);
    let secs = start.elapsed().as_secs_f64();
    let speedup = field(&r.stdout, "value").unwrap_or(0.0);
    outcome(
        r.code == 0 && speedup >= 2.0 && secs < 60.0,
        format!("{} {secs:.1}s", r.stdout.lines().next().unwrap_or(r.stderr.trim())),
    )
}

/// Sampler and iterative oracle agree when per-query top sets are disjoint.
fn oracle_equivalence() -> Outcome {
    let ratios = [0.1, 0.15, 0.2, 0.25, 0.3, 0.5, 0.75];
    let mut rng = Rng::new(2718);
    let (mut cases, mut tries, mut mismatches) = (0, 0, 0);
    while cases < 1000 {
        tries += 1;
        let l = 1 + (rng.next_f64() * 8.0) as usize;
        let n = 8 + (rng.next_f64() * 57.0) as usize;
        let r = ratios[(rng.next_f64() * ratios.len() as f64) as usize];
        let (k, q) = (((n as f64 * r) + 0.5).floor() as usize, query_count(l, r));
        // Each sampled query must own exactly k/|R| planted tokens.
        if k == 0 || k >= n || k % q != 0 || l * (k / q) > n {
            continue;
        }
        let per = k / q;
        let mut owners: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut owners);
        let mut weights = vec![0.0; l * n];
        for row in 0..l {
            for j in 0..n {
                weights[row * n + j] = 1e-3 * (1.0 + rng.next_f64());
            }
            for &j in &owners[row * per..(row + 1) * per] {
                weights[row * n + j] = 1.0 + rng.next_f64();
            }
        }
        let logits = weights.iter().map(|w: &f64| w.ln()).collect();
        let map = AttentionMap::new(Tensor::new(vec![1, l, n], logits).unwrap()).unwrap();
        let pads = vec![false; n];
        let mut mask_rng = Rng::new(tries);
        let subset = QuerySubset::sample(l, q, &mut mask_rng.clone()).unwrap();
        let sampled = sample_mask(&map, r, &pads, &mut mask_rng).unwrap();
        let s = aggregate_heads(&map).unwrap();
        let oracle = iterative_oracle_mask(&s, &subset, per, &pads).unwrap();
        cases += 1;
        if sampled.masked != oracle {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{cases} disjoint cases, {mismatches} mismatches"),
    )
}

fn strip_wall_ms(metrics: &str) -> String {
    metrics
        .lines()
        .map(|l| l.rsplit_once('\t').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

/// A second purity run with the same seed reproduces every artifact.
fn reproducibility(work: &Path, runs: &[PurityRun]) -> Outcome {
    let Some(first) = runs.first() else {
        return outcome(false, "needs a purity run to compare against");
    };
    let again = work.join("guided-repeat");
    let (r, _) = pretrain_grouped(&again, PURITY_SEEDS[0], "guided", &[]);
    if r.code != 0 {
        return outcome(false, format!("repeat run failed: {}", r.stderr.trim()));
    }
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap_or_default();
    let ckpt_same =
        read(&first.dir, "model.ckpt") == read(&again, "model.ckpt") && !read(&again, "model.ckpt").is_empty();
    let text = |d: &Path| String::from_utf8(read(d, "metrics.tsv")).unwrap_or_default();
    let (ma, mb) = (text(&first.dir), text(&again));
    let log_same = strip_wall_ms(&ma) == strip_wall_ms(&mb) && ma.lines().count() == 2000;
    outcome(
        ckpt_same && log_same,
        format!("checkpoint identical: {ckpt_same}, log identical without wall_ms: {log_same}"),
    )
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted =
        |i: usize| only.is_empty() || only.contains(&i) || (i == 5 && (only.contains(&6) || only.contains(&9)));
    let work = tempfile::tempdir().expect("temp dir");
    let mut runs = Vec::new();
    let mut failed = 0;
    let mut ran = 0;
    let mut report = |i: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(i) {
            return;
        }
        let o = f();
        println!(
            "criterion {i} {name}: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        ran += 1;
        failed += usize::from(!o.pass);
    };
    report(1, "gradient correctness", &mut gradients);
    report(2, "mask count exactness", &mut mask_counts);
    report(3, "no information flow", &mut no_information_flow);
    report(4, "domain-agnostic learning", &mut domain_agnostic);
    report(5, "mask convergence to groups", &mut || purity(work.path(), &mut runs));
    report(6, "pretraining benefit direction", &mut || {
        pretraining_benefit(work.path(), &runs)
    });
    report(7, "sampler performance", &mut sampler_speed);
    report(8, "oracle equivalence", &mut oracle_equivalence);
    report(9, "reproducibility", &mut || reproducibility(work.path(), &runs));
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
