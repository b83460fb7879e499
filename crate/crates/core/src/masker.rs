//! Mask sampling from first-layer attention.
//!
//! Per-head softmax maps are summed into `S[l×n]`, the rows of a random
//! query subset `R` are added into one score per input, and the `k`
//! highest-scoring inputs are masked in a single top-k pass. Ties go to
//! the lowest index. Counts use round-half-up: `k = ⌊n_eff·r + ½⌋`.

use std::cmp::Ordering;

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::ndtensor::{kernels, Tensor};
use crate::rng::Rng;

/// How pretraining chooses masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Guided,
    Random,
    None,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Guided => "guided",
            MaskMode::Random => "random",
            MaskMode::None => "none",
        }
    }
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guided" => Ok(MaskMode::Guided),
            "random" => Ok(MaskMode::Random),
            "none" => Ok(MaskMode::None),
            other => Err(Error::Config(format!(
                "unknown mask mode '{other}' (guided|random|none)"
            ))),
        }
    }
}

/// Guards decimal ratios like `0.15` whose binary product lands just under a half.
const HALF_UP_SLACK: f64 = 1e-9;

/// `round(x)` with halves rounded up.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + HALF_UP_SLACK).floor().max(0.0) as usize
}

/// Number of masked positions among `n_eff` candidates.
pub fn mask_count(n_eff: usize, r: f64) -> usize {
    round_half_up(n_eff as f64 * r)
}

/// Default query-subset size `max(1, round(l·r))`, capped at `l`.
pub fn query_count(l: usize, r: f64) -> usize {
    mask_count(l, r).clamp(1, l.max(1))
}

fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r < 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            what: "masking ratio",
            value: r,
            expected: "0 < r < 1",
        })
    }
}

/// Count for a ratio, rejecting counts that would mask nothing or everything.
pub fn checked_mask_count(n_eff: usize, r: f64) -> Result<usize> {
    check_ratio(r)?;
    let count = mask_count(n_eff, r);
    if count == 0 || count >= n_eff {
        return Err(Error::DegenerateMask { n_eff, ratio: r, count });
    }
    Ok(count)
}

/// An additive mask over `n` inputs with its masked and unmasked index sets.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    /// `0` for kept inputs, `-inf` for masked ones (and for pads).
    pub additive: Vec<f64>,
    /// Sorted masked indices `M`.
    pub masked: Vec<usize>,
    /// Sorted unmasked, non-pad indices `U`.
    pub unmasked: Vec<usize>,
    pub ratio: f64,
}

impl MaskSpec {
    /// Builds a mask from an arbitrary masked set. Pads are never in `M` or `U`.
    pub fn from_masked(n: usize, masked: &[usize], pads: &[bool], ratio: f64) -> Result<Self> {
        if pads.len() != n {
            return Err(Error::ShapeMismatch {
                op: "mask pads",
                left: vec![pads.len()],
                right: vec![n],
            });
        }
        let mut is_masked = vec![false; n];
        for &i in masked {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    context: "masked index",
                    index: i,
                    bound: n,
                });
            }
            if pads[i] {
                return Err(Error::Contract(format!("pad position {i} cannot be masked")));
            }
            is_masked[i] = true;
        }
        let masked: Vec<usize> = (0..n).filter(|&i| is_masked[i]).collect();
        let unmasked: Vec<usize> = (0..n).filter(|&i| !is_masked[i] && !pads[i]).collect();
        let additive = (0..n)
            .map(|i| if is_masked[i] { f64::NEG_INFINITY } else { 0.0 })
            .collect();
        Ok(MaskSpec {
            additive,
            masked,
            unmasked,
            ratio,
        })
    }

    /// Nothing masked.
    pub fn none(pads: &[bool]) -> Self {
        Self::from_masked(pads.len(), &[], pads, 0.0).expect("empty mask is always valid")
    }

    pub fn len(&self) -> usize {
        self.additive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.additive.is_empty()
    }

    pub fn count(&self) -> usize {
        self.masked.len()
    }

    /// Moves the mask along a position permutation (new `j` = old `p[j]`).
    pub fn permuted(&self, p: &[usize]) -> Result<Self> {
        let inv = crate::data::invert_permutation(p)?;
        let n = self.len();
        let mut pads = vec![true; n];
        for &i in self.masked.iter().chain(&self.unmasked) {
            pads[inv[i]] = false;
        }
        let masked: Vec<usize> = self.masked.iter().map(|&i| inv[i]).collect();
        Self::from_masked(n, &masked, &pads, self.ratio)
    }
}

/// A random subset of query rows, kept in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuerySubset {
    pub indices: Vec<usize>,
}

impl QuerySubset {
    pub fn sample(l: usize, size: usize, rng: &mut Rng) -> Result<Self> {
        if size == 0 || size > l {
            return Err(Error::OutOfRange {
                what: "query subset size",
                value: size as f64,
                expected: "1 <= |R| <= l",
            });
        }
        let mut indices = rng.sample_indices(l, size);
        indices.sort_unstable();
        Ok(QuerySubset { indices })
    }

    pub fn all(l: usize) -> Self {
        QuerySubset {
            indices: (0..l).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `S = Σ_h softmax(A_h)`, shape `l × n`.
pub fn aggregate_heads(a: &AttentionMap) -> Result<Tensor> {
    let (l, n) = (a.queries(), a.keys());
    let mut s = vec![0.0; l * n];
    for h in 0..a.heads() {
        let p = kernels::row_softmax(a.head(h), n, "aggregate_heads")?;
        for (acc, v) in s.iter_mut().zip(p) {
            *acc += v;
        }
    }
    Tensor::new(vec![l, n], s)
}

/// Ordering that puts larger values first and breaks ties by lower index.
fn rank(v: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest entries, ascending.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > v.len() {
        return Err(Error::OutOfRange {
            what: "top-k size",
            value: k as f64,
            expected: "k <= n",
        });
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, rank(v));
    }
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// `0` at the `k` largest entries of `v`, `-inf` elsewhere.
pub fn keep_top_k(v: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut out = vec![f64::NEG_INFINITY; v.len()];
    for i in top_k_indices(v, k)? {
        out[i] = 0.0;
    }
    Ok(out)
}

/// Column sums of `S` over the rows in `R`, with pads forced to `-inf`.
pub fn attention_mask_scores(s: &Tensor, r: &QuerySubset, pads: &[bool]) -> Result<Vec<f64>> {
    let (l, n) = s.dims2("attention_mask_scores")?;
    if r.is_empty() {
        return Err(Error::EmptyMask("query subset R is empty"));
    }
    if pads.len() != n {
        return Err(Error::ShapeMismatch {
            op: "attention_mask_scores",
            left: s.shape().to_vec(),
            right: vec![pads.len()],
        });
    }
    let mut scores = vec![0.0; n];
    for &q in &r.indices {
        if q >= l {
            return Err(Error::IndexOutOfRange {
                context: "query index",
                index: q,
                bound: l,
            });
        }
        for (acc, v) in scores.iter_mut().zip(s.row(q)) {
            *acc += v;
        }
    }
    for (sc, &pad) in scores.iter_mut().zip(pads) {
        if pad {
            *sc = f64::NEG_INFINITY;
        }
    }
    Ok(scores)
}

/// Masks the `round(n_eff·r)` inputs with the highest aggregated attention
/// from a subset of `query_count(l, r)` random queries.
pub fn sample_mask(a: &AttentionMap, r: f64, pads: &[bool], rng: &mut Rng) -> Result<MaskSpec> {
    sample_mask_with(a, r, pads, query_count(a.queries(), r), rng)
}

/// [`sample_mask`] with an explicit query-subset size.
pub fn sample_mask_with(a: &AttentionMap, r: f64, pads: &[bool], queries: usize, rng: &mut Rng) -> Result<MaskSpec> {
    let n_eff = pads.iter().filter(|&&p| !p).count();
    let k = checked_mask_count(n_eff, r)?;
    let subset = QuerySubset::sample(a.queries(), queries, rng)?;
    let s = aggregate_heads(a)?;
    let scores = attention_mask_scores(&s, &subset, pads)?;
    MaskSpec::from_masked(a.keys(), &top_k_indices(&scores, k)?, pads, r)
}

/// `softmax(mask + A)` per head and row.
pub fn apply_mask(a: &AttentionMap, mask: &MaskSpec) -> Result<Tensor> {
    let n = a.keys();
    if mask.len() != n {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            left: a.scores.shape().to_vec(),
            right: vec![mask.len()],
        });
    }
    let shifted: Vec<f64> = a
        .scores
        .data()
        .chunks(n)
        .flat_map(|row| row.iter().zip(&mask.additive).map(|(x, m)| x + m))
        .collect();
    Tensor::new(
        a.scores.shape().to_vec(),
        kernels::row_softmax(&shifted, n, "apply_mask")?,
    )
}

/// Sequential reference sampler: each query in `R`, in order, masks its
/// `k_per_query` highest-scoring inputs among those not yet chosen.
pub fn iterative_oracle_mask(s: &Tensor, r: &QuerySubset, k_per_query: usize, pads: &[bool]) -> Result<Vec<usize>> {
    let (l, n) = s.dims2("iterative_oracle_mask")?;
    if pads.len() != n {
        return Err(Error::ShapeMismatch {
            op: "iterative_oracle_mask",
            left: s.shape().to_vec(),
            right: vec![pads.len()],
        });
    }
    let n_eff = pads.iter().filter(|&&p| !p).count();
    if r.len() * k_per_query > n_eff {
        return Err(Error::OutOfRange {
            what: "oracle budget |R|·k",
            value: (r.len() * k_per_query) as f64,
            expected: "<= non-pad input count",
        });
    }
    let mut taken = pads.to_vec();
    let mut chosen = Vec::with_capacity(r.len() * k_per_query);
    for &q in &r.indices {
        if q >= l {
            return Err(Error::IndexOutOfRange {
                context: "query index",
                index: q,
                bound: l,
            });
        }
        let row = s.row(q);
        let mut cand: Vec<usize> = (0..n).filter(|&j| !taken[j]).collect();
        if k_per_query > 0 && k_per_query < cand.len() {
            cand.select_nth_unstable_by(k_per_query - 1, rank(row));
        }
        for &j in &cand[..k_per_query] {
            taken[j] = true;
            chosen.push(j);
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Uniform mask of `round(n_eff·r)` of `n_eff` positions.
pub fn random_mask(n_eff: usize, r: f64, rng: &mut Rng) -> Result<MaskSpec> {
    random_mask_padded(&vec![false; n_eff], r, rng)
}

/// Uniform mask over the non-pad positions.
pub fn random_mask_padded(pads: &[bool], r: f64, rng: &mut Rng) -> Result<MaskSpec> {
    let real: Vec<usize> = (0..pads.len()).filter(|&i| !pads[i]).collect();
    let k = checked_mask_count(real.len(), r)?;
    let picked: Vec<usize> = rng.sample_indices(real.len(), k).into_iter().map(|i| real[i]).collect();
    MaskSpec::from_masked(pads.len(), &picked, pads, r)
}

/// Fraction of masked positions whose whole group is masked.
///
/// `groups[i]` is the group id of position `i`. An empty mask has purity 0.
pub fn group_purity(mask: &MaskSpec, groups: &[usize]) -> Result<f64> {
    if groups.len() != mask.len() {
        return Err(Error::ShapeMismatch {
            op: "group_purity",
            left: vec![mask.len()],
            right: vec![groups.len()],
        });
    }
    if mask.masked.is_empty() {
        return Ok(0.0);
    }
    let num_groups = groups.iter().max().map_or(0, |g| g + 1);
    let (mut size, mut hit) = (vec![0usize; num_groups], vec![0usize; num_groups]);
    for &g in groups {
        size[g] += 1;
    }
    for &i in &mask.masked {
        hit[groups[i]] += 1;
    }
    let full = mask
        .masked
        .iter()
        .filter(|&&i| hit[groups[i]] == size[groups[i]])
        .count();
    Ok(full as f64 / mask.masked.len() as f64)
}

/// The two sampler paths on a precomputed `S`, for benchmarking.
pub mod bench {
    use super::*;

    /// Row-sum plus one top-k over `m = |R|` queries and total budget `k`.
    pub fn approximate(s: &Tensor, r: &QuerySubset, k: usize) -> Result<Vec<usize>> {
        let pads = vec![false; s.cols()];
        top_k_indices(&attention_mask_scores(s, r, &pads)?, k)
    }

    /// `m` sequential top-k passes of `k / m` each.
    pub fn iterative(s: &Tensor, r: &QuerySubset, k: usize) -> Result<Vec<usize>> {
        let pads = vec![false; s.cols()];
        iterative_oracle_mask(s, r, k / r.len().max(1), &pads)
    }
}
