use proptest::prelude::*;
use sma_core::attention::AttentionMap;
use sma_core::masker::*;
use sma_core::ndtensor::{row_softmax, Tensor};
use sma_core::{Error, Rng};

const NEG: f64 = f64::NEG_INFINITY;

fn map(h: usize, l: usize, n: usize, data: Vec<f64>) -> AttentionMap {
    AttentionMap::new(Tensor::new(vec![h, l, n], data).unwrap()).unwrap()
}

fn random_map(h: usize, l: usize, n: usize, rng: &mut Rng) -> AttentionMap {
    map(h, l, n, (0..h * l * n).map(|_| rng.normal()).collect())
}

/// Full-sort oracle: indices ordered by (value desc, index asc), first k, ascending.
fn sort_top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    let mut top = idx[..k].to_vec();
    top.sort();
    top
}

/// Exact decimal half-up rounding of n·(num/den).
fn rational_round(n: usize, num: usize, den: usize) -> usize {
    (2 * n * num + den) / (2 * den)
}

#[test]
fn aggregate_heads_examples() {
    let mut rng = Rng::new(5);
    let a = random_map(1, 3, 4, &mut rng);
    let s = aggregate_heads(&a).unwrap();
    let single = row_softmax(&Tensor::new(vec![3, 4], a.scores.data().to_vec()).unwrap()).unwrap();
    assert_eq!(s.data(), single.data());

    let s = aggregate_heads(&map(2, 3, 4, vec![0.0; 24])).unwrap();
    assert!(s.data().iter().all(|&v| v == 0.5));

    let a = random_map(2, 3, 5, &mut rng);
    let s = aggregate_heads(&a).unwrap();
    for q in 0..3 {
        let mut expect = [0.0; 5];
        for h in 0..2 {
            let row = &a.head(h)[q * 5..(q + 1) * 5];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            for j in 0..5 {
                expect[j] += row[j].exp() / z;
            }
        }
        for j in 0..5 {
            assert!((s.row(q)[j] - expect[j]).abs() < 1e-14);
        }
        assert!((s.row(q).iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }
}

#[test]
fn keep_top_k_examples() {
    assert_eq!(keep_top_k(&[3.0, 1.0, 2.0], 3).unwrap(), vec![0.0; 3]);
    assert_eq!(keep_top_k(&[3.0, 1.0, 2.0], 0).unwrap(), vec![NEG; 3]);
    assert_eq!(keep_top_k(&[3.0, 1.0, 2.0], 2).unwrap(), vec![0.0, NEG, 0.0]);
    assert!(matches!(keep_top_k(&[1.0], 2), Err(Error::OutOfRange { .. })));
    // ties go to the lowest index
    assert_eq!(top_k_indices(&[1.0, 2.0, 2.0, 2.0], 2).unwrap(), vec![1, 2]);
}

#[test]
fn attention_mask_scores_examples() {
    let mut rng = Rng::new(8);
    let s = Tensor::new(vec![3, 4], (0..12).map(|_| rng.next_f64()).collect()).unwrap();
    let pads = [false; 4];

    let all = attention_mask_scores(&s, &QuerySubset::all(3), &pads).unwrap();
    for j in 0..4 {
        assert_eq!(all[j], s.at(&[0, j]) + s.at(&[1, j]) + s.at(&[2, j]));
    }

    let r = QuerySubset { indices: vec![0, 2] };
    let two = attention_mask_scores(&s, &r, &pads).unwrap();
    for j in 0..4 {
        assert_eq!(two[j], s.at(&[0, j]) + s.at(&[2, j]));
    }

    let onehot = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
    let one = attention_mask_scores(&onehot, &QuerySubset { indices: vec![1] }, &[false; 3]).unwrap();
    assert_eq!(one, vec![1.0, 0.0, 0.0]);

    let padded = attention_mask_scores(&s, &r, &[false, true, false, false]).unwrap();
    assert_eq!(padded[1], NEG);

    let empty = QuerySubset { indices: vec![] };
    assert!(matches!(
        attention_mask_scores(&s, &empty, &pads),
        Err(Error::EmptyMask(_))
    ));
}

#[test]
fn sample_mask_count_example() {
    let mut rng = Rng::new(1);
    let a = random_map(2, 28, 28, &mut rng);
    let m = sample_mask(&a, 0.2, &[false; 28], &mut rng).unwrap();
    assert_eq!(m.count(), 6);
    assert_eq!(m.unmasked.len(), 22);
}

#[test]
fn uniform_attention_masks_lowest_indices() {
    let a = map(2, 5, 20, vec![0.0; 200]);
    for seed in 0..10 {
        let m = sample_mask(&a, 0.25, &[false; 20], &mut Rng::new(seed)).unwrap();
        assert_eq!(m.masked, (0..5).collect::<Vec<_>>());
    }
}

#[test]
fn block_attention_masks_one_group() {
    // 4 queries, each attending one contiguous group of 4 among 16 inputs.
    let (l, n, size) = (4, 16, 4);
    let mut data = vec![0.0; l * n];
    for q in 0..l {
        for j in q * size..(q + 1) * size {
            data[q * n + j] = 50.0;
        }
    }
    let a = map(1, l, n, data);
    for seed in 0..20 {
        let m = sample_mask_with(&a, 0.25, &[false; 16], 1, &mut Rng::new(seed)).unwrap();
        let g = m.masked[0] / size;
        assert_eq!(m.masked, (g * size..(g + 1) * size).collect::<Vec<_>>());
    }
}

#[test]
fn degenerate_ratio_errors() {
    let a = map(1, 2, 4, vec![0.0; 8]);
    let mut rng = Rng::new(0);
    assert!(matches!(
        sample_mask(&a, 0.1, &[false; 4], &mut rng),
        Err(Error::DegenerateMask { .. })
    ));
    assert!(sample_mask(&a, 1.0, &[false; 4], &mut rng).is_err());
    assert!(sample_mask(&a, 0.0, &[false; 4], &mut rng).is_err());
}

#[test]
fn pads_are_never_masked() {
    let mut rng = Rng::new(3);
    let pads: Vec<bool> = (0..20).map(|i| i >= 12).collect();
    // make pad columns the most attended
    let mut a = random_map(2, 4, 20, &mut rng);
    for (i, v) in a.scores.data_mut().iter_mut().enumerate() {
        if i % 20 >= 12 {
            *v += 100.0;
        }
    }
    let m = sample_mask(&a, 0.25, &pads, &mut rng).unwrap();
    assert_eq!(m.count(), 3);
    assert!(m.masked.iter().all(|&i| i < 12));
    assert_eq!(m.masked.len() + m.unmasked.len(), 12);
}

#[test]
fn apply_mask_examples() {
    let mut rng = Rng::new(2);
    let a = random_map(2, 3, 3, &mut rng);
    let none = apply_mask(&a, &MaskSpec::none(&[false; 3])).unwrap();
    let direct = row_softmax(&a.scores).unwrap();
    assert_eq!(none.data(), direct.data());

    let m = MaskSpec::from_masked(3, &[2], &[false; 3], 0.3).unwrap();
    let masked = apply_mask(&a, &m).unwrap();
    for (r, row) in masked.data().chunks(3).enumerate() {
        assert_eq!(row[2], 0.0);
        let src = &a.scores.data()[r * 3..r * 3 + 2];
        let z = src[0].exp() + src[1].exp();
        assert!((row[0] - src[0].exp() / z).abs() < 1e-15);
        assert!((row[1] - src[1].exp() / z).abs() < 1e-15);
        assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn iterative_oracle_examples() {
    let mut rng = Rng::new(4);
    let s = Tensor::new(vec![3, 10], (0..30).map(|_| rng.next_f64()).collect()).unwrap();
    let pads = [false; 10];

    let one = iterative_oracle_mask(&s, &QuerySubset { indices: vec![1] }, 4, &pads).unwrap();
    assert_eq!(one, sort_top_k(s.row(1), 4));

    // identical rows: the second query continues down the same ranking
    let row: Vec<f64> = (0..8).map(|i| (i * 37 % 8) as f64).collect();
    let dup = Tensor::from_rows(&[row.clone(), row.clone()]).unwrap();
    let both = iterative_oracle_mask(&dup, &QuerySubset::all(2), 2, &[false; 8]).unwrap();
    assert_eq!(both, sort_top_k(&row, 4));
    let first = sort_top_k(&row, 2);
    let second: Vec<usize> = both.iter().copied().filter(|i| !first.contains(i)).collect();
    let mut ranked: Vec<usize> = (0..8).collect();
    ranked.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
    let mut expect = ranked[2..4].to_vec();
    expect.sort();
    assert_eq!(second, expect);

    assert!(iterative_oracle_mask(&s, &QuerySubset::all(3), 4, &pads).is_err());
}

#[test]
fn oracle_matches_sampler_on_disjoint_tops() {
    // query 0 prefers {0,1}, query 1 prefers {5,6}
    let mut s = vec![0.01; 16];
    for j in [0, 1] {
        s[j] = 0.4;
    }
    for j in [5, 6] {
        s[8 + j] = 0.4;
    }
    let s = Tensor::new(vec![2, 8], s).unwrap();
    let r = QuerySubset::all(2);
    let oracle = iterative_oracle_mask(&s, &r, 2, &[false; 8]).unwrap();
    let approx = top_k_indices(&attention_mask_scores(&s, &r, &[false; 8]).unwrap(), 4).unwrap();
    assert_eq!(oracle, vec![0, 1, 5, 6]);
    assert_eq!(approx, oracle);
}

#[test]
fn random_mask_examples() {
    let m = random_mask(10, 0.9, &mut Rng::new(1)).unwrap();
    assert_eq!(m.unmasked.len(), 1);
    assert_eq!(
        random_mask(20, 0.3, &mut Rng::new(9)).unwrap(),
        random_mask(20, 0.3, &mut Rng::new(9)).unwrap()
    );
}

#[test]
fn random_mask_inclusion_is_binomial() {
    let (n, r, draws) = (10, 0.3, 100_000);
    let mut hits = vec![0usize; n];
    let mut rng = Rng::new(2024);
    for _ in 0..draws {
        for i in random_mask(n, r, &mut rng).unwrap().masked {
            hits[i] += 1;
        }
    }
    let p = mask_count(n, r) as f64 / n as f64;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for h in hits {
        assert!((h as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{h}");
    }
}

#[test]
fn mask_count_matches_rational_rounding() {
    let ratios = [
        (1, 10),
        (15, 100),
        (2, 10),
        (25, 100),
        (5, 10),
        (75, 100),
        (85, 100),
        (9, 10),
    ];
    for n in 8..=512 {
        for &(num, den) in &ratios {
            assert_eq!(
                mask_count(n, num as f64 / den as f64),
                rational_round(n, num, den),
                "n={n} r={num}/{den}"
            );
        }
    }
}

#[test]
#[ignore = "timing; run with --ignored on a quiet machine"]
fn sampler_overhead_is_small_at_4096() {
    use sma_core::attention::{attend, attention_scores};
    use std::time::Instant;
    // 4 heads of width 32, 64 latent queries over 4096 inputs
    let (h, w, l, n) = (4, 32, 64, 4096);
    let mut rng = Rng::new(0);
    let q = Tensor::randn(&[l, h * w], 1.0, &mut rng);
    let k = Tensor::randn(&[n, h * w], 1.0, &mut rng);
    let v = Tensor::randn(&[h, n, w], 1.0, &mut rng);
    let pads = vec![false; n];
    let best = |guided: bool, rng: &mut Rng| {
        (0..5)
            .map(|_| {
                let t = Instant::now();
                let a = attention_scores(&q, &k, h).unwrap();
                let m = if guided {
                    sample_mask(&a, 0.15, &pads, rng).unwrap()
                } else {
                    MaskSpec::none(&pads)
                };
                attend(&apply_mask(&a, &m).unwrap(), &v).unwrap();
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let base = best(false, &mut rng);
    let guided = best(true, &mut rng);
    println!("apply-only {base:.4}s, with sampling {guided:.4}s");
    assert!(guided < base * 1.10, "overhead {:.1}%", (guided / base - 1.0) * 100.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn keep_top_k_matches_sort_oracle(v in prop::collection::vec(0u8..6, 1..40), frac in 0.0f64..=1.0) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let k = ((v.len() as f64) * frac) as usize;
        let out = keep_top_k(&v, k).unwrap();
        let top = sort_top_k(&v, k);
        prop_assert_eq!(out.iter().filter(|&&x| x == 0.0).count(), k);
        for (i, x) in out.iter().enumerate() {
            prop_assert_eq!(*x == 0.0, top.contains(&i));
            prop_assert!(*x == 0.0 || *x == NEG);
        }
    }

    #[test]
    fn sample_mask_is_exact_and_partitions(n_eff in 8usize..200, pads in 0usize..20, r_idx in 0usize..6, seed: u64) {
        let r = [0.1, 0.15, 0.2, 0.5, 0.75, 0.85][r_idx];
        let n = n_eff + pads;
        let pad: Vec<bool> = (0..n).map(|i| i % 7 == 3 && i / 7 < pads).collect();
        let n_eff = pad.iter().filter(|p| !**p).count();
        let mut rng = Rng::new(seed);
        let a = random_map(2, 4, n, &mut rng);
        let m = sample_mask(&a, r, &pad, &mut rng).unwrap();
        prop_assert_eq!(m.count(), mask_count(n_eff, r));
        let mut all: Vec<usize> = m.masked.iter().chain(&m.unmasked).copied().collect();
        all.sort();
        let real: Vec<usize> = (0..n).filter(|&i| !pad[i]).collect();
        prop_assert_eq!(all, real);
        for i in 0..n {
            prop_assert_eq!(m.additive[i] == NEG, m.masked.contains(&i));
        }
    }

    #[test]
    fn sample_mask_is_permutation_equivariant(n in 8usize..64, seed: u64) {
        let mut rng = Rng::new(seed);
        let (h, l) = (2, 4);
        let a = random_map(h, l, n, &mut rng);
        let mut p: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut p);
        // column j of the permuted map is old column p[j]
        let mut data = vec![0.0; h * l * n];
        for row in 0..h * l {
            for j in 0..n {
                data[row * n + j] = a.scores.data()[row * n + p[j]];
            }
        }
        let ap = map(h, l, n, data);
        let m = sample_mask(&a, 0.25, &vec![false; n], &mut Rng::new(seed ^ 1)).unwrap();
        let mp = sample_mask(&ap, 0.25, &vec![false; n], &mut Rng::new(seed ^ 1)).unwrap();
        prop_assert_eq!(mp, m.permuted(&p).unwrap());
    }

    #[test]
    fn oracle_agrees_on_disjoint_instances(l in 1usize..=8, per in 1usize..=4, extra in 0usize..20, seed: u64) {
        let mut rng = Rng::new(seed);
        let n = (l * per + extra).clamp(8, 64);
        let per = per.min(n / l);
        // each query gets its own top set, scored above everything else
        let mut owners: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut owners);
        let mut s = vec![0.0; l * n];
        for q in 0..l {
            for j in 0..n {
                s[q * n + j] = rng.next_f64() * 0.01;
            }
            for &j in &owners[q * per..(q + 1) * per] {
                s[q * n + j] = 1.0 + rng.next_f64();
            }
        }
        let s = Tensor::new(vec![l, n], s).unwrap();
        let r = QuerySubset::all(l);
        let pads = vec![false; n];
        let oracle = iterative_oracle_mask(&s, &r, per, &pads).unwrap();
        let approx = top_k_indices(&attention_mask_scores(&s, &r, &pads).unwrap(), l * per).unwrap();
        prop_assert_eq!(approx, oracle);
    }
}
