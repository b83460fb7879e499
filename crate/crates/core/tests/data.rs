use std::fs;
use std::path::Path;

use proptest::prelude::*;
use sma_core::data::*;
use sma_core::embedding::PAD_ID;
use sma_core::{Error, Rng};

fn values(s: &Sample) -> &[f64] {
    match &s.tokens {
        Tokens::Continuous { values, .. } => values,
        Tokens::Discrete(_) => panic!("expected continuous tokens"),
    }
}

fn correlation(ds: &Dataset, i: usize, j: usize) -> f64 {
    let n = ds.len() as f64;
    let (mut si, mut sj) = (0.0, 0.0);
    for s in &ds.samples {
        si += values(s)[i];
        sj += values(s)[j];
    }
    let (mi, mj) = (si / n, sj / n);
    let (mut cov, mut vi, mut vj) = (0.0, 0.0, 0.0);
    for s in &ds.samples {
        let (a, b) = (values(s)[i] - mi, values(s)[j] - mj);
        cov += a * b;
        vi += a * a;
        vj += b * b;
    }
    cov / (vi * vj).sqrt()
}

#[test]
fn grouped_tokens_correlate_within_groups_only() {
    let ds = gen_grouped_tokens(32, 8, 10_000, 0.01, &mut Rng::new(1)).unwrap();
    let groups = ds.groups.clone().unwrap();
    assert_eq!(groups[..8], [0, 0, 0, 0, 1, 1, 1, 1]);
    for (i, j) in [(0, 1), (0, 3), (12, 15), (28, 31)] {
        assert_eq!(groups[i], groups[j]);
        assert!(correlation(&ds, i, j) > 0.99);
    }
    for (i, j) in [(0, 4), (3, 4), (10, 30)] {
        assert_ne!(groups[i], groups[j]);
        assert!(correlation(&ds, i, j).abs() < 0.05);
    }
    assert_eq!(ds.task(), Some(Task::Classification { classes: 2 }));
}

#[test]
fn shuffled_groups_keep_their_correlation() {
    let spec = GroupedSpec {
        n: 12,
        groups: 3,
        samples: 2000,
        sigma: 0.01,
        shuffle_positions: true,
    };
    let ds = spec.generate(&mut Rng::new(2)).unwrap();
    let groups = ds.groups.clone().unwrap();
    assert_eq!(groups, spec.assignment(&Rng::new(2)).unwrap());
    let partner = (1..12).find(|&j| groups[j] == groups[0]).unwrap();
    assert!(correlation(&ds, 0, partner) > 0.99);
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn csv_with_28_feature_columns() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::new();
    for r in 0..5 {
        let mut cells: Vec<String> = (0..28).map(|c| format!("{}", r * 100 + c)).collect();
        cells.insert(0, format!("{}", r % 2));
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    let path = write(dir.path(), "higgs.csv", &text);
    let label = LabelColumn {
        index: 0,
        classification: true,
    };
    let (ds, stats) = load_csv_tabular(&path, Some(label), false).unwrap();
    assert!(stats.is_none());
    assert_eq!((ds.len(), ds.n, ds.d_raw), (5, 28, 1));
    assert_eq!(values(&ds.samples[2])[27], 227.0);
    assert_eq!(ds.samples[3].label, Some(Label::Class(1)));
}

#[test]
fn csv_header_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "h.csv", "a,b,y\n1,2,0.5\n3,4,1.5\n");
    let label = LabelColumn {
        index: 2,
        classification: false,
    };
    let (ds, _) = load_csv_tabular(&path, Some(label), false).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(values(&ds.samples[1]), &[3.0, 4.0]);
    assert_eq!(ds.samples[0].label, Some(Label::Value(0.5)));
    assert_eq!(ds.task(), Some(Task::Regression));
}

#[test]
fn csv_errors_name_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let ragged = write(dir.path(), "r.csv", "1,2,3\n4,5,6\n7,8\n");
    match load_csv_tabular(&ragged, None, false) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let word = write(dir.path(), "w.csv", "x,y\n1,2\n3,oops\n");
    match load_csv_tabular(&word, None, false) {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 3);
            assert!(msg.contains("oops"));
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    let bad_class = write(dir.path(), "c.csv", "1,0.5\n");
    let label = LabelColumn {
        index: 1,
        classification: true,
    };
    assert!(matches!(
        load_csv_tabular(&bad_class, Some(label), false),
        Err(Error::Parse { line: 1, .. })
    ));
    let empty = write(dir.path(), "e.csv", "a,b\n");
    assert!(matches!(load_csv_tabular(&empty, None, false), Err(Error::Data(_))));
}

#[test]
fn constant_columns_are_centered_not_scaled() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "k.csv", "5,1\n5,2\n5,3\n");
    let (ds, stats) = load_csv_tabular(&path, None, true).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.std[0], 0.0);
    for s in &ds.samples {
        assert_eq!(values(s)[0], 0.0);
        assert!(values(s).iter().all(|v| v.is_finite()));
    }
    let scaled: Vec<f64> = ds.samples.iter().map(|s| values(s)[1]).collect();
    let sd = (2.0f64 / 3.0).sqrt();
    assert_eq!(scaled, vec![-1.0 / sd, 0.0, 1.0 / sd]);
}

#[test]
fn test_split_uses_training_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let train = write(dir.path(), "train.csv", "0,10\n2,30\n");
    let test = write(dir.path(), "test.csv", "1,20\n5,10\n");
    let (_, stats) = load_csv_tabular(&train, None, true).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![1.0, 20.0]);
    let (mut ds, _) = load_csv_tabular(&test, None, false).unwrap();
    stats.apply(&mut ds);
    assert_eq!(values(&ds.samples[0]), &[0.0, 0.0]);
    assert_eq!(values(&ds.samples[1]), &[4.0, -1.0]);
}

#[test]
fn csv_roundtrip_through_write() {
    let ds = gen_grouped_tokens(4, 2, 6, 0.5, &mut Rng::new(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.csv");
    ds.write_csv(&path).unwrap();
    let label = LabelColumn {
        index: 4,
        classification: true,
    };
    let (back, _) = load_csv_tabular(&path, Some(label), false).unwrap();
    assert_eq!(back.samples, ds.samples);
}

#[test]
fn text_is_chunked_and_padded() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "t.txt", "abcdefgh");
    let ds = load_text_utf8(&path, 4).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.samples[1].tokens, Tokens::Discrete(vec![101, 102, 103, 104]));

    let path = write(dir.path(), "ab.txt", "AB");
    let ds = load_text_utf8(&path, 4).unwrap();
    assert_eq!(ds.samples[0].tokens, Tokens::Discrete(vec![65, 66, PAD_ID, PAD_ID]));
    assert_eq!(ds.samples[0].tokens.pad_mask(), vec![false, false, true, true]);

    let utf8 = "héllo wörld ✓";
    let path = write(dir.path(), "u.txt", utf8);
    let ds = load_text_utf8(&path, 5).unwrap();
    let bytes: Vec<u8> = ds
        .samples
        .iter()
        .flat_map(|s| match &s.tokens {
            Tokens::Discrete(ids) => sma_core::embedding::decode_discrete(ids),
            _ => unreachable!(),
        })
        .collect();
    assert_eq!(String::from_utf8(bytes).unwrap(), utf8);
    assert!(matches!(
        load_text_utf8(&dir.path().join("none"), 4),
        Err(Error::Io { .. })
    ));
}

#[test]
fn permutation_examples() {
    let ds = gen_grouped_tokens(6, 3, 4, 0.1, &mut Rng::new(4)).unwrap();
    let id: Vec<usize> = (0..6).collect();
    assert_eq!(permute_dataset(&ds, &id).unwrap(), ds);

    let rev: Vec<usize> = (0..6).rev().collect();
    let r = permute_dataset(&ds, &rev).unwrap();
    assert_eq!(r.groups.as_ref().unwrap(), &vec![2, 2, 1, 1, 0, 0]);
    assert_eq!(values(&r.samples[0])[0], values(&ds.samples[0])[5]);
    assert_eq!(r.samples[1].label, ds.samples[1].label);

    assert!(matches!(
        permute_dataset(&ds, &[0, 1, 2]),
        Err(Error::InvalidPermutation(_))
    ));
    assert!(matches!(
        invert_permutation(&[0, 0, 1]),
        Err(Error::InvalidPermutation(_))
    ));
}

#[test]
fn split_examples() {
    let ds = gen_grouped_tokens(4, 2, 10, 0.1, &mut Rng::new(5)).unwrap();
    let (train, val, test) = split(&ds, [0.8, 0.1, 0.1], 1).unwrap();
    assert_eq!((train.len(), val.len(), test.len()), (8, 1, 1));
    let (train, val, test) = split(&ds, [1.0, 0.0, 0.0], 1).unwrap();
    assert_eq!((train.len(), val.len(), test.len()), (10, 0, 0));
    assert!(split(&ds, [0.5, 0.5, 0.5], 1).is_err());
    assert!(
        split(&ds, [0.98, 0.01, 0.01], 1).is_err(),
        "positive fraction rounding to empty"
    );
    let again = split(&ds, [0.6, 0.2, 0.2], 9).unwrap();
    assert_eq!(again, split(&ds, [0.6, 0.2, 0.2], 9).unwrap());
}

proptest! {
    #[test]
    fn permutation_then_inverse_is_identity(seed in 0u64..1000, n in 1usize..12) {
        let mut rng = Rng::new(seed);
        let mut p: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut p);
        let inv = invert_permutation(&p).unwrap();
        let samples = (0..3)
            .map(|_| Sample { tokens: Tokens::continuous((0..n).map(|_| rng.normal()).collect()), label: None })
            .collect();
        let ds = Dataset::new(Modality::Continuous, n, 1, samples).unwrap();
        let back = permute_dataset(&permute_dataset(&ds, &p).unwrap(), &inv).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn permuted_groups_keep_their_members(seed in 0u64..1000, groups in 1usize..5, size in 1usize..4) {
        let n = groups * size;
        let ds = gen_grouped_tokens(n, groups, 1, 0.0, &mut Rng::new(seed)).unwrap();
        let mut p: Vec<usize> = (0..n).collect();
        Rng::new(seed).shuffle(&mut p);
        let r = permute_dataset(&ds, &p).unwrap();
        let (old, new) = (ds.groups.unwrap(), r.groups.unwrap());
        for j in 0..n {
            prop_assert_eq!(new[j], old[p[j]]);
            prop_assert_eq!(values(&r.samples[0])[j], values(&ds.samples[0])[p[j]]);
        }
        let count = |g: &[usize], k: usize| g.iter().filter(|&&x| x == k).count();
        for k in 0..groups {
            prop_assert_eq!(count(&new, k), size);
        }
    }

    #[test]
    fn splits_partition_the_dataset(seed in 0u64..1000, len in 10usize..60, a in 0.1f64..0.4, b in 0.1f64..0.4) {
        let samples = (0..len)
            .map(|i| Sample { tokens: Tokens::continuous(vec![i as f64]), label: None })
            .collect();
        let ds = Dataset::new(Modality::Continuous, 1, 1, samples).unwrap();
        let (train, val, test) = split(&ds, [1.0 - a - b, a, b], seed).unwrap();
        prop_assert_eq!(train.len() + val.len() + test.len(), len);
        let mut all: Vec<f64> = [&train, &val, &test]
            .iter()
            .flat_map(|d| d.samples.iter().map(|s| values(s)[0]))
            .collect();
        all.sort_by(f64::total_cmp);
        prop_assert_eq!(all, (0..len).map(|i| i as f64).collect::<Vec<_>>());
        for d in [&train, &val, &test] {
            let v: Vec<f64> = d.samples.iter().map(|s| values(s)[0]).collect();
            prop_assert!(v.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
