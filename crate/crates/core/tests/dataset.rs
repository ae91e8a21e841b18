use std::collections::HashSet;

use enginefault::dataset::{
    batch_indices, batches, split, stratified_split, Part, Split, WindowDataset,
};
use enginefault::par::Execution;
use enginefault::preprocess::{class_dirs, preprocess_corpus, PreprocessConfig};
use enginefault::testbed_sim::{generate_dataset, CorpusConfig};
use enginefault::Error;
use proptest::prelude::*;

fn store(runs_per_class: usize) -> (tempfile::TempDir, WindowDataset) {
    let corpus = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        runs_per_class,
        ..CorpusConfig::default()
    };
    generate_dataset(&cfg, corpus.path(), Execution::Parallel).unwrap();
    let out = tempfile::tempdir().unwrap();
    preprocess_corpus(
        &class_dirs(corpus.path()).unwrap(),
        &PreprocessConfig::default(),
        out.path(),
        Execution::Parallel,
    )
    .unwrap();
    let set = WindowDataset::load(out.path()).unwrap();
    (out, set)
}

#[test]
fn samples_histogram_and_indexing() {
    let (_dir, set) = store(3);
    assert_eq!(set.len(), 36 * 8);
    let mut hist = vec![0usize; 12];
    for i in 0..set.len() {
        let (x, y) = set.get_sample(i).unwrap();
        assert_eq!(x.len(), 64 * 27);
        hist[y as usize] += 1;
    }
    assert_eq!(hist, set.manifest().class_histogram);
    assert_eq!(set.get_sample(5).unwrap(), set.get_sample(5).unwrap());
    assert!(matches!(
        set.get_sample(set.len()),
        Err(Error::Index { .. })
    ));
    let (first, _) = set.get_sample(0).unwrap();
    let (run, start) = set.origin(0).unwrap();
    assert_eq!((run.id.as_str(), start), ("0/run_0000", 0));
    assert!(first.iter().all(|v| v.is_finite()));
}

#[test]
fn run_level_split_never_straddles() {
    let (dir, set) = store(4);
    let s = split(&set, [0.5, 0.25, 0.25], 17).unwrap();
    let run_of = |i: usize| set.manifest().windows[i].run;
    let train: HashSet<usize> = s.train.iter().map(|&i| run_of(i)).collect();
    let val: HashSet<usize> = s.val.iter().map(|&i| run_of(i)).collect();
    let test: HashSet<usize> = s.test.iter().map(|&i| run_of(i)).collect();
    assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
    assert_eq!(s.train.len() + s.val.len() + s.test.len(), set.len());
    for class in 0..12u8 {
        let count = |runs: &[usize]| {
            runs.iter()
                .filter(|&&r| set.manifest().runs[r].label == class)
                .count()
        };
        assert_eq!(count(s.runs(Part::Train)), 2);
        assert_eq!(count(s.runs(Part::Val)), 1);
        assert_eq!(count(s.runs(Part::Test)), 1);
    }
    s.save(dir.path()).unwrap();
    assert_eq!(Split::load(dir.path()).unwrap(), s);
    assert_eq!(split(&set, [0.5, 0.25, 0.25], 17).unwrap(), s);
}

#[test]
fn gathered_batches_cover_the_part() {
    let (_dir, set) = store(3);
    let s = split(&set, [0.34, 0.33, 0.33], 1).unwrap();
    let mut seen = Vec::new();
    for b in batches(&set, &s.train, 32, true, 5).unwrap() {
        let b = b.unwrap();
        assert!(b.len() <= 32);
        assert_eq!(b.features.len(), b.len() * 64 * 27);
        for (k, &i) in b.indices.iter().enumerate() {
            assert_eq!(b.sample(k).0, set.get_sample(i).unwrap().0);
            assert_eq!(b.labels()[k], set.get_sample(i).unwrap().1);
        }
        seen.extend(b.indices);
    }
    seen.sort_unstable();
    assert_eq!(seen, s.train);
}

proptest! {
    #[test]
    fn partition_and_stratification(
        counts in prop::collection::vec(3usize..30, 12),
        seed in any::<u64>(),
        a in 0.2f64..0.8,
        b in 0.05f64..0.5,
    ) {
        prop_assume!(a + b < 0.95);
        let ratios = [a, b, 1.0 - a - b];
        let labels: Vec<u8> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c as u8, n)).collect();
        let parts = stratified_split(&labels, ratios, seed).unwrap();
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for (c, &n) in counts.iter().enumerate() {
            let train = parts[0].iter().filter(|&&i| labels[i] == c as u8).count();
            // rounding plus the at-least-one-per-part guard
            let target = n as f64 * ratios[0];
            let slack = if n as f64 * ratios[1] < 0.5 || n as f64 * ratios[2] < 1.5 { 2.0 } else { 1.0 };
            prop_assert!((train as f64 - target).abs() < slack, "class {} n {} train {} target {}", c, n, train, target);
        }
    }

    #[test]
    fn epoch_coverage(n in 0usize..200, bs in 1usize..50, seed in any::<u64>(), shuffle in any::<bool>()) {
        let idx: Vec<usize> = (0..n).map(|i| i * 3).collect();
        let plan = batch_indices(&idx, bs, shuffle, seed).unwrap();
        prop_assert!(plan.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut flat = plan.concat();
        flat.sort_unstable();
        prop_assert_eq!(flat, idx);
    }
}
