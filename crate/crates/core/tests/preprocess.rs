use std::fs;
use std::path::Path;

use enginefault::par::Execution;
use enginefault::preprocess::{
    class_dirs, fix_missing, merge_run, preprocess_corpus, read_manifest, read_run,
    resample_linear, sliding_window, window_count, PreprocessConfig, FEATURES_FILE, LABELS_FILE,
    MANIFEST_FILE,
};
use enginefault::testbed_sim::{
    default_templates, generate_cycle, generate_dataset, inject_fault, simulate_run, write_run,
    CorpusConfig, SimConfig,
};
use enginefault::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ground truth: a piecewise-linear function with the given knots.
fn eval_pwl(knots: &[(f64, f64)], t: f64) -> f64 {
    let i = knots.iter().rposition(|&(kt, _)| kt <= t).unwrap();
    if i + 1 == knots.len() {
        return knots[i].1;
    }
    let ((t0, v0), (t1, v1)) = (knots[i], knots[i + 1]);
    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs())
        .fold(0.0, f64::max)
}

#[test]
fn piecewise_linear_two_hz_to_one_hz_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n2 = rng.random_range(4..400usize);
        let times2: Vec<f64> = (0..n2).map(|i| i as f64 * 0.5).collect();
        // knots on a random subset of the 2 Hz samples, always including both ends
        let mut knots = vec![(0.0, rng.random_range(1.0..10.0))];
        for &t in &times2[1..n2 - 1] {
            if rng.random_bool(0.2) {
                knots.push((t, rng.random_range(1.0..10.0)));
            }
        }
        knots.push((times2[n2 - 1], rng.random_range(1.0..10.0)));
        let samples: Vec<f64> = times2.iter().map(|&t| eval_pwl(&knots, t)).collect();
        let targets: Vec<f64> = (0..)
            .map(|i| i as f64)
            .take_while(|&t| t <= times2[n2 - 1])
            .collect();
        let truth: Vec<f64> = targets.iter().map(|&t| eval_pwl(&knots, t)).collect();
        let got = resample_linear(&times2, &samples, &targets).unwrap();
        assert!(max_rel_err(&got, &truth) <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn window_count_matches_counting_oracle(t in 1usize..2000, w_frac in 0.0f64..1.0, s_frac in 0.0f64..1.0) {
        let w = 1 + ((t - 1) as f64 * w_frac) as usize;
        let s = 1 + ((w - 1) as f64 * s_frac) as usize;
        let mut oracle = 0;
        let mut start = 0;
        while start + w <= t {
            oracle += 1;
            start += s;
        }
        prop_assert_eq!(window_count(t, w, s), oracle);
        prop_assert_eq!(oracle, (t - w) / s + 1);
    }

    #[test]
    fn resampling_inside_support_is_exact(
        values in prop::collection::vec(1.0f64..10.0, 2..40),
        gaps in prop::collection::vec(0.01f64..3.0, 40),
        fracs in prop::collection::vec(0.0f64..1.0, 1..30),
    ) {
        let mut times = vec![0.0];
        for g in gaps.iter().take(values.len() - 1) {
            times.push(times.last().unwrap() + g);
        }
        let knots: Vec<(f64, f64)> = times.iter().copied().zip(values.iter().copied()).collect();
        let end = *times.last().unwrap();
        let targets: Vec<f64> = fracs.iter().map(|f| f * end).collect();
        let truth: Vec<f64> = targets.iter().map(|&t| eval_pwl(&knots, t)).collect();
        let got = resample_linear(&times, &values, &targets).unwrap();
        prop_assert!(max_rel_err(&got, &truth) <= 1e-12);
    }

    #[test]
    fn fix_missing_matches_oracle(
        values in prop::collection::vec(-50.0f64..50.0, 3..200),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times: Vec<f64> = (0..values.len()).map(|i| i as f64 * 0.5).collect();
        let mut masked = values.clone();
        for v in masked.iter_mut() {
            if rng.random_bool(0.1) {
                *v = f64::NAN;
            }
        }
        prop_assume!(masked.iter().any(|v| v.is_finite()));
        // oracle: for each gap search left and right independently
        let oracle: Vec<f64> = (0..masked.len()).map(|i| {
            if masked[i].is_finite() {
                return masked[i];
            }
            let left = (0..i).rev().find(|&j| masked[j].is_finite());
            let right = (i + 1..masked.len()).find(|&j| masked[j].is_finite());
            match (left, right) {
                (Some(a), Some(b)) => masked[a] + (times[i] - times[a]) / (times[b] - times[a]) * (masked[b] - masked[a]),
                (Some(a), None) => masked[a],
                (None, Some(b)) => masked[b],
                (None, None) => unreachable!(),
            }
        }).collect();
        let got = fix_missing(&times, &masked, "run", "col").unwrap();
        let err = got.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert_eq!(err, 0.0);
    }
}

fn small_corpus(root: &Path, runs_per_class: usize) {
    let cfg = CorpusConfig {
        runs_per_class,
        duration_s: 300,
        ..CorpusConfig::default()
    };
    generate_dataset(&cfg, root, Execution::Parallel).unwrap();
}

#[test]
fn corpus_of_24_runs_yields_192_windows_deterministically() {
    let corpus = tempfile::tempdir().unwrap();
    small_corpus(corpus.path(), 2);
    let classes = class_dirs(corpus.path()).unwrap();
    assert_eq!(classes.len(), 12);
    let cfg = PreprocessConfig::default();

    let a = tempfile::tempdir().unwrap();
    let summary = preprocess_corpus(&classes, &cfg, a.path(), Execution::Parallel).unwrap();
    assert_eq!(summary.runs, 24);
    assert_eq!(summary.windows, 192);
    assert!(summary.skipped.is_empty());

    let manifest = read_manifest(a.path()).unwrap();
    assert_eq!(manifest.num_windows, 192);
    assert_eq!(manifest.class_histogram.iter().sum::<usize>(), 192);
    let features = fs::read(a.path().join(FEATURES_FILE)).unwrap();
    assert_eq!(features.len(), 192 * 64 * 27 * 4);
    assert_eq!(
        fs::read(a.path().join(LABELS_FILE)).unwrap().len(),
        192 * 64
    );
    for (k, run) in manifest.runs.iter().enumerate() {
        let origins: Vec<_> = manifest
            .windows
            .iter()
            .filter(|w| w.run == k)
            .map(|w| w.start)
            .collect();
        assert_eq!(origins, (0..8).map(|i| i * 32).collect::<Vec<_>>());
        assert!(origins.iter().all(|s| s + 64 <= 300));
        assert_eq!(run.num_windows, 8);
    }

    let b = tempfile::tempdir().unwrap();
    preprocess_corpus(&classes, &cfg, b.path(), Execution::Sequential).unwrap();
    for f in [FEATURES_FILE, LABELS_FILE, MANIFEST_FILE] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn pre_onset_windows_are_labeled_fault_free() {
    let corpus = tempfile::tempdir().unwrap();
    small_corpus(corpus.path(), 1);
    for class_dir in class_dirs(corpus.path()).unwrap() {
        for run_dir in fs::read_dir(class_dir).unwrap() {
            let raw = read_run(&run_dir.unwrap().path()).unwrap();
            let frame = merge_run(&raw, 300).unwrap();
            assert!(frame.values.iter().all(|v| v.is_finite()));
            let ws = sliding_window(&frame, 64, 32).unwrap();
            for (i, &s) in ws.starts.iter().enumerate() {
                let all_pre = frame.onset_step.is_none_or(|o| s + 64 <= o);
                if all_pre {
                    assert_eq!(ws.label(i), 0);
                }
            }
        }
    }
}

#[test]
fn onset_at_half_labels_exactly_second_half() {
    let cycle = generate_cycle(5, 300).unwrap();
    let clean = simulate_run(&cycle, 5, &SimConfig::default());
    let template = default_templates()
        .into_iter()
        .find(|t| t.fault_id == 6)
        .unwrap();
    let faulty = inject_fault(&clean, &template.at(150.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(&faulty, dir.path()).unwrap();
    let frame = merge_run(&read_run(dir.path()).unwrap(), 300).unwrap();
    assert_eq!(frame.values.len(), 300 * 27);
    assert!(frame.labels[..150].iter().all(|&l| l == 0));
    assert!(frame.labels[150..].iter().all(|&l| l == 6));

    write_run(&clean, dir.path()).unwrap();
    let frame = merge_run(&read_run(dir.path()).unwrap(), 300).unwrap();
    assert!(frame.labels.iter().all(|&l| l == 0));
}

#[test]
fn empty_corpus_gives_empty_store() {
    let out = tempfile::tempdir().unwrap();
    let summary = preprocess_corpus(
        &[],
        &PreprocessConfig::default(),
        out.path(),
        Execution::Parallel,
    )
    .unwrap();
    assert_eq!((summary.runs, summary.windows), (0, 0));
    assert_eq!(fs::read(out.path().join(FEATURES_FILE)).unwrap().len(), 0);
    assert_eq!(read_manifest(out.path()).unwrap().num_windows, 0);
}

#[test]
fn malformed_runs_are_skipped_up_to_ten_percent() {
    let corpus = tempfile::tempdir().unwrap();
    small_corpus(corpus.path(), 1);
    let classes = class_dirs(corpus.path()).unwrap();
    fs::remove_file(classes[3].join("run_0000").join("torque.csv")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = PreprocessConfig::default();
    let summary = preprocess_corpus(&classes, &cfg, out.path(), Execution::Parallel).unwrap();
    assert_eq!(summary.skipped, vec!["3/run_0000".to_string()]);
    assert_eq!(summary.windows, 11 * 8);

    fs::remove_file(classes[4].join("run_0000").join("meta.json")).unwrap();
    let err = preprocess_corpus(&classes, &cfg, out.path(), Execution::Parallel).unwrap_err();
    assert!(matches!(
        err,
        Error::TooManySkipped {
            skipped: 2,
            total: 12
        }
    ));

    // with 24 runs a single bad run is also tolerated
    let corpus = tempfile::tempdir().unwrap();
    small_corpus(corpus.path(), 2);
    let classes = class_dirs(corpus.path()).unwrap();
    fs::write(
        classes[5].join("run_0001").join("omega.csv"),
        "time_s,omega_rpm\n0,1\n",
    )
    .unwrap();
    let summary = preprocess_corpus(&classes, &cfg, out.path(), Execution::Parallel).unwrap();
    assert_eq!(summary.skipped, vec!["5/run_0001".to_string()]);
    assert_eq!(summary.windows, 23 * 8);
}

#[test]
fn all_missing_column_is_unrecoverable() {
    let cycle = generate_cycle(1, 60).unwrap();
    let mut run = simulate_run(&cycle, 1, &SimConfig::default());
    run.input_signal.values[1].fill(f64::NAN);
    let dir = tempfile::tempdir().unwrap();
    write_run(&run, dir.path()).unwrap();
    let err = merge_run(&read_run(dir.path()).unwrap(), 60).unwrap_err();
    assert!(
        matches!(err, Error::UnrecoverableColumn { ref column, .. } if column.contains("wastegate"))
    );
}
