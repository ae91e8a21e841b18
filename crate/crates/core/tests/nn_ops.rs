//! Gradient checks and oracle comparisons for the tape primitives.

use enginefault::nn::check::{check_inputs, check_params};
use enginefault::nn::{softmax, ParamStore, Tape, Tensor, Var};
use enginefault::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Reduce a matrix to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> enginefault::Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.input(rand_t(&mut rng, &shape));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn assert_check(name: &str, report: enginefault::nn::check::GradCheck) {
    assert!(
        report.max_rel_err < TOL,
        "{name}: max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
    assert!(report.checked > 0);
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 5.0]).unwrap());
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(p).unwrap(), &[1.0; 4]);
}

#[test]
fn square_gradient_is_analytic() {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let sq = tape.mul(p, p).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(p).unwrap(), &[2.0, 4.0]);
}

#[test]
fn repeated_backward_accumulates_into_parameters() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    for round in 1..=3 {
        let mut tape = Tape::new();
        let p = tape.param(&store, 0);
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq);
        store.accumulate(&tape.backward(s).unwrap());
        let r = round as f64;
        assert_eq!(store.get(0).grad, vec![2.0 * r, 4.0 * r]);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.backward(p), Err(Error::InvalidArgument(_))));
}

#[test]
fn elementwise_and_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_t(&mut rng, &[3, 4]);
    let b = rand_t(&mut rng, &[4, 5]);
    let c = rand_t(&mut rng, &[3, 4]);
    let bias = rand_t(&mut rng, &[5]);
    let r = check_inputs(
        |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let m = t.add_row(m, v[3])?;
            let m = t.tanh(m);
            let s = t.add(v[0], v[2])?;
            let d = t.sub(s, v[2])?;
            let e = t.mul(d, v[2])?;
            let e = t.scale(e, -1.7);
            let e = t.relu(e);
            let l1 = weighted_sum(t, m, 10)?;
            let l2 = weighted_sum(t, e, 11)?;
            let l = t.add(l1, l2)?;
            Ok(t.mean(l))
        },
        &[a, b, c, bias],
        H,
    )
    .unwrap();
    assert_check("matmul/add/sub/mul/add_row/tanh/relu/scale", r);
}

#[test]
fn softmax_and_layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for causal in [false, true] {
        let x = rand_t(&mut rng, &[4, 4]);
        let r = check_inputs(
            |t, v| {
                let s = t.softmax(v[0], causal)?;
                weighted_sum(t, s, 20)
            },
            &[x],
            H,
        )
        .unwrap();
        assert_check("softmax", r);
    }
    let x = rand_t(&mut rng, &[3, 6]);
    let g = rand_t(&mut rng, &[6]);
    let b = rand_t(&mut rng, &[6]);
    let r = check_inputs(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 21)
        },
        &[x, g, b],
        H,
    )
    .unwrap();
    assert_check("layer_norm", r);
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (heads, causal, tq, tk) in [(3, false, 4, 5), (3, true, 5, 5), (1, false, 2, 3)] {
        let q = rand_t(&mut rng, &[tq, 6]);
        let k = rand_t(&mut rng, &[tk, 6]);
        let v = rand_t(&mut rng, &[tk, 6]);
        let r = check_inputs(
            |t, xs| {
                let o = t.attention(xs[0], xs[1], xs[2], heads, causal)?;
                weighted_sum(t, o, 30)
            },
            &[q, k, v],
            H,
        )
        .unwrap();
        assert_check("attention", r);
    }
}

#[test]
fn cross_entropy_and_recurrence_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = rand_t(&mut rng, &[5, 12]);
    let r = check_inputs(
        |t, v| t.cross_entropy(v[0], &[0, 11, 3, 3, 7]),
        &[logits],
        H,
    )
    .unwrap();
    assert_check("cross_entropy", r);

    let xw = rand_t(&mut rng, &[6, 4]);
    let w = rand_t(&mut rng, &[4, 4]);
    let r = check_inputs(
        |t, v| {
            let h = t.tanh_recurrence(v[0], v[1])?;
            weighted_sum(t, h, 40)
        },
        &[xw, w],
        H,
    )
    .unwrap();
    assert_check("tanh_recurrence", r);
}

#[test]
fn dropout_gradient_uses_the_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&mut rng, &[4, 6]);
    // fixed mask: every evaluation reseeds the same generator
    let r = check_inputs(
        |t, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
            let y = t.dropout(v[0], 0.4, Some(&mut mask_rng))?;
            weighted_sum(t, y, 50)
        },
        &[x],
        H,
    )
    .unwrap();
    assert_check("dropout", r);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    store.add("w", rand_t(&mut rng, &[3, 12]));
    store.add("b", rand_t(&mut rng, &[12]));
    let x = rand_t(&mut rng, &[4, 3]);
    let r = check_params(
        &store,
        |t, s| {
            let xi = t.input(x.clone());
            let w = t.param(s, 0);
            let b = t.param(s, 1);
            let z = t.matmul(xi, w)?;
            let z = t.add_row(z, b)?;
            t.cross_entropy(z, &[1, 2, 3, 4])
        },
        H,
    )
    .unwrap();
    assert_check("params", r);
}

#[test]
fn softmax_examples() {
    let uniform = softmax(&Tensor::new(vec![3], vec![0.0f64; 3]).unwrap(), 0).unwrap();
    for &p in uniform.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = softmax(&Tensor::new(vec![2], vec![1000.0f64, 0.0]).unwrap(), 0).unwrap();
    assert_eq!(big.data()[0], 1.0);
    assert!(big.data()[1] >= 0.0 && big.data()[1] < 1e-300);
    assert!(big.all_finite());

    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
    let y = tape.softmax(x, false).unwrap();
    assert!(tape.value(y).all_finite());

    assert!(matches!(
        softmax(&Tensor::<f64>::zeros(&[2, 0]), 1),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn softmax_matches_direct_formula_in_extended_precision() {
    // oracle: plain exp/sum without max subtraction (safe for |x| < 5)
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let xs: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
        let got = softmax(&Tensor::new(vec![4], xs.clone()).unwrap(), 0).unwrap();
        let total: f64 = xs.iter().map(|x| x.exp()).sum();
        for (g, x) in got.data().iter().zip(&xs) {
            assert!((g - x.exp() / total).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_along_leading_axis() {
    let x = Tensor::new(vec![2, 3], vec![0.0f64, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
    let y = softmax(&x, 0).unwrap();
    for &p in y.data() {
        assert!((p - 0.5).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::new(vec![2, 2], vec![3.0, 3.0, 1.0, -1.0]).unwrap());
    let g = tape.input(Tensor::full(&[2], 1.0));
    let b = tape.input(Tensor::zeros(&[2]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let v = tape.value(y).data();
    assert_eq!(&v[..2], &[0.0, 0.0]);
    assert!((v[2] - 1.0).abs() < 1e-10 && (v[3] + 1.0).abs() < 1e-10);

    // two-pass oracle on random rows
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = rand_t(&mut rng, &[16, 27]);
    let x = tape.input(data.clone());
    let g = tape.input(Tensor::full(&[27], 1.0));
    let b = tape.input(Tensor::zeros(&[27]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    for i in 0..16 {
        let row = tape.value(y).row(i);
        let mean: f64 = row.iter().sum::<f64>() / 27.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 27.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
        let src = data.row(i);
        let m: f64 = src.iter().sum::<f64>() / 27.0;
        let s = (src.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 27.0).sqrt();
        for j in 0..27 {
            assert!((row[j] - (src[j] - m) / s).abs() < 1e-9);
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.input(Tensor::zeros(&[3, 12]));
    let l = tape.cross_entropy(z, &[0, 5, 11]).unwrap();
    assert!((tape.value(l).data()[0] - 12f64.ln()).abs() < 1e-12);

    let mut strong = vec![0.0; 12];
    strong[4] = 200.0;
    let z = tape.input(Tensor::new(vec![1, 12], strong).unwrap());
    let l = tape.cross_entropy(z, &[4]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-80);

    let z = tape.input(Tensor::zeros(&[1, 12]));
    assert!(matches!(
        tape.cross_entropy(z, &[12]),
        Err(Error::Index { index: 12, len: 12 })
    ));
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::<f64>::new();
    let data = rand_t(&mut rng, &[10, 10]);
    let x = tape.input(data.clone());
    let y = tape.dropout::<ChaCha8Rng>(x, 0.5, None).unwrap();
    assert_eq!(tape.value(y), &data);
    let y = tape.dropout(x, 0.0, Some(&mut rng)).unwrap();
    assert_eq!(tape.value(y), &data);
    assert!(matches!(
        tape.dropout(x, 1.0, Some(&mut rng)),
        Err(Error::InvalidArgument(_))
    ));

    let n = 100_000;
    let big: Tensor<f64> =
        Tensor::new(vec![n], (0..n).map(|i| 1.0 + (i % 7) as f64).collect()).unwrap();
    let x = tape.input(big.clone());
    let mut drop_rng = ChaCha8Rng::seed_from_u64(10);
    let y = tape.dropout(x, 0.5, Some(&mut drop_rng)).unwrap();
    let out = tape.value(y).data();
    let survivors = out.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
    let mean_in = big.data().iter().sum::<f64>() / n as f64;
    let mean_out = out.iter().sum::<f64>() / n as f64;
    assert!((mean_out / mean_in - 1.0).abs() < 0.02);
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::<f64>::new();
    let a = tape.input(Tensor::zeros(&[2, 3]));
    let b = tape.input(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    let c = tape.input(Tensor::zeros(&[3]));
    assert!(matches!(tape.add(a, c), Err(Error::Shape(_))));
    let q = tape.input(Tensor::zeros(&[2, 27]));
    assert!(matches!(
        tape.attention(q, q, q, 5, false),
        Err(Error::Config { .. })
    ));
}
