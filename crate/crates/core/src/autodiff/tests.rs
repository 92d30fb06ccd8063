use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    mat(rows, cols, &v)
}

#[test]
fn matmul_identity_and_zero() {
    let mut g = Graph::<f64>::eval();
    let i2 = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(mat(2, 2, &[3.0, 4.0, 5.0, 6.0]));
    let c = g.matmul(i2, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let z = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(mat(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let c = g.matmul(z, b).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 2]);
    assert!(g.value(c).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::eval();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    match g.matmul(a, b).unwrap_err() {
        Error::Shape { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn matmul_grad_is_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = ParamStore::new();
    p.push("a", random_mat(&mut rng, 3, 4));
    p.push("b", random_mat(&mut rng, 4, 2));
    let b = p.get(1).clone();

    let mut g = Graph::eval();
    let v = p.bind(&mut g, true);
    let c = g.matmul(v[0], v[1]).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    let ga = g.grad(v[0]).unwrap();
    for r in 0..3 {
        for k in 0..4 {
            let expect: f64 = b.row(k).iter().sum();
            assert!((ga.data()[r * 4 + k] - expect).abs() < 1e-12);
        }
    }

    let report = grad_check_fd(&p, 1e-6, 100, |g, v| {
        let c = g.matmul(v[0], v[1])?;
        Ok(g.sum(c))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::eval();
    let x = g.constant(mat(3, 2, &[0.0, 0.0, 1000.0, 0.0, 0.0, 3f64.ln()]));
    let y = g.softmax_rows(x);
    let d = g.value(y).data();
    assert!((d[0] - 0.5).abs() < 1e-12);
    assert!((d[2] - 1.0).abs() < 1e-12 && d[3] < 1e-300);
    assert!((d[4] - 0.25).abs() < 1e-12 && (d[5] - 0.75).abs() < 1e-12);

    let x = g.constant(mat(1, 3, &[0.0, 0.0, 0.0]));
    let y = g.softmax_rows(x);
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shift(
        row in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let n = row.len();
        let mut g = Graph::<f64>::eval();
        let x = g.constant(mat(1, n, &row));
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let xs = g.constant(mat(1, n, &shifted));
        let y = g.softmax_rows(x);
        let ys = g.softmax_rows(xs);
        let sum: f64 = g.value(y).data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::eval();
    let ones = g.constant(Tensor::full(&[3], 1.0));
    let zeros3 = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(mat(1, 3, &[5.0, 5.0, 5.0]));
    let y = g.layer_norm(x, ones, zeros3).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let ones2 = g.constant(Tensor::full(&[2], 1.0));
    let zeros2 = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(mat(1, 2, &[-1.0, 1.0]));
    let y = g.layer_norm(x, ones2, zeros2).unwrap();
    assert!((g.value(y).data()[0] + 1.0).abs() < 1e-5);
    assert!((g.value(y).data()[1] - 1.0).abs() < 1e-5);

    let gain0 = g.constant(Tensor::zeros(&[2]));
    let bias = g.constant(Tensor::vector(vec![0.3, -0.7]));
    let x = g.constant(mat(2, 2, &[1.0, 4.0, -2.0, 9.0]));
    let y = g.layer_norm(x, gain0, bias).unwrap();
    assert_eq!(g.value(y).data(), &[0.3, -0.7, 0.3, -0.7]);
}

#[test]
fn relu_dropout_embedding() {
    let mut g = Graph::<f64>::eval();
    let x = g.constant(Tensor::vector(vec![-2.0, 0.0, 3.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 3.0]);
    // Eval-mode dropout is the identity, whatever the rate.
    assert_eq!(g.dropout(x, 0.1).unwrap(), x);
    assert!(g.dropout(x, 1.0).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f64>::train(&mut rng);
    let x = g.constant(Tensor::full(&[100, 100], 1.0));
    assert_eq!(g.dropout(x, 0.0).unwrap(), x);
    let y = g.dropout(x, 0.1).unwrap();
    let vals = g.value(y).data();
    let zeros = vals.iter().filter(|&&v| v == 0.0).count();
    assert!((800..1200).contains(&zeros), "{zeros} zeros of 10000");
    assert!(vals
        .iter()
        .all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
}

#[test]
fn embedding_routes_grad_to_gathered_rows_only() {
    let mut g = Graph::<f64>::eval();
    let table = g.param(mat(4, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
    let rows = g.embedding_lookup(table, &[2, 0, 2]).unwrap();
    assert_eq!(g.value(rows).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
    let s = g.sum(rows);
    g.backward(s).unwrap();
    assert_eq!(
        g.grad(table).unwrap().data(),
        &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]
    );
    let err = g.embedding_lookup(table, &[4]).unwrap_err();
    assert!(matches!(err, Error::Index { index: 4, size: 4, .. }));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::eval();
    let uniform = g.constant(Tensor::zeros(&[3, 25]));
    let ce = g.cross_entropy_mean(uniform, &[0, 7, 24]).unwrap();
    assert!((g.value(ce).item() - 25f64.ln()).abs() < 1e-12);

    let mut confident = vec![0.0; 25];
    confident[3] = 50.0;
    let x = g.constant(mat(1, 25, &confident));
    let ce = g.cross_entropy_mean(x, &[3]).unwrap();
    assert!(g.value(ce).item() < 1e-20);

    let x = g.constant(mat(1, 2, &[0.0, 3f64.ln()]));
    let ce = g.cross_entropy_mean(x, &[1]).unwrap();
    assert!((g.value(ce).item() + 0.75f64.ln()).abs() < 1e-12);

    assert!(matches!(
        g.cross_entropy_mean(x, &[2]).unwrap_err(),
        Error::Index { index: 2, .. }
    ));
}

#[test]
fn mse_examples() {
    let mut g = Graph::<f64>::eval();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let z = g.constant(Tensor::zeros(&[2]));
    let m = g.mse_mean(a, a).unwrap();
    assert_eq!(g.value(m).item(), 0.0);
    let m = g.mse_mean(a, z).unwrap();
    assert_eq!(g.value(m).item(), 2.5);
    let p = g.constant(Tensor::full(&[4], 3.0));
    let t = g.constant(Tensor::full(&[4], 2.0));
    let m = g.mse_mean(p, t).unwrap();
    assert_eq!(g.value(m).item(), 1.0);
    let z3 = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.mse_mean(a, z3), Err(Error::Shape { .. })));
}

#[test]
fn backward_basics() {
    let mut g = Graph::<f64>::eval();
    let x = g.param(mat(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    // Second call accumulates.
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
    g.zero_grad();
    assert!(g.grad(x).is_none());
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));

    let mut g = Graph::<f64>::eval();
    let x = g.param(Tensor::vector(vec![2.0]));
    let zero = g.constant(Tensor::zeros(&[1]));
    let l = g.mse_mean(x, zero).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
}

#[test]
fn identity_chain_grad_is_one() {
    let mut g = Graph::<f64>::eval();
    let x = g.param(Tensor::vector(vec![0.1, 0.2, 0.3]));
    let y = g.scale(x, 1.0);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn quadratic_fd_matches_exactly() {
    let mut p = ParamStore::new();
    p.push("theta", Tensor::scalar(1.0));
    let r = grad_check_fd(&p, 1e-4, 1, |g, v| Ok(g.square(v[0]))).unwrap();
    assert!(r.max_rel_error < 1e-8);
}

#[test]
fn grad_check_flags_missing_gradient_but_not_round_off() {
    let mut p = ParamStore::new();
    p.push("theta", Tensor::vector(vec![1.5, -0.5]));
    // Second coordinate leaks into the loss through a constant, so backprop
    // misses its contribution.
    let r = grad_check_fd(&p, 1e-6, 2, |g, v| {
        let x = g.value(v[0]).data()[1];
        let c = g.constant(Tensor::scalar(x * x));
        let s = g.square(v[0]);
        let s = g.sum(s);
        g.add(s, c)
    })
    .unwrap();
    assert!(r.max_rel_error > 0.1, "{r:?}");
    assert_eq!(r.worst_index, 1);

    // A parameter with an exactly zero gradient only sees round-off.
    p.push("dead", Tensor::scalar(0.3));
    let r = grad_check_fd(&p, 1e-6, 2, |g, v| {
        let s = g.square(v[0]);
        let s = g.sum(s);
        let big = g.constant(Tensor::scalar(1e3));
        let d = g.scale(v[1], 0.0);
        let t = g.add(s, big)?;
        g.add(t, d)
    })
    .unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn grad_check_rejects_bad_eps() {
    let mut p = ParamStore::new();
    p.push("theta", Tensor::scalar(1.0));
    assert!(grad_check_fd(&p, 1e-2, 1, |g, v| Ok(g.square(v[0]))).is_err());
}

/// Ten random instances per op, each checked against central differences.
#[test]
fn every_op_passes_fd_oracle() {
    type Build = fn(&mut Graph<'static, f64>, &[Var]) -> crate::error::Result<Var>;
    let cases: Vec<(&str, Vec<[usize; 2]>, Build)> = vec![
        ("matmul", vec![[3, 4], [4, 5]], |g, v| {
            let c = g.matmul(v[0], v[1])?;
            let c = g.square(c);
            Ok(g.sum(c))
        }),
        ("add_sub", vec![[3, 4], [3, 4]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let b = g.sub(b, v[1])?;
            let c = g.square(b);
            Ok(g.mean(c))
        }),
        ("add_row", vec![[3, 4], [1, 4]], |g, v| {
            let a = g.add_row(v[0], v[1])?;
            let a = g.square(a);
            Ok(g.sum(a))
        }),
        ("mul_const_scale", vec![[2, 3]], |g, v| {
            let a = g.mul_const(v[0], vec![0.5, -1.0, 2.0, 3.0, -0.1, 0.0])?;
            let a = g.scale(a, -1.7);
            let a = g.square(a);
            Ok(g.sum(a))
        }),
        ("relu", vec![[4, 5]], |g, v| {
            let a = g.relu(v[0]);
            let a = g.square(a);
            Ok(g.sum(a))
        }),
        ("log_sigmoid", vec![[4, 5]], |g, v| {
            let a = g.scale(v[0], 4.0);
            let a = g.log_sigmoid(a);
            Ok(g.sum(a))
        }),
        ("softmax", vec![[3, 6]], |g, v| {
            let a = g.softmax_rows(v[0]);
            let w = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
            g.weighted_sum(a, w)
        }),
        ("layer_norm", vec![[3, 6], [1, 6], [1, 6]], |g, v| {
            let a = g.layer_norm(v[0], v[1], v[2])?;
            let w = (0..18).map(|i| (i as f64 * 0.61).cos()).collect();
            g.weighted_sum(a, w)
        }),
        ("gather_concat", vec![[4, 3], [2, 3]], |g, v| {
            let c = g.concat_rows(&[v[0], v[1]])?;
            let r = g.gather_rows(c, &[5, 0, 3, 5, 1])?;
            let r = g.square(r);
            Ok(g.sum(r))
        }),
        ("cross_entropy_clamp", vec![[5, 7]], |g, v| {
            let a = g.scale(v[0], 3.0);
            let ce = g.cross_entropy_rows(a, &[0, 6, 3, 3, 1])?;
            let ce = g.clamp_max(ce, 2.5);
            g.weighted_sum(ce, vec![0.2, -0.3, 0.5, 1.0, 0.7])
        }),
        ("attention", vec![[8, 6], [8, 6], [8, 6]], |g, v| {
            let layout = AttentionLayout {
                n_seq: 2,
                seq_len: 4,
                n_heads: 2,
                key_real: vec![false, true, true, true, true, true, true, true],
            };
            let o = g.attention(v[0], v[1], v[2], layout)?;
            let w = (0..48).map(|i| (i as f64 * 0.23).sin()).collect();
            g.weighted_sum(o, w)
        }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, shapes, build) in cases {
        for trial in 0..10 {
            let mut p = ParamStore::new();
            for (i, s) in shapes.iter().enumerate() {
                p.push(format!("{name}{i}"), random_mat(&mut rng, s[0], s[1]));
            }
            let r = grad_check_fd(&p, 1e-6, 64, build).unwrap();
            assert!(
                r.max_rel_error <= 1e-4,
                "{name} trial {trial}: {r:?}"
            );
        }
    }
}

#[test]
fn cross_entropy_random_logits_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParamStore::new();
    let logits: Vec<f64> = (0..8 * 25).map(|_| rng.random_range(-3.0..3.0)).collect();
    p.push("logits", mat(8, 25, &logits));
    let targets: Vec<usize> = (0..8).map(|i| (i * 7) % 25).collect();
    let r = grad_check_fd(&p, 1e-6, 200, |g, v| g.cross_entropy_mean(v[0], &targets)).unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn attention_is_causal_and_ignores_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random_mat(&mut rng, 4, 4);
    let k = random_mat(&mut rng, 4, 4);
    let v = random_mat(&mut rng, 4, 4);
    let layout = AttentionLayout {
        n_seq: 1,
        seq_len: 4,
        n_heads: 1,
        key_real: vec![false, true, true, true],
    };
    let run = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| {
        let mut g = Graph::eval();
        let (a, b, c) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = g.attention(a, b, c, layout.clone()).unwrap();
        g.value(o).clone()
    };
    let base = run(&q, &k, &v);
    // Changing the last row (future) and the pad row leaves rows 1..3 intact.
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for c in 0..4 {
        k2.data_mut()[3 * 4 + c] += 1.0;
        v2.data_mut()[3 * 4 + c] -= 2.0;
        k2.data_mut()[c] = 5.0;
        v2.data_mut()[c] = -5.0;
    }
    let out = run(&q, &k2, &v2);
    assert_eq!(base.row(1), out.row(1));
    assert_eq!(base.row(2), out.row(2));
    assert_ne!(base.row(3), out.row(3));
    // First real token attends only to itself.
    assert_eq!(base.row(1), v.row(1));
}
