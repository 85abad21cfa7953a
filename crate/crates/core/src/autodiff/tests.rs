use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Weighted sum with fixed random weights so every output element matters.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(v).to_vec();
    let w = g.constant(random_tensor(&mut rng, &shape, -1.0, 1.0))?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn check_op<F>(inputs: Vec<(&str, Tensor)>, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut store = ParameterStore::new();
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.to_string()).collect();
    for (n, t) in inputs {
        store.insert(n, t).unwrap();
    }
    let report = grad_check(
        |g, p| {
            let vars = names
                .iter()
                .map(|n| g.param(p, n))
                .collect::<Result<Vec<_>, _>>()?;
            let out = build(g, &vars)?;
            weighted_sum(g, out, 99)
        },
        &store,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(
        report.passed,
        "max rel error {:e}: {:?}",
        report.max_rel_error(),
        report.failures().collect::<Vec<_>>()
    );
}

#[test]
fn square_has_derivative_two_w() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::scalar(3.0)).unwrap();
    let (value, grads) = evaluate_with_gradients(&store, |g, p| {
        let w = g.param(p, "w")?;
        g.mul(w, w)
    })
    .unwrap();
    assert_eq!(value, 9.0);
    assert_eq!(grads.get("w").unwrap().item(), 6.0);
}

#[test]
fn sigmoid_of_matvec_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParameterStore::new();
    store
        .insert("W", random_tensor(&mut rng, &[3, 3], -1.0, 1.0))
        .unwrap();
    let x = random_tensor(&mut rng, &[3, 1], -1.0, 1.0);
    let report = grad_check(
        |g, p| {
            let w = g.param(p, "W")?;
            let xv = g.constant(x.clone())?;
            let wx = g.matmul(w, xv)?;
            let s = g.sigmoid(wx)?;
            g.sum(s)
        },
        &store,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{:e}", report.max_rel_error());
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let mut store = ParameterStore::new();
    store.insert("used", Tensor::vector(vec![1.0, 2.0])).unwrap();
    store.insert("unused", Tensor::vector(vec![5.0; 3])).unwrap();
    let (_, grads) = evaluate_with_gradients(&store, |g, p| {
        let u = g.param(p, "used")?;
        g.sum(u)
    })
    .unwrap();
    assert_eq!(grads.get("unused").unwrap().data(), &[0.0; 3]);
    assert_eq!(grads.get("used").unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn reused_parameter_accumulates() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::scalar(2.0)).unwrap();
    // f = w*x1 + w*x2 with x = (3, 4): df/dw = 7
    let (_, grads) = evaluate_with_gradients(&store, |g, p| {
        let w = g.param(p, "w")?;
        let x1 = g.constant(Tensor::scalar(3.0))?;
        let x2 = g.constant(Tensor::scalar(4.0))?;
        let a = g.mul(w, x1)?;
        let w_again = g.param(p, "w")?;
        let b = g.mul(w_again, x2)?;
        g.add(a, b)
    })
    .unwrap();
    assert_eq!(grads.get("w").unwrap().item(), 7.0);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[3, 2])).unwrap();
    let err = g.add(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "add",
            lhs: vec![2, 3],
            rhs: vec![3, 2]
        }
    );
    let c = g.constant(Tensor::zeros(&[2, 2])).unwrap();
    assert!(matches!(
        g.matmul(a, c),
        Err(TensorError::ShapeMismatch { op: "matmul", .. })
    ));
}

#[test]
fn non_scalar_broadcast_is_rejected() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let row = g.constant(Tensor::zeros(&[3])).unwrap();
    assert!(g.mul(a, row).is_err());
    let s = g.constant(Tensor::scalar(2.0)).unwrap();
    assert!(g.mul(a, s).is_ok());
}

#[test]
fn non_finite_intermediate_carries_op_name() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
    assert_eq!(g.log(z).unwrap_err(), TensorError::NonFinite { op: "log" });
}

#[test]
fn forward_passes_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random_tensor(&mut rng, &[4, 4], -1.0, 1.0);
    let run = || {
        let mut g = Graph::new();
        let v = g.constant(w.clone()).unwrap();
        let t = g.tanh(v).unwrap();
        let m = g.matmul(t, v).unwrap();
        let s = g.sum(m).unwrap();
        g.value(s).item().to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn quadratic_passes_tight_tolerance() {
    let mut store = ParameterStore::new();
    store
        .insert("w", Tensor::vector(vec![0.3, -1.2, 2.5]))
        .unwrap();
    let report = grad_check(
        |g, p| {
            let w = g.param(p, "w")?;
            let sq = g.mul(w, w)?;
            g.sum(sq)
        },
        &store,
        1e-5,
        1e-8,
    )
    .unwrap();
    assert!(report.passed, "{:e}", report.max_rel_error());
}

#[test]
fn injected_backward_fault_is_caught_and_named() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParameterStore::new();
    store
        .insert("layer.w", random_tensor(&mut rng, &[3, 2], -1.0, 1.0))
        .unwrap();
    store
        .insert("layer.b", random_tensor(&mut rng, &[2], -1.0, 1.0))
        .unwrap();
    store
        .insert("gate", random_tensor(&mut rng, &[4, 2], -1.0, 1.0))
        .unwrap();
    let x = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let report = grad_check(
        |g, p| {
            g.inject_backward_fault(OpKind::Tanh, 1.01);
            let (w, b, gate) = (g.param(p, "layer.w")?, g.param(p, "layer.b")?, g.param(p, "gate")?);
            let xv = g.constant(x.clone())?;
            let h = g.affine(xv, w, b)?;
            let h = g.tanh(h)?;
            let gs = g.sigmoid(gate)?;
            let prod = g.mul(h, gs)?;
            g.sum(prod)
        },
        &store,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(!report.passed);
    let failed: Vec<_> = report.failures().map(|p| p.name.as_str()).collect();
    assert!(failed.contains(&"layer.w") && failed.contains(&"layer.b"));
    assert!(!failed.contains(&"gate"));
}

#[test]
fn nondeterministic_loss_is_rejected() {
    use std::cell::Cell;
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::scalar(1.0)).unwrap();
    let calls = Cell::new(0.0);
    let err = grad_check(
        |g, p| {
            calls.set(calls.get() + 1.0);
            let w = g.param(p, "w")?;
            g.scale_shift(w, 1.0, calls.get())
        },
        &store,
        1e-5,
        1e-6,
    )
    .unwrap_err();
    assert!(matches!(err, TensorError::NonDeterministic { .. }));
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParameterStore::new();
    store
        .insert("w", random_tensor(&mut rng, &[3, 3], -1.0, 1.0))
        .unwrap();
    let f = |g: &mut Graph, w: Var| -> Result<Var, TensorError> {
        let s = g.sigmoid(w)?;
        g.sum(s)
    };
    let h = |g: &mut Graph, w: Var| -> Result<Var, TensorError> {
        let t = g.tanh(w)?;
        let sq = g.mul(t, w)?;
        g.mean(sq)
    };
    let (alpha, beta) = (0.7, -2.5);
    let grad_of = |which: u8| {
        evaluate_with_gradients(&store, |g, p| {
            let w = g.param(p, "w")?;
            match which {
                0 => f(g, w),
                1 => h(g, w),
                _ => {
                    let a = f(g, w)?;
                    let b = h(g, w)?;
                    let a = g.scale(a, alpha)?;
                    let b = g.scale(b, beta)?;
                    g.add(a, b)
                }
            }
        })
        .unwrap()
        .1
    };
    let (gf, gh, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..9 {
        let expect = alpha * gf.get("w").unwrap().data()[i] + beta * gh.get("w").unwrap().data()[i];
        let got = gc.get("w").unwrap().data()[i];
        assert!((expect - got).abs() <= 1e-14 * expect.abs().max(1.0));
    }
}

#[test]
fn conv1d_rejects_short_sequence() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 1, 5])).unwrap();
    let w = g.constant(Tensor::zeros(&[3, 1, 10])).unwrap();
    let b = g.constant(Tensor::zeros(&[3])).unwrap();
    assert!(matches!(
        g.conv1d(x, w, b, 1),
        Err(TensorError::InvalidShape { op: "conv1d", .. })
    ));
}

#[test]
fn row_normalize_keeps_zero_rows_zero() {
    let mut g = Graph::new();
    let a = g
        .constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 3.0]).unwrap())
        .unwrap();
    let p = g.row_normalize(a).unwrap();
    assert_eq!(g.value(p).data(), &[0.0, 0.0, 0.25, 0.75]);
}

fn dims(max: usize) -> impl Strategy<Value = usize> {
    1..=max
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn elementwise_ops_match_finite_differences(r in dims(16), c in dims(16), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[r, c], -2.0, 2.0);
        let b = random_tensor(&mut rng, &[r, c], 0.5, 2.0);
        check_op(vec![("a", a.clone()), ("b", b.clone())], |g, v| {
            let s = g.add(v[0], v[1])?;
            let m = g.mul(s, v[1])?;
            let q = g.div(v[0], v[1])?;
            g.sub(m, q)
        });
        check_op(vec![("a", a.clone())], |g, v| g.sigmoid(v[0]));
        check_op(vec![("a", a.clone())], |g, v| g.tanh(v[0]));
        check_op(vec![("a", a.clone())], |g, v| g.exp(v[0]));
        check_op(vec![("b", b.clone())], |g, v| g.log(v[0]));
        check_op(vec![("b", b.clone())], |g, v| {
            let n = g.scale_shift(v[0], -1.0, 0.25)?;
            g.abs(n)
        });
        check_op(vec![("a", a.clone())], |g, v| g.clamp(v[0], -0.5, 0.5));
        check_op(vec![("a", a.clone()), ("s", Tensor::scalar(0.7))], |g, v| {
            let m = g.mul(v[0], v[1])?;
            let d = g.div(m, v[1])?;
            let sq = g.mul(v[1], v[1])?;
            let r = g.sub(d, sq)?;
            let q = g.div(r, sq)?;
            g.add(r, q)
        });
        check_op(vec![("a", a)], |g, v| {
            let s = g.sum(v[0])?;
            let m = g.mean(v[0])?;
            let p = g.mul(s, m)?;
            g.add(v[0], p)
        });
    }

    #[test]
    fn linear_algebra_ops_match_finite_differences(
        m in dims(16), k in dims(16), n in dims(16), seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[m, k], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[k, n], -1.0, 1.0);
        let bias = random_tensor(&mut rng, &[n], -1.0, 1.0);
        check_op(vec![("a", a.clone()), ("b", b.clone())], |g, v| g.matmul(v[0], v[1]));
        check_op(vec![("a", a.clone()), ("b", b), ("bias", bias)], |g, v| g.affine(v[0], v[1], v[2]));
        check_op(vec![("a", a)], |g, v| g.transpose(v[0]));
    }

    #[test]
    fn structural_ops_match_finite_differences(
        bsz in dims(4), n in dims(8), c1 in dims(6), c2 in dims(6), seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y1 = random_tensor(&mut rng, &[bsz, n, c1], -1.0, 1.0);
        let y2 = random_tensor(&mut rng, &[bsz, n, c2], -1.0, 1.0);
        let p = random_tensor(&mut rng, &[n, n], 0.1, 1.0);
        check_op(vec![("y1", y1.clone()), ("y2", y2.clone())], |g, v| {
            let c = g.concat(&[v[0], v[1]], 2)?;
            let s = g.slice(c, 2, c1 / 2, c2)?;
            let r = g.reshape(s, &[bsz * n, c2])?;
            g.slice(r, 0, 0, n)
        });
        check_op(vec![("y1", y1.clone()), ("y2", y2)], |g, v| g.concat(&[v[0], v[1]], 2));
        check_op(vec![("p", p.clone()), ("y", y1.clone())], |g, v| g.node_mix(v[0], v[1]));
        check_op(vec![("p", p)], |g, v| {
            let t = g.transpose(v[0])?;
            g.row_normalize(t)
        });
        let flat = y1.reshape(vec![bsz * n, c1]).unwrap();
        let rows = bsz * n;
        let index: Vec<usize> = (0..2 * rows).map(|i| (i * 7 + 3) % rows).collect();
        check_op(vec![("x", flat)], |g, v| g.gather_rows(v[0], &index));
    }

    #[test]
    fn conv1d_matches_finite_differences(
        batch in dims(3), cin in dims(3), cout in dims(4), k in dims(5), extra in 0usize..12,
        stride in 1usize..3, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = k + extra;
        let x = random_tensor(&mut rng, &[batch, cin, len], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[cout, cin, k], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[cout], -1.0, 1.0);
        check_op(vec![("x", x), ("w", w), ("b", b)], |g, v| g.conv1d(v[0], v[1], v[2], stride));
    }
}
