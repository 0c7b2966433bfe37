use proptest::prelude::*;

use super::*;

fn mat(r: usize, c: usize, data: &[f64]) -> Tensor {
    Tensor::new(vec![r, c], data.to_vec()).unwrap()
}

#[test]
fn identity_matmul_on_tape() {
    let tape = Tape::new();
    let x = mat(3, 2, &[1.0, -2.0, 3.0, 0.5, 4.0, 7.0]);
    let i = tape.constant(Tensor::eye(3));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i, xv).unwrap();
    assert_eq!(*tape.value(y), x);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 4]));
    let y = tape.softmax_rows(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25; 4]);
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 5], 3.7));
    let y = tape.layer_norm(x, 1e-6).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_errors_name_the_op() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 2]));
    let err = tape.add(a, b).unwrap_err().to_string();
    assert!(err.starts_with("add") && err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    assert!(tape.matmul(a, a).unwrap_err().to_string().contains("matmul"));
}

#[test]
fn mse_of_equal_inputs_has_zero_gradient() {
    let tape = Tape::new();
    let t = mat(2, 2, &[0.3, -1.0, 2.0, 0.0]);
    let x = tape.leaf(t.clone());
    let target = tape.constant(t);
    let loss = tape.mse(x, target).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn quadratic_gradient_is_analytic() {
    let tape = Tape::new();
    let x = tape.leaf(mat(1, 2, &[1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn quadratic_bowl_passes_grad_check() {
    let store = ParamStore::from_named(vec![("w".into(), mat(2, 3, &[0.1, -0.4, 2.0, 1.5, -0.3, 0.7]))]).unwrap();
    let id = store.id("w").unwrap();
    let report = grad_check(&store, 1e-3, 6, 1, |tape, p| {
        let w = tape.param(p, id);
        let sq = tape.mul(w, w)?;
        Ok(tape.sum_all(sq))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn grad_check_rejects_non_finite_loss() {
    let store = ParamStore::from_named(vec![("w".into(), mat(1, 1, &[0.0]))]).unwrap();
    let id = store.id("w").unwrap();
    let err = grad_check(&store, 1e-3, 1, 1, |tape, p| {
        let w = tape.param(p, id);
        Ok(tape.scale(tape.sum_all(w), f64::NAN))
    });
    assert!(err.is_err());
}

#[test]
fn concat_then_slice_is_identity() {
    let tape = Tape::new();
    let a = tape.constant(mat(2, 3, &[1., 2., 3., 4., 5., 6.]));
    let b = tape.constant(mat(1, 3, &[7., 8., 9.]));
    let c = tape.concat_rows(&[a, b]).unwrap();
    assert_eq!(*tape.value(tape.slice_rows(c, 0, 2).unwrap()), *tape.value(a));
    assert_eq!(*tape.value(tape.slice_rows(c, 2, 1).unwrap()), *tape.value(b));
    let d = tape.constant(mat(2, 1, &[0.5, 0.25]));
    let e = tape.concat_cols(&[a, d]).unwrap();
    assert_eq!(*tape.value(tape.slice_cols(e, 0, 3).unwrap()), *tape.value(a));
    assert_eq!(*tape.value(tape.slice_cols(e, 3, 1).unwrap()), *tape.value(d));
}

#[test]
fn bce_at_zero_logit_is_ln2() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let l = tape.bce_with_logits(x, &mat(1, 3, &[1.0, 0.0, 1.0])).unwrap();
    approx::assert_abs_diff_eq!(tape.scalar_value(l), std::f64::consts::LN_2, epsilon = 1e-15);
}

/// Builds a scalar from a matrix output by a fixed random projection so every
/// output coordinate influences the loss.
fn project(tape: &Tape, y: Var, w: &Tensor) -> Var {
    let wv = tape.constant(w.clone());
    let m = tape.mul(y, wv).unwrap();
    tape.sum_all(m)
}

fn weights_like(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = crate::rng::stream(seed, &[99]);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.5..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn check_op(inputs: Vec<Tensor>, seed: u64, f: impl Fn(&Tape, &[Var]) -> Var) {
    let names: Vec<(String, Tensor)> = inputs.into_iter().enumerate().map(|(i, t)| (format!("x{i}"), t)).collect();
    let store = ParamStore::from_named(names).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    let probe = Tape::inference();
    let vars: Vec<Var> = ids.iter().map(|&id| probe.param(&store, id)).collect();
    let out_shape = probe.shape(f(&probe, &vars));
    let w = weights_like(&out_shape, seed);
    let total: usize = store.numel();
    let report = grad_check(&store, 1e-5, total, seed, |tape, p| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(p, id)).collect();
        let y = f(tape, &vars);
        Ok(project(tape, y, &w))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

fn matrix(r: usize, c: usize) -> impl Strategy<Value = Tensor> {
    // Magnitudes bounded away from zero keep every gradient coordinate well
    // above finite-difference roundoff.
    proptest::collection::vec((0.2f64..2.0, any::<bool>()), r * c).prop_map(move |d| {
        let data = d.into_iter().map(|(m, neg)| if neg { -m } else { m }).collect();
        Tensor::new(vec![r, c], data).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matmul_gradients(a in matrix(3, 4), b in matrix(4, 2), seed in 0u64..1000) {
        check_op(vec![a, b], seed, |t, v| t.matmul(v[0], v[1]).unwrap());
    }

    #[test]
    fn elementwise_gradients(a in matrix(2, 3), b in matrix(2, 3), seed in 0u64..1000) {
        check_op(vec![a.clone(), b.clone()], seed, |t, v| t.add(v[0], v[1]).unwrap());
        check_op(vec![a.clone(), b.clone()], seed, |t, v| t.sub(v[0], v[1]).unwrap());
        check_op(vec![a.clone(), b], seed, |t, v| t.mul(v[0], v[1]).unwrap());
        check_op(vec![a], seed, |t, v| t.scale(v[0], -1.7));
    }

    #[test]
    fn broadcast_gradients(a in matrix(3, 4), r in matrix(1, 4), seed in 0u64..1000) {
        check_op(vec![a.clone(), r.clone()], seed, |t, v| t.add_row(v[0], v[1]).unwrap());
        check_op(vec![a, r], seed, |t, v| t.mul_row(v[0], v[1]).unwrap());
    }

    #[test]
    fn structural_gradients(a in matrix(3, 4), b in matrix(2, 4), c in matrix(3, 2), seed in 0u64..1000) {
        check_op(vec![a.clone(), b], seed, |t, v| t.concat_rows(&[v[0], v[1], v[0]]).unwrap());
        check_op(vec![a.clone(), c], seed, |t, v| t.concat_cols(&[v[1], v[0]]).unwrap());
        check_op(vec![a.clone()], seed, |t, v| t.slice_rows(v[0], 1, 2).unwrap());
        check_op(vec![a.clone()], seed, |t, v| t.slice_cols(v[0], 1, 3).unwrap());
        check_op(vec![a.clone()], seed, |t, v| t.gather_rows(v[0], &[2, 0, 2, 1]).unwrap());
        check_op(vec![a], seed, |t, v| t.transpose(v[0]).unwrap());
    }

    #[test]
    fn reduction_gradients(a in matrix(3, 4), b in matrix(3, 4), seed in 0u64..1000) {
        check_op(vec![a.clone()], seed, |t, v| t.sum_all(v[0]));
        check_op(vec![a.clone()], seed, |t, v| t.mean_all(v[0]));
        check_op(vec![a.clone()], seed, |t, v| t.mean_rows(v[0]).unwrap());
        check_op(vec![a, b], seed, |t, v| t.mse(v[0], v[1]).unwrap());
    }

    #[test]
    fn nonlinear_gradients(a in matrix(3, 5), seed in 0u64..1000) {
        check_op(vec![a.clone()], seed, |t, v| t.layer_norm(v[0], 1e-6).unwrap());
        check_op(vec![a.clone()], seed, |t, v| t.gelu(v[0]));
        check_op(vec![a.clone()], seed, |t, v| t.softmax_rows(v[0]).unwrap());
        check_op(vec![a], seed, |t, v| t.l2_normalize_rows(v[0]).unwrap());
    }

    #[test]
    fn loss_gradients(a in matrix(3, 4), targets in proptest::collection::vec(0usize..4, 3), bits in proptest::collection::vec(0u8..2, 12), seed in 0u64..1000) {
        check_op(vec![a.clone()], seed, |t, v| t.cross_entropy_rows(v[0], &targets).unwrap());
        let tb = Tensor::new(vec![3, 4], bits.iter().map(|&b| b as f64).collect()).unwrap();
        check_op(vec![a], seed, |t, v| t.bce_with_logits(v[0], &tb).unwrap());
    }

    #[test]
    fn softmax_rows_sum_to_one(a in matrix(4, 6)) {
        let tape = Tape::new();
        let x = tape.constant(a.map(|v| v * 10.0));
        let y = tape.value(tape.softmax_rows(x).unwrap());
        for i in 0..4 {
            let s: f64 = y.row(i).iter().sum();
            prop_assert!(y.row(i).iter().all(|&p| p >= 0.0));
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
